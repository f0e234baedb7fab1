"""Video instance segmentation metrics: embedding-based track building,
spatio-temporal mask IoU, AP over IoU thresholds, and AR at a fixed per-video
track budget.
"""

from __future__ import annotations

import json
import logging
import warnings
from dataclasses import dataclass, field

import numpy as np

logger = logging.getLogger(__name__)

DEFAULT_IOU_THRESHOLDS = tuple(np.round(np.arange(0.50, 0.96, 0.05), 2))
DEFAULT_MAX_TRACKS_PER_VIDEO = 10


@dataclass
class Detection:
    frame_index: int
    class_id: int
    score: float
    embedding: np.ndarray
    mask: np.ndarray  # bool HxW
    box: tuple[float, float, float, float] | None = None


@dataclass
class InstanceTrack:
    track_id: int
    class_id: int
    score: float
    masks: dict[int, np.ndarray]  # frame_index -> bool HxW; absent frame = empty

    def frames(self):
        return sorted(self.masks.keys())


@dataclass
class EvalResult:
    ap: float
    ap_per_threshold: dict[float, float]
    ar: float
    per_class: dict[int, float] = field(default_factory=dict)


def cosine_similarity(a: np.ndarray, b: np.ndarray) -> float:
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na == 0 or nb == 0:
        return 0.0
    return float(np.dot(a, b) / (na * nb))


def build_tracks(detections: list[Detection], threshold: float = 0.5) -> list[InstanceTrack]:
    """Greedy online association: each detection joins the class-matching track
    with highest embedding cosine similarity above the threshold (one detection
    per track per frame); otherwise it starts a new track."""
    tracks = []  # each: {"class_id", "embeddings": [..], "scores": [..], "masks": {..}}
    for frame in sorted({d.frame_index for d in detections}):
        frame_dets = sorted([d for d in detections if d.frame_index == frame],
                            key=lambda d: -d.score)
        taken = set()
        for det in frame_dets:
            best, best_sim = None, threshold
            for ti, tr in enumerate(tracks):
                if ti in taken or tr["class_id"] != det.class_id:
                    continue
                sim = cosine_similarity(det.embedding, tr["mean_embedding"])
                if sim >= best_sim:
                    best, best_sim = ti, sim
            if best is None:
                tracks.append({
                    "class_id": det.class_id,
                    "embeddings": [det.embedding],
                    "mean_embedding": det.embedding.astype(np.float64),
                    "scores": [det.score],
                    "masks": {frame: det.mask},
                })
                taken.add(len(tracks) - 1)
            else:
                tr = tracks[best]
                tr["embeddings"].append(det.embedding)
                tr["mean_embedding"] = np.mean(tr["embeddings"], axis=0)
                tr["scores"].append(det.score)
                tr["masks"][frame] = det.mask
                taken.add(best)
    return [
        InstanceTrack(track_id=i, class_id=tr["class_id"],
                      score=float(np.mean(tr["scores"])), masks=tr["masks"])
        for i, tr in enumerate(tracks)
    ]


def video_iou(pred: InstanceTrack, gt: InstanceTrack) -> float:
    """Sum of per-frame intersections over sum of per-frame unions; a frame
    absent from a track counts as an empty mask. 0/0 is defined as 0."""
    inter = union = 0
    for f in sorted(set(pred.masks) | set(gt.masks)):
        pm = pred.masks.get(f)
        gm = gt.masks.get(f)
        if pm is not None and gm is not None:
            if pm.shape != gm.shape:
                raise ValueError(f"mask shape mismatch at frame {f}: {pm.shape} vs {gm.shape}")
            inter += int(np.logical_and(pm, gm).sum())
            union += int(np.logical_or(pm, gm).sum())
        elif pm is not None:
            union += int(pm.sum())
        elif gm is not None:
            union += int(gm.sum())
    return inter / union if union > 0 else 0.0


def _greedy_match(preds: list[tuple[int, InstanceTrack]], gts: list[tuple[int, InstanceTrack]],
                  threshold: float) -> list[bool]:
    """Score-descending greedy matching; preds/gts carry their video index.
    Returns a TP flag per pred, in score order."""
    order = sorted(range(len(preds)), key=lambda i: -preds[i][1].score)
    matched = set()
    tp = [False] * len(preds)
    for i in order:
        vid, pred = preds[i]
        best_j, best_iou = None, threshold
        for j, (gvid, gt) in enumerate(gts):
            if gvid != vid or j in matched:
                continue
            iou = video_iou(pred, gt)
            if iou >= best_iou:
                best_j, best_iou = j, iou
        if best_j is not None:
            matched.add(best_j)
            tp[i] = True
    return [tp[i] for i in order]


def _ap_from_flags(tp_flags: list[bool], num_gt: int) -> float:
    """101-point interpolated area under the precision-recall curve."""
    if num_gt == 0:
        return 0.0
    tp = np.cumsum(tp_flags) if tp_flags else np.array([])
    if len(tp) == 0:
        return 0.0
    fp = np.arange(1, len(tp) + 1) - tp
    recall = tp / num_gt
    precision = tp / (tp + fp)
    ap = 0.0
    for r in np.linspace(0, 1, 101):
        prec_at = precision[recall >= r - 1e-12]
        ap += prec_at.max() if len(prec_at) else 0.0
    return ap / 101.0


def compute_ap(pred_tracks: list[list[InstanceTrack]], gt_tracks: list[list[InstanceTrack]],
               thresholds=DEFAULT_IOU_THRESHOLDS,
               max_tracks_per_video: int = DEFAULT_MAX_TRACKS_PER_VIDEO) -> EvalResult:
    """Per-class, per-threshold AP with greedy score-ordered matching; AP is
    the mean over classes then thresholds. AR is the mean over classes and
    thresholds of recall with at most `max_tracks_per_video` tracks per video.

    pred_tracks and gt_tracks are parallel lists, one entry per video.
    Classes with neither ground truth nor predictions are excluded from the
    class mean.
    """
    if len(pred_tracks) != len(gt_tracks):
        raise ValueError("pred_tracks and gt_tracks must have one entry per video")
    thresholds = [float(t) for t in thresholds]
    if not thresholds or any(not (0 < t <= 1) for t in thresholds):
        raise ValueError("thresholds must be nonempty and in (0, 1]")

    classes = sorted(
        {t.class_id for v in gt_tracks for t in v} | {t.class_id for v in pred_tracks for t in v})
    if not classes:
        warnings.warn("no ground truth and no predictions; AP/AR defined as 0")
        return EvalResult(ap=0.0, ap_per_threshold={t: 0.0 for t in thresholds}, ar=0.0)

    # top-K predictions per video (by score) for the recall budget
    budgeted = []
    for v in pred_tracks:
        keep = sorted(v, key=lambda t: -t.score)[:max_tracks_per_video]
        budgeted.append(keep)

    ap_table = {}   # (class, thr) -> ap
    ar_table = {}
    for c in classes:
        preds_c = [(vi, t) for vi, v in enumerate(pred_tracks) for t in v if t.class_id == c]
        gts_c = [(vi, t) for vi, v in enumerate(gt_tracks) for t in v if t.class_id == c]
        bud_c = [(vi, t) for vi, v in enumerate(budgeted) for t in v if t.class_id == c]
        for thr in thresholds:
            ap_table[(c, thr)] = _ap_from_flags(_greedy_match(preds_c, gts_c, thr), len(gts_c))
            if gts_c:
                flags = _greedy_match(bud_c, gts_c, thr)
                ar_table[(c, thr)] = sum(flags) / len(gts_c)
            else:
                ar_table[(c, thr)] = 0.0

    ap_per_threshold = {
        thr: float(np.mean([ap_table[(c, thr)] for c in classes])) for thr in thresholds}
    per_class = {c: float(np.mean([ap_table[(c, thr)] for thr in thresholds])) for c in classes}
    ap = float(np.mean(list(ap_per_threshold.values())))
    ar = float(np.mean(list(ar_table.values())))
    return EvalResult(ap=ap, ap_per_threshold=ap_per_threshold, ar=ar, per_class=per_class)


def classification_accuracy(pred_tracks: list[list[InstanceTrack]],
                            gt_tracks: list[list[InstanceTrack]],
                            classes: set[int] | None = None,
                            iou_threshold: float = 0.5) -> float | None:
    """Per-instance classification accuracy: each gt track (of the given
    classes) is matched class-agnostically to its best-IoU predicted track;
    correct iff the match exists and carries the right class. None if there
    are no such gt tracks."""
    total = correct = 0
    for preds, gts in zip(pred_tracks, gt_tracks):
        for gt in gts:
            if classes is not None and gt.class_id not in classes:
                continue
            total += 1
            best, best_iou = None, iou_threshold
            for pred in preds:
                iou = video_iou(pred, gt)
                if iou >= best_iou:
                    best, best_iou = pred, iou
            if best is not None and best.class_id == gt.class_id:
                correct += 1
    return correct / total if total else None


def format_results(result: EvalResult, fmt: str = "table", class_names: dict[int, str] | None = None) -> str:
    if fmt == "records":
        lines = [json.dumps({"metric": "ap", "value": result.ap}),
                 json.dumps({"metric": "ar", "value": result.ar})]
        for thr, v in sorted(result.ap_per_threshold.items()):
            lines.append(json.dumps({"metric": "ap_per_threshold", "threshold": thr, "value": v}))
        for c, v in sorted(result.per_class.items()):
            name = class_names.get(c, str(c)) if class_names else str(c)
            lines.append(json.dumps({"metric": "ap_per_class", "class": name, "value": v}))
        return "\n".join(lines) + "\n"
    if fmt == "table":
        lines = [f"{'class':<20}{'AP':>8}"]
        for c, v in sorted(result.per_class.items()):
            name = class_names.get(c, str(c)) if class_names else str(c)
            lines.append(f"{name:<20}{v:>8.4f}")
        lines.append("-" * 28)
        lines.append(f"{'overall AP':<20}{result.ap:>8.4f}")
        lines.append(f"{'overall AR':<20}{result.ar:>8.4f}")
        return "\n".join(lines) + "\n"
    raise ValueError(f"unknown format {fmt!r}, expected 'table' or 'records'")
