"""Inference: dense per-frame detections from the model, dynamic-filter mask
decoding, per-frame NMS, and embedding-based track assembly."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch

from . import audio as audiofe
from .crossover import _f_tilde, _theta, mask_probs
from .data import VideoClip
from .evaluate import Detection, InstanceTrack, build_tracks
from .model import AVSegModel, mask_head


@dataclass
class InferenceConfig:
    score_threshold: float = 0.30
    nms_iou: float = 0.6
    max_detections_per_frame: int = 10
    mask_threshold: float = 0.5
    association_threshold: float = 0.5


def clip_audio_slices(clip: VideoClip, audio_bins: int, audio_t: int,
                      window: int = audiofe.DEFAULT_WINDOW, hop: int = audiofe.DEFAULT_HOP,
                      db_floor: float = audiofe.DEFAULT_DB_FLOOR) -> torch.Tensor:
    """Per-frame fixed-size spectrogram slices, normalized to roughly [0, 1].

    Returns (num_frames, F, audio_t) float32.
    """
    feats = audiofe.per_frame_features(clip.audio, clip.num_frames(), audio_t,
                                       window=window, hop=hop, db_floor=db_floor,
                                       parent_id=clip.clip_id)
    if feats.shape[1] != audio_bins:
        raise ValueError(f"spectrogram has {feats.shape[1]} bins, model expects {audio_bins}")
    feats = (feats - db_floor) / (-db_floor)
    return torch.from_numpy(feats.astype(np.float32))


def box_iou(a, b) -> float:
    ix = max(0.0, min(a[2], b[2]) - max(a[0], b[0]))
    iy = max(0.0, min(a[3], b[3]) - max(a[1], b[1]))
    inter = ix * iy
    area_a = (a[2] - a[0]) * (a[3] - a[1])
    area_b = (b[2] - b[0]) * (b[3] - b[1])
    return inter / (area_a + area_b - inter) if inter > 0 else 0.0


def _nms(dets: list[dict], iou_thr: float) -> list[dict]:
    dets = sorted(dets, key=lambda d: -d["score"])
    keep = []
    for d in dets:
        if all(not (k["class_id"] == d["class_id"] and box_iou(k["box"], d["box"]) > iou_thr)
               for k in keep):
            keep.append(d)
    return keep


@torch.no_grad()
def detect_frame(model: AVSegModel, frame: np.ndarray, audio_slice: torch.Tensor | None,
                 frame_index: int, cfg: InferenceConfig, audio_enabled: bool = True) -> list[Detection]:
    model.eval()
    h, w = frame.shape[:2]
    stride = model.cfg.stride
    x = torch.from_numpy(frame.astype(np.float32)).permute(2, 0, 1).unsqueeze(0)
    sl = audio_slice.unsqueeze(0) if audio_slice is not None else None
    feats = model(x, sl, audio_enabled=audio_enabled)

    cls_prob = torch.sigmoid(feats.class_logits[0])       # (K, Hf, Wf)
    ctr_prob = torch.sigmoid(feats.centerness[0, 0])      # (Hf, Wf)
    score_map, class_map = cls_prob.max(dim=0)
    score_map = torch.sqrt(score_map * ctr_prob)

    hf, wf = score_map.shape
    candidates = []
    ys, xs = torch.nonzero(score_map > cfg.score_threshold, as_tuple=True)
    for y, x_ in zip(ys.tolist(), xs.tolist()):
        cx, cy = x_ * stride + stride / 2, y * stride + stride / 2
        l, t, r, b = feats.box_distances[0, :, y, x_].tolist()
        candidates.append({
            "score": float(score_map[y, x_]),
            "class_id": int(class_map[y, x_]),
            "box": (cx - l, cy - t, cx + r, cy + b),
            "loc": (x_, y),
        })
    kept = _nms(candidates, cfg.nms_iou)[: cfg.max_detections_per_frame]

    detections = []
    for d in kept:
        gx, gy = d["loc"]
        m = mask_head(_f_tilde(feats, gx, gy), _theta(feats, gx, gy))
        prob = mask_probs(m, (h, w))
        mask = (prob >= cfg.mask_threshold).numpy()
        detections.append(Detection(
            frame_index=frame_index,
            class_id=d["class_id"],
            score=d["score"],
            embedding=feats.embeddings[0, :, gy, gx].numpy().copy(),
            mask=mask,
            box=d["box"],
        ))
    return detections


@torch.no_grad()
def predict_clip(model: AVSegModel, clip: VideoClip, cfg: InferenceConfig | None = None,
                 audio_enabled: bool = True, window: int = audiofe.DEFAULT_WINDOW,
                 hop: int = audiofe.DEFAULT_HOP) -> list[InstanceTrack]:
    cfg = cfg or InferenceConfig()
    slices = None
    if audio_enabled:
        slices = clip_audio_slices(clip, model.cfg.audio_bins, model.cfg.audio_t,
                                   window=window, hop=hop)
    detections = []
    for i, frame in enumerate(clip.frames):
        sl = slices[i] if slices is not None else None
        detections.extend(detect_frame(model, frame, sl, i, cfg, audio_enabled=audio_enabled))
    return build_tracks(detections, cfg.association_threshold)


def gt_tracks_from_clip(clip: VideoClip) -> list[InstanceTrack]:
    by_id: dict[int, dict] = {}
    for f, anns in enumerate(clip.annotations):
        for a in anns:
            tr = by_id.setdefault(a.instance_id, {"class_id": a.class_id, "masks": {}})
            tr["masks"][f] = a.mask
    return [InstanceTrack(track_id=iid, class_id=tr["class_id"], score=1.0, masks=tr["masks"])
            for iid, tr in sorted(by_id.items())]
