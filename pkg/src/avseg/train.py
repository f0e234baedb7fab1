"""Training loop: warmup multi-step LR schedule, the five-component loss
(classification, localization, mask, crossover, embedding), checkpointing,
and an append-only JSONL loss log."""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field, asdict
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F

from .crossover import FramePair, SkipClip, sample_frame_pair, within_frame_loss, crossover_loss
from .data import VideoClip
from .infer import clip_audio_slices
from .model import AVSegModel, FrameFeatures, ModelConfig, save_checkpoint, load_checkpoint

logger = logging.getLogger(__name__)

LOSS_COMPONENTS = ("cls", "loc", "mask", "crossover", "embed")


@dataclass
class TrainConfig:
    base_lr: float = 0.005
    epochs: int = 12
    lr_milestones: list[int] = field(default_factory=lambda: [9, 11])
    lr_gamma: float = 0.1
    warmup_iters: int = 500
    warmup_factor: float = 0.001
    batch_clips: int = 8
    loss_weights: dict[str, float] = field(
        default_factory=lambda: {k: 1.0 for k in LOSS_COMPONENTS})
    crossover_enabled: bool = True
    audio_enabled: bool = True
    delta_max: int = 5
    seed: int = 0
    embed_margin: float = 1.0

    def validate(self):
        ms = self.lr_milestones
        if any(b <= a for a, b in zip(ms, ms[1:])) or any(m >= self.epochs for m in ms):
            raise ValueError(f"lr_milestones must be strictly increasing and < epochs, got {ms}")
        if any(w < 0 for w in self.loss_weights.values()):
            raise ValueError("loss weights must be >= 0")
        missing = set(LOSS_COMPONENTS) - set(self.loss_weights)
        if missing:
            raise ValueError(f"loss_weights missing components: {sorted(missing)}")


@dataclass
class LossReport:
    iteration: int
    components: dict[str, float]
    total: float
    lr: float

    def to_json(self) -> str:
        return json.dumps({"iteration": self.iteration, "components": self.components,
                           "total": self.total, "lr": self.lr})

    @staticmethod
    def from_json(line: str) -> "LossReport":
        d = json.loads(line)
        return LossReport(d["iteration"], d["components"], d["total"], d["lr"])


def lr_at(iteration: int, iters_per_epoch: int, cfg: TrainConfig) -> float:
    """Warmup multi-step schedule: linear ramp from warmup_factor*base_lr to
    base_lr over warmup_iters, then base_lr * gamma^(milestones passed)."""
    if iteration < cfg.warmup_iters:
        alpha = iteration / cfg.warmup_iters
        return cfg.base_lr * (cfg.warmup_factor * (1 - alpha) + alpha)
    epoch = iteration // iters_per_epoch
    passed = sum(1 for m in cfg.lr_milestones if epoch >= m)
    return cfg.base_lr * cfg.lr_gamma ** passed


# ---------------------------------------------------------------------------
# dense detection targets (anchor-free, single level)

def build_targets(annotations, grid_hw: tuple[int, int], stride: int, num_classes: int,
                  center_radius: float = 1.5):
    """FCOS-style targets on the stride-s grid.

    Returns (cls_target, box_target, pos_mask): cls_target is (H, W) with
    num_classes meaning background; box_target is (4, H, W) of l/t/r/b pixel
    distances at positives. A location is positive when its center lies inside
    a gt box and within center_radius*stride of the box center; ties go to the
    smallest instance.
    """
    gh, gw = grid_hw
    cls_t = np.full((gh, gw), num_classes, dtype=np.int64)
    box_t = np.zeros((4, gh, gw), dtype=np.float32)
    best_area = np.full((gh, gw), np.inf)
    for a in annotations:
        x0, y0, x1, y1 = a.bbox
        area = float(a.mask.sum())
        bcx, bcy = (x0 + x1) / 2, (y0 + y1) / 2
        for gy in range(gh):
            for gx in range(gw):
                cx, cy = gx * stride + stride / 2, gy * stride + stride / 2
                if not (x0 <= cx <= x1 and y0 <= cy <= y1):
                    continue
                if abs(cx - bcx) > center_radius * stride or abs(cy - bcy) > center_radius * stride:
                    continue
                if area < best_area[gy, gx]:
                    best_area[gy, gx] = area
                    cls_t[gy, gx] = a.class_id
                    box_t[:, gy, gx] = (cx - x0, cy - y0, x1 - cx, y1 - cy)
    pos = cls_t < num_classes
    return cls_t, box_t, pos


def focal_loss(logits: torch.Tensor, cls_target: torch.Tensor, num_classes: int,
               alpha: float = 0.25, gamma: float = 2.0) -> torch.Tensor:
    """Sigmoid focal loss over all locations, normalized by positive count."""
    k, h, w = logits.shape
    onehot = torch.zeros(k, h, w, dtype=logits.dtype)
    pos = cls_target < num_classes
    if pos.any():
        ys, xs = torch.nonzero(pos, as_tuple=True)
        onehot[cls_target[pos], ys, xs] = 1.0
    p = torch.sigmoid(logits)
    ce = F.binary_cross_entropy_with_logits(logits, onehot, reduction="none")
    p_t = p * onehot + (1 - p) * (1 - onehot)
    alpha_t = alpha * onehot + (1 - alpha) * (1 - onehot)
    loss = (alpha_t * (1 - p_t) ** gamma * ce).sum()
    return loss / max(1, int(pos.sum()))


def ltrb_iou(pred: torch.Tensor, target: torch.Tensor) -> torch.Tensor:
    """IoU between boxes given as (4, N) l/t/r/b distances from a shared center."""
    pl, pt, pr, pb = pred
    tl, tt, tr, tb = target
    inter_w = torch.minimum(pl, tl) + torch.minimum(pr, tr)
    inter_h = torch.minimum(pt, tt) + torch.minimum(pb, tb)
    inter = inter_w.clamp(min=0) * inter_h.clamp(min=0)
    area_p = (pl + pr) * (pt + pb)
    area_t = (tl + tr) * (tt + tb)
    return inter / (area_p + area_t - inter + 1e-9)


def centerness_target(box_t: torch.Tensor) -> torch.Tensor:
    l, t, r, b = box_t
    return torch.sqrt(
        (torch.minimum(l, r) / torch.maximum(l, r).clamp(min=1e-9))
        * (torch.minimum(t, b) / torch.maximum(t, b).clamp(min=1e-9)))


def _slice_features(feats: FrameFeatures, i: int) -> FrameFeatures:
    return FrameFeatures(**{k: getattr(feats, k)[i:i + 1] for k in feats.__dataclass_fields__})


@dataclass
class PairSample:
    """One training example: a frame pair with its raw inputs and targets."""
    clip: VideoClip
    pair: FramePair
    frames: torch.Tensor        # (2, 3, H, W)
    audio_slices: torch.Tensor | None  # (2, F, T_a)
    gt_t: dict[int, torch.Tensor]
    gt_td: dict[int, torch.Tensor]


def make_pair_sample(clip: VideoClip, rng: np.random.Generator, model_cfg: ModelConfig,
                     cfg: TrainConfig, audio_cache: dict | None = None) -> PairSample:
    pair = sample_frame_pair(clip, rng, delta_max=cfg.delta_max, stride=model_cfg.stride)
    frames = torch.from_numpy(
        np.stack([clip.frames[pair.t], clip.frames[pair.td]]).astype(np.float32)
    ).permute(0, 3, 1, 2)
    slices = None
    if cfg.audio_enabled:
        if audio_cache is not None and clip.clip_id in audio_cache:
            all_slices = audio_cache[clip.clip_id]
        else:
            all_slices = clip_audio_slices(clip, model_cfg.audio_bins, model_cfg.audio_t)
            if audio_cache is not None:
                audio_cache[clip.clip_id] = all_slices
        slices = torch.stack([all_slices[pair.t], all_slices[pair.td]])
    to_t = lambda m: torch.from_numpy(m.astype(np.float32))
    gt_t = {a.instance_id: to_t(a.mask) for a in clip.annotations[pair.t]}
    gt_td = {a.instance_id: to_t(a.mask) for a in clip.annotations[pair.td]}
    return PairSample(clip, pair, frames, slices, gt_t, gt_td)


class Trainer:
    def __init__(self, model: AVSegModel, cfg: TrainConfig, iters_per_epoch: int):
        cfg.validate()
        self.model = model
        self.cfg = cfg
        self.iters_per_epoch = iters_per_epoch
        self.iteration = 0
        # momentum-free adaptive optimizer
        self.optimizer = torch.optim.RMSprop(model.parameters(), lr=cfg.base_lr,
                                             alpha=0.99, momentum=0.0)

    def _detection_losses(self, feats: FrameFeatures, annotations):
        mc = self.model.cfg
        gh, gw = feats.class_logits.shape[-2:]
        cls_np, box_np, pos_np = build_targets(annotations, (gh, gw), mc.stride, mc.num_classes)
        cls_t = torch.from_numpy(cls_np)
        pos = torch.from_numpy(pos_np)
        cls_loss = focal_loss(feats.class_logits[0], cls_t, mc.num_classes)
        if pos.any():
            box_t = torch.from_numpy(box_np)[:, pos]
            box_p = feats.box_distances[0][:, pos]
            iou = ltrb_iou(box_p, box_t)
            loc_loss = (1.0 - iou).mean()
            ctr_loss = F.binary_cross_entropy_with_logits(
                feats.centerness[0, 0][pos], centerness_target(box_t))
            loc_loss = loc_loss + ctr_loss
        else:
            loc_loss = feats.box_distances.sum() * 0.0
        return cls_loss, loc_loss

    def _embed_loss(self, sample: PairSample, f_t: FrameFeatures, f_td: FrameFeatures):
        """Pull embeddings of the same instance across the pair together,
        push different instances apart with a hinge margin."""
        anchors = []
        for (x, y), (xp, yp), iid in sample.pair.correspondences:
            anchors.append((iid, f_t.embeddings[0, :, y, x], f_td.embeddings[0, :, yp, xp]))
        if not anchors:
            return torch.tensor(0.0)
        pull = torch.stack([((et - etd) ** 2).mean() for _, et, etd in anchors]).mean()
        push_terms = []
        for i in range(len(anchors)):
            for j in range(i + 1, len(anchors)):
                for a in (1, 2):
                    for b in (1, 2):
                        d = torch.norm(anchors[i][a] - anchors[j][b])
                        push_terms.append(F.relu(self.cfg.embed_margin - d) ** 2)
        push = torch.stack(push_terms).mean() if push_terms else torch.tensor(0.0)
        return pull + push

    def train_step(self, batch: list[PairSample]) -> LossReport:
        self.model.train()
        lr = lr_at(self.iteration, self.iters_per_epoch, self.cfg)
        for g in self.optimizer.param_groups:
            g["lr"] = lr

        frames = torch.cat([s.frames for s in batch])
        slices = torch.cat([s.audio_slices for s in batch]) if self.cfg.audio_enabled else None
        feats = self.model(frames, slices, audio_enabled=self.cfg.audio_enabled)

        comps = {k: torch.tensor(0.0) for k in LOSS_COMPONENTS}
        for bi, sample in enumerate(batch):
            f_t = _slice_features(feats, 2 * bi)
            f_td = _slice_features(feats, 2 * bi + 1)
            sample.pair.features_t = f_t
            sample.pair.features_td = f_td
            h, w = sample.clip.frame_size

            cls_a, loc_a = self._detection_losses(f_t, sample.clip.annotations[sample.pair.t])
            cls_b, loc_b = self._detection_losses(f_td, sample.clip.annotations[sample.pair.td])
            comps["cls"] = comps["cls"] + (cls_a + cls_b) / 2
            comps["loc"] = comps["loc"] + (loc_a + loc_b) / 2
            comps["mask"] = comps["mask"] + within_frame_loss(
                sample.pair, sample.gt_t, sample.gt_td, (h, w))
            if self.cfg.crossover_enabled:
                comps["crossover"] = comps["crossover"] + crossover_loss(
                    sample.pair, sample.gt_t, sample.gt_td, (h, w))
            comps["embed"] = comps["embed"] + self._embed_loss(sample, f_t, f_td)

        n = max(1, len(batch))
        comps = {k: v / n for k, v in comps.items()}
        total = sum(self.cfg.loss_weights[k] * comps[k] for k in LOSS_COMPONENTS)
        for k, v in comps.items():
            if not math.isfinite(float(v.detach())):
                raise RuntimeError(f"non-finite loss in component '{k}' at iteration {self.iteration}")

        self.optimizer.zero_grad()
        total.backward()
        self.optimizer.step()

        report = LossReport(
            iteration=self.iteration,
            components={k: float(v.detach()) for k, v in comps.items()},
            total=float(total.detach()),
            lr=lr,
        )
        self.iteration += 1
        return report


def fit(clips: list[VideoClip], cfg: TrainConfig, model_cfg: ModelConfig,
        out_dir: str | Path, resume: bool = False) -> tuple[Path, Path]:
    """Train for cfg.epochs over the clip list; returns (final checkpoint path,
    loss log path). Fully reproducible given cfg.seed."""
    if not clips:
        raise ValueError("dataset is empty")
    cfg.validate()
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    log_path = out_dir / "loss_log.jsonl"
    last_path = out_dir / "last.ckpt"

    torch.manual_seed(cfg.seed)
    model = AVSegModel(model_cfg)
    start_epoch = 0
    iters_per_epoch = max(1, len(clips) // cfg.batch_clips)
    trainer = Trainer(model, cfg, iters_per_epoch)

    if resume and last_path.exists():
        model, payload = load_checkpoint(last_path, expected_cfg=model_cfg)
        trainer.model = model
        trainer.optimizer = torch.optim.RMSprop(model.parameters(), lr=cfg.base_lr,
                                                alpha=0.99, momentum=0.0)
        trainer.optimizer.load_state_dict(payload["optimizer"])
        start_epoch = payload["epoch"] + 1
        trainer.iteration = payload["iteration"]
        logger.info("resuming from epoch %d", start_epoch)
    else:
        log_path.write_text("")
        save_checkpoint(out_dir / "init.ckpt", model,
                        {"epoch": -1, "iteration": 0, "optimizer": trainer.optimizer.state_dict()})

    rng = np.random.default_rng([cfg.seed, 777])
    # replay the data stream so a resumed run continues where it left off
    for epoch in range(0, start_epoch):
        for _ in range(iters_per_epoch):
            _draw_batch(clips, rng, trainer.model.cfg, cfg, None)

    audio_cache: dict = {}
    with open(log_path, "a") as log_f:
        for epoch in range(start_epoch, cfg.epochs):
            for _ in range(iters_per_epoch):
                batch = _draw_batch(clips, rng, model_cfg, cfg, audio_cache)
                if not batch:
                    continue
                report = trainer.train_step(batch)
                log_f.write(report.to_json() + "\n")
            log_f.flush()
            save_checkpoint(last_path, trainer.model,
                            {"epoch": epoch, "iteration": trainer.iteration,
                             "optimizer": trainer.optimizer.state_dict()})
    if not last_path.exists():  # epochs == 0
        save_checkpoint(last_path, trainer.model,
                        {"epoch": -1, "iteration": 0,
                         "optimizer": trainer.optimizer.state_dict()})
    return last_path, log_path


def _draw_batch(clips, rng, model_cfg, cfg, audio_cache):
    idx = rng.choice(len(clips), size=min(cfg.batch_clips, len(clips)), replace=False)
    batch = []
    for i in idx:
        if audio_cache is None:
            # replay mode: consume the same rng draws without building tensors
            try:
                sample_frame_pair(clips[i], rng, delta_max=cfg.delta_max, stride=model_cfg.stride)
            except SkipClip:
                pass
            continue
        try:
            batch.append(make_pair_sample(clips[i], rng, model_cfg, cfg, audio_cache))
        except SkipClip as e:
            logger.debug("skipping clip: %s", e)
    return batch


@torch.no_grad()
def evaluate_mask_dice(model: AVSegModel, clips: list[VideoClip], audio_enabled: bool = True,
                       delta_max: int = 5, seed: int = 0) -> float:
    """Mean within-frame mask dice loss over deterministic frame pairs from
    held-out clips (lower is better)."""
    model.eval()
    rng = np.random.default_rng(seed)
    cfg = TrainConfig(audio_enabled=audio_enabled, delta_max=delta_max)
    values = []
    for clip in clips:
        try:
            sample = make_pair_sample(clip, rng, model.cfg, cfg)
        except SkipClip:
            continue
        feats = model(sample.frames, sample.audio_slices, audio_enabled=audio_enabled)
        sample.pair.features_t = _slice_features(feats, 0)
        sample.pair.features_td = _slice_features(feats, 1)
        values.append(float(within_frame_loss(sample.pair, sample.gt_t, sample.gt_td,
                                              clip.frame_size)))
    return float(np.mean(values)) if values else float("nan")


def read_loss_log(path: str | Path) -> list[LossReport]:
    reports = []
    for line in Path(path).read_text().splitlines():
        if line.strip():
            reports.append(LossReport.from_json(line))
    return reports
