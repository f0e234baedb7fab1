"""Crossover learning: frame-pair sampling, within-frame and cross-frame mask
generation from dynamic filters, and the dice loss.

Within a pair (t, t+delta), the within-frame mask of an instance uses that
frame's own filters and features; the crossover mask applies the filters
generated in one frame to the mask features (and anchor) of the other frame,
tying instance appearance to cross-frame localization.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import torch
import torch.nn.functional as F

from .data import VideoClip
from .model import FrameFeatures, make_coordinate_map, mask_head

DICE_EPS = 1e-6


class SkipClip(Exception):
    """Signals that a clip has no frame pair with a shared instance."""


@dataclass
class FramePair:
    t: int
    delta: int
    # (location in t, location in t+delta, instance_id); locations are (x, y)
    # on the stride-s feature grid
    correspondences: list[tuple[tuple[int, int], tuple[int, int], int]]
    features_t: FrameFeatures | None = None
    features_td: FrameFeatures | None = None
    clip_id: str = ""

    @property
    def td(self) -> int:
        return self.t + self.delta


def anchor_location(mask: np.ndarray, stride: int, grid_hw: tuple[int, int]) -> tuple[int, int]:
    """Grid anchor for a gt mask: the foreground pixel nearest the mask
    centroid, mapped to the stride-s grid."""
    ys, xs = np.nonzero(mask)
    cy, cx = ys.mean(), xs.mean()
    i = np.argmin((ys - cy) ** 2 + (xs - cx) ** 2)
    gh, gw = grid_hw
    return (min(int(xs[i]) // stride, gw - 1), min(int(ys[i]) // stride, gh - 1))


def sample_frame_pair(clip: VideoClip, rng: np.random.Generator, delta_max: int = 5,
                      stride: int = 8) -> FramePair:
    """Sample (t, t+delta) uniformly with delta in [1, delta_max] clipped to the
    clip length; correspondences come from ground-truth identities."""
    n = clip.num_frames()
    if n < 2:
        raise SkipClip(f"clip {clip.clip_id} has fewer than 2 frames")
    h, w = clip.frame_size
    grid_hw = (h // stride, w // stride)
    for _ in range(20):
        t = int(rng.integers(0, n - 1))
        delta = int(rng.integers(1, min(delta_max, n - 1 - t) + 1))
        corrs = _correspondences(clip, t, t + delta, stride, grid_hw)
        if corrs:
            return FramePair(t=t, delta=delta, correspondences=corrs, clip_id=clip.clip_id)
    # exhaustive fallback before declaring the clip unusable
    for t in range(n - 1):
        for delta in range(1, min(delta_max, n - 1 - t) + 1):
            corrs = _correspondences(clip, t, t + delta, stride, grid_hw)
            if corrs:
                return FramePair(t=t, delta=delta, correspondences=corrs, clip_id=clip.clip_id)
    raise SkipClip(f"clip {clip.clip_id} has no frame pair with a shared instance")


def _correspondences(clip, t, td, stride, grid_hw):
    anns_t = {a.instance_id: a for a in clip.annotations[t]}
    anns_td = {a.instance_id: a for a in clip.annotations[td]}
    corrs = []
    for iid in sorted(anns_t.keys() & anns_td.keys()):
        loc_t = anchor_location(anns_t[iid].mask, stride, grid_hw)
        loc_td = anchor_location(anns_td[iid].mask, stride, grid_hw)
        corrs.append((loc_t, loc_td, iid))
    return corrs


def _f_tilde(features: FrameFeatures, x: int, y: int) -> torch.Tensor:
    fmask = features.mask_feature_map[0]
    _, h, w = fmask.shape
    coord = make_coordinate_map(x, y, h, w, device=fmask.device, dtype=fmask.dtype)
    return torch.cat([fmask, coord], dim=0)


def _theta(features: FrameFeatures, x: int, y: int) -> torch.Tensor:
    return features.filters[0, :, y, x]


def within_frame_masks(pair: FramePair) -> list[tuple[int, torch.Tensor, torch.Tensor]]:
    """Per correspondence: (instance_id, M(t), M(t+delta)) mask logits, each
    from its own frame's filters and features."""
    out = []
    for (x, y), (xp, yp), iid in pair.correspondences:
        m_t = mask_head(_f_tilde(pair.features_t, x, y), _theta(pair.features_t, x, y))
        m_td = mask_head(_f_tilde(pair.features_td, xp, yp), _theta(pair.features_td, xp, yp))
        out.append((iid, m_t, m_td))
    return out


def crossover_masks(pair: FramePair) -> list[tuple[int, torch.Tensor, torch.Tensor]]:
    """Per correspondence: (instance_id, M*(t+delta), M*(t)) mask logits.

    M*(t+delta) applies frame t's filters (from location (x, y)) to frame
    t+delta's mask features anchored at (x', y'); M*(t) swaps the roles.
    """
    out = []
    for (x, y), (xp, yp), iid in pair.correspondences:
        m_star_td = mask_head(_f_tilde(pair.features_td, xp, yp), _theta(pair.features_t, x, y))
        m_star_t = mask_head(_f_tilde(pair.features_t, x, y), _theta(pair.features_td, xp, yp))
        out.append((iid, m_star_td, m_star_t))
    return out


def dice_loss(m: torch.Tensor, m_star: torch.Tensor) -> torch.Tensor:
    """Soft dice loss 1 - 2<M, M*> / (|M|^2 + |M*|^2), stabilized so that the
    all-zero/all-zero case is 0 rather than undefined."""
    if m.shape != m_star.shape:
        raise ValueError(f"shape mismatch: {tuple(m.shape)} vs {tuple(m_star.shape)}")
    inter = (m * m_star).sum()
    denom = (m * m).sum() + (m_star * m_star).sum()
    return 1.0 - (2.0 * inter + DICE_EPS) / (denom + DICE_EPS)


def upsample_mask_logits(logits: torch.Tensor, size: tuple[int, int]) -> torch.Tensor:
    """Bilinearly upsample stride-s mask logits to frame resolution."""
    return F.interpolate(logits[None, None], size=size, mode="bilinear", align_corners=False)[0, 0]


def mask_probs(logits: torch.Tensor, size: tuple[int, int]) -> torch.Tensor:
    return torch.sigmoid(upsample_mask_logits(logits, size))


@dataclass
class CrossoverCounters:
    zero_correspondence_pairs: int = 0


COUNTERS = CrossoverCounters()


def within_frame_loss(pair: FramePair, gt_t: dict[int, torch.Tensor],
                      gt_td: dict[int, torch.Tensor], frame_size: tuple[int, int]) -> torch.Tensor:
    """Mean dice of the two within-frame masks against their frames' ground truth."""
    terms = []
    for iid, m_t, m_td in within_frame_masks(pair):
        terms.append(dice_loss(mask_probs(m_t, frame_size), gt_t[iid]))
        terms.append(dice_loss(mask_probs(m_td, frame_size), gt_td[iid]))
    if not terms:
        return torch.tensor(0.0)
    return torch.stack(terms).mean()


def crossover_loss(pair: FramePair, gt_t: dict[int, torch.Tensor],
                   gt_td: dict[int, torch.Tensor], frame_size: tuple[int, int]) -> torch.Tensor:
    """Mean dice over the four masks per correspondence: M(t), M(t+delta),
    M*(t), M*(t+delta), each supervised against the ground truth of the frame
    whose features produced it."""
    if not pair.correspondences:
        COUNTERS.zero_correspondence_pairs += 1
        return torch.tensor(0.0)
    terms = []
    within = within_frame_masks(pair)
    cross = crossover_masks(pair)
    for (iid, m_t, m_td), (_, m_star_td, m_star_t) in zip(within, cross):
        terms.append(dice_loss(mask_probs(m_t, frame_size), gt_t[iid]))
        terms.append(dice_loss(mask_probs(m_td, frame_size), gt_td[iid]))
        terms.append(dice_loss(mask_probs(m_star_t, frame_size), gt_t[iid]))
        terms.append(dice_loss(mask_probs(m_star_td, frame_size), gt_td[iid]))
    return torch.stack(terms).mean()
