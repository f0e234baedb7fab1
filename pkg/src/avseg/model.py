"""Network core: small visual backbone, audio encoder, tile-concat-convolve
fusion, dense prediction heads, and the dynamic-filter conditional mask head.

The mask head has no parameters of its own: its three 1x1 conv layers
((C_m+2) -> 8 -> 8 -> 1, ReLU between) are unpacked per instance from a flat
filter vector emitted by the controller head at the instance's location.
"""

from __future__ import annotations

from dataclasses import dataclass, asdict
from pathlib import Path

import torch
import torch.nn as nn
import torch.nn.functional as F

CHECKPOINT_VERSION = 1

MASK_HEAD_CHANNELS = (8, 8, 1)


@dataclass
class ModelConfig:
    num_classes: int = 4
    c_v: int = 64            # visual / fused channels
    c_a: int = 32            # audio embedding length
    c_m: int = 8             # mask branch channels
    d_e: int = 16            # instance embedding length
    stride: int = 8
    audio_bins: int = 513    # spectrogram F (window/2 + 1)
    audio_t: int = 4         # fixed slice width after time resampling


def mask_head_param_count(c_m: int) -> int:
    """Flat filter vector length for the (C_m+2) -> 8 -> 8 -> 1 head."""
    sizes = _mask_head_layer_sizes(c_m)
    return sum(w + b for w, b in sizes)


def _mask_head_layer_sizes(c_m: int) -> list[tuple[int, int]]:
    chans = (c_m + 2,) + MASK_HEAD_CHANNELS
    return [(chans[i] * chans[i + 1], chans[i + 1]) for i in range(len(chans) - 1)]


def make_coordinate_map(x: int, y: int, h_m: int, w_m: int,
                        device=None, dtype=torch.float32) -> torch.Tensor:
    """2 x H_m x W_m relative-offset grid: channel 0 = (col-x)/W_m, channel 1 = (row-y)/H_m."""
    if not (0 <= x < w_m and 0 <= y < h_m):
        raise ValueError(f"anchor ({x}, {y}) outside {h_m}x{w_m} grid")
    cols = (torch.arange(w_m, device=device, dtype=dtype) - x) / w_m
    rows = (torch.arange(h_m, device=device, dtype=dtype) - y) / h_m
    return torch.stack([cols.expand(h_m, w_m), rows.unsqueeze(1).expand(h_m, w_m)])


def unpack_filters(theta: torch.Tensor, c_m: int) -> list[tuple[torch.Tensor, torch.Tensor]]:
    """Split a flat filter vector into (weight, bias) per layer, in layer order."""
    expected = mask_head_param_count(c_m)
    if theta.numel() != expected:
        raise ValueError(f"filter vector has {theta.numel()} parameters, expected {expected}")
    chans = (c_m + 2,) + MASK_HEAD_CHANNELS
    layers = []
    pos = 0
    for i in range(len(chans) - 1):
        c_in, c_out = chans[i], chans[i + 1]
        w = theta[pos: pos + c_in * c_out].reshape(c_out, c_in, 1, 1)
        pos += c_in * c_out
        b = theta[pos: pos + c_out]
        pos += c_out
        layers.append((w, b))
    return layers


def mask_head(f_tilde: torch.Tensor, theta: torch.Tensor, c_m: int | None = None) -> torch.Tensor:
    """Conditional mask head: returns pre-sigmoid logits, shape H_m x W_m.

    f_tilde is (C_m+2) x H_m x W_m (mask features concatenated with the
    coordinate map); theta parameterizes all three conv layers.
    """
    if c_m is None:
        c_m = f_tilde.shape[0] - 2
    layers = unpack_filters(theta, c_m)
    x = f_tilde.unsqueeze(0)
    for i, (w, b) in enumerate(layers):
        x = F.conv2d(x, w, b)
        if i < len(layers) - 1:
            x = F.relu(x)
    return x[0, 0]


@dataclass
class FrameFeatures:
    """All per-frame network outputs on the shared stride-8 grid."""

    fused_map: torch.Tensor        # (B, C_v, H, W)
    mask_feature_map: torch.Tensor  # (B, C_m, H, W)
    class_logits: torch.Tensor     # (B, num_classes, H, W)
    box_distances: torch.Tensor    # (B, 4, H, W), positive, in input pixels (l, t, r, b)
    centerness: torch.Tensor       # (B, 1, H, W), logits
    embeddings: torch.Tensor       # (B, D_e, H, W)
    filters: torch.Tensor          # (B, theta_len, H, W)


def _conv_gn(c_in, c_out, stride=1, groups=8):
    return nn.Sequential(
        nn.Conv2d(c_in, c_out, 3, stride=stride, padding=1),
        nn.GroupNorm(min(groups, c_out), c_out),
        nn.ReLU(inplace=True),
    )


class AudioEncoder(nn.Module):
    """Small CNN over a fixed-size spectrogram slice, global average pooled.

    A normalized frequency-coordinate channel is concatenated to the input so
    the encoder can represent *where* on the frequency axis energy sits;
    without it, global pooling would make pure tones indistinguishable.
    """

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        self.convs = nn.Sequential(
            _conv_gn(2, 16, stride=(4, 1)),
            _conv_gn(16, 32, stride=(4, 1)),
            _conv_gn(32, 32, stride=(2, 1)),
        )
        self.proj = nn.Linear(32, cfg.c_a)

    def forward(self, slices: torch.Tensor) -> torch.Tensor:
        if slices.dim() == 3:
            slices = slices.unsqueeze(1)
        b, _, f, t = slices.shape
        if (f, t) != (self.cfg.audio_bins, self.cfg.audio_t):
            raise ValueError(
                f"audio slice shape {(f, t)} does not match configured "
                f"({self.cfg.audio_bins}, {self.cfg.audio_t})")
        coord = torch.linspace(-1, 1, f, device=slices.device, dtype=slices.dtype)
        coord = coord.view(1, 1, f, 1).expand(b, 1, f, t)
        x = torch.cat([slices, coord], dim=1)
        x = self.convs(x)
        x = x.mean(dim=(2, 3))  # global average pool
        return self.proj(x)


class AVSegModel(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        self.theta_len = mask_head_param_count(cfg.c_m)

        # 4-stage backbone, total stride 8
        self.backbone = nn.Sequential(
            _conv_gn(3, 32, stride=2),
            _conv_gn(32, 48, stride=2),
            _conv_gn(48, cfg.c_v, stride=2),
            _conv_gn(cfg.c_v, cfg.c_v, stride=1),
        )
        self.audio_encoder = AudioEncoder(cfg)
        self.fusion_conv = nn.Conv2d(cfg.c_v + cfg.c_a, cfg.c_v, 1)

        self.tower = nn.Sequential(_conv_gn(cfg.c_v, cfg.c_v), _conv_gn(cfg.c_v, cfg.c_v))
        self.cls_head = nn.Conv2d(cfg.c_v, cfg.num_classes, 1)
        self.box_head = nn.Conv2d(cfg.c_v, 4, 1)
        self.ctr_head = nn.Conv2d(cfg.c_v, 1, 1)
        self.embed_head = nn.Conv2d(cfg.c_v, cfg.d_e, 1)
        self.filter_head = nn.Conv2d(cfg.c_v, self.theta_len, 1)
        self.mask_branch = nn.Sequential(_conv_gn(cfg.c_v, 32), nn.Conv2d(32, cfg.c_m, 1))

        # focal-loss-friendly classification prior
        nn.init.constant_(self.cls_head.bias, -2.0)

    def visual_backbone(self, frames: torch.Tensor) -> torch.Tensor:
        _, _, h, w = frames.shape
        s = self.cfg.stride
        if h % s or w % s:
            raise ValueError(f"frame size {h}x{w} must be divisible by the total stride {s}")
        return self.backbone(frames)

    def encode_audio(self, slices: torch.Tensor) -> torch.Tensor:
        return self.audio_encoder(slices)

    def fuse(self, visual: torch.Tensor, audio_vec: torch.Tensor) -> torch.Tensor:
        """Tile the audio vector spatially, concat on channels, reduce with 1x1 conv."""
        b, c, h, w = visual.shape
        if audio_vec.shape != (b, self.cfg.c_a):
            raise ValueError(f"audio vector shape {tuple(audio_vec.shape)} != ({b}, {self.cfg.c_a})")
        tiled = audio_vec.view(b, self.cfg.c_a, 1, 1).expand(b, self.cfg.c_a, h, w)
        return self.fusion_conv(torch.cat([visual, tiled], dim=1))

    def heads(self, fused: torch.Tensor) -> FrameFeatures:
        t = self.tower(fused)
        return FrameFeatures(
            fused_map=fused,
            mask_feature_map=self.mask_branch(fused),
            class_logits=self.cls_head(t),
            box_distances=torch.exp(self.box_head(t)) * self.cfg.stride,
            centerness=self.ctr_head(t),
            embeddings=self.embed_head(t),
            filters=self.filter_head(t),
        )

    def forward(self, frames: torch.Tensor, audio_slices: torch.Tensor | None = None,
                audio_enabled: bool = True) -> FrameFeatures:
        """frames: (B, 3, H, W); audio_slices: (B, F, T_a) or None.

        With audio disabled (or absent), the audio vector is all zeros: shapes
        are unchanged and the fusion conv sees no acoustic information.
        """
        visual = self.visual_backbone(frames)
        if audio_enabled and audio_slices is not None:
            audio_vec = self.encode_audio(audio_slices)
        else:
            audio_vec = torch.zeros(frames.shape[0], self.cfg.c_a,
                                    device=frames.device, dtype=visual.dtype)
        return self.heads(self.fuse(visual, audio_vec))


# ---------------------------------------------------------------------------
# checkpointing

def save_checkpoint(path: str | Path, model: AVSegModel, extra: dict | None = None):
    """Atomic checkpoint write (temp file + rename)."""
    path = Path(path)
    payload = {
        "version": CHECKPOINT_VERSION,
        "model_config": asdict(model.cfg),
        "state_dict": model.state_dict(),
    }
    if extra:
        payload.update(extra)
    tmp = path.with_suffix(path.suffix + ".tmp")
    torch.save(payload, tmp)
    tmp.replace(path)


def load_checkpoint(path: str | Path, expected_cfg: ModelConfig | None = None) -> tuple[AVSegModel, dict]:
    payload = torch.load(path, map_location="cpu", weights_only=False)
    if payload.get("version") != CHECKPOINT_VERSION:
        raise ValueError(f"checkpoint version {payload.get('version')} != supported {CHECKPOINT_VERSION}")
    cfg = ModelConfig(**payload["model_config"])
    if expected_cfg is not None and cfg != expected_cfg:
        raise ValueError(f"checkpoint architecture {cfg} does not match requested {expected_cfg}")
    model = AVSegModel(cfg)
    model.load_state_dict(payload["state_dict"])
    return model, payload
