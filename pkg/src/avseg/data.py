"""Data model, synthetic audio-video scene generation, and on-disk clip storage.

A dataset is a directory tree::

    <root>/manifest.json
    <root>/<split>/<clip_id>/frames/00000.png   (16-bit PNG, one per frame)
    <root>/<split>/<clip_id>/audio.wav          (16-bit PCM)
    <root>/<split>/<clip_id>/annotations.json   (RLE masks + boxes per frame)

The synthetic generator produces clips of moving filled shapes (circle,
square, triangle) that bounce off the frame borders.  Each shape class emits
a pure tone, and the clip audio is the normalized sum of the tones of all
instances in the scene.  Two classes can be configured with identical visual
appearance so that only the audio disambiguates them.
"""

from __future__ import annotations

import json
import logging
import math
import wave
from dataclasses import dataclass, field
from pathlib import Path

import cv2
import numpy as np

logger = logging.getLogger(__name__)

SHAPE_KINDS = ("circle", "square", "triangle")

# Default palette; index 0 and 1 share a style on purpose (audio-only
# disambiguation), the rest are visually distinct.
_BASE_STYLES = [
    ("circle", (0.85, 0.15, 0.15)),
    ("circle", (0.85, 0.15, 0.15)),
    ("square", (0.15, 0.75, 0.20)),
    ("triangle", (0.20, 0.25, 0.85)),
    ("square", (0.85, 0.75, 0.15)),
    ("circle", (0.15, 0.75, 0.80)),
    ("triangle", (0.80, 0.30, 0.80)),
    ("square", (0.55, 0.35, 0.15)),
]


class ClipLoadError(Exception):
    """Raised when a clip directory is missing or has corrupt files."""


@dataclass
class AudioTrack:
    """Multi-channel PCM audio; samples shaped (channels, n), values in [-1, 1]."""

    samples: np.ndarray
    sample_rate: int

    def __post_init__(self):
        self.samples = np.atleast_2d(np.asarray(self.samples, dtype=np.float32))

    @property
    def channels(self) -> int:
        return self.samples.shape[0]

    @property
    def num_samples(self) -> int:
        return self.samples.shape[1]

    @property
    def duration(self) -> float:
        return self.num_samples / self.sample_rate


@dataclass
class InstanceAnnotation:
    instance_id: int
    class_id: int
    mask: np.ndarray  # bool, HxW
    bbox: tuple[int, int, int, int]  # (x_min, y_min, x_max, y_max), max exclusive

    @staticmethod
    def from_mask(instance_id: int, class_id: int, mask: np.ndarray) -> "InstanceAnnotation":
        return InstanceAnnotation(instance_id, class_id, mask.astype(bool), bbox_from_mask(mask))


@dataclass
class VideoClip:
    clip_id: str
    frames: list[np.ndarray]  # each HxWx3 float32 in [0, 1]
    fps: float
    annotations: list[list[InstanceAnnotation]]  # one list per frame
    audio: AudioTrack

    @property
    def frame_size(self) -> tuple[int, int]:
        return self.frames[0].shape[:2]

    def num_frames(self) -> int:
        return len(self.frames)


def bbox_from_mask(mask: np.ndarray) -> tuple[int, int, int, int]:
    """Tight bounding box of a binary mask, (x_min, y_min, x_max, y_max), max exclusive."""
    ys, xs = np.nonzero(mask)
    if len(ys) == 0:
        raise ValueError("mask has no foreground pixels")
    return (int(xs.min()), int(ys.min()), int(xs.max()) + 1, int(ys.max()) + 1)


@dataclass
class SyntheticSceneConfig:
    num_classes: int = 4
    shapes_per_clip: int = 2
    frames_per_clip: int = 4
    frame_size: tuple[int, int] = (64, 64)  # (H, W)
    tone_map: dict[int, float] = field(default_factory=lambda: {0: 500.0, 1: 1400.0, 2: 900.0, 3: 2200.0})
    motion: tuple[float, float] = (1.0, 3.0)  # velocity magnitude range, px/frame
    seed: int = 0
    fps: float = 8.0
    sample_rate: int = 8000
    audio_channels: int = 2
    shape_radius: tuple[float, float] = (9.0, 13.0)
    color_jitter: float = 0.05
    # classes within one group never co-occur in a clip (keeps a global audio
    # signature unambiguous for visually identical classes)
    exclusive_groups: list[tuple[int, ...]] = field(default_factory=list)

    def class_styles(self) -> list[tuple[str, tuple[float, float, float]]]:
        return [_BASE_STYLES[c % len(_BASE_STYLES)] for c in range(self.num_classes)]

    def validate(self):
        h, w = self.frame_size
        if h < 32 or w < 32:
            raise ValueError(f"frame_size must be at least 32x32, got {self.frame_size}")
        if self.num_classes < 1 or self.shapes_per_clip < 0:
            raise ValueError("num_classes must be >= 1 and shapes_per_clip >= 0")
        if self.shapes_per_clip > self.num_classes:
            raise ValueError("shapes_per_clip may not exceed num_classes (classes are sampled without replacement)")
        tones = [self.tone_map[c] for c in range(self.num_classes)]
        if len(set(tones)) != len(tones):
            raise ValueError("tone_map must assign a distinct frequency to every class")
        # shapes must fit without full occlusion at spawn
        r_max = self.shape_radius[1]
        if self.shapes_per_clip * (2 * r_max) ** 2 > 0.7 * h * w:
            raise ValueError(
                f"{self.shapes_per_clip} shapes of radius up to {r_max} cannot spawn "
                f"without full occlusion in a {h}x{w} frame"
            )


def _shape_mask(kind: str, cx: float, cy: float, r: float, h: int, w: int) -> np.ndarray:
    yy, xx = np.mgrid[0:h, 0:w]
    if kind == "circle":
        return (xx - cx) ** 2 + (yy - cy) ** 2 <= r * r
    if kind == "square":
        return (np.abs(xx - cx) <= r) & (np.abs(yy - cy) <= r)
    if kind == "triangle":
        # upward triangle inscribed in the radius-r box
        inside = (yy - cy <= r) & (yy - cy >= -r)
        half_width = (yy - cy + r) / 2.0
        return inside & (np.abs(xx - cx) <= half_width)
    raise ValueError(f"unknown shape kind {kind!r}")


def _pick_classes(config: SyntheticSceneConfig, rng: np.random.Generator) -> list[int]:
    groups = [set(g) for g in config.exclusive_groups]
    for _ in range(500):
        classes = list(rng.choice(config.num_classes, size=config.shapes_per_clip, replace=False))
        ok = all(len(g.intersection(classes)) <= 1 for g in groups)
        if ok:
            return [int(c) for c in classes]
    raise ValueError("could not sample a class set satisfying exclusive_groups")


def generate_clip(config: SyntheticSceneConfig, clip_index: int) -> VideoClip:
    """Deterministically generate one synthetic clip from (config.seed, clip_index)."""
    config.validate()
    h, w = config.frame_size
    rng = np.random.default_rng([config.seed, clip_index])
    styles = config.class_styles()

    classes = _pick_classes(config, rng)
    shapes = []
    for i, class_id in enumerate(classes):
        kind, base_color = styles[class_id]
        r = rng.uniform(*config.shape_radius)
        # rejection placement: keep centers far enough apart that no shape is
        # fully occluded at spawn
        for attempt in range(300):
            cx = rng.uniform(r, w - 1 - r)
            cy = rng.uniform(r, h - 1 - r)
            if all(math.hypot(cx - s["cx"], cy - s["cy"]) >= 0.9 * (r + s["r"]) for s in shapes):
                break
        else:
            raise ValueError("failed to place shapes without full occlusion at spawn")
        speed = rng.uniform(*config.motion)
        angle = rng.uniform(0, 2 * math.pi)
        color = np.clip(np.asarray(base_color) + rng.uniform(-config.color_jitter, config.color_jitter, 3), 0, 1)
        shapes.append({
            "instance_id": i,
            "class_id": class_id,
            "kind": kind,
            "r": r,
            "cx": cx,
            "cy": cy,
            "vx": speed * math.cos(angle),
            "vy": speed * math.sin(angle),
            "color": color,
            "phase": rng.uniform(0, 2 * math.pi),
        })

    frames = []
    annotations = []
    for _ in range(config.frames_per_clip):
        frame = np.full((h, w, 3), 0.06, dtype=np.float32)
        full_masks = []
        for s in shapes:
            m = _shape_mask(s["kind"], s["cx"], s["cy"], s["r"], h, w)
            frame[m] = s["color"]
            full_masks.append(m)
        frame_anns = []
        for i, s in enumerate(shapes):
            visible = full_masks[i].copy()
            for later in full_masks[i + 1:]:  # later-spawned shape occludes earlier
                visible &= ~later
            if visible.any():
                frame_anns.append(InstanceAnnotation.from_mask(s["instance_id"], s["class_id"], visible))
        frames.append(frame)
        annotations.append(frame_anns)
        for s in shapes:
            s["cx"] += s["vx"]
            s["cy"] += s["vy"]
            # reflect off borders, keeping the shape fully inside
            if s["cx"] < s["r"] or s["cx"] > w - 1 - s["r"]:
                s["vx"] = -s["vx"]
                s["cx"] = float(np.clip(s["cx"], s["r"], w - 1 - s["r"]))
            if s["cy"] < s["r"] or s["cy"] > h - 1 - s["r"]:
                s["vy"] = -s["vy"]
                s["cy"] = float(np.clip(s["cy"], s["r"], h - 1 - s["r"]))

    n_samples = round(config.frames_per_clip / config.fps * config.sample_rate)
    t = np.arange(n_samples) / config.sample_rate
    audio = np.zeros((config.audio_channels, n_samples), dtype=np.float64)
    for s in shapes:
        tone = np.sin(2 * math.pi * config.tone_map[s["class_id"]] * t + s["phase"])
        pan = rng.uniform(0.35, 0.65)
        gains = [pan, 1.0 - pan] if config.audio_channels == 2 else [1.0]
        for ch, g in enumerate(gains):
            audio[ch] += g * tone
    peak = np.abs(audio).max()
    if peak > 0:
        audio = 0.9 * audio / peak
    return VideoClip(
        clip_id=f"clip_{clip_index:05d}",
        frames=frames,
        fps=config.fps,
        annotations=annotations,
        audio=AudioTrack(audio.astype(np.float32), config.sample_rate),
    )


def resize_shortest_edge(frame: np.ndarray, target: int, max_size: int = 10_000,
                         interpolation: int = cv2.INTER_LINEAR) -> np.ndarray:
    """Scale so the shorter side hits `target`, capping the longer side at `max_size`."""
    if target <= 0:
        raise ValueError("target must be positive")
    h, w = frame.shape[:2]
    scale = target / min(h, w)
    if round(scale * max(h, w)) > max_size:
        scale = max_size / max(h, w)
    new_h, new_w = round(h * scale), round(w * scale)
    if (new_h, new_w) == (h, w):
        return frame
    return cv2.resize(frame, (new_w, new_h), interpolation=interpolation)


def resize_mask_shortest_edge(mask: np.ndarray, target: int, max_size: int = 10_000) -> np.ndarray:
    """Like resize_shortest_edge but nearest-neighbor, so the mask stays binary."""
    out = resize_shortest_edge(mask.astype(np.uint8), target, max_size, interpolation=cv2.INTER_NEAREST)
    return out.astype(bool)


# ---------------------------------------------------------------------------
# run-length encoding for binary masks (row-major, counts alternate 0s/1s,
# starting with the number of leading zeros)

def rle_encode(mask: np.ndarray) -> list[int]:
    flat = np.asarray(mask, dtype=np.uint8).ravel()
    changes = np.nonzero(np.diff(flat))[0] + 1
    boundaries = np.concatenate([[0], changes, [flat.size]])
    counts = np.diff(boundaries).tolist()
    if flat.size and flat[0] == 1:
        counts = [0] + counts
    return [int(c) for c in counts]


def rle_decode(counts: list[int], shape: tuple[int, int]) -> np.ndarray:
    flat = np.zeros(shape[0] * shape[1], dtype=bool)
    pos = 0
    val = False
    for c in counts:
        if val:
            flat[pos:pos + c] = True
        pos += c
        val = not val
    if pos != flat.size:
        raise ValueError(f"RLE counts sum to {pos}, expected {flat.size}")
    return flat.reshape(shape)


# ---------------------------------------------------------------------------
# clip I/O

def save_clip(clip: VideoClip, clip_dir: str | Path):
    clip_dir = Path(clip_dir)
    frames_dir = clip_dir / "frames"
    frames_dir.mkdir(parents=True, exist_ok=True)
    for i, frame in enumerate(clip.frames):
        img16 = np.round(np.clip(frame, 0, 1) * 65535).astype(np.uint16)
        cv2.imwrite(str(frames_dir / f"{i:05d}.png"), cv2.cvtColor(img16, cv2.COLOR_RGB2BGR))

    pcm = np.round(np.clip(clip.audio.samples, -1, 1) * 32767).astype(np.int16)
    with wave.open(str(clip_dir / "audio.wav"), "wb") as wf:
        wf.setnchannels(clip.audio.channels)
        wf.setsampwidth(2)
        wf.setframerate(clip.audio.sample_rate)
        wf.writeframes(pcm.T.tobytes())  # interleave channels

    h, w = clip.frame_size
    ann = {
        "clip_id": clip.clip_id,
        "fps": clip.fps,
        "height": h,
        "width": w,
        "num_frames": clip.num_frames(),
        "frames": [
            [
                {
                    "instance_id": a.instance_id,
                    "class_id": a.class_id,
                    "bbox": list(a.bbox),
                    "rle": rle_encode(a.mask),
                }
                for a in frame_anns
            ]
            for frame_anns in clip.annotations
        ],
    }
    (clip_dir / "annotations.json").write_text(json.dumps(ann))


def load_clip(clip_dir: str | Path) -> VideoClip:
    clip_dir = Path(clip_dir)
    ann_path = clip_dir / "annotations.json"
    if not ann_path.exists():
        raise ClipLoadError(f"missing annotation file: {ann_path}")
    try:
        ann = json.loads(ann_path.read_text())
    except json.JSONDecodeError as e:
        raise ClipLoadError(f"corrupt annotation file {ann_path}: {e}") from e

    h, w = ann["height"], ann["width"]
    frames = []
    for i in range(ann["num_frames"]):
        path = clip_dir / "frames" / f"{i:05d}.png"
        img = cv2.imread(str(path), cv2.IMREAD_UNCHANGED)
        if img is None:
            raise ClipLoadError(f"missing or unreadable frame file: {path}")
        img = cv2.cvtColor(img, cv2.COLOR_BGR2RGB)
        frames.append((img.astype(np.float32) / 65535.0))

    wav_path = clip_dir / "audio.wav"
    if not wav_path.exists():
        raise ClipLoadError(f"missing audio file: {wav_path}")
    with wave.open(str(wav_path), "rb") as wf:
        channels = wf.getnchannels()
        rate = wf.getframerate()
        raw = wf.readframes(wf.getnframes())
    pcm = np.frombuffer(raw, dtype=np.int16).reshape(-1, channels).T
    samples = pcm.astype(np.float32) / 32767.0

    annotations = []
    for frame_anns in ann["frames"]:
        annotations.append([
            InstanceAnnotation(
                instance_id=a["instance_id"],
                class_id=a["class_id"],
                mask=rle_decode(a["rle"], (h, w)),
                bbox=tuple(a["bbox"]),
            )
            for a in frame_anns
        ])
    return VideoClip(
        clip_id=ann["clip_id"],
        frames=frames,
        fps=ann["fps"],
        annotations=annotations,
        audio=AudioTrack(samples, rate),
    )


# ---------------------------------------------------------------------------
# dataset root / manifest

def save_manifest(root: str | Path, manifest: dict):
    Path(root).mkdir(parents=True, exist_ok=True)
    (Path(root) / "manifest.json").write_text(json.dumps(manifest, indent=2))


def load_manifest(root: str | Path) -> dict:
    path = Path(root) / "manifest.json"
    if not path.exists():
        raise ClipLoadError(f"missing manifest file: {path}")
    return json.loads(path.read_text())


def clip_dir(root: str | Path, split: str, clip_id: str) -> Path:
    return Path(root) / split / clip_id


def load_split(root: str | Path, split: str) -> list[VideoClip]:
    """Load all clips of a split, skipping (and logging) clips missing either modality."""
    manifest = load_manifest(root)
    clips = []
    for entry in manifest["clips"]:
        if entry["split"] != split:
            continue
        try:
            clips.append(load_clip(clip_dir(root, split, entry["clip_id"])))
        except ClipLoadError as e:
            logger.warning("skipping clip %s: %s", entry["clip_id"], e)
    return clips
