"""Audio preprocessing: stereo downmix, log-magnitude spectrogram, and the
even temporal division of the spectrogram into per-video-frame slices.

All operations are pure functions; STFT parameters default to a 1024-sample
Hann window with hop 256 and a -80 dB floor.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .data import AudioTrack

DEFAULT_WINDOW = 1024
DEFAULT_HOP = 256
DEFAULT_DB_FLOOR = -80.0
_EPS = 1e-10


@dataclass
class Spectrogram:
    magnitudes: np.ndarray  # (F, T), log-magnitude dB, clamped at db_floor
    freq_resolution: float  # Hz per bin
    time_resolution: float  # seconds per column
    db_floor: float

    @property
    def num_bins(self) -> int:
        return self.magnitudes.shape[0]

    @property
    def num_columns(self) -> int:
        return self.magnitudes.shape[1]


@dataclass
class SpectrogramSlice:
    magnitudes: np.ndarray  # (F, T_i)
    frame_index: int
    parent_id: str = ""


def downmix(track: AudioTrack) -> AudioTrack:
    """Stereo to mono by per-sample channel mean; mono passes through unchanged."""
    if track.channels == 1:
        return track
    if track.channels == 2:
        mono = track.samples.mean(axis=0, keepdims=True)
        return AudioTrack(mono, track.sample_rate)
    raise ValueError(f"unsupported channel count {track.channels}, expected 1 or 2")


def compute_spectrogram(mono: AudioTrack, window: int = DEFAULT_WINDOW, hop: int = DEFAULT_HOP,
                        db_floor: float = DEFAULT_DB_FLOOR) -> Spectrogram:
    """Hann-windowed magnitude STFT, log-compressed as 20*log10(mag + eps), clamped below."""
    if not (window >= hop >= 1):
        raise ValueError(f"need window >= hop >= 1, got window={window}, hop={hop}")
    if mono.channels != 1:
        raise ValueError("compute_spectrogram expects mono input; call downmix first")
    x = mono.samples[0]
    if len(x) < window:
        raise ValueError(f"signal too short: {len(x)} samples < window {window}")
    n_cols = 1 + (len(x) - window) // hop
    hann = np.hanning(window)
    frames = np.stack([x[j * hop: j * hop + window] * hann for j in range(n_cols)])
    mags = np.abs(np.fft.rfft(frames, axis=1)).T  # (window//2 + 1, T)
    db = 20.0 * np.log10(mags + _EPS)
    return Spectrogram(
        magnitudes=np.maximum(db, db_floor).astype(np.float32),
        freq_resolution=mono.sample_rate / window,
        time_resolution=hop / mono.sample_rate,
        db_floor=db_floor,
    )


def slice_per_frame(spec: Spectrogram, num_frames: int, parent_id: str = "") -> list[SpectrogramSlice]:
    """Split the time axis into num_frames contiguous slices of width floor(T/num_frames);
    the remainder widens the last slice so no column is dropped."""
    if num_frames < 1:
        raise ValueError("num_frames must be >= 1")
    t = spec.num_columns
    if t < num_frames:
        raise ValueError(f"spectrogram has {t} columns, fewer than {num_frames} frames")
    w = t // num_frames
    slices = []
    for i in range(num_frames):
        start = i * w
        stop = start + w if i < num_frames - 1 else t
        slices.append(SpectrogramSlice(spec.magnitudes[:, start:stop], frame_index=i, parent_id=parent_id))
    return slices


def slice_to_fixed(sl: SpectrogramSlice, target_t: int) -> np.ndarray:
    """Linearly interpolate a slice along time to exactly target_t columns."""
    mags = sl.magnitudes
    t = mags.shape[1]
    if t == 0:
        raise ValueError("cannot resample an empty slice")
    if t == target_t:
        return mags.copy()
    if t == 1:
        return np.repeat(mags, target_t, axis=1)
    src = np.linspace(0.0, t - 1.0, target_t)
    lo = np.floor(src).astype(int)
    hi = np.minimum(lo + 1, t - 1)
    frac = src - lo
    return (mags[:, lo] * (1 - frac) + mags[:, hi] * frac).astype(mags.dtype)


def per_frame_features(track: AudioTrack, num_frames: int, target_t: int,
                       window: int = DEFAULT_WINDOW, hop: int = DEFAULT_HOP,
                       db_floor: float = DEFAULT_DB_FLOOR, parent_id: str = "") -> np.ndarray:
    """Full pipeline: downmix -> spectrogram -> per-frame slices -> fixed-size grids.

    Returns an array shaped (num_frames, F, target_t).
    """
    spec = compute_spectrogram(downmix(track), window=window, hop=hop, db_floor=db_floor)
    slices = slice_per_frame(spec, num_frames, parent_id=parent_id)
    return np.stack([slice_to_fixed(sl, target_t) for sl in slices])


def save_audio_slices(path: str | Path, spec: Spectrogram, num_frames: int):
    """Persist the per-frame slicing of a spectrogram: the full grid plus the
    header fields (F, num_frames, per-slice widths) needed to cut it back up."""
    slices = slice_per_frame(spec, num_frames)
    widths = np.array([sl.magnitudes.shape[1] for sl in slices], dtype=np.int64)
    np.savez(
        path,
        magnitudes=spec.magnitudes,
        num_bins=np.int64(spec.num_bins),
        num_frames=np.int64(num_frames),
        widths=widths,
        freq_resolution=np.float64(spec.freq_resolution),
        time_resolution=np.float64(spec.time_resolution),
        db_floor=np.float64(spec.db_floor),
    )


def load_audio_slices(path: str | Path) -> tuple[Spectrogram, list[SpectrogramSlice]]:
    with np.load(path) as z:
        spec = Spectrogram(
            magnitudes=z["magnitudes"],
            freq_resolution=float(z["freq_resolution"]),
            time_resolution=float(z["time_resolution"]),
            db_floor=float(z["db_floor"]),
        )
        num_frames = int(z["num_frames"])
    return spec, slice_per_frame(spec, num_frames)
