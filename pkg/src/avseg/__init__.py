"""Audio-fused video instance segmentation with crossover learning, exercised
on a deterministic synthetic audio-video dataset."""

__version__ = "0.1.0"
