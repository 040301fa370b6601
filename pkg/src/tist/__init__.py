"""Semi-supervised domain adaptation for segmentation via
transformation-invariant self-training."""

__version__ = "0.1.0"
