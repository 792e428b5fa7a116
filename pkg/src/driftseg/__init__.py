"""driftseg: toy attention-equipped instance segmentation on synthetic
ocean-debris scenes, built on a minimal reverse-mode autodiff core."""

__version__ = "0.1.0"
