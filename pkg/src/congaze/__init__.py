"""Self-supervised gaze representation learning with subject-conditional contrastive training."""

__version__ = "0.1.0"
