"""ScaleVLAD multimodal fusion with a shifted clustering loss."""

__version__ = "0.1.0"
