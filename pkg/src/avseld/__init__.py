"""Audio-visual SELD with cross-modal distillation and multi-level feature mixing."""

__version__ = "0.1.0"
