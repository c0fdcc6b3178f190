"""Cross-modal signal-to-image reconstruction with dual variational encoders
and an adversarially trained decoder."""

__version__ = "0.1.0"
