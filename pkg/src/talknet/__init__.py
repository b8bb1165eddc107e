"""Non-autoregressive grapheme-to-mel synthesis with CTC-derived durations."""

__version__ = "0.1.0"
