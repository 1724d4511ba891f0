"""semcal-export: writes semcal interchange files from a pretrained
captioner and text encoders (or a deterministic synthetic stand-in)."""

__version__ = "0.1.0"
