"""Vision-language refinement of image encoders with joint contrastive, matching and language-modeling losses."""

__version__ = "0.1.0"
