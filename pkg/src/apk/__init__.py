"""Action-knowledge prompted image-text retrieval on a miniature CLIP."""

__version__ = "0.1.0"
