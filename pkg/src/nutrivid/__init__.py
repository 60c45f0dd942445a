"""Process-aware dish nutrition estimation from cooking-video embeddings."""

__version__ = "0.1.0"
