"""Fine-tuning seq2seq translation models against a differentiable
embedding-similarity score, with a small reverse-mode engine underneath."""

__version__ = "0.1.0"
