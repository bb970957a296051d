"""Desk-scale toolkit for self-generated audio-text alignment datasets.

Subpackages cover the full pipeline: structured description grammar,
prompt pool management, generation backends (mock and remote), dataset
forging into sharded JSONL, perplexity-based mismatch probing, a toy
numpy modality adapter with exact gradients, and evaluation metrics.
"""

__version__ = "0.1.0"
