"""Generative multivariate time-series classification.

Pipeline: hierarchical series encoding (self-supervised + supervised),
dual-view alignment of series embeddings with label text, hybrid prompt
assembly, and label generation through a LoRA-adapted causal language model.
"""

__version__ = "0.1.0"
