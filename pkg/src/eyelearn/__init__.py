"""Artifact-tolerant, clustering-guided contrastive embedding learning for retinal thickness maps."""

__version__ = "0.1.0"
