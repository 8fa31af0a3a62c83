"""Multimodal contrastive pretraining on retinal vessel graphs and tabular records."""

__version__ = "0.1.0"
