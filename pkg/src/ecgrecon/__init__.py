"""Pathology-aware contrastive pretraining and conditioned precordial-lead
reconstruction from reduced-lead ECG (I, II, V2 -> V1, V3-V6)."""

__version__ = "0.1.0"
