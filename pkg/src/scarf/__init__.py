"""Modality-agnostic deformable attention, the Scarf Neck, modality-dropout batching
and a modality-incomplete detection benchmark, on a small numpy autodiff core."""

__version__ = "0.1.0"
