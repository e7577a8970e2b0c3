"""Desk-scale laboratory for blind image restoration experiments.

Pieces: a small reverse-mode autodiff engine over numpy arrays, a
random-order synthetic degradation pipeline, a miniature gated U-Net
restoration model, path-integrated gradient attribution of layers,
contribution-weighted low-rank adapter planning with lossless merging,
and a training/evaluation harness. A FastAPI service wraps the core and
the CLI is a thin client over the same handlers.
"""

__version__ = "0.1.0"
