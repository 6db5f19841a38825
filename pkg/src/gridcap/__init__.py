"""Windowed-attention image captioning at desk scale.

A small, self-contained stack: a numpy-backed autodiff core, windowed /
shifted-window multi-head attention with a global summary token, a grid
feature backbone, a refining encoder, a pre-fusion caption decoder, beam
search, cross-entropy and self-critical training, and the standard n-gram
caption metrics.
"""

from .autodiff import (
    GradTape,
    NonFiniteError,
    Parameter,
    ShapeError,
    Tensor,
    backward,
    no_grad,
)

__version__ = "0.1.0"

__all__ = [
    "Tensor",
    "Parameter",
    "GradTape",
    "ShapeError",
    "NonFiniteError",
    "backward",
    "no_grad",
    "__version__",
]
