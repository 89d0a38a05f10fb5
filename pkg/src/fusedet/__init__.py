"""fusedet: a desk-scale lab for grafting frozen language-model hidden states
onto a grounding detector through a gated, zero-initialized cross-attention
adapter.

Everything runs on numpy float64 with a hand-rolled reverse-mode tape, so each
claim made by the higher-level modules (identity at init, gate algebra, FLOP
accounting, training behavior) can be checked exactly.
"""

from .tensor import (
    Tensor,
    FlopsMeter,
    DimensionError,
    ConfigurationError,
    UsageError,
    DegenerateInputError,
    NumericsError,
)

__version__ = "0.1.0"

__all__ = [
    "Tensor",
    "FlopsMeter",
    "DimensionError",
    "ConfigurationError",
    "UsageError",
    "DegenerateInputError",
    "NumericsError",
    "__version__",
]
