"""Kronecker weight templates and per-layer scalers for initializing vision transformers of any size."""

__version__ = "0.1.0"

from .errors import (  # noqa: E402
    BadMagicError,
    ChecksumError,
    FormatError,
    IncompatibleError,
    InputError,
    ShapeError,
    StateError,
    TrainingError,
    TruncatedError,
    VersionError,
    WaveError,
)
from .kron import compose_weight, grad_scalers, grad_templates, kron_product  # noqa: E402
from .learngene import ScalerSet, TemplateBank  # noqa: E402
from .vit import ModelConfig  # noqa: E402

__all__ = [
    "BadMagicError", "ChecksumError", "FormatError", "IncompatibleError", "InputError",
    "ShapeError", "StateError", "TrainingError", "TruncatedError", "VersionError", "WaveError",
    "compose_weight", "grad_scalers", "grad_templates", "kron_product",
    "ScalerSet", "TemplateBank", "ModelConfig",
]
