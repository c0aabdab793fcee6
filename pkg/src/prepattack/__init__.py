"""Preprocessor-aware hard-label attacks and preprocessor extraction."""

from .preprocessing import (
    CenterCrop,
    Jpeg,
    PreprocessingPipeline,
    Quantize,
    Resize,
    from_config,
    identity,
    load_config,
)

__version__ = "0.1.0"

__all__ = [
    "CenterCrop",
    "Jpeg",
    "PreprocessingPipeline",
    "Quantize",
    "Resize",
    "from_config",
    "identity",
    "load_config",
]
