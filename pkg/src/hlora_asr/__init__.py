"""Multilingual CTC recognition with hierarchical shared/per-language LoRA experts."""
from .kernels import BACKEND

__version__ = "0.1.0"
__all__ = ["BACKEND", "__version__"]
