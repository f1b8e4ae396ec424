"""Context-aware RNN-T training on partially transcribed streams."""

__version__ = "0.1.0"

from .kernels import BACKEND_NAME as KERNEL_BACKEND

__all__ = ["KERNEL_BACKEND", "__version__"]
