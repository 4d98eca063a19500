"""pqpack: pack many small neural networks into one shared pair of
product-quantization codebooks, optimize the compressed models, and run
them from a fixed-size memory arena."""

from ._kernels import BACKEND as kernel_backend

__version__ = "0.1.0"
__all__ = ["kernel_backend", "__version__"]
