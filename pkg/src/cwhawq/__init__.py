"""Channel-wise Hessian-aware mixed-precision quantization."""

__version__ = "0.1.0"
