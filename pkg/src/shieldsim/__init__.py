"""Functional and timing model of a fault-tolerant systolic accelerator.

Modules
-------
numerics        element types, bit patterns and protection masks
ecc             SEC-DED codes and the protected register file
guarded_memory  checksum-guarded scratchpad/accumulator blocks
systolic        array GEMM, shield checksums, verifier/corrector, timing
nonlinear       invariant-checked and redundant nonlinear operators
faults          seeded transient and stuck-at fault plans
campaign        trial engine, campaigns and bit-class sensitivity sweeps
"""
from .errors import AllocationError, ConfigurationError
from .numerics import DType

__version__ = "0.1.0"

__all__ = ["AllocationError", "ConfigurationError", "DType", "__version__"]
