"""
Verify

Nested-loop reference attention and the oracle / gradient-check harness.
"""

from .harness import gradcheck, verify_kernels
from .oracles import oracle_axial, oracle_global_2d, oracle_local_2d, oracle_ps_2d

__all__ = [
    "gradcheck",
    "verify_kernels",
    "oracle_global_2d",
    "oracle_local_2d",
    "oracle_ps_2d",
    "oracle_axial",
]
