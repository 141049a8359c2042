"""Global floating-point mode.

One mode is active per run: 64-bit for verification work (finite-difference
checks, bit-reproducible reports) and 32-bit as a cheaper option for long
training runs. Everything that allocates float storage goes through
``active_dtype()`` so the mode is consistent across tensors, gradients and
optimizer state.
"""
from __future__ import annotations

import contextlib

import numpy as np

_ACTIVE = {"dtype": np.float64}


def set_precision(bits: int) -> None:
    if bits == 64:
        _ACTIVE["dtype"] = np.float64
    elif bits == 32:
        _ACTIVE["dtype"] = np.float32
    else:
        raise ValueError(f"precision must be 32 or 64, got {bits!r}")


def precision_bits() -> int:
    return 32 if _ACTIVE["dtype"] is np.float32 else 64


def active_dtype():
    return _ACTIVE["dtype"]


@contextlib.contextmanager
def precision(bits: int):
    """Temporarily switch the global mode (used by tests)."""
    old = precision_bits()
    set_precision(bits)
    try:
        yield
    finally:
        set_precision(old)
