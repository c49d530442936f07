"""Hot selective-scan kernels with two interchangeable backends.

``BRAINMT_KERNELS=numpy`` forces the pure-numpy path; otherwise numba is
used when it imports. ``BRAINMT_THREADS`` caps numba's thread pool.
"""

from __future__ import annotations

import os
from types import ModuleType

import numpy as np

from brainmt.errors import ConfigurationError, NumericError

from . import _numpy

SMALL_DA_THRESHOLD = _numpy.SMALL_DA

_BACKENDS: dict[str, ModuleType] = {"numpy": _numpy}

try:
    from . import _numba

    _BACKENDS["numba"] = _numba
except ImportError:  # pragma: no cover - numba is a declared dependency
    pass


def _select() -> str:
    requested = os.environ.get("BRAINMT_KERNELS", "").strip().lower()
    if requested:
        if requested not in ("numpy", "numba"):
            raise ConfigurationError(f"BRAINMT_KERNELS must be 'numpy' or 'numba', got {requested!r}")
        if requested not in _BACKENDS:
            raise ConfigurationError("BRAINMT_KERNELS=numba requested but numba is not importable")
        return requested
    return "numba" if "numba" in _BACKENDS else "numpy"


BACKEND = _select()


def _apply_thread_cap() -> None:
    cap = os.environ.get("BRAINMT_THREADS")
    if not cap or "numba" not in _BACKENDS:
        return
    import numba

    numba.set_num_threads(max(1, min(int(cap), numba.config.NUMBA_NUM_THREADS)))


_apply_thread_cap()


def available_backends() -> list[str]:
    return sorted(_BACKENDS)


def get_backend(name: str | None = None) -> ModuleType:
    name = name or BACKEND
    try:
        return _BACKENDS[name]
    except KeyError:
        raise ConfigurationError(f"unknown kernel backend {name!r}") from None


def _check_finite(y: np.ndarray) -> None:
    ok = np.isfinite(y)
    if not ok.all():
        t = int(np.argmin(ok.all(axis=(0, 2))))
        raise NumericError(f"selective scan produced a non-finite state at timestep {t}")


def scan_forward(u, delta, A, B, C, backend: str | None = None) -> np.ndarray:
    """y[b, t, c] = sum_n C[b, t, n] h[b, t, c, n] for the ZOH-discretized
    recurrence h_t = exp(delta*a) h_{t-1} + expm1(delta*a)/a * B_t u_t, h_0 = 0."""
    y = get_backend(backend).scan_forward(u, delta, A, B, C)
    _check_finite(y)
    return y


def scan_backward(u, delta, A, B, C, gy, backend: str | None = None):
    """Adjoints (du, ddelta, dA, dB, dC); states are recomputed, not stored."""
    return get_backend(backend).scan_backward(u, delta, A, B, C, gy)
