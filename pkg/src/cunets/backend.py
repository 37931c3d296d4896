"""Selection of the numeric kernel backend.

Every hot kernel (convolutions, pooling, Hausdorff scans) ships in two
implementations: a plain-numpy one built on BLAS GEMM and slicing, and a
numba ``@njit`` one built on explicit loops.  The environment variable
``CUNETS_BACKEND`` selects between them:

``numpy``
    Force the numpy path everywhere.  Always available.
``numba``
    Force the numba path everywhere.  Raises if numba cannot be imported.
``auto`` (default)
    Per-kernel choice: GEMM-shaped kernels (convolutions) stay on numpy,
    where single-core BLAS wins by a wide margin; scan-shaped kernels
    (max-pool bookkeeping, Hausdorff) go to numba when it is installed.
    ``benchmarks/bench_kernels.py`` reproduces the measurements behind
    this split.
"""

from __future__ import annotations

import os

from .errors import ConfigurationError

ENV_VAR = "CUNETS_BACKEND"

# Kernels whose "auto" preference is numba.  Convolutions are absent on
# purpose: their arithmetic is GEMM and BLAS beats njit loops.
_AUTO_NUMBA = frozenset({"maxpool", "hausdorff"})

_numba_checked = False
_numba_ok = False


def numba_available() -> bool:
    """True when numba imports cleanly (checked once per process)."""
    global _numba_checked, _numba_ok
    if not _numba_checked:
        try:
            import numba  # noqa: F401

            _numba_ok = True
        except ImportError:
            _numba_ok = False
        _numba_checked = True
    return _numba_ok


def backend_setting() -> str:
    """The raw ``CUNETS_BACKEND`` value (defaults to ``auto``)."""
    value = os.environ.get(ENV_VAR, "auto").strip().lower()
    if value not in ("auto", "numpy", "numba"):
        raise ConfigurationError(
            f"{ENV_VAR}={value!r}: expected one of auto, numpy, numba"
        )
    return value


def resolve(kernel: str) -> str:
    """Return ``"numpy"`` or ``"numba"`` for one kernel family."""
    setting = backend_setting()
    if setting == "numpy":
        return "numpy"
    if setting == "numba":
        if not numba_available():
            raise ConfigurationError(
                f"{ENV_VAR}=numba but numba is not importable"
            )
        return "numba"
    if kernel in _AUTO_NUMBA and numba_available():
        return "numba"
    return "numpy"
