"""Kernel backend selection.

The hot numeric kernels (3-D convolution, selective scan, boundary
distances) exist twice: a numba @njit implementation and a pure-numpy
fallback. ``FMC_BACKEND=numba|numpy`` forces one; by default numba is used
when it imports cleanly. Both backends keep the same per-element
accumulation order, so results agree bit-for-bit where the contracts
require it (see tests).

``FMC_THREADS`` caps intra-op parallelism. The default of 1 keeps CI
bit-stable trivially; values > 1 enable numba prange variants that
parallelize over independent output slices only, which preserves the
per-output reduction order and therefore bit-stability.
"""

from __future__ import annotations

import os


def _numba_available() -> bool:
    try:
        import numba  # noqa: F401
    except Exception:
        return False
    return True


def _pick_backend() -> str:
    forced = os.environ.get("FMC_BACKEND", "").strip().lower()
    if forced == "":
        return "numba" if _numba_available() else "numpy"
    if forced not in ("numba", "numpy"):
        raise ValueError(f"FMC_BACKEND must be 'numba' or 'numpy', got {forced!r}")
    if forced == "numba" and not _numba_available():
        raise ImportError("FMC_BACKEND=numba but numba is not importable")
    return forced


def _thread_count() -> int:
    raw = os.environ.get("FMC_THREADS", "1").strip()
    try:
        n = int(raw)
    except ValueError:
        raise ValueError(f"FMC_THREADS must be an integer, got {raw!r}") from None
    return max(1, n)


BACKEND = _pick_backend()
THREADS = _thread_count()

if BACKEND == "numba":
    from . import kernels_numba as _k

    if THREADS > 1:
        import numba

        numba.set_num_threads(min(THREADS, numba.config.NUMBA_NUM_THREADS))
        conv3d_fwd = _k.conv3d_fwd_par
        conv3d_bwd_x = _k.conv3d_bwd_x_par
        conv3d_bwd_w = _k.conv3d_bwd_w_par
    else:
        conv3d_fwd = _k.conv3d_fwd
        conv3d_bwd_x = _k.conv3d_bwd_x
        conv3d_bwd_w = _k.conv3d_bwd_w
    scan_fwd = _k.scan_fwd
    scan_bwd = _k.scan_bwd
    scan_blocked = _k.scan_blocked
    directed_nn_dists = _k.directed_nn_dists
else:
    from . import kernels_numpy as _k

    conv3d_fwd = _k.conv3d_fwd
    conv3d_bwd_x = _k.conv3d_bwd_x
    conv3d_bwd_w = _k.conv3d_bwd_w
    scan_fwd = _k.scan_fwd
    scan_bwd = _k.scan_bwd
    scan_blocked = _k.scan_blocked
    directed_nn_dists = _k.directed_nn_dists
