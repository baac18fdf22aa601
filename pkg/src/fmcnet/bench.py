"""Scan throughput benchmark (`fmc bench-scan`).

Times the sequential selective scan and its blocked parallel-prefix
variant over a sweep of sequence lengths, verifies the two agree, and,
when both kernel backends are importable, times the inactive backend's
sequential kernel too so the numba and numpy paths can be compared
side by side.
"""

from __future__ import annotations

import time

import numpy as np

from . import backend
from .rng import SplitMix64
from .ssm import ScanParams


def _load_other_backend():
    if backend.BACKEND == "numba":
        from . import kernels_numpy as other

        return other, "numpy"
    try:
        from . import kernels_numba as other
    except Exception:
        return None, None
    return other, "numba"


def _best_time(fn, repeats: int) -> float:
    # min over repeats: the stablest estimator under scheduler noise
    times = []
    for _ in range(repeats):
        t0 = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t0)
    return float(min(times))


def run_scan_bench(lengths, channels: int = 8, repeats: int = 3, block: int = 64, compare_backends: bool = True):
    """Returns one row per length with timings (seconds) and verification error."""
    rng = SplitMix64(99)
    params = ScanParams(rng, channels=channels, state_dim=8)
    other, other_name = _load_other_backend() if compare_backends else (None, None)
    rows = []
    prev_seq = None
    for length in lengths:
        u = rng.normal((length, channels))
        delta = np.logaddexp(0.0, u @ params.step_proj.data.T + params.step_bias.data)
        bmat = u @ params.in_proj.data.T
        cmat = u @ params.read_proj.data.T
        decay = np.exp(params.decay_log.data)
        skip = params.skip.data
        y_seq = np.empty_like(u)
        h = np.empty((length, channels, 8))
        y_blk = np.empty_like(u)

        backend.scan_fwd(u, delta, bmat, cmat, decay, skip, y_seq, h)  # warm/JIT
        t_seq = _best_time(lambda: backend.scan_fwd(u, delta, bmat, cmat, decay, skip, y_seq, h), repeats)
        backend.scan_blocked(u, delta, bmat, cmat, decay, skip, block, y_blk)
        t_blk = _best_time(lambda: backend.scan_blocked(u, delta, bmat, cmat, decay, skip, block, y_blk), repeats)
        err = float(np.abs(y_seq - y_blk).max())

        t_other = None
        if other is not None:
            y_other = np.empty_like(u)
            other.scan_fwd(u, delta, bmat, cmat, decay, skip, y_other, h)
            t_other = _best_time(
                lambda: other.scan_fwd(u, delta, bmat, cmat, decay, skip, y_other, h), repeats
            )
        row = {
            "length": int(length),
            "seq_seconds": t_seq,
            "blocked_seconds": t_blk,
            "blocked_vs_seq_max_err": err,
            "ratio_vs_prev": (t_seq / prev_seq) if prev_seq else None,
            "backend": backend.BACKEND,
            "other_backend": other_name,
            "other_seq_seconds": t_other,
        }
        rows.append(row)
        prev_seq = t_seq
    return rows


def format_table(rows) -> str:
    header = (
        f"{'L':>8}  {'seq_ms':>10}  {'blocked_ms':>10}  {'max_err':>10}  {'ratio':>6}"
    )
    other = rows[0]["other_backend"] if rows else None
    if other:
        header += f"  {other + '_seq_ms':>14}"
    lines = [header]
    for r in rows:
        ratio = f"{r['ratio_vs_prev']:.2f}" if r["ratio_vs_prev"] else "-"
        line = (
            f"{r['length']:>8}  {r['seq_seconds'] * 1e3:>10.3f}  {r['blocked_seconds'] * 1e3:>10.3f}  "
            f"{r['blocked_vs_seq_max_err']:>10.2e}  {ratio:>6}"
        )
        if other:
            line += f"  {r['other_seq_seconds'] * 1e3:>14.3f}"
        lines.append(line)
    return "\n".join(lines)
