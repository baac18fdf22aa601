"""Built-in invariant suite behind the `fmc selfcheck` subcommand.

Each check is self-contained, seeds its own data, and reports pass/fail
with a measured worst case. The wavelet fault hook exists so the suite
can demonstrate that it actually detects a broken filter bank.
"""

from __future__ import annotations

import numpy as np

from . import ops, wavelet
from .attention import HighFreqRefine
from .autodiff import Tensor, grad_check
from .metrics import boundary_voxels, dsc, hd95
from .rng import SplitMix64
from .ssm import ScanParams, VssmBranch, selective_scan, selective_scan_blocked
from .wavelet import dwt3, idwt3


def _random_volume(rng, shape):
    return rng.normal(shape)


def check_perfect_reconstruction(volumes: int = 100) -> tuple[bool, str]:
    rng = SplitMix64(101)
    worst = 0.0
    shapes = [(1, 4, 4, 4), (2, 8, 8, 8), (3, 6, 10, 4), (4, 16, 16, 16)]
    for i in range(volumes):
        x = _random_volume(rng, shapes[i % len(shapes)])
        err = float(np.abs(idwt3(dwt3(x)).data - x).max())
        worst = max(worst, err)
    return worst <= 1e-10, f"max |idwt3(dwt3(x)) - x| = {worst:.3e} (limit 1e-10)"


def check_energy_conservation(volumes: int = 100) -> tuple[bool, str]:
    rng = SplitMix64(202)
    worst = 0.0
    shapes = [(1, 4, 4, 4), (2, 8, 8, 8), (4, 16, 16, 16)]
    for i in range(volumes):
        x = _random_volume(rng, shapes[i % len(shapes)])
        e_in = float((x**2).sum())
        e_bands = float((dwt3(x).stacked.data ** 2).sum())
        worst = max(worst, abs(e_in - e_bands) / e_in)
    return worst <= 1e-9, f"max relative energy error = {worst:.3e} (limit 1e-9)"


def check_wavelet_linearity() -> tuple[bool, str]:
    rng = SplitMix64(303)
    x = _random_volume(rng, (2, 8, 8, 8))
    y = _random_volume(rng, (2, 8, 8, 8))
    lhs = dwt3(0.7 * x - 1.3 * y).stacked.data
    rhs = 0.7 * dwt3(x).stacked.data - 1.3 * dwt3(y).stacked.data
    err = float(np.abs(lhs - rhs).max())
    return err <= 1e-12, f"max linearity defect = {err:.3e} (limit 1e-12)"


def check_constant_high_bands() -> tuple[bool, str]:
    bands = dwt3(np.full((2, 8, 8, 8), 3.25))
    worst = max(float(np.abs(bands.band(n).data).max()) for n in wavelet.BAND_NAMES[1:])
    return worst == 0.0, f"max |high band| on constant input = {worst:.3e} (must be exactly 0)"


def _scan_oracle(u, params: ScanParams):
    # independent step-by-step recurrence, plain numpy
    delta = np.logaddexp(0.0, u @ params.step_proj.data.T + params.step_bias.data)
    bmat = u @ params.in_proj.data.T
    cmat = u @ params.read_proj.data.T
    decay = np.exp(params.decay_log.data)
    h = np.zeros(decay.shape)
    out = np.empty_like(u)
    for t in range(u.shape[0]):
        h = np.exp(-delta[t][:, None] * decay) * h + (delta[t] * u[t])[:, None] * bmat[t][None, :]
        out[t] = h @ cmat[t] + params.skip.data * u[t]
    return out


def check_scan_oracle() -> tuple[bool, str]:
    rng = SplitMix64(404)
    params = ScanParams(rng, channels=6, state_dim=4)
    u = rng.normal((256, 6))
    got = selective_scan(u, params).data
    want = _scan_oracle(u, params)
    err = float(np.abs(got - want).max())
    return err <= 1e-12, f"max |scan - sequential oracle| = {err:.3e} (limit 1e-12, L=256)"


def check_scan_blocked() -> tuple[bool, str]:
    rng = SplitMix64(505)
    params = ScanParams(rng, channels=4, state_dim=4)
    worst = 0.0
    for length, block in ((4096, 64), (65536, 256)):
        u = rng.normal((length, 4))
        seq = selective_scan(u, params).data
        blk = selective_scan_blocked(u, params, block).data
        worst = max(worst, float(np.abs(seq - blk).max()))
    return worst <= 1e-10, f"max |blocked - sequential| = {worst:.3e} (limit 1e-10, L up to 2^16)"


def check_gradients() -> tuple[bool, str]:
    rng = SplitMix64(606)
    worst = 0.0

    def sq(t):
        return ops.reduce_sum(ops.mul(t, t))

    x = Tensor(rng.normal((4, 4, 4, 4)))
    conv_w = Tensor(rng.normal((4, 2, 3, 3, 3)) * 0.4)
    checks = [
        lambda t: sq(ops.conv3d(t, conv_w, groups=2, dilation=2)),
        lambda t: sq(ops.silu(t)),
        lambda t: sq(ops.group_norm(t, 2)),
        lambda t: sq(ops.softmax_channels(t)),
        lambda t: sq(ops.group_pool(t, 2, "max")),
        lambda t: sq(ops.group_pool(t, 2, "avg")),
        lambda t: sq(idwt3(dwt3(t))),
        lambda t: sq(ops.maxpool2x(t)),
        lambda t: sq(ops.upsample_trilinear2x(t)),
    ]
    for f in checks:
        worst = max(worst, grad_check(f, [x]))
    branch = VssmBranch(SplitMix64(607), channels=3, state_dim=3)
    xb = Tensor(SplitMix64(608).normal((3, 3, 3, 3)))
    worst = max(worst, grad_check(lambda t: sq(branch(t)), [xb]))
    return worst <= 1e-4, f"max relative gradient error = {worst:.3e} (limit 1e-4)"


def check_attention_properties() -> tuple[bool, str]:
    rng = SplitMix64(707)
    block = HighFreqRefine(rng, channels=4, out_channels=4, stage_index=1)
    bands = [Tensor(rng.normal((4, 4, 4, 4))) for _ in range(7)]
    amp = block.amplify.attention_map(bands).data
    den = block.denoise.attention_map(bands).data
    in_range = bool(np.all((amp > 0) & (amp < 1)) and np.all((den > 0) & (den < 1)))
    zero_out = block([Tensor(np.zeros((4, 4, 4, 4))) for _ in range(7)])
    zeros_ok = float(np.abs(zero_out.data).max()) == 0.0
    ok = in_range and zeros_ok
    return ok, f"maps in (0,1): {in_range}; zero bands -> zero output: {zeros_ok}"


def check_metric_oracles(cases: int = 40) -> tuple[bool, str]:
    rng = SplitMix64(808)
    for i in range(cases):
        shape = (6 + int(rng.integers(1, 8)[0]), 6 + int(rng.integers(1, 8)[0]), 6)
        a = (rng.uniform(shape) < 0.35).astype(np.uint8)
        b = (rng.uniform(shape) < 0.35).astype(np.uint8)
        pa, ga = a == 1, b == 1
        inter = int(np.logical_and(pa, ga).sum())
        denom = int(pa.sum()) + int(ga.sum())
        want = 1.0 if denom == 0 else 2.0 * inter / denom
        if dsc(a, b, 1) != want:
            return False, f"dsc mismatch on case {i}"
        got = hd95(a, b, 1)
        want_h = _hd95_brute(a, b, 1)
        if got != want_h:
            return False, f"hd95 mismatch on case {i}: {got} vs {want_h}"
    return True, f"dsc and hd95 equal brute-force oracles on {cases} random mask pairs"


def _hd95_brute(pred, gt, cls, spacing=(1.0, 1.0, 1.0)):
    import math

    p = pred == cls
    g = gt == cls
    if not p.any() or not g.any():
        return None
    sp = np.asarray(spacing)
    bp = boundary_voxels(p).astype(np.float64) * sp
    bg = boundary_voxels(g).astype(np.float64) * sp
    diff = bp[:, None, :] - bg[None, :, :]
    d2 = (diff * diff).sum(axis=2)
    d_pg = np.sqrt(d2.min(axis=1))
    d_gp = np.sqrt(d2.min(axis=0))

    def rank95(vals):
        s = np.sort(vals)
        return float(s[max(1, math.ceil(0.95 * len(s))) - 1])

    return max(rank95(d_pg), rank95(d_gp))


CHECKS = [
    ("perfect-reconstruction", check_perfect_reconstruction),
    ("energy-conservation", check_energy_conservation),
    ("wavelet-linearity", check_wavelet_linearity),
    ("constant-high-bands-zero", check_constant_high_bands),
    ("scan-sequential-oracle", check_scan_oracle),
    ("scan-blocked-equivalence", check_scan_blocked),
    ("gradient-checks", check_gradients),
    ("attention-properties", check_attention_properties),
    ("metric-oracles", check_metric_oracles),
]


def run_selfcheck(inject_fault: str | None = None, out=print) -> bool:
    if inject_fault not in (None, "wavelet-tap"):
        raise ValueError(f"unknown fault {inject_fault!r}")
    if inject_fault == "wavelet-tap":
        wavelet.set_filter_fault(True)
    try:
        all_ok = True
        width = max(len(name) for name, _ in CHECKS)
        for name, fn in CHECKS:
            try:
                ok, detail = fn()
            except Exception as exc:  # a crash is a failure, not an abort
                ok, detail = False, f"raised {type(exc).__name__}: {exc}"
            all_ok &= ok
            out(f"{'PASS' if ok else 'FAIL'}  {name.ljust(width)}  {detail}")
        return all_ok
    finally:
        if inject_fault == "wavelet-tap":
            wavelet.set_filter_fault(False)
