"""Reverse-mode differentiation over dense float64 arrays.

A Tensor wraps one numpy array plus a requires_grad flag. Primitive
operations (ops.py) compute forward values eagerly; when a Tape is active
and any input requires gradients, the freshly created output is appended
to the tape together with a VJP closure over its parents. backward()
replays the tape newest-node-first, so every node's consumers are settled
before its own VJP runs and each reachable leaf ends up with exactly one
accumulated gradient.

Tapes are single-owner: one training step, one tape, no nesting.
"""

from __future__ import annotations

import os
from typing import Callable, Iterable, Sequence

import numpy as np

CHECK_FINITE = os.environ.get("FMC_CHECK_FINITE", "1").strip() != "0"


class ShapeError(ValueError):
    """An operand shape violates an operation's contract."""


class NonFiniteError(FloatingPointError):
    """A public operation produced NaN or Inf."""


class Tensor:
    __slots__ = ("data", "requires_grad", "_parents", "_vjp")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.asarray(data, dtype=np.float64)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self._parents: tuple = ()
        self._vjp: Callable[[np.ndarray], tuple] | None = None

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self) -> str:
        grad = ", grad" if self.requires_grad else ""
        return f"Tensor(shape={tuple(self.shape)}{grad})"


_ACTIVE_TAPE: "Tape | None" = None


class Tape:
    """Ordered record of executed primitives; inputs always precede users."""

    def __init__(self):
        self.nodes: list[Tensor] = []

    def __enter__(self) -> "Tape":
        global _ACTIVE_TAPE
        if _ACTIVE_TAPE is not None:
            raise RuntimeError("a tape is already active; tapes do not nest")
        _ACTIVE_TAPE = self
        return self

    def __exit__(self, exc_type, exc, tb) -> None:
        global _ACTIVE_TAPE
        _ACTIVE_TAPE = None


def tape_active() -> bool:
    return _ACTIVE_TAPE is not None


def make_result(data: np.ndarray, parents: Sequence[Tensor], vjp, name: str) -> Tensor:
    """Wrap an op result; record it on the active tape when differentiable."""
    if CHECK_FINITE and not np.all(np.isfinite(data)):
        raise NonFiniteError(f"{name} produced a non-finite value")
    out = Tensor(data)
    tape = _ACTIVE_TAPE
    if tape is not None and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._vjp = vjp
        tape.nodes.append(out)
    return out


def backward(tape: Tape, loss: Tensor, params: Iterable[Tensor] | None = None) -> dict:
    """Accumulate d(loss)/d(leaf) for every leaf reachable from loss.

    Returns a dict keyed by tensor identity. When ``params`` is given, the
    result holds an entry for each of them, zeros for the unreachable ones.
    """
    if loss.data.size != 1:
        raise ValueError(f"loss must be scalar, got shape {tuple(loss.shape)}")
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    holders: dict[int, Tensor] = {id(loss): loss}
    for node in reversed(tape.nodes):
        gout = grads.pop(id(node), None)
        if gout is None:
            continue
        holders.pop(id(node), None)
        for parent, g in zip(node._parents, node._vjp(gout)):
            if g is None or not parent.requires_grad:
                continue
            key = id(parent)
            if key in grads:
                grads[key] = grads[key] + g
            else:
                grads[key] = g
                holders[key] = parent
    result = {holders[k]: v for k, v in grads.items() if k in holders}
    if params is not None:
        result = {p: result.get(p, np.zeros_like(p.data)) for p in params}
    return result


def grad_check(
    f: Callable[..., Tensor],
    inputs: Sequence[Tensor],
    step: float = 1e-5,
    sample: int | None = None,
    seed: int = 0,
) -> float:
    """Max relative error between tape gradients and central differences.

    Error per coordinate is |analytic - central| / max(1, |central|); the
    probe step must stay in [1e-6, 1e-3] where float64 central differences
    are trustworthy. ``sample`` limits the probed coordinates per input
    (deterministically chosen); None probes all of them.

    Probing mutates the given tensors in place (and restores them), so
    module parameters can be checked directly: f may close over a module
    whose parameters are passed as inputs and ignore its arguments.
    """
    if not (1e-6 <= step <= 1e-3):
        raise ValueError(f"step must lie in [1e-6, 1e-3], got {step}")
    inputs = list(inputs)
    saved_flags = [t.requires_grad for t in inputs]
    for t in inputs:
        t.requires_grad = True
    try:
        with Tape() as tape:
            out = f(*inputs)
        analytic = backward(tape, out, params=inputs)

        from .rng import SplitMix64

        worst = 0.0
        for i, t in enumerate(inputs):
            if not t.data.flags["C_CONTIGUOUS"]:
                t.data = np.ascontiguousarray(t.data)
            flat = t.data.reshape(-1)
            ana = np.asarray(analytic[t]).reshape(-1)
            if sample is None or flat.size <= sample:
                coords = range(flat.size)
            else:
                rng = SplitMix64(seed + 7919 * i)
                chosen = set()
                while len(chosen) < sample:
                    chosen.add(int(rng.integers(1, flat.size)[0]))
                coords = sorted(chosen)
            for j in coords:
                orig = flat[j]
                try:
                    flat[j] = orig + step
                    f_plus = f(*inputs).item()
                    flat[j] = orig - step
                    f_minus = f(*inputs).item()
                except NonFiniteError as exc:
                    raise NonFiniteError(f"{exc} while probing input {i} coordinate {j}") from None
                finally:
                    flat[j] = orig
                central = (f_plus - f_minus) / (2.0 * step)
                err = abs(ana[j] - central) / max(1.0, abs(central))
                if err > worst:
                    worst = err
        return worst
    finally:
        for t, flag in zip(inputs, saved_flags):
            t.requires_grad = flag
