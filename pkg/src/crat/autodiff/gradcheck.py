"""Central finite-difference oracle for the reverse-mode gradients.

The scalar checked is ``sum(r * f(inputs))`` for a fixed random projection
``r`` (accumulated in float64).  A coordinate's relative error is

    |analytic - numeric| / max(|analytic|, |numeric|, floor)

with ``floor = floor_frac * max|numeric|`` so that entries far below the
largest gradient entry do not dominate.  The analytic gradient comes from the
ordinary float32 backward pass.  The numeric side re-evaluates the forward in
float64: float32 differences at h=1e-2 are dominated by round-off, and
shrinking h only makes that worse.  Central differences at ``h`` and ``h/2``
are combined by one Richardson step, which removes the O(h^2) truncation
error that otherwise shows up on small-scale weights.

Relu masks and pooling winners are recorded at the unperturbed point and
replayed while evaluating ``f(x +- h)``, so the differences are taken on the
same linear piece that the backward pass differentiates.  How many
perturbations would have crossed a kink is reported as ``kink_crossings``.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Mapping, Optional

import numpy as np

from . import ops
from .tensor import Tensor, precision


@dataclass
class GradCheckResult:
    name: str
    max_rel_error: float
    checked: int
    kink_crossings: int = 0
    per_input: dict[str, float] = field(default_factory=dict)

    def passed(self, tol: float = 1e-3) -> bool:
        return self.checked > 0 and self.max_rel_error < tol

    def as_dict(self) -> dict:
        return {
            "name": self.name,
            "max_rel_error": self.max_rel_error,
            "checked": self.checked,
            "kink_crossings": self.kink_crossings,
            "per_input": self.per_input,
        }


def _evaluate(fn: Callable[[], Tensor], r: np.ndarray, tape: ops.BranchTape) -> float:
    prev, ops._tape = ops._tape, tape
    try:
        out = fn()
    finally:
        ops._tape = prev
    return float(np.sum(out.data.astype(np.float64) * r))


def check_gradients(
    fn: Callable[[], Tensor],
    inputs: Mapping[str, Tensor],
    *,
    h: float = 1e-2,
    seed: int = 0,
    max_coords: Optional[int] = None,
    floor_frac: float = 0.1,
    name: str = "",
) -> GradCheckResult:
    """Compare backward-pass gradients of ``fn`` against central differences.

    ``fn`` must rebuild its output from the current ``.data`` of ``inputs``.
    With ``max_coords`` set, at most that many coordinates per input are
    sampled (seeded) instead of sweeping every entry.
    """
    rng = np.random.default_rng(seed)
    for t in inputs.values():
        t.requires_grad = True
        t.grad = None
    base_tape = ops.BranchTape()
    prev, ops._tape = ops._tape, base_tape
    try:
        out = fn()
    finally:
        ops._tape = prev
    r = rng.standard_normal(out.shape)
    out.backward(r.astype(out.data.dtype))
    analytic = {k: (t.grad if t.grad is not None else np.zeros_like(t.data)).astype(np.float64) for k, t in inputs.items()}

    originals = {k: t.data for k, t in inputs.items()}
    try:
        with precision(np.float64):
            for t in inputs.values():
                t.set_data(t.data)
            return _compare(fn, inputs, analytic, r, base_tape, h, rng, max_coords, floor_frac, name)
    finally:
        for k, t in inputs.items():
            t.set_data(originals[k])


def _compare(fn, inputs, analytic, r, base_tape, h, rng, max_coords, floor_frac, name) -> GradCheckResult:
    worst = 0.0
    checked = crossings = 0
    per_input: dict[str, float] = {}
    for key, t in inputs.items():
        base = t.data.copy()
        size = base.size
        if max_coords is not None and size > max_coords:
            coords = np.sort(rng.choice(size, size=max_coords, replace=False))
        else:
            coords = np.arange(size)
        numeric = np.empty(len(coords))
        for n, c in enumerate(coords):
            diffs = []
            for step in (h, h / 2):
                vals = []
                for sign in (1.0, -1.0):
                    pert = base.copy().reshape(-1)
                    pert[c] += sign * step
                    t.set_data(pert.reshape(base.shape))
                    tape = ops.BranchTape(replay=base_tape.records)
                    vals.append(_evaluate(fn, r, tape))
                    crossings += tape.crossed > 0
                diffs.append((vals[0] - vals[1]) / (2 * step))
            t.set_data(base)
            # one Richardson step cancels the h**2 truncation term
            numeric[n] = (4 * diffs[1] - diffs[0]) / 3
        a = analytic[key].reshape(-1)[coords]
        floor = floor_frac * float(np.abs(numeric).max()) + 1e-12
        rel = np.abs(a - numeric) / np.maximum(np.maximum(np.abs(a), np.abs(numeric)), floor)
        per_input[key] = float(rel.max())
        worst = max(worst, per_input[key])
        checked += len(coords)
    return GradCheckResult(name=name, max_rel_error=worst, checked=checked, kink_crossings=crossings, per_input=per_input)
