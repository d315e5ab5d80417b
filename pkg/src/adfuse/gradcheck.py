"""Finite-difference gradient checking.

The computation is re-run in float64 (f32 central differences are too noisy
for a 1e-4 gate) with h=1e-3. For large parameter tensors a seeded subset of
coordinates is probed; small tensors are checked exhaustively.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .autodiff import GradTape, Tensor
from .errors import NonFiniteError

DEFAULT_H = 1e-3
REL_EPS = 1e-8


@dataclass
class GradCheckResult:
    max_rel_error: float
    per_param: dict = field(default_factory=dict)
    worst_param: str = ""
    worst_coord: tuple = ()

    def ok(self, tol: float = 1e-4) -> bool:
        return self.max_rel_error < tol


def _rel_err(a, fd):
    return abs(a - fd) / max(abs(a), abs(fd), REL_EPS)


def grad_check(fn, params, h: float = DEFAULT_H, max_coords: int | None = None, seed: int = 0) -> GradCheckResult:
    """Compare analytic and central-difference gradients of a scalar function.

    fn(tensors: dict[str, Tensor]) -> scalar Tensor, pure in its inputs.
    params maps names to arrays; each is promoted to float64.
    max_coords limits probed coordinates per tensor (seeded choice);
    None checks every coordinate.
    """
    tensors = {k: Tensor(np.asarray(v, dtype=np.float64), requires_grad=True) for k, v in params.items()}

    with GradTape() as tape:
        loss = fn(tensors)
        if not np.isfinite(loss.data).all():
            raise NonFiniteError(f"grad check aborted: loss is {loss.data!r} at base point")
        tape.backward(loss)

    rng = np.random.default_rng(seed)
    result = GradCheckResult(0.0)
    for name, t in tensors.items():
        analytic = t.grad if t.grad is not None else np.zeros_like(t.data)
        flat = t.data.reshape(-1)
        n = flat.size
        if max_coords is not None and n > max_coords:
            coords = rng.choice(n, size=max_coords, replace=False)
        else:
            coords = range(n)
        worst = 0.0
        for c in coords:
            orig = flat[c]
            flat[c] = orig + h
            f_plus = float(fn(tensors).data)
            flat[c] = orig - h
            f_minus = float(fn(tensors).data)
            flat[c] = orig
            if not (np.isfinite(f_plus) and np.isfinite(f_minus)):
                raise NonFiniteError(f"grad check aborted: non-finite loss perturbing {name}[{c}]")
            fd = (f_plus - f_minus) / (2.0 * h)
            err = _rel_err(float(analytic.reshape(-1)[c]), fd)
            if err > worst:
                worst = err
            if err > result.max_rel_error:
                result.max_rel_error = err
                result.worst_param = name
                result.worst_coord = np.unravel_index(c, t.data.shape)
        result.per_param[name] = worst
    return result
