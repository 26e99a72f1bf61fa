"""Finite-difference gradient checking for the autodiff primitives.

The check runs the op in float64, projects its output onto a fixed random
cotangent to obtain a scalar, and compares the analytic gradient of that
scalar against central differences per input element.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from .errors import ConfigError
from .tensor import Tensor, mul, tsum


@dataclass(frozen=True)
class GradCheckReport:
    op_name: str
    max_rel_error: float
    n_checked: int


def gradcheck(
    op_name: str,
    fn: Callable[..., Tensor],
    inputs: Sequence[np.ndarray],
    eps: float = 1e-5,
    abs_floor: float = 1e-4,
    seed: int = 0,
) -> GradCheckReport:
    """Compare analytic gradients of ``fn`` against central differences.

    ``fn`` maps Tensors to a Tensor of any shape; ``inputs`` are the arrays
    to differentiate with respect to (evaluated in float64).  The relative
    error per element is |ga - gn| / max(|ga|, |gn|, abs_floor); the floor
    sits above the central-difference noise (about 1e-16 * |f| / eps, so
    ~1e-9 absolute here), which would otherwise swamp near-zero gradients.
    """
    if not (1e-6 <= eps <= 1e-3):
        raise ConfigError(f"gradcheck eps must lie in [1e-6, 1e-3], got {eps}")

    arrays = [np.asarray(a, dtype=np.float64) for a in inputs]

    # fixed cotangent so the scalar projection is identical across evals
    out_shape = fn(*[Tensor(a) for a in arrays]).shape
    cotangent = np.random.default_rng(seed).standard_normal(out_shape)

    tensors = [Tensor(a, requires_grad=True) for a in arrays]
    loss = tsum(mul(fn(*tensors), cotangent))
    loss.backward()
    analytic = [t.grad.copy() for t in tensors]

    max_rel = 0.0
    n_checked = 0
    for i, base in enumerate(arrays):
        flat = base.reshape(-1)
        for j in range(flat.size):
            orig = flat[j]
            flat[j] = orig + eps
            f_plus = float((fn(*[Tensor(a) for a in arrays]).data * cotangent).sum())
            flat[j] = orig - eps
            f_minus = float((fn(*[Tensor(a) for a in arrays]).data * cotangent).sum())
            flat[j] = orig
            numeric = (f_plus - f_minus) / (2.0 * eps)
            ga = analytic[i].reshape(-1)[j]
            rel = abs(ga - numeric) / max(abs(ga), abs(numeric), abs_floor)
            max_rel = max(max_rel, rel)
            n_checked += 1

    return GradCheckReport(op_name=op_name, max_rel_error=max_rel, n_checked=n_checked)
