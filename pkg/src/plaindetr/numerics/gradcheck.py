"""Central finite-difference gradient checking."""
from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from ..errors import NumericsError
from .tensor import Tensor, backward, no_grad


def finite_diff_check(
    f: Callable[[], Tensor],
    params: Sequence[Tensor],
    h: float = 1e-5,
    coords: Sequence[tuple[int, int]] | None = None,
) -> float:
    """Max over coordinates of |analytic - numeric| / max(1, |analytic|).

    ``f`` rebuilds the scalar from the current values of ``params``. ``coords``
    restricts the probe to ``(param_index, flat_index)`` pairs.
    """
    for p in params:
        p.zero_grad()
    loss = f()
    backward(loss)
    analytic = [p.grad.copy() for p in params]
    if coords is None:
        coords = [(i, j) for i, p in enumerate(params) for j in range(p.size)]

    worst = 0.0
    for i, j in coords:
        flat = params[i].data.reshape(-1)
        orig = flat[j]
        with no_grad():
            flat[j] = orig + h
            up = f().item()
            flat[j] = orig - h
            down = f().item()
        flat[j] = orig
        if not (np.isfinite(up) and np.isfinite(down)):
            label = params[i].name or f"param[{i}]"
            raise NumericsError(f"non-finite objective probing {label} at flat index {j}")
        numeric = (up - down) / (2.0 * h)
        a = analytic[i].reshape(-1)[j]
        worst = max(worst, abs(a - numeric) / max(1.0, abs(a)))
    return worst


def sample_coords(params: Sequence[Tensor], n: int, rng: np.random.Generator) -> list[tuple[int, int]]:
    """Uniformly sample ``n`` distinct coordinates across a parameter list."""
    sizes = np.array([p.size for p in params])
    total = int(sizes.sum())
    picks = rng.choice(total, size=min(n, total), replace=False)
    offsets = np.concatenate([[0], np.cumsum(sizes)])
    out = []
    for flat in sorted(int(x) for x in picks):
        i = int(np.searchsorted(offsets, flat, side="right") - 1)
        out.append((i, flat - int(offsets[i])))
    return out
