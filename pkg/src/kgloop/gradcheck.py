"""Finite-difference gradient checking for the training losses.

Central differences in float64 against analytically computed gradients.
The relative-error metric follows the usual convention:

    err = |analytic - numeric| / max(|analytic|, |numeric|, 1e-6)

The 1e-6 denominator floor sits above the cancellation noise of central
differences on an O(1) loss (about machine_eps * |loss| / eps = 1e-11), so
coordinates whose true gradient is negligibly small do not register spurious
failures, while any real defect in a gradient large enough to influence
training still shows up far beyond the tolerance.
"""

from __future__ import annotations

from typing import Callable

import numpy as np

LossAndGrads = Callable[[dict[str, np.ndarray]], tuple[float, dict[str, np.ndarray]]]


def grad_check(
    loss_and_grads: LossAndGrads,
    params: dict[str, np.ndarray],
    eps: float = 1e-5,
    coords_per_param: int = 10,
    rng: np.random.Generator | None = None,
) -> float:
    """Return the max relative error over sampled coordinates of every param.

    `loss_and_grads` maps a parameter dict to (loss value, gradient dict);
    it must be deterministic (no dropout, no sampling) so both evaluations
    see the same function.
    """
    if rng is None:
        rng = np.random.default_rng(0)
    _, analytic = loss_and_grads(params)
    worst = 0.0
    for name in sorted(params):
        arr = params[name]
        flat_size = arr.size
        n = min(coords_per_param, flat_size)
        coords = rng.choice(flat_size, size=n, replace=False)
        for c in coords:
            idx = np.unravel_index(int(c), arr.shape)
            perturbed = {k: v.copy() for k, v in params.items()}
            perturbed[name][idx] += eps
            up, _ = loss_and_grads(perturbed)
            perturbed[name][idx] -= 2.0 * eps
            down, _ = loss_and_grads(perturbed)
            numeric = (up - down) / (2.0 * eps)
            a = float(analytic[name][idx])
            err = abs(a - numeric) / max(abs(a), abs(numeric), 1e-6)
            worst = max(worst, err)
    return worst
