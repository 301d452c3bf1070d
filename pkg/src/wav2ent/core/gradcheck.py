"""Central-difference gradient verification."""

from __future__ import annotations

import numpy as np

from .tensor import no_grad


def grad_check(f, params, eps: float = 1e-3, n_coords: int = 50, seed: int = 0) -> float:
    """Largest relative error between backprop and central differences.

    ``f`` takes no arguments and returns a scalar Tensor built from
    ``params``; it must be deterministic. At least ``n_coords`` coordinates
    are sampled across all parameters (every coordinate when there are
    fewer). Use float64 parameters for tight tolerances.
    """
    params = list(params)
    for p in params:
        p.zero_grad()
    loss = f()
    loss.backward()
    analytic = [p.grad.copy() for p in params]

    coords = [(i, j) for i, p in enumerate(params) for j in range(p.data.size)]
    rng = np.random.default_rng(seed)
    if len(coords) > n_coords:
        pick = rng.choice(len(coords), size=n_coords, replace=False)
        coords = [coords[k] for k in sorted(pick)]

    worst = 0.0
    with no_grad():
        for i, j in coords:
            flat = params[i].data.reshape(-1)
            orig = flat[j].copy()
            flat[j] = orig + eps
            up = float(f().item())
            flat[j] = orig - eps
            down = float(f().item())
            flat[j] = orig
            numeric = (up - down) / (2 * eps)
            a = float(analytic[i].reshape(-1)[j])
            err = abs(a - numeric) / max(abs(a), abs(numeric), 1e-8)
            worst = max(worst, err)
    return worst
