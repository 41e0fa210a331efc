"""Central finite-difference gradient checking."""

from __future__ import annotations

from typing import Callable

import numpy as np

from petrecon.autodiff.tensor import Tensor, backward

MAX_DENSE_COORDS = 256


def relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-8) -> float:
    """``max_i |a_i - n_i| / max(|a_i|, |n_i|, floor * scale)``.

    ``scale`` is the largest gradient magnitude seen, so coordinates whose true
    gradient is zero do not turn roundoff into huge relative errors.
    """
    a = np.asarray(analytic, dtype=np.float64).ravel()
    n = np.asarray(numeric, dtype=np.float64).ravel()
    scale = max(np.abs(a).max(initial=0.0), np.abs(n).max(initial=0.0), 1e-300)
    denom = np.maximum(np.maximum(np.abs(a), np.abs(n)), floor * scale)
    return float(np.max(np.abs(a - n) / denom, initial=0.0))


def grad_check(fn: Callable[[Tensor], Tensor], point: Tensor | np.ndarray,
               step: float = 1e-3, max_coords: int = MAX_DENSE_COORDS,
               seed: int = 0) -> float:
    """Max relative error between reverse-mode and central-difference gradients.

    ``fn`` maps a tensor to a scalar tensor.  Tensors with more than
    ``max_coords`` entries are checked on that many random coordinates.
    """
    if step <= 0:
        raise ValueError("step must be positive")
    base = np.array(point.data if isinstance(point, Tensor) else point, dtype=np.float64)
    x = Tensor(base.copy(), requires_grad=True)
    analytic = backward(fn(x)).of(x).ravel()

    flat = base.ravel()
    if flat.size > max_coords:
        coords = np.sort(np.random.default_rng(seed).choice(flat.size, max_coords, replace=False))
    else:
        coords = np.arange(flat.size)
    numeric = np.empty(coords.size)
    for j, i in enumerate(coords):
        orig = flat[i]
        flat[i] = orig + step
        fp = fn(Tensor(base.copy())).item()
        flat[i] = orig - step
        fm = fn(Tensor(base.copy())).item()
        flat[i] = orig
        numeric[j] = (fp - fm) / (2.0 * step)
    return relative_error(analytic[coords], numeric)


def param_grad_check(loss_fn: Callable[[], Tensor], params, step: float = 1e-3,
                     max_coords: int = MAX_DENSE_COORDS, seed: int = 0) -> float:
    """Like ``grad_check`` but perturbs Parameters in place (``loss_fn`` re-reads them)."""
    params = list(params)
    grads = backward(loss_fn(), params)
    analytic, numeric = [], []
    rng = np.random.default_rng(seed)
    total = sum(p.size for p in params)
    budget = min(total, max_coords)
    for p in params:
        flat = p.data.ravel()
        n = max(1, round(budget * p.size / total)) if total > max_coords else p.size
        coords = np.sort(rng.choice(p.size, min(n, p.size), replace=False))
        g = grads[p.name].ravel()
        for i in coords:
            orig = flat[i]
            flat[i] = orig + step
            fp = loss_fn().item()
            flat[i] = orig - step
            fm = loss_fn().item()
            flat[i] = orig
            analytic.append(g[i])
            numeric.append((fp - fm) / (2.0 * step))
    return relative_error(np.array(analytic), np.array(numeric))
