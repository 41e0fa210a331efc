"""Adam / SGD updates, Langevin noise injection, the Gaussian weight prior and
posterior averaging of network outputs.

The Langevin variant used here is "optimizer step, then noise": after the
deterministic Adam (or SGD) update every parameter receives independent
``N(0, (kappa * sqrt(eps))**2)`` noise, ``eps`` being the step size.  With
``kappa = 0`` the run is exactly the deterministic optimizer.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from petrecon.errors import InputError, NumericalError

NOISE_MODES = ("param", "grad")


@dataclass
class OptimState:
    step_size: float = 1e-4
    weight_prior: float = 0.0
    noise_scale: float = 0.0
    method: str = "adam"
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    noise_mode: str = "param"
    seed: int = 0
    t: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    rng: np.random.Generator | None = None

    def __post_init__(self):
        if not self.step_size > 0:
            raise InputError("step size must be positive")
        if self.weight_prior < 0 or self.noise_scale < 0:
            raise InputError("weight prior and noise scale must be >= 0")
        if self.method not in ("adam", "sgd"):
            raise InputError(f"unknown optimizer {self.method!r}")
        if self.noise_mode not in NOISE_MODES:
            raise InputError(f"unknown noise mode {self.noise_mode!r}")
        if self.rng is None:
            # tagged so the stream never coincides with a simulation stream
            self.rng = np.random.default_rng(np.random.SeedSequence([int(self.seed), 0x51D]))


def _check_finite(grads):
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise NumericalError(f"non-finite gradient for parameter {name!r}")


def adam_step(params, grads: dict[str, np.ndarray], state: OptimState) -> None:
    """Bias-corrected Adam update in place (``params`` iterates Parameters)."""
    _check_finite(grads)
    state.t += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1**state.t
    c2 = 1.0 - b2**state.t
    for p in params:
        g = grads[p.name]
        if g.shape != p.shape:
            raise InputError(f"gradient shape {g.shape} != parameter {p.name} {p.shape}")
        m = state.m.get(p.name)
        v = state.v.get(p.name)
        m = (1 - b1) * g if m is None else b1 * m + (1 - b1) * g
        v = (1 - b2) * g * g if v is None else b2 * v + (1 - b2) * g * g
        state.m[p.name], state.v[p.name] = m, v
        p.data = p.data - state.step_size * (m / c1) / (np.sqrt(v / c2) + state.eps)


def sgd_step(params, grads: dict[str, np.ndarray], state: OptimState) -> None:
    _check_finite(grads)
    state.t += 1
    for p in params:
        p.data = p.data - state.step_size * grads[p.name]


def optimizer_step(params, grads, state: OptimState) -> None:
    if state.method == "adam":
        adam_step(params, grads, state)
    else:
        sgd_step(params, grads, state)


def injected_noise_std(state: OptimState) -> float:
    return state.noise_scale * math.sqrt(state.step_size)


def sgld_inject(params, state: OptimState) -> None:
    """Add ``N(0, (kappa sqrt(eps))^2)`` to every parameter, in parameter order."""
    if state.noise_scale == 0.0:
        return
    std = injected_noise_std(state)
    for p in params:
        p.data = p.data + std * state.rng.standard_normal(p.shape)


def gradient_noise(params, state: OptimState) -> dict[str, np.ndarray]:
    """Noise for ``noise_mode="grad"``: enters the optimizer moments.

    Scaled to ``kappa / sqrt(eps)`` so that a plain SGD step of size ``eps``
    turns it into parameter noise of std ``kappa sqrt(eps)``.
    """
    std = state.noise_scale / math.sqrt(state.step_size)
    return {p.name: std * state.rng.standard_normal(p.shape) for p in params}


def prior_gradient(params, tau: float) -> dict[str, np.ndarray]:
    """Gradient of ``(tau/2) ||theta||^2``, i.e. ``-grad log`` of a Gaussian prior."""
    if tau < 0:
        raise InputError("tau must be >= 0")
    return {p.name: tau * p.data for p in params}


def add_grads(*parts: dict[str, np.ndarray]) -> dict[str, np.ndarray]:
    out: dict[str, np.ndarray] = {}
    for part in parts:
        for k, g in part.items():
            out[k] = g if k not in out else out[k] + g
    return out


class PosteriorAverager:
    """Running mean of outputs after burn-in, every ``stride`` iterations.

    Uses Kahan-compensated summation so the mean matches the arithmetic mean of
    the folded samples to roundoff even over thousands of samples.
    """

    def __init__(self, burn_in_fraction: float = 0.7, sample_stride: int = 10):
        if not 0 <= burn_in_fraction < 1:
            raise InputError("burn_in_fraction must be in [0, 1)")
        if sample_stride < 1:
            raise InputError("sample_stride must be >= 1")
        self.burn_in_fraction = float(burn_in_fraction)
        self.sample_stride = int(sample_stride)
        self.count = 0
        self._sum = None
        self._comp = None
        self._last = None

    def first_sample(self, total_iters: int) -> int:
        start = math.ceil(self.burn_in_fraction * total_iters)
        return start + (-start) % self.sample_stride

    def wants(self, iteration: int, total_iters: int) -> bool:
        return (iteration >= self.burn_in_fraction * total_iters
                and iteration % self.sample_stride == 0)

    def update(self, iteration: int, total_iters: int, current: np.ndarray) -> bool:
        """Fold ``current`` in if this iteration is a sampling point."""
        if iteration >= total_iters:
            raise InputError(f"iteration {iteration} out of range for {total_iters}")
        current = np.asarray(current, dtype=np.float64)
        self._last = current
        if not self.wants(iteration, total_iters):
            return False
        if self._sum is None:
            self._sum = current.copy()
            self._comp = np.zeros_like(current)
        else:
            y = current - self._comp
            t = self._sum + y
            self._comp = (t - self._sum) - y
            self._sum = t
        self.count += 1
        return True

    @property
    def mean(self) -> np.ndarray | None:
        """Posterior mean, or the last seen output when nothing was sampled."""
        if self.count == 0:
            return self._last
        return self._sum / self.count


def averager_update(avg: PosteriorAverager, iteration: int, total_iters: int,
                    current_output) -> PosteriorAverager:
    values = getattr(current_output, "values", current_output)
    avg.update(iteration, total_iters, values)
    return avg
