"""Reconstruction drivers: ML-EM, TV-penalized least squares, EM + NLM, DIP and
DeepRED with a learned (or plugged-in classical) denoiser, optionally sampled
with Langevin noise.

All drivers take a :class:`~petrecon.simulation.NoisySinogramBundle` and return
``(Image, RunReport)``.
"""

from __future__ import annotations

import csv
import io
import logging
import math
import time
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Callable

import numpy as np

from petrecon import metrics
from petrecon.autodiff import LinearOperator, Parameter, Tensor, backward, linear_operator_node
from petrecon.autodiff import ops
from petrecon.errors import InputError, NumericalError, UsageError
from petrecon.geometry import Image, ImageGrid, ScanGeometry, get_projector
from petrecon.networks import NetworkSpec, ParamSet, build_denoiser, build_generator, save_paramset
from petrecon.optimize import (
    OptimState,
    PosteriorAverager,
    add_grads,
    gradient_noise,
    optimizer_step,
    prior_gradient,
    sgld_inject,
)

log = logging.getLogger(__name__)

METHODS = ("em", "tv", "nlm", "dip", "deepred_sgd", "deepred_sgld")
NETWORK_METHODS = ("dip", "deepred_sgd", "deepred_sgld")
DENOISER_TRAINING = ("denoise", "joint")
RED_GRADIENTS = ("surrogate", "autodiff")
TV_EPS = 1e-6
TRACE_COLUMNS = ("iteration", "fidelity", "red", "objective", "psnr", "ssim",
                 "psnr_mean", "ssim_mean")


@dataclass
class ReconConfig:
    """Settings for one reconstruction run.

    ``lam`` is the RED weight, ``beta`` the TV weight.  ``nlm_h`` is relative
    to the range of the image being filtered.  ``noise_scale`` (kappa) only
    matters for ``deepred_sgld``.

    ``denoiser_training`` picks how the learned denoiser is updated.
    ``"joint"`` descends the reconstruction objective itself, which rewards
    inflating ``x^T D(x)`` without bound.  ``"denoise"`` (default) instead
    takes one step per iteration on ``mean((D(x + n) - x)^2)`` for the current,
    detached output ``x`` with ``n ~ N(0, (denoiser_sigma * max|x|)^2)``; the
    generator still sees the full objective.

    ``red_gradient`` picks how the RED term reaches the generator.
    ``"surrogate"`` (default) uses ``lam * (x - D(x))`` with D held fixed
    within the step, the RED gradient identity that holds for locally
    homogeneous denoisers with symmetric Jacobians.  ``"autodiff"``
    differentiates ``(lam/2) x^T (x - D(x))`` literally, through D; a learned
    CNN violates both assumptions and this form drives the image away from
    the denoised one.  ``"joint"`` training needs ``"autodiff"``, since it
    trains D by the objective's gradient.
    """

    method: str
    iterations: int = 100
    lam: float = 1.0
    beta: float = 0.01
    nlm_patch_radius: int = 1
    nlm_search_radius: int = 5
    nlm_h: float = 0.1
    step_size: float = 1e-4
    weight_prior: float = 1e-5
    noise_scale: float = 1.0
    optimizer: str = "adam"
    noise_mode: str = "param"
    burn_in: float = 0.7
    sample_stride: int = 10
    generator: NetworkSpec = field(default_factory=NetworkSpec.generator)
    denoiser: NetworkSpec = field(default_factory=NetworkSpec.denoiser)
    denoiser_plugin: str = "learned"
    denoiser_training: str = "denoise"
    denoiser_sigma: float = 0.1
    red_gradient: str = "surrogate"
    seed: int = 0
    eval_every: int = 10
    ground_truth: Image | None = None

    def __post_init__(self):
        if self.method not in METHODS:
            raise UsageError(f"unknown method {self.method!r}; choose from {', '.join(METHODS)}")
        if self.iterations < 1:
            raise InputError("iterations must be >= 1")
        if self.lam < 0 or self.beta < 0:
            raise InputError("lam and beta must be >= 0")
        if self.eval_every < 1:
            raise InputError("eval_every must be >= 1")
        if self.denoiser_training not in DENOISER_TRAINING:
            raise UsageError(f"denoiser_training must be one of {DENOISER_TRAINING}")
        if self.red_gradient not in RED_GRADIENTS:
            raise UsageError(f"red_gradient must be one of {RED_GRADIENTS}")
        if self.denoiser_training == "joint" and self.red_gradient != "autodiff":
            raise UsageError("joint denoiser training needs red_gradient='autodiff'")
        if not self.denoiser_sigma > 0:
            raise InputError("denoiser_sigma must be positive")
        if isinstance(self.generator, dict):
            self.generator = NetworkSpec(**self.generator)
        if isinstance(self.denoiser, dict):
            self.denoiser = NetworkSpec(**self.denoiser)

    def echo(self) -> dict:
        """Plain-data copy for reports (the ground truth is left out)."""
        out = {}
        for f in fields(self):
            if f.name == "ground_truth":
                continue
            v = getattr(self, f.name)
            out[f.name] = asdict(v) if isinstance(v, NetworkSpec) else v
        return out


@dataclass
class RunReport:
    rows: list[dict] = field(default_factory=list)
    wall_time: float = 0.0
    config: dict = field(default_factory=dict)
    final_image: Image | None = None
    info: dict = field(default_factory=dict)

    def add_row(self, **row) -> None:
        for k, v in row.items():
            if v is not None and not isinstance(v, (int, str)) and not math.isfinite(v) \
                    and k in ("fidelity", "red", "objective"):
                raise NumericalError(f"non-finite {k} at iteration {row.get('iteration')}")
        self.rows.append({c: row.get(c) for c in TRACE_COLUMNS})

    def column(self, name: str) -> np.ndarray:
        return np.array([np.nan if r[name] is None else r[name] for r in self.rows], dtype=float)

    def to_csv(self, path: str | Path | None = None) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(TRACE_COLUMNS)
        for r in self.rows:
            w.writerow(["" if r[c] is None else (r[c] if c == "iteration" else repr(float(r[c])))
                        for c in TRACE_COLUMNS])
        text = buf.getvalue()
        if path is not None:
            Path(path).write_text(text)
        return text

    @staticmethod
    def read_csv(path: str | Path) -> list[dict]:
        with open(path, newline="") as fh:
            return [{k: (None if v == "" else (int(v) if k == "iteration" else float(v)))
                     for k, v in row.items()} for row in csv.DictReader(fh)]

    def summary(self) -> dict:
        last = self.rows[-1] if self.rows else {}
        return {"wall_time": self.wall_time, "config": self.config, "info": self.info,
                "n_rows": len(self.rows), "final_row": last}


def _metric_pair(truth: Image | None, values: np.ndarray):
    if truth is None:
        return None, None
    L = float(truth.values.max() - truth.values.min())
    if not L > 0:
        return None, None
    clamped = np.maximum(values, 0.0)
    p = metrics.psnr(truth, clamped, L)
    if min(clamped.shape) < metrics.SSIM_WINDOW:
        return p, None  # too small for one SSIM window
    return p, metrics.ssim(truth, clamped, L)


def _bundle_arrays(bundle):
    y = bundle.y.values
    if np.any(y < 0):
        raise InputError("measured sinogram has negative entries")
    return y, bundle.r.values, bundle.s.values


# -- ML-EM --------------------------------------------------------------------

def poisson_loglik(y: np.ndarray, ybar: np.ndarray) -> float:
    """``sum(y log ybar - ybar)`` with ``0 log 0 = 0``."""
    pos = y > 0
    return float(np.sum(y[pos] * np.log(ybar[pos])) - ybar.sum())


def em_reconstruct(bundle, geom: ScanGeometry, grid: ImageGrid, iterations: int,
                   x0: Image | None = None, eval_every: int = 1,
                   truth: Image | None = None) -> tuple[Image, RunReport]:
    """Multiplicative ML-EM: ``x <- x / P^T 1 * P^T(y / (P x + r + s))``."""
    t0 = time.perf_counter()
    proj = get_projector(grid, geom)
    y, r, s = _bundle_arrays(bundle)
    sens = proj.back(np.ones(geom.shape))
    live = sens > 0
    inv_sens = np.where(live, 1.0 / np.where(live, sens, 1.0), 0.0)
    x = np.ones(grid.shape) if x0 is None else np.array(x0.values, dtype=np.float64)
    # zero pixels of a nonnegative start stay zero under the multiplicative update
    if np.any(x < 0) or not np.any(x[live] > 0):
        raise InputError("EM needs a nonnegative starting image with positive mass")
    x = np.where(live, x, 0.0)
    report = RunReport(config={"method": "em", "iterations": iterations})
    truth = truth if truth is not None else getattr(bundle, "ground_truth", None)
    for k in range(1, iterations + 1):
        ybar = proj.forward(x) + r + s
        bad = (ybar <= 0) & (y > 0)
        if np.any(bad):
            raise NumericalError("zero expected counts on a bin with measured counts")
        ratio = np.where(ybar > 0, y / np.where(ybar > 0, ybar, 1.0), 1.0)
        x = x * inv_sens * proj.back(ratio)
        if k % eval_every == 0:
            ll = poisson_loglik(y, proj.forward(x) + r + s)
            p, q = _metric_pair(truth, x)
            report.add_row(iteration=k, fidelity=-ll, red=0.0, objective=-ll, psnr=p, ssim=q)
    img = Image(grid, x)
    report.final_image = img
    report.wall_time = time.perf_counter() - t0
    return img, report


# -- TV -----------------------------------------------------------------------

def _grad2d(x):
    gx = np.zeros_like(x)
    gy = np.zeros_like(x)
    gx[:, :-1] = x[:, 1:] - x[:, :-1]
    gy[:-1, :] = x[1:, :] - x[:-1, :]
    return gx, gy


def _grad2d_adjoint(px, py):
    out = np.zeros_like(px)
    out[:, :-1] -= px[:, :-1]
    out[:, 1:] += px[:, :-1]
    out[:-1, :] -= py[:-1, :]
    out[1:, :] += py[:-1, :]
    return out


def tv_smoothed(x: np.ndarray, eps: float = TV_EPS) -> float:
    gx, gy = _grad2d(x)
    return float(np.sqrt(gx * gx + gy * gy + eps).sum())


def tv_reconstruct(bundle, geom: ScanGeometry, grid: ImageGrid, beta: float, iterations: int,
                   x0: Image | None = None, eval_every: int = 1,
                   truth: Image | None = None) -> tuple[Image, RunReport]:
    """Projected gradient descent on ``||y - P x - r - s||^2 + beta * TV_eps(x)``.

    Backtracking halves the step until the projected sufficient-decrease test
    holds (at most 40 times); an accepted step never increases the objective.
    """
    if not beta > 0:
        raise InputError("TV weight beta must be positive")
    t0 = time.perf_counter()
    proj = get_projector(grid, geom)
    y, r, s = _bundle_arrays(bundle)
    b = y - r - s

    def objective(x):
        res = b - proj.forward(x)
        return float(np.vdot(res, res)) + beta * tv_smoothed(x)

    def gradient(x):
        res = b - proj.forward(x)
        gx, gy = _grad2d(x)
        mag = np.sqrt(gx * gx + gy * gy + TV_EPS)
        return -2.0 * proj.back(res) + beta * _grad2d_adjoint(gx / mag, gy / mag)

    if x0 is None:
        x = np.full(grid.shape, _mean_activity(proj, b))
    else:
        x = np.maximum(np.array(x0.values, dtype=np.float64), 0.0)
    f = objective(x)
    # 1/L for the data term from a few power iterations on P^T P
    v = np.ones(grid.shape)
    for _ in range(10):
        v = proj.back(proj.forward(v))
        v /= np.linalg.norm(v)
    step = 1.0 / (2.0 * np.linalg.norm(proj.forward(v)) ** 2)
    report = RunReport(config={"method": "tv", "beta": beta, "iterations": iterations})
    truth = truth if truth is not None else getattr(bundle, "ground_truth", None)
    converged = False
    for k in range(1, iterations + 1):
        if not converged:
            g = gradient(x)
            for _ in range(41):
                xn = np.maximum(x - step * g, 0.0)
                d = xn - x
                fn = objective(xn)
                if fn <= f + float(np.vdot(g, d)) + float(np.vdot(d, d)) / (2.0 * step):
                    break
                if np.linalg.norm(d) <= 1e-13 * max(np.linalg.norm(x), 1e-300):
                    converged = True
                    break
                step *= 0.5
            else:
                raise NumericalError(f"TV line search failed at iteration {k}")
            if not converged:
                x, f = xn, fn
                step *= 2.0
        if k % eval_every == 0:
            p, q = _metric_pair(truth, x)
            fid = f - beta * tv_smoothed(x)
            report.add_row(iteration=k, fidelity=fid, red=f - fid, objective=f, psnr=p, ssim=q)
    img = Image(grid, x)
    report.final_image = img
    report.wall_time = time.perf_counter() - t0
    report.info["converged_early"] = converged
    return img, report


# -- NLM ----------------------------------------------------------------------

def _box_sum_valid(a: np.ndarray, n: int) -> np.ndarray:
    c = np.pad(a.cumsum(axis=0).cumsum(axis=1), ((1, 0), (1, 0)))
    return c[n:, n:] - c[:-n, n:] - c[n:, :-n] + c[:-n, :-n]


def nlm_postfilter(noisy, patch_radius: int = 1, search_radius: int = 5,
                   h: float = 0.1):
    """Non-local means with weights ``exp(-||patch_i - patch_j||^2 / h^2)``.

    Patch distances are sums of squared differences over the
    ``(2 patch_radius + 1)^2`` patch; borders use symmetric padding.
    Accepts an :class:`Image` (returns an Image) or a 2-D array.
    """
    if not h > 0:
        raise InputError("NLM h must be positive")
    img = np.asarray(getattr(noisy, "values", noisy), dtype=np.float64)
    P, S = int(patch_radius), int(search_radius)
    H, W = img.shape
    pad = np.pad(img, P + S, mode="symmetric")
    center = pad[S:S + H + 2 * P, S:S + W + 2 * P]
    num = np.zeros((H, W))
    den = np.zeros((H, W))
    inv_h2 = 1.0 / (h * h)
    for dy in range(-S, S + 1):
        for dx in range(-S, S + 1):
            shifted = pad[S + dy:S + dy + H + 2 * P, S + dx:S + dx + W + 2 * P]
            dist = _box_sum_valid((center - shifted) ** 2, 2 * P + 1)
            w = np.exp(-dist * inv_h2)
            num += w * shifted[P:P + H, P:P + W]
            den += w
    out = num / den
    if isinstance(noisy, Image):
        return noisy.with_values(out)
    return out


def nlm_filter_relative(values: np.ndarray, patch_radius: int, search_radius: int,
                        h_rel: float) -> np.ndarray:
    """NLM with ``h`` given as a fraction of the image range times the patch width."""
    span = float(values.max() - values.min())
    if span <= 0:
        return np.array(values, dtype=np.float64)
    h = h_rel * span * (2 * patch_radius + 1)
    return nlm_postfilter(values, patch_radius, search_radius, h)


# -- classical denoiser plug-ins ----------------------------------------------

_DENOISERS: dict[str, Callable[[Image], Image]] = {}


def classical_denoiser_plugin(name: str, denoise_fn: Callable[[Image], Image]) -> None:
    """Register a fixed denoiser usable as ``ReconConfig.denoiser_plugin = name``.

    Inside DeepRED it is treated as a constant per gradient step: the RED
    gradient is taken as ``lam * (x - f(x))`` and nothing flows through ``f``.
    """
    if name == "learned":
        raise UsageError("'learned' is reserved for the trainable denoiser")
    _DENOISERS[name] = denoise_fn


def registered_denoisers() -> list[str]:
    return sorted(_DENOISERS)


classical_denoiser_plugin("identity", lambda img: img)
classical_denoiser_plugin(
    "nlm", lambda img: img.with_values(nlm_filter_relative(img.values, 1, 5, 0.1)))


def _apply_plugin(fn, grid: ImageGrid, values: np.ndarray) -> np.ndarray:
    out = fn(Image(grid, values))
    return np.asarray(getattr(out, "values", out), dtype=np.float64)


# -- DeepRED ------------------------------------------------------------------

def _mean_activity(proj, b: np.ndarray) -> float:
    """Uniform activity whose projection matches the net measured counts."""
    total = float(np.maximum(b, 0.0).sum())
    return max(total, 1e-12) / float(proj.forward(np.ones(proj.grid.shape)).sum())


def network_input(proj, y: np.ndarray) -> np.ndarray:
    """``P^T y`` scaled to a maximum of one, shaped ``[1, 1, ny, nx]``."""
    z = proj.back(y)
    peak = float(z.max())
    if peak > 0:
        z = z / peak
    return z.reshape((1, 1) + z.shape)


@dataclass
class DeepREDObjective:
    x: Tensor             # image estimate in count units, [1, 1, ny, nx]
    fidelity: Tensor
    red: Tensor           # the term whose gradient is used
    red_value: float      # (lam/2) x^T (x - D(x)) as evaluated
    total: Tensor

    @property
    def total_value(self) -> float:
        return self.fidelity.item() + self.red_value


def build_deepred_objective(bundle, op: LinearOperator, g_forward, d_forward, lam: float,
                            z: Tensor, output_scale: float = 1.0,
                            plugin: Callable[[np.ndarray], np.ndarray] | None = None,
                            red_gradient: str = "autodiff") -> DeepREDObjective:
    """``||y - P x - r - s||^2 + (lam/2) x^T (x - D(x))`` with ``x = c * G(z)``.

    ``c`` (``output_scale``) fixes the count scale so the networks work on
    order-one images; the learned denoiser sees ``x / c`` and its output is
    scaled back, i.e. ``D(x) = c * D_net(x / c)``.  With ``plugin`` the
    denoiser is a fixed map on count-scale arrays.

    With ``red_gradient="autodiff"`` the returned ``total`` is the exact
    objective.  With ``"surrogate"`` (and always for plug-ins) ``red`` is a
    stand-in whose gradient is ``lam * (x - D(x))`` with D fixed; its value
    is not the RED value, which ``red_value`` reports.
    """
    y, r, s = _bundle_arrays(bundle)
    g = g_forward(z)
    x = ops.scalar_mul(g, output_scale)
    res = ops.sub(Tensor(y - r - s), linear_operator_node(op, x))
    fidelity = ops.dot(res, res)
    if lam == 0.0:
        red = Tensor(np.array(0.0))
        red_value = 0.0
    elif plugin is None and red_gradient == "autodiff":
        dx = ops.scalar_mul(d_forward(g), output_scale)
        red = ops.scalar_mul(ops.dot(x, ops.sub(x, dx)), 0.5 * lam)
        red_value = red.item()
    else:
        if plugin is not None:
            f = plugin(x.data[0, 0]).reshape(x.shape)
        else:
            f = output_scale * d_forward(Tensor(g.data)).data
        red_value = 0.5 * lam * float(np.vdot(x.data, x.data - f))
        # value differs from red_value; only its gradient lam*(x - f) is used
        red = ops.sub(ops.scalar_mul(ops.dot(x, x), 0.5 * lam),
                      ops.scalar_mul(ops.dot(x, Tensor(f)), lam))
    total = ops.add(fidelity, red) if red.requires_grad else fidelity
    return DeepREDObjective(x, fidelity, red, red_value, total)


def _denoising_grads(d_fwd, d_params, x: np.ndarray, sigma_rel: float,
                     rng: np.random.Generator):
    """Gradients of ``mean((D(x + n) - x)^2)`` with respect to the denoiser weights."""
    sigma = sigma_rel * max(float(np.abs(x).max()), 1e-12)
    noisy = Tensor(x + sigma * rng.standard_normal(x.shape))
    err = ops.sub(d_fwd(noisy), Tensor(x))
    loss = ops.scalar_mul(ops.dot(err, err), 1.0 / err.size)
    return backward(loss, d_params)


def _save_failure(checkpoint_dir, cfg, g_ps, d_ps, report):
    if checkpoint_dir is None:
        return
    out = Path(checkpoint_dir)
    out.mkdir(parents=True, exist_ok=True)
    save_paramset(out / "generator_failed.bin", cfg.generator, g_ps)
    if d_ps is not None:
        save_paramset(out / "denoiser_failed.bin", cfg.denoiser, d_ps)
    report.to_csv(out / "trace_failed.csv")


def deepred_run(config: ReconConfig, bundle, geom: ScanGeometry, grid: ImageGrid,
                checkpoint_dir: str | Path | None = None,
                progress: Callable[[int, dict], None] | None = None
                ) -> tuple[Image, RunReport]:
    """DIP (``lam`` forced to 0), DeepRED-SGD, or DeepRED-SGLD with posterior averaging.

    Per iteration: forward both networks, evaluate the objective, backprop,
    add the weight-prior gradient, take an optimizer step, then (SGLD only)
    inject parameter noise into the generator and fold the output into the
    posterior mean.  Rows record the output the iteration's loss was computed
    on.  The returned image is the posterior mean when Langevin noise is on,
    else the final iterate, clamped at zero.
    """
    cfg = config
    if cfg.method not in NETWORK_METHODS:
        raise UsageError(f"deepred_run handles {NETWORK_METHODS}, not {cfg.method!r}")
    t0 = time.perf_counter()
    proj = get_projector(grid, geom)
    op = LinearOperator.from_projector(proj)
    y, r, s = _bundle_arrays(bundle)
    z = Tensor(network_input(proj, y))
    scale = _mean_activity(proj, y - r - s)

    lam = 0.0 if cfg.method == "dip" else cfg.lam
    kappa = cfg.noise_scale if cfg.method == "deepred_sgld" else 0.0
    g_ps, g_fwd = build_generator(cfg.generator, cfg.seed)
    plugin = None
    d_ps, d_fwd = None, None
    if lam > 0:
        if cfg.denoiser_plugin == "learned":
            d_ps, d_fwd = build_denoiser(cfg.denoiser, cfg.seed + 1)
        else:
            if cfg.denoiser_plugin not in _DENOISERS:
                raise UsageError(f"unknown denoiser plug-in {cfg.denoiser_plugin!r}")
            fn = _DENOISERS[cfg.denoiser_plugin]
            plugin = lambda v: _apply_plugin(fn, grid, v)  # noqa: E731

    g_state = OptimState(step_size=cfg.step_size, weight_prior=cfg.weight_prior,
                         noise_scale=kappa, method=cfg.optimizer,
                         noise_mode=cfg.noise_mode, seed=cfg.seed)
    d_state = OptimState(step_size=cfg.step_size, weight_prior=cfg.weight_prior,
                         method=cfg.optimizer, seed=cfg.seed + 1)
    g_params = list(g_ps)
    d_params = list(d_ps) if d_ps is not None else []
    d_noise = np.random.default_rng(np.random.SeedSequence([int(cfg.seed), 0xD0]))
    averager = PosteriorAverager(cfg.burn_in, cfg.sample_stride) if kappa > 0 else None
    truth = cfg.ground_truth if cfg.ground_truth is not None else getattr(bundle, "ground_truth", None)

    report = RunReport(config=cfg.echo())
    report.info.update({"output_scale": scale, "z_normalization": "P^T y / max(P^T y)",
                        "lam_effective": lam, "noise_scale_effective": kappa,
                        "generator_params": g_ps.count,
                        "denoiser_params": d_ps.count if d_ps is not None else 0})
    n = cfg.iterations
    for it in range(n):
        obj = build_deepred_objective(bundle, op, g_fwd, d_fwd, lam, z, scale, plugin,
                                      cfg.red_gradient)
        total_value = obj.total_value
        if not math.isfinite(total_value):
            _save_failure(checkpoint_dir, cfg, g_ps, d_ps, report)
            err = NumericalError(f"non-finite objective at iteration {it + 1}")
            err.report = report
            raise err
        current = obj.x.data[0, 0]
        if averager is not None:
            averager.update(it, n, current)
        if (it + 1) % cfg.eval_every == 0:
            p, q = _metric_pair(truth, current)
            pm = qm = None
            if averager is not None and averager.count > 0:
                pm, qm = _metric_pair(truth, averager.mean)
            report.add_row(iteration=it + 1, fidelity=obj.fidelity.item(), red=obj.red_value,
                           objective=total_value, psnr=p, ssim=q, psnr_mean=pm, ssim_mean=qm)
            if progress is not None:
                progress(it + 1, report.rows[-1])

        joint = cfg.denoiser_training == "joint"
        grads = backward(obj.total, g_params + (d_params if joint else []))
        g_grads = add_grads({p.name: grads[p.name] for p in g_params},
                            prior_gradient(g_params, cfg.weight_prior))
        if kappa > 0 and cfg.noise_mode == "grad":
            g_grads = add_grads(g_grads, gradient_noise(g_params, g_state))
        if d_params and not joint:
            grads = _denoising_grads(d_fwd, d_params, obj.x.data / scale,
                                     cfg.denoiser_sigma, d_noise)
        try:
            optimizer_step(g_params, g_grads, g_state)
            if d_params:
                d_grads = add_grads({p.name: grads[p.name] for p in d_params},
                                    prior_gradient(d_params, cfg.weight_prior))
                optimizer_step(d_params, d_grads, d_state)
        except NumericalError as exc:
            _save_failure(checkpoint_dir, cfg, g_ps, d_ps, report)
            exc.report = report
            raise
        if kappa > 0 and cfg.noise_mode == "param":
            sgld_inject(g_params, g_state)

    if averager is not None and averager.count > 0:
        final = averager.mean
        report.info["posterior_samples"] = averager.count
    else:
        final = (g_fwd(z).data * scale)[0, 0]
    img = Image(grid, np.maximum(final, 0.0))
    report.final_image = img
    report.wall_time = time.perf_counter() - t0
    return img, report


# -- dispatch -----------------------------------------------------------------

def reconstruct(config: ReconConfig, bundle, geom: ScanGeometry | None = None,
                grid: ImageGrid | None = None, **kwargs) -> tuple[Image, RunReport]:
    """Run ``config.method`` on a bundle."""
    geom = geom or bundle.geometry
    grid = grid or bundle.grid
    truth = config.ground_truth if config.ground_truth is not None else getattr(bundle, "ground_truth", None)
    if config.method == "em":
        img, rep = em_reconstruct(bundle, geom, grid, config.iterations,
                                  eval_every=config.eval_every, truth=truth)
    elif config.method == "tv":
        img, rep = tv_reconstruct(bundle, geom, grid, config.beta, config.iterations,
                                  eval_every=config.eval_every, truth=truth)
    elif config.method == "nlm":
        em_img, rep = em_reconstruct(bundle, geom, grid, config.iterations,
                                     eval_every=config.eval_every, truth=truth)
        img = Image(grid, nlm_filter_relative(em_img.values, config.nlm_patch_radius,
                                              config.nlm_search_radius, config.nlm_h))
        rep.final_image = img
        if truth is not None:
            rep.info["final_psnr"], rep.info["final_ssim"] = _metric_pair(truth, img.values)
        return img, _finish(rep, config)
    else:
        img, rep = deepred_run(config, bundle, geom, grid, **kwargs)
    return img, _finish(rep, config)


def _finish(rep: RunReport, config: ReconConfig) -> RunReport:
    rep.config = config.echo()
    return rep
