"""Analytic phantoms and low-count sinogram simulation.

The measured data follow ``y ~ Poisson(P x + r)`` where ``P x`` is scaled to a
requested number of true coincidences and ``r`` is a uniform background equal
to a fraction of the trues (added on top, so ``E[sum y] = (1 + f) * trues``).
Scatter is not simulated and is carried as an all-zero sinogram.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from petrecon.errors import InputError, UsageError
from petrecon.geometry import Image, ImageGrid, ScanGeometry, Sinogram, get_projector

PHANTOMS = ("brain", "body", "disk", "point")

# Poisson means at or above this use the rounded normal approximation
NORMAL_APPROX_THRESHOLD = 30.0

# (intensity, semi-axis a, semi-axis b, center x, center y, rotation deg)
# modified Shepp-Logan, in units of the half field of view
_SHEPP_LOGAN = (
    (1.00, 0.6900, 0.920, 0.00, 0.0000, 0.0),
    (-0.80, 0.6624, 0.874, 0.00, -0.0184, 0.0),
    (-0.20, 0.1100, 0.310, 0.22, 0.0000, -18.0),
    (-0.20, 0.1600, 0.410, -0.22, 0.0000, 18.0),
    (0.10, 0.2100, 0.250, 0.00, 0.3500, 0.0),
    (0.10, 0.0460, 0.046, 0.00, 0.1000, 0.0),
    (0.10, 0.0460, 0.046, 0.00, -0.1000, 0.0),
    (0.10, 0.0460, 0.023, -0.08, -0.6050, 0.0),
    (0.10, 0.0230, 0.023, 0.00, -0.6060, 0.0),
    (0.10, 0.0230, 0.046, 0.06, -0.6050, 0.0),
)

_BODY = (
    (1.0, 0.85, 0.60, 0.00, 0.00, 0.0),   # torso
    (3.0, 0.07, 0.07, -0.40, 0.15, 0.0),  # hot lesions: 4:1 against the torso
    (3.0, 0.05, 0.05, 0.35, 0.25, 0.0),
    (3.0, 0.09, 0.09, 0.10, -0.30, 0.0),
    (-1.0, 0.10, 0.10, -0.20, -0.25, 0.0),  # cold lesion
)


@dataclass(frozen=True, eq=False)
class Phantom:
    name: str
    image: Image
    description: str = ""

    def __post_init__(self):
        v = self.image.values
        if np.any(v < 0) or not np.any(v > 0):
            raise InputError(f"phantom {self.name!r} must be nonnegative with some activity")


@dataclass(frozen=True)
class CountLevel:
    total_true_counts: float

    def __post_init__(self):
        if not (self.total_true_counts > 0 and math.isfinite(self.total_true_counts)):
            raise InputError(f"count level must be positive, got {self.total_true_counts}")


@dataclass(frozen=True, eq=False)
class NoisySinogramBundle:
    y: Sinogram
    r: Sinogram
    s: Sinogram
    noise_free: Sinogram
    seed: int
    ground_truth: Image
    level: float
    background_fraction: float
    phantom: str = ""

    @property
    def geometry(self) -> ScanGeometry:
        return self.y.geometry

    @property
    def grid(self) -> ImageGrid:
        return self.ground_truth.grid


def _ellipses(grid: ImageGrid, table, supersample: int) -> np.ndarray:
    # normalized coordinates in [-1, 1] across the field of view
    n = supersample
    sub = (np.arange(n) + 0.5) / n
    u = (np.add.outer(np.arange(grid.nx), sub).ravel() / grid.nx) * 2 - 1
    v = (np.add.outer(np.arange(grid.ny), sub).ravel() / grid.ny) * 2 - 1
    X, Y = np.meshgrid(u, v)
    img = np.zeros_like(X)
    for val, a, b, x0, y0, phi in table:
        t = math.radians(phi)
        xr = (X - x0) * math.cos(t) + (Y - y0) * math.sin(t)
        yr = -(X - x0) * math.sin(t) + (Y - y0) * math.cos(t)
        img[(xr / a) ** 2 + (yr / b) ** 2 <= 1.0] += val
    return img.reshape(grid.ny, n, grid.nx, n).mean(axis=(1, 3))


def make_phantom(name: str, grid: ImageGrid) -> Phantom:
    """Deterministic analytic phantom: ``brain``, ``body``, ``disk`` or ``point``."""
    if name == "brain":
        img = np.clip(_ellipses(grid, _SHEPP_LOGAN, 4), 0.0, None)
        img /= img.max()
        desc = "modified Shepp-Logan head, max normalized to 1"
    elif name == "body":
        img = np.clip(_ellipses(grid, _BODY, 4), 0.0, None)
        desc = "elliptical torso with three 4:1 hot lesions and one cold lesion"
    elif name == "disk":
        u = (np.arange(grid.nx) + 0.5) - grid.nx / 2
        v = (np.arange(grid.ny) + 0.5) - grid.ny / 2
        X, Y = np.meshgrid(u / (grid.nx / 2), v / (grid.ny / 2))
        img = (X**2 + Y**2 <= 0.4**2).astype(np.float64)
        desc = "centered uniform disk, radius 0.4 of the half field of view"
    elif name == "point":
        img = np.zeros(grid.shape)
        img[grid.ny // 2, grid.nx // 2] = 1.0
        desc = "single hot pixel at the grid center"
    else:
        raise UsageError(f"unknown phantom {name!r}; choose from {', '.join(PHANTOMS)}")
    return Phantom(name, Image(grid, img), desc)


def _bin_uniforms(seed: int, n: int) -> np.ndarray:
    """Two uniforms per bin from a counter-based stream keyed by the seed.

    Row ``i`` is a fixed function of ``(seed, i)``: Philox output block ``i``.
    """
    gen = np.random.Generator(np.random.Philox(key=int(seed)))
    return gen.random((n, 2))


def poisson_from_uniforms(mean: np.ndarray, u1: np.ndarray, u2: np.ndarray) -> np.ndarray:
    """Vectorized Poisson sampler driven by two uniforms per draw.

    Sequential-search inversion of the CDF for small means, rounded normal
    approximation (Box-Muller on ``u1, u2``) for means above the threshold.
    """
    mean = np.asarray(mean, dtype=np.float64)
    if np.any(~np.isfinite(mean)) or np.any(mean < 0):
        raise InputError("Poisson means must be finite and nonnegative")
    u1 = np.broadcast_to(u1, mean.shape)
    u2 = np.broadcast_to(u2, mean.shape)
    out = np.zeros(mean.shape, dtype=np.float64)

    big = mean >= NORMAL_APPROX_THRESHOLD
    if np.any(big):
        lam = mean[big]
        # 1 - u keeps log away from zero because Generator.random is in [0, 1)
        z = np.sqrt(-2.0 * np.log1p(-u1[big])) * np.cos(2.0 * math.pi * u2[big])
        out[big] = np.maximum(np.rint(lam + np.sqrt(lam) * z), 0.0)

    small = ~big
    if np.any(small):
        lam = mean[small]
        u = u1[small]
        k = np.zeros_like(lam)
        p = np.exp(-lam)
        cdf = p.copy()
        active = np.flatnonzero(u > cdf)
        # roundoff can leave cdf a hair below 1; far above any plausible draw
        k_cap = 200
        while active.size and k_cap:
            k[active] += 1
            p[active] *= lam[active] / k[active]
            cdf[active] += p[active]
            active = active[u[active] > cdf[active]]
            k_cap -= 1
        out[small] = k
    return out


def poisson_sample(mean: float, rng: np.random.Generator) -> int:
    """One Poisson draw; ``rng`` supplies the uniforms."""
    if not (math.isfinite(mean) and mean >= 0):
        raise InputError(f"Poisson mean must be finite and >= 0, got {mean}")
    if mean == 0:
        return 0
    u1, u2 = rng.random(2)
    return int(poisson_from_uniforms(np.array([mean]), np.array([u1]), np.array([u2]))[0])


def simulate_scan(ph: Phantom, geom: ScanGeometry, level: CountLevel | float,
                  background_fraction: float = 0.10, seed: int = 0) -> NoisySinogramBundle:
    """Forward project, scale to the count level, add background, Poisson sample."""
    if not isinstance(level, CountLevel):
        level = CountLevel(float(level))
    if not (background_fraction >= 0 and math.isfinite(background_fraction)):
        raise InputError(f"background_fraction must be >= 0, got {background_fraction}")
    if seed < 0:
        raise InputError("seed must be a nonnegative integer")
    proj = get_projector(ph.image.grid, geom)
    px = proj.forward(ph.image.values)
    total = px.sum()
    if not total > 0:
        raise InputError(f"phantom {ph.name!r} has an all-zero projection; cannot scale")
    scale = level.total_true_counts / total
    noise_free = px * scale
    r_value = background_fraction * level.total_true_counts / geom.n_bins
    r = np.full(geom.shape, r_value)
    u = _bin_uniforms(seed, geom.n_bins)
    mean = (noise_free + r).ravel()
    y = poisson_from_uniforms(mean, u[:, 0], u[:, 1]).reshape(geom.shape)
    return NoisySinogramBundle(
        y=Sinogram(geom, y),
        r=Sinogram(geom, r),
        s=Sinogram(geom, np.zeros(geom.shape)),
        noise_free=Sinogram(geom, noise_free),
        seed=int(seed),
        ground_truth=ph.image.with_values(ph.image.values * scale),
        level=level.total_true_counts,
        background_fraction=float(background_fraction),
        phantom=ph.name,
    )
