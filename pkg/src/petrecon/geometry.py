"""Image lattice, parallel-beam scan geometry and the Siddon ray-traced projector.

Conventions
-----------
* Image arrays have shape ``(ny, nx)``; pixel ``(iy, ix)`` has flat index
  ``iy * nx + ix`` and covers ``[xmin + ix*d, xmin + (ix+1)*d)`` in x (half-open,
  same in y), so a ray running exactly along a pixel boundary is assigned to the
  pixel with the larger index.
* A line of response at ``angle`` (radians, ``[0, pi)``) and radial offset ``s``
  runs along ``(cos a, sin a)`` through the point ``s * (-sin a, cos a)``.
* Sinogram arrays have shape ``(n_angles, n_radial)``; flat LOR index is
  ``angle_index * n_radial + radial_index``.
"""

from __future__ import annotations

import functools
import logging
import math
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp

from petrecon.errors import ConfigurationError, InputError

log = logging.getLogger(__name__)

# direction components below this are snapped to exactly zero so that
# axis-aligned rays at angle pi/2 behave like the ones at angle 0
_AXIS_SNAP = 1e-14


def _frozen(values, shape, what):
    arr = np.array(values, dtype=np.float64)
    if arr.size != int(np.prod(shape)):
        raise InputError(f"{what}: expected {int(np.prod(shape))} values, got {arr.size}")
    arr = arr.reshape(shape)
    if not np.all(np.isfinite(arr)):
        raise InputError(f"{what}: values must be finite")
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True)
class ImageGrid:
    nx: int
    ny: int
    pixel_size: float = 1.0
    origin: tuple[float, float] = (0.0, 0.0)

    def __post_init__(self):
        if self.nx < 1 or self.ny < 1:
            raise InputError(f"grid dimensions must be >= 1, got {self.nx}x{self.ny}")
        if not self.pixel_size > 0:
            raise InputError(f"pixel_size must be positive, got {self.pixel_size}")
        object.__setattr__(self, "origin", (float(self.origin[0]), float(self.origin[1])))

    @property
    def n_pixels(self) -> int:
        return self.nx * self.ny

    @property
    def shape(self) -> tuple[int, int]:
        return (self.ny, self.nx)

    @property
    def bounds(self) -> tuple[float, float, float, float]:
        """``(xmin, xmax, ymin, ymax)`` of the grid in mm."""
        hx = 0.5 * self.nx * self.pixel_size
        hy = 0.5 * self.ny * self.pixel_size
        ox, oy = self.origin
        return (ox - hx, ox + hx, oy - hy, oy + hy)

    @property
    def diagonal(self) -> float:
        return math.hypot(self.nx * self.pixel_size, self.ny * self.pixel_size)

    def pixel_centers(self) -> tuple[np.ndarray, np.ndarray]:
        """Center coordinates ``(xc, yc)`` as ``(ny, nx)`` arrays."""
        xmin, _, ymin, _ = self.bounds
        d = self.pixel_size
        xc = xmin + d * (np.arange(self.nx) + 0.5)
        yc = ymin + d * (np.arange(self.ny) + 0.5)
        return np.meshgrid(xc, yc)


@dataclass(frozen=True)
class ScanGeometry:
    n_radial: int
    n_angles: int
    radial_spacing: float
    angles: tuple[float, ...] = field(default=())

    def __post_init__(self):
        if self.n_radial < 1 or self.n_angles < 1:
            raise InputError("n_radial and n_angles must be >= 1")
        if not self.radial_spacing > 0:
            raise InputError("radial_spacing must be positive")
        angles = self.angles
        if len(angles) == 0:
            angles = tuple(math.pi * k / self.n_angles for k in range(self.n_angles))
        angles = tuple(float(a) for a in angles)
        if len(angles) != self.n_angles:
            raise InputError(f"expected {self.n_angles} angles, got {len(angles)}")
        if any(a < 0 or a >= math.pi for a in angles):
            raise InputError("angles must lie in [0, pi)")
        if any(b <= a for a, b in zip(angles, angles[1:])):
            raise InputError("angles must be strictly increasing")
        object.__setattr__(self, "angles", angles)

    @classmethod
    def parallel(cls, grid: ImageGrid, n_radial: int, n_angles: int,
                 radial_spacing: float | None = None) -> "ScanGeometry":
        """Uniform angles over [0, pi), radial bins spanning the grid diagonal."""
        if radial_spacing is None:
            radial_spacing = grid.diagonal / n_radial
        return cls(n_radial=n_radial, n_angles=n_angles, radial_spacing=radial_spacing)

    @property
    def n_bins(self) -> int:
        return self.n_radial * self.n_angles

    @property
    def shape(self) -> tuple[int, int]:
        return (self.n_angles, self.n_radial)

    @property
    def radial_offsets(self) -> np.ndarray:
        return (np.arange(self.n_radial) - 0.5 * (self.n_radial - 1)) * self.radial_spacing


@dataclass(frozen=True, eq=False)
class Image:
    grid: ImageGrid
    values: np.ndarray
    units: str = "activity"

    def __post_init__(self):
        object.__setattr__(self, "values", _frozen(self.values, self.grid.shape, "Image"))

    def with_values(self, values) -> "Image":
        return Image(self.grid, values, self.units)


@dataclass(frozen=True, eq=False)
class Sinogram:
    geometry: ScanGeometry
    values: np.ndarray
    units: str = "counts"

    def __post_init__(self):
        object.__setattr__(self, "values",
                           _frozen(self.values, self.geometry.shape, "Sinogram"))

    def with_values(self, values) -> "Sinogram":
        return Sinogram(self.geometry, values, self.units)


@dataclass(frozen=True, eq=False)
class RaySegmentList:
    """Pixels crossed by one ray, in order of traversal."""

    pixel_index: np.ndarray
    length: np.ndarray

    @property
    def entries(self) -> list[tuple[int, float]]:
        return list(zip(self.pixel_index.tolist(), self.length.tolist()))

    @property
    def total_length(self) -> float:
        return float(self.length.sum())

    def __len__(self):
        return len(self.pixel_index)


_EMPTY_RAY = RaySegmentList(np.zeros(0, dtype=np.int64), np.zeros(0))


def _clip_axis(p, d, lo, hi, t_lo, t_hi):
    if d == 0.0:
        if not (lo <= p < hi):
            return None
        return t_lo, t_hi
    t1 = (lo - p) / d
    t2 = (hi - p) / d
    if t1 > t2:
        t1, t2 = t2, t1
    return max(t_lo, t1), min(t_hi, t2)


def trace_ray(grid: ImageGrid, angle: float, radial_offset: float) -> RaySegmentList:
    """Exact pixel intersection lengths of an infinite line with the grid.

    Siddon-style: the parametric crossings with all x- and y-planes inside the
    clipped interval are merged, and each sub-interval is assigned to the pixel
    containing its midpoint.
    """
    c, s = math.cos(angle), math.sin(angle)
    if abs(c) < _AXIS_SNAP:
        c = 0.0
    if abs(s) < _AXIS_SNAP:
        s = 0.0
    px, py = -radial_offset * s, radial_offset * c
    xmin, xmax, ymin, ymax = grid.bounds
    d = grid.pixel_size

    clip = _clip_axis(px, c, xmin, xmax, -math.inf, math.inf)
    if clip is None:
        return _EMPTY_RAY
    clip = _clip_axis(py, s, ymin, ymax, *clip)
    if clip is None:
        return _EMPTY_RAY
    t_lo, t_hi = clip
    if not t_hi > t_lo:
        return _EMPTY_RAY

    ts = [np.array([t_lo, t_hi])]
    if c != 0.0:
        tx = (xmin + d * np.arange(grid.nx + 1) - px) / c
        ts.append(tx[(tx > t_lo) & (tx < t_hi)])
    if s != 0.0:
        ty = (ymin + d * np.arange(grid.ny + 1) - py) / s
        ts.append(ty[(ty > t_lo) & (ty < t_hi)])
    t = np.sort(np.concatenate(ts))
    seg = np.diff(t)
    mid = 0.5 * (t[:-1] + t[1:])
    keep = seg > 1e-12 * d
    seg, mid = seg[keep], mid[keep]

    ix = np.floor((px + mid * c - xmin) / d).astype(np.int64)
    iy = np.floor((py + mid * s - ymin) / d).astype(np.int64)
    np.clip(ix, 0, grid.nx - 1, out=ix)
    np.clip(iy, 0, grid.ny - 1, out=iy)
    return RaySegmentList(iy * grid.nx + ix, seg)


class Projector:
    """Matrix-free system operator ``P`` built from cached per-LOR ray traces.

    The traces are stored row-per-LOR in CSR form; ``forward`` sums each row in
    traversal order and ``back`` scatters rows in LOR-index order, so both are
    deterministic.
    """

    def __init__(self, grid: ImageGrid, geometry: ScanGeometry):
        self.grid = grid
        self.geometry = geometry
        offsets = geometry.radial_offsets
        indptr = [0]
        cols, vals = [], []
        for angle in geometry.angles:
            for r in offsets:
                ray = trace_ray(grid, angle, float(r))
                cols.append(ray.pixel_index)
                vals.append(ray.length)
                indptr.append(indptr[-1] + len(ray))
        self.matrix = sp.csr_matrix(
            (np.concatenate(vals), np.concatenate(cols), np.asarray(indptr, dtype=np.int64)),
            shape=(geometry.n_bins, grid.n_pixels),
        )
        self._matrix_t = self.matrix.T.tocsr()

    @property
    def n_pixels(self) -> int:
        return self.grid.n_pixels

    @property
    def n_bins(self) -> int:
        return self.geometry.n_bins

    def ray(self, lor: int) -> RaySegmentList:
        lo, hi = self.matrix.indptr[lor], self.matrix.indptr[lor + 1]
        return RaySegmentList(self.matrix.indices[lo:hi].astype(np.int64),
                              self.matrix.data[lo:hi].copy())

    def forward(self, x: np.ndarray) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64)
        if x.size != self.n_pixels:
            raise ConfigurationError(
                f"projector cached for {self.grid.ny}x{self.grid.nx} grid, got {x.size} pixels")
        return (self.matrix @ x.ravel()).reshape(self.geometry.shape)

    def back(self, y: np.ndarray) -> np.ndarray:
        y = np.asarray(y, dtype=np.float64)
        if y.size != self.n_bins:
            raise ConfigurationError(
                f"projector cached for {self.n_bins} LORs, got a sinogram of {y.size}")
        return (self._matrix_t @ y.ravel()).reshape(self.grid.shape)


@functools.lru_cache(maxsize=16)
def get_projector(grid: ImageGrid, geometry: ScanGeometry) -> Projector:
    """Shared projector for a (grid, geometry) pair; traced once per process."""
    return Projector(grid, geometry)


def forward_project(img: Image, geom: ScanGeometry) -> Sinogram:
    return Sinogram(geom, get_projector(img.grid, geom).forward(img.values))


def back_project(sino: Sinogram, grid: ImageGrid) -> Image:
    return Image(grid, get_projector(grid, sino.geometry).back(sino.values))


def sensitivity_image(geom: ScanGeometry, grid: ImageGrid) -> Image:
    """``P^T 1``.  Pixels no LOR crosses are zero and reported via logging."""
    sens = back_project(Sinogram(geom, np.ones(geom.shape)), grid)
    dead = np.flatnonzero(sens.values.ravel() == 0.0)
    if dead.size:
        log.warning("%d pixel(s) have zero sensitivity and are excluded from EM updates: %s",
                    dead.size, dead.tolist())
    return sens


def zero_sensitivity_pixels(sens: Image) -> np.ndarray:
    return np.flatnonzero(sens.values.ravel() == 0.0)
