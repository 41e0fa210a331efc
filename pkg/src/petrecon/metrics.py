"""PSNR, SSIM and line profiles."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from petrecon.errors import InputError

SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_K1 = 0.01
SSIM_K2 = 0.03


def _values(img) -> np.ndarray:
    return np.asarray(getattr(img, "values", img), dtype=np.float64)


def _pair(reference, test):
    ref, tst = _values(reference), _values(test)
    if ref.shape != tst.shape:
        raise InputError(f"shape mismatch: {ref.shape} vs {tst.shape}")
    return ref, tst


def _data_range(ref, data_range):
    if data_range is None:
        data_range = float(ref.max() - ref.min())
    if not data_range > 0:
        raise InputError("data_range must be positive (reference is constant?)")
    return float(data_range)


@dataclass(frozen=True)
class MetricResult:
    psnr_db: float
    ssim: float
    data_range: float


def psnr(reference, test, data_range: float | None = None) -> float:
    """``10 log10(L^2 / MSE)``; identical images give ``inf``."""
    ref, tst = _pair(reference, test)
    L = _data_range(ref, data_range)
    mse = float(np.mean((ref - tst) ** 2))
    if mse == 0.0:
        return math.inf
    return 10.0 * math.log10(L * L / mse)


def gaussian_window_1d(size: int = SSIM_WINDOW, sigma: float = SSIM_SIGMA) -> np.ndarray:
    x = np.arange(size) - (size - 1) / 2.0
    g = np.exp(-(x * x) / (2.0 * sigma * sigma))
    return g / g.sum()


def _filter_valid(img: np.ndarray, g: np.ndarray) -> np.ndarray:
    n = g.size
    rows = sliding_window_view(img, n, axis=1) @ g
    return sliding_window_view(rows, n, axis=0) @ g


def ssim_map(reference, test, data_range: float | None = None) -> np.ndarray:
    ref, tst = _pair(reference, test)
    if ref.ndim != 2 or min(ref.shape) < SSIM_WINDOW:
        raise InputError(f"SSIM needs a 2-D image of at least {SSIM_WINDOW}x{SSIM_WINDOW}")
    L = _data_range(ref, data_range)
    c1 = (SSIM_K1 * L) ** 2
    c2 = (SSIM_K2 * L) ** 2
    g = gaussian_window_1d()
    mx = _filter_valid(ref, g)
    my = _filter_valid(tst, g)
    sxx = _filter_valid(ref * ref, g) - mx * mx
    syy = _filter_valid(tst * tst, g) - my * my
    sxy = _filter_valid(ref * tst, g) - mx * my
    num = (2.0 * mx * my + c1) * (2.0 * sxy + c2)
    den = (mx * mx + my * my + c1) * (sxx + syy + c2)
    return num / den


def ssim(reference, test, data_range: float | None = None) -> float:
    """Mean single-scale SSIM over all valid 11x11 Gaussian window positions."""
    return float(np.mean(ssim_map(reference, test, data_range)))


def evaluate(reference, test, data_range: float | None = None) -> MetricResult:
    ref = _values(reference)
    L = _data_range(ref, data_range)
    return MetricResult(psnr(reference, test, L), ssim(reference, test, L), L)


@dataclass
class LineProfile:
    axis: str
    index: int
    positions: np.ndarray
    values: list[np.ndarray] = field(default_factory=list)
    labels: list[str] = field(default_factory=list)

    def to_csv(self, path: str | Path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["pixel"] + self.labels)
            for j, pos in enumerate(self.positions):
                w.writerow([int(pos)] + [repr(float(v[j])) for v in self.values])

    @classmethod
    def from_csv(cls, path: str | Path, axis: str = "row", index: int = -1) -> "LineProfile":
        with open(path, newline="") as fh:
            rows = list(csv.reader(fh))
        labels = rows[0][1:]
        body = np.array([[float(c) for c in r] for r in rows[1:]])
        return cls(axis, index, body[:, 0].astype(int),
                   [body[:, k + 1] for k in range(len(labels))], labels)


def line_profile(images, axis: str = "row", index: int = 0,
                 labels: list[str] | None = None) -> LineProfile:
    """The same row (or column) taken from every image."""
    arrays = [_values(im) for im in images]
    if not arrays:
        raise InputError("line_profile needs at least one image")
    shape = arrays[0].shape
    if any(a.shape != shape for a in arrays):
        raise InputError("line_profile: images have different shapes")
    if axis not in ("row", "col"):
        raise InputError(f"axis must be 'row' or 'col', got {axis!r}")
    limit = shape[0] if axis == "row" else shape[1]
    if not 0 <= index < limit:
        raise InputError(f"{axis} index {index} out of range [0, {limit})")
    values = [a[index, :].copy() if axis == "row" else a[:, index].copy() for a in arrays]
    labels = labels or [f"image{k}" for k in range(len(arrays))]
    return LineProfile(axis, index, np.arange(values[0].size), values, list(labels))
