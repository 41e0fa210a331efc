"""On-disk formats.

Arrays are raw little-endian float32 in row-major order (cast from float64 on
write), each described by a JSON sidecar carrying shape, dtype and a sha256 of
the raw bytes.  Images can also be exported as 16-bit
PNG for viewing.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict
from pathlib import Path

import numpy as np
from PIL import Image as PILImage

from petrecon.errors import InputError
from petrecon.geometry import Image, ImageGrid, ScanGeometry, Sinogram, get_projector
from petrecon.simulation import NoisySinogramBundle, make_phantom

BUNDLE_ARRAYS = ("y", "r", "s", "noise_free")
MANIFEST = "manifest.json"


def sha256_bytes(data: bytes) -> str:
    return hashlib.sha256(data).hexdigest()


def sha256_file(path: str | Path) -> str:
    return sha256_bytes(Path(path).read_bytes())


def content_hash(obj) -> str:
    """Short stable hash of a JSON-serializable object."""
    return sha256_bytes(json.dumps(obj, sort_keys=True, default=_jsonable).encode())[:16]


def write_json(path: str | Path, obj) -> None:
    Path(path).write_text(json.dumps(obj, indent=2, sort_keys=True, default=_jsonable) + "\n")


def _jsonable(v):
    if isinstance(v, np.generic):
        return v.item()
    if isinstance(v, np.ndarray):
        return v.tolist()
    if isinstance(v, Path):
        return str(v)
    if hasattr(v, "__dataclass_fields__"):
        return asdict(v)
    raise TypeError(f"not JSON-serializable: {type(v).__name__}")


def read_json(path: str | Path) -> dict:
    try:
        return json.loads(Path(path).read_text())
    except FileNotFoundError:
        raise InputError(f"missing file: {path}") from None
    except json.JSONDecodeError as exc:
        raise InputError(f"{path}: malformed JSON ({exc})") from None


def write_raw(path: str | Path, values: np.ndarray, dtype: str = "<f4") -> dict:
    """Write ``values`` as raw bytes; returns the manifest entry."""
    data = np.ascontiguousarray(values, dtype=dtype).tobytes()
    Path(path).write_bytes(data)
    return {"file": Path(path).name, "shape": list(np.shape(values)), "dtype": dtype,
            "sha256": sha256_bytes(data)}


def read_raw(directory: str | Path, entry: dict, verify: bool = True) -> np.ndarray:
    path = Path(directory) / entry["file"]
    try:
        data = path.read_bytes()
    except FileNotFoundError:
        raise InputError(f"missing file: {path}") from None
    if verify and sha256_bytes(data) != entry["sha256"]:
        raise InputError(f"checksum mismatch for {path}: file was modified")
    arr = np.frombuffer(data, dtype=entry["dtype"])
    shape = tuple(entry["shape"])
    if arr.size != int(np.prod(shape)):
        raise InputError(f"{path}: size {arr.size} does not match shape {shape}")
    return arr.reshape(shape).astype(np.float64)


def grid_to_dict(grid: ImageGrid) -> dict:
    return {"nx": grid.nx, "ny": grid.ny, "pixel_size": grid.pixel_size,
            "origin": list(grid.origin)}


def grid_from_dict(d: dict) -> ImageGrid:
    return ImageGrid(int(d["nx"]), int(d["ny"]), float(d["pixel_size"]), tuple(d["origin"]))


def geometry_to_dict(geom: ScanGeometry) -> dict:
    return {"n_radial": geom.n_radial, "n_angles": geom.n_angles,
            "radial_spacing": geom.radial_spacing, "angles": [float(a) for a in geom.angles]}


def geometry_from_dict(d: dict) -> ScanGeometry:
    return ScanGeometry(int(d["n_radial"]), int(d["n_angles"]), float(d["radial_spacing"]),
                        tuple(float(a) for a in d["angles"]))


# -- bundles ------------------------------------------------------------------

def save_bundle(directory: str | Path, bundle: NoisySinogramBundle, extra: dict | None = None) -> Path:
    """Four float32 arrays (y, r, s, noise-free) plus ``manifest.json``.

    The ground truth is not stored: it is rebuilt from the phantom name, grid
    and count level, which the manifest records.
    """
    out = Path(directory)
    out.mkdir(parents=True, exist_ok=True)
    files = {}
    for name in BUNDLE_ARRAYS:
        files[name] = write_raw(out / f"{name}.f32", getattr(bundle, name).values)
    manifest = {
        "kind": "petrecon.bundle",
        "phantom": bundle.phantom,
        "level": float(bundle.level),
        "background_fraction": bundle.background_fraction,
        "seed": bundle.seed,
        "grid": grid_to_dict(bundle.grid),
        "geometry": geometry_to_dict(bundle.geometry),
        "files": files,
    }
    if extra:
        manifest.update(extra)
    write_json(out / MANIFEST, manifest)
    return out


def verify_bundle(directory: str | Path) -> dict:
    """Check every checksum in the manifest; raises InputError on tampering."""
    manifest = read_json(Path(directory) / MANIFEST)
    for entry in manifest.get("files", {}).values():
        read_raw(directory, entry, verify=True)
    return manifest


def load_bundle(directory: str | Path, verify: bool = True) -> NoisySinogramBundle:
    d = Path(directory)
    manifest = read_json(d / MANIFEST)
    if manifest.get("kind") != "petrecon.bundle":
        raise InputError(f"{d}: not a bundle manifest")
    grid = grid_from_dict(manifest["grid"])
    geom = geometry_from_dict(manifest["geometry"])
    arrays = {name: read_raw(d, manifest["files"][name], verify) for name in BUNDLE_ARRAYS}
    ph = make_phantom(manifest["phantom"], grid)
    level = float(manifest["level"])
    # same arithmetic as the simulator: x* = phantom * level / sum(P phantom)
    total = float(get_projector(grid, geom).forward(ph.image.values).sum())
    return NoisySinogramBundle(
        y=Sinogram(geom, arrays["y"]),
        r=Sinogram(geom, arrays["r"]),
        s=Sinogram(geom, arrays["s"]),
        noise_free=Sinogram(geom, arrays["noise_free"]),
        seed=int(manifest["seed"]),
        ground_truth=ph.image.with_values(ph.image.values * (level / total)),
        level=level,
        background_fraction=float(manifest["background_fraction"]),
        phantom=manifest["phantom"],
    )


# -- images -------------------------------------------------------------------

def save_image(path_stem: str | Path, img: Image, meta: dict | None = None,
               png: bool = True) -> dict:
    """``<stem>.f32`` (raw little-endian float32), ``<stem>.json`` and ``<stem>.png``."""
    stem = Path(path_stem)
    stem.parent.mkdir(parents=True, exist_ok=True)
    entry = write_raw(stem.with_suffix(".f32"), img.values, "<f4")
    header = {"kind": "petrecon.image", "grid": grid_to_dict(img.grid), "units": img.units,
              "array": entry}
    if meta:
        header.update(meta)
    write_json(stem.with_suffix(".json"), header)
    if png:
        write_png16(stem.with_suffix(".png"), img.values)
    return header


def load_image(path: str | Path, verify: bool = True) -> Image:
    p = Path(path)
    header = read_json(p.with_suffix(".json"))
    if header.get("kind") != "petrecon.image":
        raise InputError(f"{p}: not an image header")
    grid = grid_from_dict(header["grid"])
    values = read_raw(p.parent, header["array"], verify)
    return Image(grid, values, header.get("units", "activity"))


def write_png16(path: str | Path, values: np.ndarray) -> None:
    """Min-max scaled 16-bit grayscale PNG (display only)."""
    v = np.asarray(values, dtype=np.float64)
    lo, hi = float(v.min()), float(v.max())
    scaled = np.zeros(v.shape) if hi <= lo else (v - lo) / (hi - lo)
    PILImage.fromarray(np.round(scaled * 65535).astype(np.uint16)).save(path)


def read_png16(path: str | Path) -> np.ndarray:
    return np.asarray(PILImage.open(path), dtype=np.uint16)


def dump_config(obj) -> dict:
    """Dataclass or dict to plain JSON data."""
    if hasattr(obj, "__dataclass_fields__"):
        return asdict(obj)
    return dict(obj)
