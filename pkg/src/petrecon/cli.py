"""Command-line experiment harness.

Subcommands: simulate, reconstruct, sweep, evaluate, profile, trace-plot.
Exit codes: 0 ok, 2 usage/configuration, 3 bad input data, 4 numerical failure.
"""

from __future__ import annotations

import argparse
import configparser
import csv
import dataclasses
import logging
import math
import os
import re
import sys
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from petrecon import io as pio
from petrecon import metrics
from petrecon.errors import ConfigurationError, InputError, NumericalError, PetReconError, UsageError
from petrecon.geometry import ImageGrid, ScanGeometry
from petrecon.networks import NetworkSpec
from petrecon.reconstruct import METHODS, NETWORK_METHODS, ReconConfig, RunReport, reconstruct
from petrecon.simulation import PHANTOMS, make_phantom, simulate_scan

log = logging.getLogger("petrecon")

WORKERS_ENV = "PETRECON_WORKERS"
EXIT_OK, EXIT_USAGE, EXIT_INPUT, EXIT_NUMERICAL = 0, 2, 3, 4
DESK = {"nx": 64, "ny": 64, "n_radial": 96, "n_angles": 96}
RUNTIME_BUDGET = 600  # seconds; exceeding it only logs a warning
FULL = {"nx": 128, "ny": 128, "n_radial": 180, "n_angles": 180}

DEFAULT_CONFIG = """\
[grid]
nx = 64
ny = 64

[geometry]
n_radial = 96
n_angles = 96

[simulate]
phantom = brain
levels = 1e6
background_fraction = 0.10
seeds = 0

[method.em]
method = em
iterations = 50

[report]
out = runs
eval_every = 10
"""


# -- configuration -------------------------------------------------------------

@dataclass
class ExperimentConfig:
    grid: ImageGrid
    geometry: ScanGeometry
    phantom: str = "brain"
    levels: list[float] = field(default_factory=lambda: [1e6])
    background_fraction: float = 0.10
    seeds: list[int] = field(default_factory=lambda: [0])
    methods: dict[str, dict] = field(default_factory=dict)
    out: str = "runs"
    eval_every: int = 10
    source: str = ""

    def echo(self) -> dict:
        return {
            "grid": pio.grid_to_dict(self.grid),
            "geometry": {"n_radial": self.geometry.n_radial, "n_angles": self.geometry.n_angles,
                         "radial_spacing": self.geometry.radial_spacing},
            "simulate": {"phantom": self.phantom, "levels": self.levels,
                         "background_fraction": self.background_fraction, "seeds": self.seeds},
            "methods": self.methods,
            "report": {"out": self.out, "eval_every": self.eval_every},
        }

    def recon_config(self, name: str, seed: int | None = None) -> ReconConfig:
        if name not in self.methods:
            raise UsageError(f"unknown method block {name!r}; config defines {sorted(self.methods)}")
        opts = {k: v for k, v in self.methods[name].items() if k != "lam_grid"}
        opts.setdefault("eval_every", self.eval_every)
        if seed is not None:
            opts["seed"] = seed
        return ReconConfig(**opts)


def _line_of(text: str, section: str, key: str | None = None) -> int:
    """1-based line of ``key`` inside ``[section]`` (or of the header), 0 if absent."""
    current = None
    for n, line in enumerate(text.splitlines(), 1):
        m = re.match(r"\s*\[([^\]]+)\]", line)
        if m:
            current = m.group(1).strip()
            if key is None and current == section:
                return n
            continue
        if current == section and key is not None:
            m = re.match(r"\s*([^=:#;\s]+)\s*[=:]", line)
            if m and m.group(1).strip().lower() == key.lower():
                return n
    return 0


def _fail(path: str, text: str, section: str, key: str | None, msg: str):
    line = _line_of(text, section, key)
    where = f"{path}:{line}" if line else path
    raise ConfigurationError(f"{where}: [{section}]{' ' + key if key else ''}: {msg}")


_RECON_FIELDS = {f.name: f for f in dataclasses.fields(ReconConfig) if f.name != "ground_truth"}


def _coerce(kind, raw: str):
    if kind in ("generator", "denoiser"):
        parts = [int(p) for p in re.split(r"[,\s]+", raw.strip()) if p]
        if len(parts) != 2:
            raise ValueError("expected 'base_channels, depth'")
        return NetworkSpec.generator(*parts) if kind == "generator" else NetworkSpec.denoiser(*parts)
    if kind == "lam_grid":
        return [float(p) for p in raw.split(",") if p.strip()]
    default = _RECON_FIELDS[kind].default
    if isinstance(default, bool):
        return raw.strip().lower() in ("1", "true", "yes", "on")
    if isinstance(default, int):
        return int(raw)
    if isinstance(default, float):
        return float(raw)
    return raw.strip()


def parse_config(text: str, path: str = "<config>", full: bool = False) -> ExperimentConfig:
    """Parse an INI-style experiment config, reporting errors with line numbers."""
    cp = configparser.ConfigParser(interpolation=None)
    cp.optionxform = str
    try:
        cp.read_string(text, source=path)
    except configparser.Error as exc:
        raise ConfigurationError(f"{path}: {exc}") from None

    sizes = dict(FULL if full else DESK)
    for section, keys in (("grid", ("nx", "ny")), ("geometry", ("n_radial", "n_angles"))):
        if cp.has_section(section) and not full:
            for k in keys:
                if k in cp[section]:
                    try:
                        sizes[k] = int(cp[section][k])
                    except ValueError:
                        _fail(path, text, section, k, f"expected an integer, got {cp[section][k]!r}")
    pixel = 1.0
    if cp.has_section("grid") and "pixel_size" in cp["grid"]:
        try:
            pixel = float(cp["grid"]["pixel_size"])
        except ValueError:
            _fail(path, text, "grid", "pixel_size", "expected a number")
    try:
        grid = ImageGrid(sizes["nx"], sizes["ny"], pixel)
        geom = ScanGeometry.parallel(grid, sizes["n_radial"], sizes["n_angles"])
    except PetReconError as exc:
        _fail(path, text, "grid", None, str(exc))

    cfg = ExperimentConfig(grid=grid, geometry=geom, source=text)
    if cp.has_section("simulate"):
        sim = cp["simulate"]
        cfg.phantom = sim.get("phantom", cfg.phantom).strip()
        if cfg.phantom not in PHANTOMS:
            _fail(path, text, "simulate", "phantom",
                  f"unknown phantom {cfg.phantom!r}; choose from {', '.join(PHANTOMS)}")
        try:
            if "levels" in sim:
                cfg.levels = [float(v) for v in sim["levels"].split(",") if v.strip()]
        except ValueError:
            _fail(path, text, "simulate", "levels", "expected comma-separated numbers")
        if not cfg.levels or any(not (lv > 0 and math.isfinite(lv)) for lv in cfg.levels):
            _fail(path, text, "simulate", "levels", "count levels must be positive")
        try:
            if "seeds" in sim:
                cfg.seeds = [int(v) for v in sim["seeds"].split(",") if v.strip()]
            cfg.background_fraction = float(sim.get("background_fraction", cfg.background_fraction))
        except ValueError as exc:
            _fail(path, text, "simulate", None, str(exc))
        for key in sim:
            if key not in ("phantom", "levels", "seeds", "background_fraction"):
                _fail(path, text, "simulate", key, "unknown key")
    if cp.has_section("report"):
        rep = cp["report"]
        cfg.out = rep.get("out", cfg.out)
        try:
            cfg.eval_every = int(rep.get("eval_every", cfg.eval_every))
        except ValueError:
            _fail(path, text, "report", "eval_every", "expected an integer")
    for section in cp.sections():
        if section in ("grid", "geometry", "simulate", "report"):
            continue
        if not section.startswith("method."):
            _fail(path, text, section, None, "unknown section")
        name = section[len("method."):]
        opts: dict = {}
        for key, raw in cp[section].items():
            if key not in _RECON_FIELDS and key != "lam_grid":
                _fail(path, text, section, key, "unknown key")
            try:
                opts[key] = _coerce(key, raw)
            except (ValueError, PetReconError) as exc:
                _fail(path, text, section, key, str(exc))
        opts.setdefault("method", name)
        if opts["method"] not in METHODS:
            _fail(path, text, section, "method",
                  f"unknown method {opts['method']!r}; choose from {', '.join(METHODS)}")
        try:
            ReconConfig(**{k: v for k, v in opts.items() if k != "lam_grid"})
        except PetReconError as exc:
            _fail(path, text, section, None, str(exc))
        cfg.methods[name] = opts
    return cfg


def load_config(path: str | None, full: bool = False) -> ExperimentConfig:
    if path is None:
        return parse_config(DEFAULT_CONFIG, "<default>", full)
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise UsageError(f"cannot read config {path}: {exc.strerror}") from None
    return parse_config(text, path, full)


# -- shared helpers ------------------------------------------------------------

def _out_dir(args, cfg: ExperimentConfig) -> Path:
    out = Path(args.out or cfg.out)
    try:
        out.mkdir(parents=True, exist_ok=True)
        probe = out / ".write_test"
        probe.write_text("")
        probe.unlink()
    except OSError as exc:
        raise UsageError(f"output directory {out} is not writable: {exc.strerror}") from None
    return out


def _seeds(args, cfg: ExperimentConfig) -> list[int]:
    return [args.seed] if args.seed is not None else list(cfg.seeds)


def bundle_name(phantom: str, level: float, seed: int) -> str:
    return f"{phantom}_L{level:g}_s{seed}"


def _provenance(cfg: ExperimentConfig, inputs: dict[str, str]) -> dict:
    echo = cfg.echo()
    return {"config": echo, "config_hash": pio.content_hash(echo), "inputs": inputs}


def worker_count(deterministic: bool, n_tasks: int) -> int:
    if deterministic:
        return 1
    width = os.cpu_count() or 1
    env = os.environ.get(WORKERS_ENV)
    if env:
        try:
            width = min(width, max(1, int(env)))
        except ValueError:
            raise UsageError(f"{WORKERS_ENV} must be an integer, got {env!r}") from None
    return max(1, min(width, n_tasks))


def _write_run(directory: Path, img, report: RunReport, meta: dict) -> None:
    directory.mkdir(parents=True, exist_ok=True)
    pio.save_image(directory / "image", img, meta)
    report.to_csv(directory / "trace.csv")
    summary = report.summary()
    summary.pop("wall_time")
    summary.update(meta)
    pio.write_json(directory / "summary.json", summary)
    pio.write_json(directory / "timing.json", {"wall_time": report.wall_time})


# -- subcommands ---------------------------------------------------------------

def cmd_simulate(args) -> int:
    cfg = load_config(args.config, args.full)
    out = _out_dir(args, cfg) / "bundles"
    ph = make_phantom(cfg.phantom, cfg.grid)
    prov = _provenance(cfg, {})
    count = 0
    for level in cfg.levels:
        for seed in _seeds(args, cfg):
            b = simulate_scan(ph, cfg.geometry, level, cfg.background_fraction, seed)
            d = pio.save_bundle(out / bundle_name(cfg.phantom, level, seed), b, prov)
            print(d)
            count += 1
    log.info("wrote %d bundles", count)
    return EXIT_OK


def cmd_reconstruct(args) -> int:
    cfg = load_config(args.config, args.full)
    if not args.method:
        raise UsageError("reconstruct needs --method NAME (a [method.NAME] block)")
    rc = cfg.recon_config(args.method, args.seed)
    manifest = pio.verify_bundle(args.bundle)
    bundle = pio.load_bundle(args.bundle)
    out = _out_dir(args, cfg) / "recon" / Path(args.bundle).name / args.method
    extra = {"checkpoint_dir": out} if rc.method in NETWORK_METHODS else {}
    img, report = reconstruct(rc, bundle, **extra)
    inputs = {"bundle_manifest_sha256": pio.sha256_file(Path(args.bundle) / pio.MANIFEST),
              "bundle_files": {k: v["sha256"] for k, v in manifest["files"].items()}}
    meta = _provenance(cfg, inputs)
    meta.update({"method_block": args.method, "recon_config": rc.echo()})
    _write_run(out, img, report, meta)
    if report.wall_time > RUNTIME_BUDGET:
        log.warning("%s took %.0f s (budget %d s)", args.method, report.wall_time, RUNTIME_BUDGET)
    last = report.rows[-1] if report.rows else {}
    if last.get("psnr") is not None:
        ssim_txt = "" if last["ssim"] is None else f"  SSIM {last['ssim']:.4f}"
        print(f"{args.method}: PSNR {last['psnr']:.3f} dB{ssim_txt}")
    print(out)
    return EXIT_OK


def _lam_variants(cfg: ExperimentConfig) -> list[tuple[str, dict]]:
    """Method blocks, with ``lam_grid`` (multiples of M/N) expanded into cells."""
    ratio = cfg.geometry.n_bins / cfg.grid.n_pixels
    out = []
    for name, opts in cfg.methods.items():
        grid = opts.get("lam_grid")
        if grid:
            for mult in grid:
                o = {k: v for k, v in opts.items() if k != "lam_grid"}
                o["lam"] = mult * ratio
                out.append((f"{name}[lam={mult:g}MN]", o))
        else:
            out.append((name, {k: v for k, v in opts.items() if k != "lam_grid"}))
    return out


def _sweep_cell(task: dict) -> dict:
    """One (method, level, seed) cell; runs in a worker process."""
    row = {"method": task["label"], "level": task["level"], "seed": task["seed"],
           "psnr": math.nan, "ssim": math.nan, "runtime": math.nan, "status": "ok"}
    t0 = time.perf_counter()
    try:
        cfg = parse_config(task["source"], "<sweep>", task["full"])
        ph = make_phantom(cfg.phantom, cfg.grid)
        b = simulate_scan(ph, cfg.geometry, task["level"], cfg.background_fraction, task["seed"])
        opts = dict(task["opts"])
        opts.setdefault("eval_every", cfg.eval_every)
        opts["seed"] = task["seed"]
        rc = ReconConfig(**opts)
        img, report = reconstruct(rc, b)
        m = metrics.evaluate(b.ground_truth, np.maximum(img.values, 0.0))
        row.update(psnr=m.psnr_db, ssim=m.ssim)
        meta = _provenance(cfg, {"bundle": bundle_name(cfg.phantom, task["level"], task["seed"]),
                                 "y_sha256": pio.sha256_bytes(b.y.values.tobytes())})
        meta.update({"method_block": task["label"], "recon_config": rc.echo()})
        _write_run(Path(task["dir"]), img, report, meta)
    except PetReconError as exc:
        row["status"] = f"failed: {type(exc).__name__}: {exc}"
    row["runtime"] = time.perf_counter() - t0
    return row


def cmd_sweep(args) -> int:
    cfg = load_config(args.config, args.full)
    if not cfg.methods:
        raise UsageError("sweep needs at least one [method.*] block")
    out = _out_dir(args, cfg) / "sweep"
    tasks = []
    for label, opts in _lam_variants(cfg):
        for level in cfg.levels:
            for seed in _seeds(args, cfg):
                cell = out / label.replace("[", "_").replace("]", "").replace("=", "") \
                    / bundle_name(cfg.phantom, level, seed)
                tasks.append({"label": label, "opts": opts, "level": level, "seed": seed,
                              "dir": str(cell), "source": cfg.source or DEFAULT_CONFIG,
                              "full": args.full})
    width = worker_count(args.deterministic, len(tasks))
    log.info("sweep: %d cells on %d worker(s)", len(tasks), width)
    if width == 1:
        rows = [_sweep_cell(t) for t in tasks]
    else:
        with ProcessPoolExecutor(max_workers=width) as pool:
            rows = list(pool.map(_sweep_cell, tasks))
    write_sweep(out, rows, cfg.levels, deterministic=args.deterministic)
    failed = [r for r in rows if r["status"] != "ok"]
    for r in failed:
        log.error("cell %s level=%g seed=%d %s", r["method"], r["level"], r["seed"], r["status"])
    print(out / "sweep.csv")
    return EXIT_OK


def write_sweep(out: Path, rows: list[dict], levels: list[float], deterministic: bool = False):
    """``sweep.csv`` (one row per cell) and ``aggregate.csv`` (method x level means)."""
    out.mkdir(parents=True, exist_ok=True)
    cols = ["method", "level", "seed", "psnr", "ssim", "runtime", "status"]
    if deterministic:
        cols.remove("runtime")
    with open(out / "sweep.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(cols)
        for r in rows:
            w.writerow([repr(float(r[c])) if c in ("psnr", "ssim", "runtime") else
                        (f"{r[c]:g}" if c == "level" else r[c]) for c in cols])
    methods = list(dict.fromkeys(r["method"] for r in rows))
    with open(out / "aggregate.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["method"] + [f"{k}@{lv:g}" for lv in levels for k in ("psnr", "ssim")])
        for m in methods:
            cells = []
            for lv in levels:
                ok = [r for r in rows if r["method"] == m and r["level"] == lv and r["status"] == "ok"]
                for k in ("psnr", "ssim"):
                    cells.append(repr(float(np.mean([r[k] for r in ok]))) if ok else "failed")
            w.writerow([m] + cells)


def _relative(path: str, base: Path) -> str:
    try:
        return Path(os.path.relpath(Path(path).resolve(), base.resolve())).as_posix()
    except ValueError:
        return str(path)


def cmd_evaluate(args) -> int:
    if not args.bundle:
        raise UsageError("evaluate needs --bundle")
    pio.verify_bundle(args.bundle)
    bundle = pio.load_bundle(args.bundle)
    truth = bundle.ground_truth
    rows = []
    for path in args.images:
        img = pio.load_image(path)
        if img.values.shape != truth.values.shape:
            raise InputError(f"{path}: shape {img.values.shape} != ground truth {truth.values.shape}")
        m = metrics.evaluate(truth, np.maximum(img.values, 0.0))
        rows.append((str(path), m.psnr_db, m.ssim))
    cfg = load_config(args.config, args.full) if args.config else None
    target = None
    if args.out or cfg is not None:
        target = (_out_dir(args, cfg) if cfg else Path(args.out)) / "evaluation.csv"
        target.parent.mkdir(parents=True, exist_ok=True)
        # paths relative to the output directory keep the CSV location-independent
        rows = [(_relative(p, target.parent), q, s) for p, q, s in rows]
    text = "image,psnr,ssim\n" + "".join(f"{p},{q!r},{s!r}\n" for p, q, s in rows)
    if target is not None:
        target.write_text(text)
    sys.stdout.write(text)
    return EXIT_OK


def cmd_profile(args) -> int:
    images = []
    for path in args.images:
        p = Path(path)
        if p.is_dir() and (p / pio.MANIFEST).exists():
            images.append(pio.load_bundle(p).ground_truth)
        else:
            images.append(pio.load_image(p))
    labels = args.labels.split(",") if args.labels else [Path(p).parent.name or str(p) for p in args.images]
    if len(labels) != len(images):
        raise UsageError("--labels must name every image")
    index = args.index if args.index is not None else images[0].values.shape[0] // 2
    prof = metrics.line_profile(images, args.axis, index, labels)
    target = Path(args.out or ".") / "profile.csv"
    target.parent.mkdir(parents=True, exist_ok=True)
    prof.to_csv(target)
    print(target)
    return EXIT_OK


def trace_table(traces: list[list[dict]], column: str = "psnr") -> tuple[list[int], list[list]]:
    """Outer join of traces on iteration; missing cells are None."""
    iters = sorted({r["iteration"] for t in traces for r in t})
    lookup = [{r["iteration"]: r[column] for r in t} for t in traces]
    return iters, [[lk.get(i) for lk in lookup] for i in iters]


def cmd_trace_plot(args) -> int:
    traces = [RunReport.read_csv(p) for p in args.traces]
    labels = args.labels.split(",") if args.labels else [Path(p).parent.name for p in args.traces]
    if len(labels) != len(traces):
        raise UsageError("--labels must name every trace")
    iters, table = trace_table(traces, args.column)
    target = Path(args.out or ".") / f"trace_{args.column}.csv"
    target.parent.mkdir(parents=True, exist_ok=True)
    with open(target, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["iteration"] + labels)
        for it, vals in zip(iters, table):
            w.writerow([it] + ["" if v is None else repr(float(v)) for v in vals])
    print(target)
    return EXIT_OK


# -- entry point ---------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="experiment config (INI)")
    common.add_argument("--seed", type=int, help="override the config seeds")
    common.add_argument("--out", help="output directory (default: [report] out)")
    common.add_argument("--deterministic", action="store_true",
                        help="single worker, no timing columns: reruns are byte-identical")
    common.add_argument("--full", action="store_true",
                        help="128x128 grid, 180x180 sinogram instead of the desk defaults")
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="petrecon", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)
    sub.add_parser("simulate", parents=[common], help="write noisy sinogram bundles")
    r = sub.add_parser("reconstruct", parents=[common], help="run one method on a bundle")
    r.add_argument("--method", required=True, help="name of a [method.NAME] block")
    r.add_argument("--bundle", required=True, help="bundle directory")
    sub.add_parser("sweep", parents=[common], help="methods x levels x seeds")
    e = sub.add_parser("evaluate", parents=[common], help="PSNR/SSIM of images against a bundle")
    e.add_argument("--bundle", required=True)
    e.add_argument("images", nargs="+", help="image paths (.f32 with .json header)")
    pr = sub.add_parser("profile", parents=[common], help="line profile CSV across images")
    pr.add_argument("images", nargs="+", help="image paths or bundle dirs (ground truth)")
    pr.add_argument("--axis", choices=("row", "col"), default="row")
    pr.add_argument("--index", type=int)
    pr.add_argument("--labels")
    t = sub.add_parser("trace-plot", parents=[common], help="align trace CSVs by iteration")
    t.add_argument("traces", nargs="+", help="trace.csv files")
    t.add_argument("--labels")
    t.add_argument("--column", default="psnr",
                   choices=("fidelity", "red", "objective", "psnr", "ssim", "psnr_mean", "ssim_mean"))
    return p


COMMANDS = {"simulate": cmd_simulate, "reconstruct": cmd_reconstruct, "sweep": cmd_sweep,
            "evaluate": cmd_evaluate, "profile": cmd_profile, "trace-plot": cmd_trace_plot}


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return COMMANDS[args.command](args)
    except (UsageError, ConfigurationError) as exc:
        print(f"petrecon: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except InputError as exc:
        print(f"petrecon: input error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except NumericalError as exc:
        print(f"petrecon: numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL


if __name__ == "__main__":
    sys.exit(main())
