import csv
import json
from pathlib import Path

import numpy as np
import pytest

from petrecon import io as pio
from petrecon.cli import (
    EXIT_INPUT,
    EXIT_NUMERICAL,
    EXIT_OK,
    EXIT_USAGE,
    WORKERS_ENV,
    load_config,
    main,
    parse_config,
    worker_count,
)
from petrecon.errors import ConfigurationError, UsageError
from petrecon.reconstruct import RunReport

CONFIG = """\
[grid]
nx = 16
ny = 16

[geometry]
n_radial = 24
n_angles = 24

[simulate]
phantom = brain
levels = 1e5, 1e6
background_fraction = 0.10
seeds = 0, 1, 2

[method.em]
method = em
iterations = 10

[method.tv]
method = tv
iterations = 10
beta = 5.0

[method.dip]
method = dip
iterations = 6
step_size = 1e-2
generator = 2, 2
eval_every = 3

[report]
out = runs
eval_every = 5
"""


def read_rows(path):
    with open(path, newline="") as fh:
        return list(csv.reader(fh))


@pytest.fixture
def cfg_path(tmp_path):
    p = tmp_path / "exp.ini"
    p.write_text(CONFIG)
    return p


def simulate(cfg_path, out, *extra):
    assert main(["simulate", "--config", str(cfg_path), "--out", str(out), *extra]) == EXIT_OK
    return sorted((out / "bundles").iterdir())


class TestConfig:
    def test_default_config(self):
        cfg = load_config(None)
        assert cfg.grid.shape == (64, 64)
        assert cfg.geometry.shape == (96, 96)
        assert "em" in cfg.methods

    def test_shipped_desk_config(self):
        path = Path(__file__).resolve().parents[1] / "configs" / "desk.ini"
        cfg = load_config(str(path))
        assert set(cfg.methods) == {"em", "tv", "nlm", "dip", "sgd", "sgld"}
        assert cfg.levels == [1e7, 1e6, 1e5] and cfg.seeds == [0, 1, 2]
        rc = cfg.recon_config("sgld")
        assert rc.method == "deepred_sgld" and rc.lam == 300.0 and rc.iterations == 1500

    def test_full_flag(self):
        cfg = parse_config(CONFIG, full=True)
        assert cfg.grid.shape == (128, 128)
        assert cfg.geometry.shape == (180, 180)

    def test_parsed_values(self):
        cfg = parse_config(CONFIG)
        assert cfg.levels == [1e5, 1e6]
        assert cfg.seeds == [0, 1, 2]
        rc = cfg.recon_config("dip", seed=7)
        assert rc.generator.base_channels == 2 and rc.seed == 7 and rc.eval_every == 3
        assert cfg.recon_config("em").eval_every == 5

    def test_line_numbers(self):
        bad = CONFIG.replace("beta = 5.0", "beta = lots")
        with pytest.raises(ConfigurationError, match=r"<config>:22"):
            parse_config(bad)
        with pytest.raises(ConfigurationError, match="unknown key"):
            parse_config(CONFIG.replace("beta = 5.0", "bta = 5.0"))
        with pytest.raises(ConfigurationError, match="phantom"):
            parse_config(CONFIG.replace("phantom = brain", "phantom = cat"))
        with pytest.raises(ConfigurationError, match="positive"):
            parse_config(CONFIG.replace("levels = 1e5, 1e6", "levels = -1"))
        with pytest.raises(ConfigurationError, match="unknown method"):
            parse_config(CONFIG.replace("method = tv", "method = osem"))

    def test_unknown_block(self):
        with pytest.raises(UsageError):
            parse_config(CONFIG).recon_config("sgld")

    def test_worker_count(self, monkeypatch):
        monkeypatch.delenv(WORKERS_ENV, raising=False)
        assert worker_count(True, 10) == 1
        assert worker_count(False, 1) == 1
        monkeypatch.setenv(WORKERS_ENV, "1")
        assert worker_count(False, 10) == 1
        monkeypatch.setenv(WORKERS_ENV, "many")
        with pytest.raises(UsageError):
            worker_count(False, 10)


class TestSimulate:
    def test_counting(self, cfg_path, tmp_path):
        dirs = simulate(cfg_path, tmp_path / "o")
        assert len(dirs) == 6
        assert all((d / "manifest.json").exists() for d in dirs)
        m = json.loads((dirs[0] / "manifest.json").read_text())
        assert m["config_hash"] == pio.content_hash(m["config"])

    def test_rerun_byte_identical(self, cfg_path, tmp_path):
        a = simulate(cfg_path, tmp_path / "a")
        b = simulate(cfg_path, tmp_path / "b")
        for da, db in zip(a, b):
            for f in sorted(da.iterdir()):
                assert f.read_bytes() == (db / f.name).read_bytes()

    def test_seed_override(self, cfg_path, tmp_path):
        dirs = simulate(cfg_path, tmp_path / "o", "--seed", "9")
        assert [d.name for d in dirs] == ["brain_L100000_s9", "brain_L1e+06_s9"]

    def test_unwritable_out(self, cfg_path, tmp_path, capsys):
        (tmp_path / "file").write_text("")
        code = main(["simulate", "--config", str(cfg_path), "--out", str(tmp_path / "file" / "x")])
        assert code == EXIT_USAGE
        assert "not writable" in capsys.readouterr().err

    def test_bad_config_exit(self, tmp_path, capsys):
        p = tmp_path / "bad.ini"
        p.write_text(CONFIG.replace("nx = 16", "nx = sixteen"))
        assert main(["simulate", "--config", str(p)]) == EXIT_USAGE
        assert "bad.ini:2" in capsys.readouterr().err


class TestReconstructEvaluate:
    def test_em_trace_rows(self, cfg_path, tmp_path):
        out = tmp_path / "o"
        bundle = simulate(cfg_path, out, "--seed", "0")[0]
        assert main(["reconstruct", "--config", str(cfg_path), "--out", str(out),
                     "--method", "em", "--bundle", str(bundle)]) == EXIT_OK
        run = out / "recon" / bundle.name / "em"
        rows = RunReport.read_csv(run / "trace.csv")
        assert [r["iteration"] for r in rows] == [5, 10]
        summary = json.loads((run / "summary.json").read_text())
        assert summary["recon_config"]["method"] == "em"
        assert summary["inputs"]["bundle_files"]["y"] == \
            json.loads((bundle / "manifest.json").read_text())["files"]["y"]["sha256"]
        assert "wall_time" not in summary
        for name in ("image.f32", "image.json", "image.png", "timing.json"):
            assert (run / name).exists()

    def test_unknown_method(self, cfg_path, tmp_path):
        out = tmp_path / "o"
        bundle = simulate(cfg_path, out, "--seed", "0")[0]
        assert main(["reconstruct", "--config", str(cfg_path), "--out", str(out),
                     "--method", "nope", "--bundle", str(bundle)]) == EXIT_USAGE

    def test_numerical_failure_exit(self, tmp_path):
        cfg = tmp_path / "boom.ini"
        cfg.write_text(CONFIG + "\n[method.boom]\nmethod = dip\niterations = 40\n"
                                "step_size = 1e150\ngenerator = 2, 2\n")
        out = tmp_path / "o"
        bundle = simulate(cfg, out, "--seed", "0")[0]
        with np.errstate(all="ignore"):
            code = main(["reconstruct", "--config", str(cfg), "--out", str(out),
                         "--method", "boom", "--bundle", str(bundle)])
        assert code == EXIT_NUMERICAL
        assert (out / "recon" / bundle.name / "boom" / "generator_failed.bin").exists()

    def test_evaluate_and_tamper(self, cfg_path, tmp_path, capsys):
        out = tmp_path / "o"
        bundle = simulate(cfg_path, out, "--seed", "1")[0]
        main(["reconstruct", "--config", str(cfg_path), "--out", str(out),
              "--method", "em", "--bundle", str(bundle)])
        img = out / "recon" / bundle.name / "em" / "image.f32"
        capsys.readouterr()
        assert main(["evaluate", "--bundle", str(bundle), "--out", str(out), str(img)]) == EXIT_OK
        rows = read_rows(out / "evaluation.csv")
        assert rows[0] == ["image", "psnr", "ssim"]
        assert rows[1][0] == f"recon/{bundle.name}/em/image.f32"
        trace = RunReport.read_csv(img.parent / "trace.csv")
        # float32 storage changes the image slightly
        assert float(rows[1][1]) == pytest.approx(trace[-1]["psnr"], abs=1e-3)
        raw = bytearray((bundle / "y.f32").read_bytes())
        raw[10] ^= 0x01
        (bundle / "y.f32").write_bytes(bytes(raw))
        assert main(["evaluate", "--bundle", str(bundle), str(img)]) == EXIT_INPUT
        assert "modified" in capsys.readouterr().err
        assert main(["reconstruct", "--config", str(cfg_path), "--out", str(out),
                     "--method", "em", "--bundle", str(bundle)]) == EXIT_INPUT

    def test_deterministic_pipeline(self, cfg_path, tmp_path):
        outputs = []
        for name in ("a", "b"):
            out = tmp_path / name
            bundle = simulate(cfg_path, out, "--seed", "2", "--deterministic")[0]
            for method in ("em", "dip"):
                assert main(["reconstruct", "--config", str(cfg_path), "--out", str(out),
                             "--method", method, "--bundle", str(bundle), "--deterministic"]) == 0
            outputs.append(out / "recon" / bundle.name)
        for method in ("em", "dip"):
            for f in ("image.f32", "image.png", "trace.csv", "summary.json", "image.json"):
                assert (outputs[0] / method / f).read_bytes() == (outputs[1] / method / f).read_bytes()


SWEEP = CONFIG.replace("seeds = 0, 1, 2", "seeds = 0").replace(
    "[method.dip]", "[method.bad]\nmethod = deepred_sgd\niterations = 2\ngenerator = 2, 2\n"
    "denoiser_plugin = missing\n\n[method.dip]")


class TestSweep:
    def run(self, tmp_path, text, name="o"):
        p = tmp_path / f"{name}.ini"
        p.write_text(text)
        out = tmp_path / name
        assert main(["sweep", "--config", str(p), "--out", str(out), "--deterministic"]) == EXIT_OK
        return out / "sweep"

    def test_rows_and_aggregate(self, tmp_path):
        text = CONFIG.replace("seeds = 0, 1, 2", "seeds = 0")
        text = text[:text.index("[method.dip]")] + text[text.index("[report]"):]
        sweep = self.run(tmp_path, text)
        rows = read_rows(sweep / "sweep.csv")
        assert rows[0] == ["method", "level", "seed", "psnr", "ssim", "status"]
        assert len(rows) == 1 + 4
        agg = read_rows(sweep / "aggregate.csv")
        assert agg[0] == ["method", "psnr@100000", "ssim@100000", "psnr@1e+06", "ssim@1e+06"]
        assert [r[0] for r in agg[1:]] == ["em", "tv"]
        em = {(r[1]): float(r[3]) for r in rows[1:] if r[0] == "em"}
        assert float(agg[1][1]) == em["100000"]

    def test_failures_recorded(self, tmp_path):
        sweep = self.run(tmp_path, SWEEP)
        rows = read_rows(sweep / "sweep.csv")
        bad = [r for r in rows[1:] if r[0] == "bad"]
        assert len(bad) == 2 and all(r[-1].startswith("failed: UsageError") for r in bad)
        ok = [r for r in rows[1:] if r[0] != "bad"]
        assert all(r[-1] == "ok" for r in ok) and len(ok) == 6
        agg = {r[0]: r[1:] for r in read_rows(sweep / "aggregate.csv")[1:]}
        assert agg["bad"] == ["failed"] * 4

    def test_lam_grid(self, tmp_path):
        text = CONFIG.replace("seeds = 0, 1, 2", "seeds = 0").replace("levels = 1e5, 1e6", "levels = 1e5")
        text = text.replace("[method.dip]", "[method.red]\nmethod = deepred_sgd\niterations = 2\n"
                                            "generator = 2, 2\ndenoiser = 2, 3\nlam_grid = 0.5, 1\n\n[method.dip]")
        sweep = self.run(tmp_path, text)
        labels = [r[0] for r in read_rows(sweep / "sweep.csv")[1:]]
        assert "red[lam=0.5MN]" in labels and "red[lam=1MN]" in labels
        summary = json.loads((sweep / "red_lam0.5MN" / "brain_L100000_s0" / "summary.json").read_text())
        assert summary["recon_config"]["lam"] == pytest.approx(0.5 * 24 * 24 / 256)

    def test_deterministic_rerun(self, tmp_path):
        text = CONFIG.replace("seeds = 0, 1, 2", "seeds = 0").replace("levels = 1e5, 1e6", "levels = 1e5")
        a = self.run(tmp_path, text, "a")
        b = self.run(tmp_path, text, "b")
        for f in ("sweep.csv", "aggregate.csv"):
            assert (a / f).read_bytes() == (b / f).read_bytes()
        for f in ("image.f32", "trace.csv", "summary.json"):
            path = a / "dip" / "brain_L100000_s0" / f
            assert path.read_bytes() == (b / "dip" / "brain_L100000_s0" / f).read_bytes()


class TestProfileTrace:
    def test_profile_truth_vs_itself(self, cfg_path, tmp_path):
        bundle = simulate(cfg_path, tmp_path / "o", "--seed", "0")[0]
        assert main(["profile", str(bundle), str(bundle), "--labels", "a,b", "--index", "8",
                     "--out", str(tmp_path)]) == EXIT_OK
        rows = read_rows(tmp_path / "profile.csv")
        assert rows[0] == ["pixel", "a", "b"]
        assert all(r[1] == r[2] for r in rows[1:])
        truth = pio.load_bundle(bundle).ground_truth.values[8]
        np.testing.assert_allclose([float(r[1]) for r in rows[1:]], truth, rtol=1e-12)

    def test_profile_label_mismatch(self, cfg_path, tmp_path):
        bundle = simulate(cfg_path, tmp_path / "o", "--seed", "0")[0]
        assert main(["profile", str(bundle), "--labels", "a,b", "--out", str(tmp_path)]) == EXIT_USAGE

    def test_trace_join(self, cfg_path, tmp_path):
        out = tmp_path / "o"
        bundle = simulate(cfg_path, out, "--seed", "0")[0]
        traces = []
        for method in ("em", "tv", "dip"):
            main(["reconstruct", "--config", str(cfg_path), "--out", str(out),
                  "--method", method, "--bundle", str(bundle)])
            traces.append(out / "recon" / bundle.name / method / "trace.csv")
        assert main(["trace-plot", *map(str, traces), "--out", str(tmp_path)]) == EXIT_OK
        rows = read_rows(tmp_path / "trace_psnr.csv")
        assert rows[0] == ["iteration", "em", "tv", "dip"]
        assert all(len(r) == 4 for r in rows)
        table = {int(r[0]): r[1:] for r in rows[1:]}
        assert sorted(table) == [3, 5, 6, 10]
        for k, path in enumerate(traces):
            for rec in RunReport.read_csv(path):
                assert float(table[rec["iteration"]][k]) == rec["psnr"]
        assert table[3][0] == "" and table[5][2] == ""
