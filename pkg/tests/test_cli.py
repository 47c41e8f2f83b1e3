import json
import subprocess
import sys

import numpy as np
import pytest

from manifold_probe import cli, gmw
from manifold_probe.autodiff import WeightStore
from manifold_probe.generators import blob_decoder_spec, init_weights, linear_spec
from manifold_probe.report import quantize, read_pgm, verify_manifest


def write_config(tmp_path, cfg, name="cfg.json"):
    path = tmp_path / name
    path.write_text(json.dumps(cfg))
    return str(path)


def run(tmp_path, command, cfg, out="out", extra=()):
    code = cli.main([command, "--config", write_config(tmp_path, cfg, f"{out}.json"),
                     "--out", str(tmp_path / out), *extra])
    return code, tmp_path / out


def report(out_dir):
    return json.loads((out_dir / "report.json").read_text())


def blob_cfg(path, **kw):
    return dict({"generator": {"weights": str(path)}}, **kw)


LINEAR = {"generator": {"builtin": "linear", "latent_dim": 6, "output_dim": 20}}


class TestConfig:
    def test_defaults_materialized(self):
        cfg = cli.resolve_config("spectra", {"n_points": 3})
        assert cfg["n_points"] == 3 and cfg["distance"]["kind"] == "pixel"
        assert cfg["generator"]["train"]["target_loss"] == 1e-4

    def test_unknown_key(self, tmp_path):
        assert run(tmp_path, "spectra", {"n_pointz": 3})[0] == cli.EXIT_CONFIG
        assert run(tmp_path, "spectra", {"generator": {"size": 3}}, "o2")[0] == cli.EXIT_CONFIG

    def test_bad_json(self, tmp_path):
        p = tmp_path / "bad.json"
        p.write_text("{not json")
        assert cli.main(["spectra", "--config", str(p), "--out", str(tmp_path / "o")]) == 2

    def test_missing_config(self, tmp_path):
        code = cli.main(["spectra", "--config", str(tmp_path / "nope.json"),
                         "--out", str(tmp_path / "o")])
        assert code == cli.EXIT_CONFIG

    def test_bad_value(self, tmp_path):
        cfg = dict(LINEAR, n_points="many")
        assert run(tmp_path, "spectra", cfg)[0] == cli.EXIT_CONFIG

    def test_threads_env(self, monkeypatch):
        monkeypatch.setenv(cli.THREADS_ENV, "3")
        assert cli.thread_count() == 3
        monkeypatch.setenv(cli.THREADS_ENV, "zero")
        with pytest.raises(cli.ConfigError):
            cli.thread_count()


class TestExitCodes:
    def test_io_error_on_bad_weights(self, tmp_path):
        bad = tmp_path / "bad.gmw"
        bad.write_bytes(b"garbage!" * 4)
        assert run(tmp_path, "spectra", blob_cfg(bad))[0] == cli.EXIT_IO

    def test_io_error_on_nonempty_out(self, tmp_path):
        cfg = dict(LINEAR, n_points=2)
        assert run(tmp_path, "spectra", cfg)[0] == 0
        assert run(tmp_path, "spectra", cfg)[0] == cli.EXIT_IO
        assert run(tmp_path, "spectra", cfg, extra=["--force"])[0] == 0

    def test_numerical_failure(self, tmp_path):
        spec = linear_spec(4, 6)
        nan = WeightStore({k: np.full_like(v, np.nan) for k, v in init_weights(spec).items()})
        gmw.save(tmp_path / "nan.gmw", spec, nan)
        code, out = run(tmp_path, "spectra", blob_cfg(tmp_path / "nan.gmw", n_points=2))
        assert code == cli.EXIT_NUMERICAL
        assert not (out / "report.json").exists()

    def test_empty_targets(self, tmp_path):
        cfg = dict(LINEAR, n_targets=0, n_points=2)
        assert run(tmp_path, "invert", cfg)[0] == cli.EXIT_CONFIG

    def test_console_script(self, tmp_path):
        cfg = write_config(tmp_path, dict(LINEAR, n_points=2))
        proc = subprocess.run([sys.executable, "-m", "manifold_probe.cli", "spectra", "--config",
                               cfg, "--out", str(tmp_path / "o")], capture_output=True)
        assert proc.returncode == 0, proc.stderr


class TestCommands:
    def test_build_linear_round_trip(self, tmp_path):
        code, out = run(tmp_path, "build", LINEAR)
        assert code == 0
        spec, weights, header = gmw.load(out / "generator.gmw")
        assert spec.latent_dim == 6 and header["seeds"] == {"init": 0}
        assert report(out)["wall_clock_s"] is None

    def test_shuffle(self, tmp_path, blob_gmw, blob_decoder):
        code, out = run(tmp_path, "shuffle", blob_cfg(blob_gmw, shuffle_seed=7))
        assert code == 0
        _, weights, header = gmw.load(out / "shuffled.gmw")
        assert header["seeds"]["shuffle_applied"] == 7
        for name in weights:
            np.testing.assert_array_equal(np.sort(weights[name].ravel()),
                                          np.sort(blob_decoder.weights[name].ravel()))

    def test_spectra_linear_band_zero(self, tmp_path):
        code, out = run(tmp_path, "spectra", dict(LINEAR, n_points=10))
        assert code == 0
        band = np.loadtxt(out / "band.csv", delimiter=",", skiprows=1)
        np.testing.assert_allclose(band[:, 3] - band[:, 2], 0.0, atol=1e-12 * band[0, 1])
        assert (out / "spectrum.svg").exists()

    def test_spectra_trained_vs_shuffled(self, tmp_path, blob_gmw):
        rows = {}
        for name, shuffle in (("trained", None), ("shuffled", 0)):
            cfg = blob_cfg(blob_gmw, n_points=10)
            cfg["generator"]["shuffle_seed"] = shuffle
            code, out = run(tmp_path, "spectra", cfg, name)
            assert code == 0
            rows[name] = report(out)["payload"]["summary_mean"]
        assert rows["shuffled"]["lambda_1"] < rows["trained"]["lambda_1"]
        assert rows["shuffled"]["dim.99"] > rows["trained"]["dim.99"]

    def test_consistency_linear(self, tmp_path):
        code, out = run(tmp_path, "consistency", dict(LINEAR, n_points=10))
        assert code == 0
        s = report(out)["payload"]["summary"]
        assert s["c_log_mean"] == pytest.approx(1.0, abs=1e-9)
        assert s["c_log_std"] == pytest.approx(0.0, abs=1e-9)

    def test_consistency_isotropic_flagged(self, tmp_path):
        cfg = {"generator": {"builtin": "orthogonal", "latent_dim": 4, "output_dim": 10},
               "n_points": 3}
        code, out = run(tmp_path, "consistency", cfg)
        assert code == 0
        s = report(out)["payload"]["summary"]
        assert s["n_log_undefined"] == 6 and s["c_log_mean"] is None

    def test_axes(self, tmp_path, blob_gmw, blob_decoder):
        cfg = blob_cfg(blob_gmw, n_points=10, n_axes=1, n_refs=2, steps=2,
                       step_rule="uniform", step_scale=1.0, image_format="both")
        code, out = run(tmp_path, "axes", cfg)
        assert code == 0
        grid = read_pgm((out / "axis_top01.pgm").read_bytes())
        assert grid.shape == (2 * 17 - 1, 5 * 17 - 1)
        refs = cli._points(blob_decoder_spec(8), cli.resolve_config("axes", cfg), "n_refs",
                           "ref_seed")
        for r, z in enumerate(refs):
            tile = grid[r * 17:r * 17 + 16, 2 * 17:2 * 17 + 16]
            np.testing.assert_array_equal(tile, quantize(blob_decoder.forward(z)).reshape(16, 16))
        top = np.loadtxt(out / "axis_top01_curve.csv", delimiter=",", skiprows=1)
        bottom = np.loadtxt(out / "axis_bottom01_curve.csv", delimiter=",", skiprows=1)
        moving = top[:, 1] != 0
        assert np.all(top[moving, 2] > bottom[moving, 2])
        assert (out / "axis_top01.png").exists()

    def test_invert_self_generated(self, tmp_path, blob_gmw):
        cfg = blob_cfg(blob_gmw, n_targets=2, target_scale=1.0, n_points=10)
        code, out = run(tmp_path, "invert", cfg)
        assert code == 0
        rows = np.loadtxt(out / "inversion.csv", delimiter=",", skiprows=1)
        assert np.all(rows[:, 1:3] < 1e-4)
        assert report(out)["payload"]["precond_mode"] == "rotate_full"

    def test_invert_noisy_reports_sign(self, tmp_path, blob_gmw):
        cfg = blob_cfg(blob_gmw, n_targets=3, noise_std=0.05, n_points=10, steps=100,
                       n_restarts=1)
        code, out = run(tmp_path, "invert", cfg)
        assert code == 0
        paired = report(out)["payload"]["paired"]
        assert paired["difference_sign"] in (-1, 0, 1)

    def test_invert_file_targets(self, tmp_path):
        np.save(tmp_path / "t.npy", np.ones((2, 20)))
        cfg = dict(LINEAR, target_source="file", target_file=str(tmp_path / "t.npy"),
                   n_points=2, steps=10, n_restarts=1)
        assert run(tmp_path, "invert", cfg)[0] == 0

    def test_maximize_flat_indistinguishable(self, tmp_path):
        cfg = {"generator": {"builtin": "orthogonal", "latent_dim": 6, "output_dim": 16,
                             "gain": 0.5},
               "k": 6, "n_seeds": 4, "budget": 120, "n_points": 2, "widths": [8]}
        code, out = run(tmp_path, "maximize", cfg)
        assert code == 0
        p = report(out)["payload"]
        assert p["evaluations_equal"]
        assert p["paired"]["max_abs_difference"] < 1e-6

    def test_compare_same_metric(self, tmp_path, blob_gmw):
        cfg = blob_cfg(blob_gmw, n_points=2, distance_b={"kind": "pixel"})
        code, out = run(tmp_path, "compare-metrics", cfg)
        assert code == 0
        s = report(out)["payload"]["summary"]
        assert s["h_corr"]["mean"] == pytest.approx(1.0)
        assert s["slope"]["mean"] == pytest.approx(1.0)
        assert s["intercept"]["mean"] == pytest.approx(0.0, abs=1e-12)

    def test_compare_scaled(self, tmp_path, blob_gmw):
        cfg = blob_cfg(blob_gmw, n_points=2, distance_b={"kind": "pixel", "scale": 4.0})
        code, out = run(tmp_path, "compare-metrics", cfg)
        assert code == 0
        assert report(out)["payload"]["summary"]["intercept"]["mean"] == pytest.approx(
            np.log10(4.0), abs=1e-12)


class TestReports:
    def test_manifest_complete(self, tmp_path, blob_gmw):
        code, out = run(tmp_path, "consistency", blob_cfg(blob_gmw, n_points=3))
        assert code == 0
        rep = report(out)
        listed = {m["path"] for m in rep["manifest"]}
        on_disk = {p.name for p in out.iterdir()} - {"report.json"}
        assert listed == on_disk
        assert verify_manifest(out, rep["manifest"]) == []
        (out / "histogram.json").unlink()
        assert verify_manifest(out, rep["manifest"]) == ["histogram.json"]

    def test_timing_opt_in(self, tmp_path):
        code, out = run(tmp_path, "spectra", dict(LINEAR, n_points=2, record_timing=True))
        assert code == 0
        assert report(out)["wall_clock_s"] >= 0

    def test_weights_not_mutated(self, tmp_path, blob_gmw):
        before = blob_gmw.read_bytes()
        assert run(tmp_path, "shuffle", blob_cfg(blob_gmw))[0] == 0
        assert blob_gmw.read_bytes() == before

    def test_threads_do_not_change_bytes(self, tmp_path, blob_gmw, monkeypatch):
        cfg = blob_cfg(blob_gmw, n_points=4)
        monkeypatch.setenv(cli.THREADS_ENV, "1")
        _, a = run(tmp_path, "consistency", cfg, "a")
        monkeypatch.setenv(cli.THREADS_ENV, "3")
        _, b = run(tmp_path, "consistency", cfg, "b")
        for name in ("consistency.csv", "histogram.json"):
            assert (a / name).read_bytes() == (b / name).read_bytes()
