import csv

import numpy as np
import pytest

from rfsplat.cli import main
from rfsplat.image import load_rfsi
from rfsplat.scene import load_checkpoint, save_checkpoint

from conftest import make_cloud


def run(*argv):
    return main([str(a) for a in argv])


@pytest.fixture(scope="module")
def small_dataset(tmp_path_factory):
    out = tmp_path_factory.mktemp("ds")
    rc = run("gen-data", "--out", out, "--n", 8, "--width", 60, "--height",
             15, "--emitters", 4, "--seed", 3, "--scene-seed", 5)
    assert rc == 0
    return out


@pytest.fixture(scope="module")
def small_checkpoint(small_dataset, tmp_path_factory):
    out = tmp_path_factory.mktemp("train")
    rc = run("train", "--out", out, "--data", small_dataset / "index.csv",
             "--iters", 10, "--n-gaussians", 32, "--seed", 1,
             "--deterministic", "--log-every", 5)
    assert rc == 0
    return out / "checkpoint.gspc"


class TestGenData:
    def test_outputs_and_determinism(self, small_dataset, tmp_path):
        assert (small_dataset / "index.csv").exists()
        assert (small_dataset / "manifest.txt").exists()
        rc = run("gen-data", "--out", tmp_path / "d2", "--n", 8, "--width",
                 60, "--height", 15, "--emitters", 4, "--seed", 3,
                 "--scene-seed", 5)
        assert rc == 0
        for name in ("index.csv", "manifest.txt", "sample_00007.rfsi"):
            assert (tmp_path / "d2" / name).read_bytes() == \
                (small_dataset / name).read_bytes(), name

    def test_bad_n(self, tmp_path, capsys):
        assert run("gen-data", "--out", tmp_path, "--n", 0) == 1
        assert "usage error" in capsys.readouterr().err

    def test_unknown_flag(self, tmp_path):
        assert run("gen-data", "--out", tmp_path, "--bogus", 3) == 1


class TestTrain:
    def test_writes_outputs(self, small_checkpoint):
        out = small_checkpoint.parent
        assert small_checkpoint.exists()
        assert (out / "metrics.csv").exists()
        assert (out / "loss_curve.png").exists()
        with open(out / "metrics.csv", newline="") as f:
            rows = list(csv.DictReader(f))
        assert rows[0]["iteration"] == "0"
        assert {"loss", "l1", "ssim_term", "psnr", "wall_ms"} <= set(rows[0])

    def test_deterministic_rerun_bit_identical(self, small_dataset, tmp_path):
        outs = []
        for name in ("a", "b"):
            out = tmp_path / name
            rc = run("train", "--out", out, "--data",
                     small_dataset / "index.csv", "--iters", 8,
                     "--n-gaussians", 16, "--seed", 2, "--deterministic")
            assert rc == 0
            outs.append(out)
        assert (outs[0] / "checkpoint.gspc").read_bytes() == \
            (outs[1] / "checkpoint.gspc").read_bytes()
        m0 = [l.rsplit(",", 1)[0] for l in  # wall_ms column may differ
              (outs[0] / "metrics.csv").read_text().splitlines()]
        m1 = [l.rsplit(",", 1)[0] for l in
              (outs[1] / "metrics.csv").read_text().splitlines()]
        assert m0 == m1

    def test_resume(self, small_dataset, small_checkpoint, tmp_path):
        rc = run("train", "--out", tmp_path, "--data",
                 small_dataset / "index.csv", "--iters", 5, "--resume",
                 small_checkpoint, "--seed", 1, "--deterministic")
        assert rc == 0
        assert (tmp_path / "checkpoint.gspc.step").read_text() == "15"

    def test_missing_dataset(self, tmp_path):
        rc = run("train", "--out", tmp_path, "--data",
                 tmp_path / "nope.csv", "--iters", 1)
        assert rc == 2

    def test_config_file(self, small_dataset, tmp_path):
        cfg = tmp_path / "cfg"
        cfg.write_text("iters=3\nn-gaussians=8\n")
        rc = run("train", "--out", tmp_path / "o", "--data",
                 small_dataset / "index.csv", "--config", cfg,
                 "--deterministic")
        assert rc == 0
        cloud = load_checkpoint(tmp_path / "o" / "checkpoint.gspc")
        assert cloud.n == 8


class TestRender:
    def test_render_outputs(self, small_checkpoint, tmp_path):
        rc = run("render", "--out", tmp_path, "--ckpt", small_checkpoint,
                 "--tx", "1,0.5,1", "--width", 60, "--height", 15)
        assert rc == 0
        img = load_rfsi(tmp_path / "render.rfsi")
        assert img.data.shape == (15, 60, 1)
        assert (tmp_path / "render.pgm").read_bytes().startswith(b"P5\n60 15")

    def test_two_channel(self, small_checkpoint, tmp_path):
        rc = run("render", "--out", tmp_path, "--ckpt", small_checkpoint,
                 "--tx", "1,0.5,1", "--width", 60, "--height", 15,
                 "--channels", 2)
        assert rc == 0
        assert load_rfsi(tmp_path / "render.rfsi").channels == 2

    def test_missing_checkpoint(self, tmp_path):
        rc = run("render", "--out", tmp_path, "--ckpt", tmp_path / "no.gspc",
                 "--tx", "1,1,1")
        assert rc == 2

    def test_bad_tx(self, small_checkpoint, tmp_path):
        rc = run("render", "--out", tmp_path, "--ckpt", small_checkpoint,
                 "--tx", "1,2")
        assert rc == 1


class TestEval:
    def test_outputs_and_aggregates(self, small_dataset, small_checkpoint,
                                    tmp_path):
        rc = run("eval", "--out", tmp_path, "--ckpt", small_checkpoint,
                 "--data", small_dataset / "index.csv")
        assert rc == 0
        with open(tmp_path / "eval_per_sample.csv", newline="") as f:
            rows = list(csv.DictReader(f))
        assert len(rows) == 8
        with open(tmp_path / "eval_summary.csv", newline="") as f:
            summary = {r["metric"]: r for r in csv.DictReader(f)}
        ssim_vals = sorted(float(r["ssim"]) for r in rows)
        med = 0.5 * (ssim_vals[3] + ssim_vals[4])
        assert np.isclose(float(summary["ssim"]["median"]), med, rtol=1e-4)
        assert np.isclose(float(summary["mse"]["mean"]),
                          np.mean([float(r["mse"]) for r in rows]), rtol=1e-4)
        assert (tmp_path / "eval_cdfs.png").exists()


class TestBench:
    def test_csv_structure(self, tmp_path):
        rc = run("bench", "--out", tmp_path, "--reps", 3, "--counts",
                 "100,400", "--width", 90, "--height", 30)
        assert rc == 0
        with open(tmp_path / "bench_sweep.csv", newline="") as f:
            rows = list(csv.DictReader(f))
        assert [r["n_gaussians"] for r in rows] == ["100", "400"]
        for r in rows:
            p50, p95, p99 = (float(r["p50_ms"]), float(r["p95_ms"]),
                             float(r["p99_ms"]))
            assert 0 < p50 <= p95 <= p99
        with open(tmp_path / "bench_cdf.csv", newline="") as f:
            cdf = list(csv.DictReader(f))
        lat = [float(r["latency_ms"]) for r in cdf]
        cum = [float(r["cdf"]) for r in cdf]
        assert lat == sorted(lat)
        assert cum == sorted(cum) and np.isclose(cum[-1], 1.0)
        assert (tmp_path / "bench_cdf.png").exists()
        assert (tmp_path / "bench_sweep.png").exists()

    def test_bad_reps(self, tmp_path):
        assert run("bench", "--out", tmp_path, "--reps", 0) == 1


class TestRssi:
    def test_oracle_vs_oracle_zero_error(self, small_dataset, tmp_path):
        rc = run("rssi", "--out", tmp_path, "--data",
                 small_dataset / "index.csv", "--fraction", "1.0")
        assert rc == 0
        with open(tmp_path / "rssi_summary.csv", newline="") as f:
            row = next(csv.DictReader(f))
        assert float(row["median_error_db"]) == 0.0
        assert float(row["mean_error_db"]) == 0.0
        assert (tmp_path / "rssi_errors.png").exists()

    def test_with_checkpoint(self, small_dataset, small_checkpoint, tmp_path):
        rc = run("rssi", "--out", tmp_path, "--data",
                 small_dataset / "index.csv", "--ckpt", small_checkpoint,
                 "--fraction", "0.5")
        assert rc == 0
        with open(tmp_path / "rssi.csv", newline="") as f:
            rows = [r for r in csv.DictReader(f) if not r["id"].startswith("#")]
        assert len(rows) == 8

    def test_bad_fraction(self, small_dataset, tmp_path):
        rc = run("rssi", "--out", tmp_path, "--data",
                 small_dataset / "index.csv", "--fraction", "0")
        assert rc == 1
