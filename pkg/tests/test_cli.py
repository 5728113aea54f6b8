import csv
import json

import numpy as np
import pytest

import isac.engine as engine
from isac import io
from isac.cli import main
from isac.errors import NumericalError
from isac.toybench import TOY_PALETTE, render_scene

SMALL = {"T": 4, "classes": ["cat"], "counts": [2], "category": "animal"}


@pytest.fixture
def cfg(tmp_path):
    def write(**kw):
        path = tmp_path / "cfg.json"
        path.write_text(json.dumps({**SMALL, **kw}))
        return str(path)

    return write


def rows(path):
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


class TestRun:
    def test_artifacts_and_stable_manifest(self, cfg, tmp_path):
        c = cfg()
        assert main(["run", c, "--out", str(tmp_path / "a"), "--seed", "3"]) == 0
        assert main(["run", c, "--out", str(tmp_path / "b"), "--seed", "3"]) == 0
        for name in ("losses.csv", "image.ppm", "manifest.json", "ground_truth.json"):
            assert (tmp_path / "a" / name).exists()
        assert (tmp_path / "a" / "manifest.json").read_bytes() == (tmp_path / "b" / "manifest.json").read_bytes()
        assert len(rows(tmp_path / "a" / "losses.csv")) == 4

    def test_eta_zero_hashes(self, cfg, tmp_path):
        assert main(["run", cfg(), "--out", str(tmp_path), "--eta", "0"]) == 0
        assert all(r["x_hash_before"] == r["x_hash_after"] for r in rows(tmp_path / "losses.csv"))

    def test_eta_nonzero_moves(self, cfg, tmp_path):
        assert main(["run", cfg(), "--out", str(tmp_path)]) == 0
        assert any(r["x_hash_before"] != r["x_hash_after"] for r in rows(tmp_path / "losses.csv"))

    def test_malformed_and_unknown(self, tmp_path, cfg):
        bad = tmp_path / "bad.json"
        bad.write_text("{not json")
        assert main(["run", str(bad), "--out", str(tmp_path)]) == 2
        assert main(["run", cfg(frobnicate=1), "--out", str(tmp_path)]) == 2
        assert main(["run", cfg(schedule="Q"), "--out", str(tmp_path)]) == 2
        assert main(["run", str(tmp_path / "missing.json")]) == 2
        assert main(["nonsense"]) == 2

    def test_numerical_error(self, cfg, tmp_path, monkeypatch, capsys):
        def boom(x, t, *a, **k):
            raise NumericalError("non-finite latent after denoising", t)

        monkeypatch.setattr(engine, "denoise_step", boom)
        assert main(["run", cfg(), "--out", str(tmp_path)]) == 3
        assert "t=4" in capsys.readouterr().err

    def test_seed_precedence(self, cfg, tmp_path, monkeypatch):
        monkeypatch.setenv("ISAC_SEED", "7")
        assert main(["run", cfg(), "--out", str(tmp_path / "env")]) == 0
        assert json.loads((tmp_path / "env" / "manifest.json").read_text())["seed"] == 7
        assert main(["run", cfg(seed=5), "--out", str(tmp_path / "file")]) == 0
        assert json.loads((tmp_path / "file" / "manifest.json").read_text())["seed"] == 5
        assert main(["run", cfg(seed=5), "--out", str(tmp_path / "flag"), "--seed", "2"]) == 0
        assert json.loads((tmp_path / "flag" / "manifest.json").read_text())["seed"] == 2

    def test_help_lists_defaults(self, capsys):
        assert main(["run", "--help"]) == 0
        text = capsys.readouterr().out
        for key in ("--seed", "--out", "--eta", "eta = 0.01", "schedule = \"E\"", "ISAC_SEED"):
            assert key in text


class TestDumpAttn:
    def test_files_and_purity(self, cfg, tmp_path):
        c = cfg()
        assert main(["dump-attn", c, "--out", str(tmp_path / "d"), "--timesteps", "4,2"]) == 0
        assert main(["run", c, "--out", str(tmp_path / "r")]) == 0
        for t in (4, 2):
            for key in ("sa", "ca", "caprop", "masks"):
                assert (tmp_path / "d" / f"{key}_{t}.isac").exists()
        sa = io.read_tensor(tmp_path / "d" / "sa_4.isac")
        assert sa.ndim == 2 and sa.min() >= 0 and sa.max() <= 1
        assert (tmp_path / "d" / "losses.csv").read_bytes() == (tmp_path / "r" / "losses.csv").read_bytes()

    def test_default_is_T(self, cfg, tmp_path):
        assert main(["dump-attn", cfg(), "--out", str(tmp_path)]) == 0
        assert (tmp_path / "sa_4.isac").exists() and (tmp_path / "ca_4.isac").exists()

    def test_out_of_range(self, cfg, tmp_path):
        assert main(["dump-attn", cfg(), "--out", str(tmp_path), "--timesteps", "5"]) == 2
        assert main(["dump-attn", cfg(), "--out", str(tmp_path), "--timesteps", "0"]) == 2


def five_class_fixture(root):
    palette = np.vstack([TOY_PALETTE, [[0.8, 0.8, 0.8]]])
    names = ["cat", "dog", "horse", "sheep", "cow"]
    img = render_scene([(0, (0.25, 0.3), 0.15), (3, (0.7, 0.7), 0.15)], palette, (32, 32))
    run_dir = root / "fixture"
    io.write_ppm(run_dir / "image.ppm", img)
    manifest = {
        "config_id": "fixture",
        "seed": 0,
        "prompt_id": "five",
        "prompt": {"kind": "multi-class", "category": "animal", "classes": names, "counts": [1] * 5,
                   "class_ids": list(range(5)), "text": ""},
        "palette": palette.tolist(),
    }
    io.atomic_write(run_dir / "manifest.json", io.dumps_kv(manifest))


class TestEval:
    def test_empty_dir(self, tmp_path):
        assert main(["eval", "--runs", str(tmp_path)]) == 4
        assert main(["eval", "--runs", str(tmp_path / "nope")]) == 4

    def test_two_of_five(self, tmp_path):
        five_class_fixture(tmp_path)
        assert main(["eval", "--runs", str(tmp_path)]) == 0
        (row,) = rows(tmp_path / "results.csv")
        assert float(row["accuracy"]) == pytest.approx(40.0)

    def test_broken_run_warns(self, tmp_path, capsys):
        five_class_fixture(tmp_path)
        (tmp_path / "broken").mkdir()
        (tmp_path / "broken" / "manifest.json").write_text("{}")
        assert main(["eval", "--runs", str(tmp_path)]) == 0
        assert "warning" in capsys.readouterr().err
        assert len(rows(tmp_path / "results.csv")) == 1

    def test_idempotent(self, cfg, tmp_path):
        assert main(["run", cfg(), "--out", str(tmp_path / "runs" / "one")]) == 0
        out = tmp_path / "tables"
        assert main(["eval", "--runs", str(tmp_path / "runs"), "--out", str(out)]) == 0
        first = [(out / n).read_bytes() for n in ("results.csv", "aggregate.csv")]
        assert main(["eval", "--runs", str(tmp_path / "runs"), "--out", str(out)]) == 0
        assert first == [(out / n).read_bytes() for n in ("results.csv", "aggregate.csv")]


class TestAblate:
    def test_single_cell(self, cfg, tmp_path):
        args = ["ablate", cfg(), "--out", str(tmp_path), "--schedules", "E", "--losses", "MPO", "--seeds", "0"]
        assert main(args + ["--prompts", "1", "--jobs", "1"]) == 0
        assert [r["config_id"] for r in rows(tmp_path / "aggregate.csv")] == ["E-MPO"]
        assert len(rows(tmp_path / "results.csv")) == 1

    def test_schedule_order(self, cfg, tmp_path):
        args = ["ablate", cfg(T=2), "--out", str(tmp_path), "--schedules", "D,B,A,E,C", "--prompts", "1"]
        assert main(args + ["--jobs", "1"]) == 0
        assert [r["config_id"] for r in rows(tmp_path / "aggregate.csv")] == [f"{s}-MPO" for s in "DBAEC"]

    def test_baseline_and_losses(self, cfg, tmp_path):
        args = ["ablate", cfg(T=2), "--out", str(tmp_path), "--losses", "MAE,KL,IoU,MPO", "--baseline"]
        assert main(args + ["--prompts", "1", "--jobs", "1"]) == 0
        ids = [r["config_id"] for r in rows(tmp_path / "aggregate.csv")]
        assert ids == ["baseline", "E-MAE", "E-KL", "E-IoU", "E-MPO"]

    def test_unknown_ids(self, cfg, tmp_path):
        assert main(["ablate", cfg(), "--out", str(tmp_path), "--schedules", "F"]) == 2
        assert main(["ablate", cfg(), "--out", str(tmp_path), "--losses", "L2"]) == 2
