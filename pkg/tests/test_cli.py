from __future__ import annotations

import csv
import json
import subprocess
import sys

import numpy as np
import pytest

from dispa.bundle import verify_manifest
from dispa.cli import THREAD_ENV_VARS, main, read_config_file


def rows(path):
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    """Raw files, a prepared bundle and one short training run, shared by the tests."""
    from dispa.synthetic import SyntheticConfig, generate

    root = tmp_path_factory.mktemp("cli")
    raw = generate(SyntheticConfig(n_cells=12, n_drugs=10, seed=3)).write(root / "raw")
    assert main(["prepare", "--expression", str(raw["expression"]), "--responses", str(raw["responses"]),
                 "--pathways", str(raw["pathways"]), "--drugs", str(raw["drugs"]), "--out", str(root / "bundle"),
                 "--embedding-dim", "16"]) == 0
    (root / "train.cfg").write_text("# training settings\nd_a = 8\nepochs = 50\nbatch_size = 32\n")
    assert main(["train", "--bundle", str(root / "bundle"), "--out", str(root / "out"), "--config",
                 str(root / "train.cfg"), "--epochs", "3", "--splits", "random,disjoint", "--seeds", "2"]) == 0
    return root, raw


class TestPrepareAndFragment:
    def test_bundle_files(self, workspace):
        root, _ = workspace
        assert verify_manifest(root / "bundle") == []
        assert json.loads((root / "bundle/summary.json").read_text())["n_drugs"] == 10

    def test_fragment_command(self, workspace, tmp_path):
        _, raw = workspace
        assert main(["fragment", "--input", str(raw["drugs"]), "--output", str(tmp_path / "f.csv")]) == 0
        out = rows(tmp_path / "f.csv")
        assert len(out) == 30 and {r["fragment_index"] for r in out} == {"0", "1", "2"}

    def test_print_rules(self, capsys):
        assert main(["fragment", "--print-rules"]) == 0
        lines = [ln for ln in capsys.readouterr().out.splitlines() if ln.strip()]
        assert sum(ln.startswith("L") for ln in lines) >= 45

    def test_fragment_cache_dir(self, workspace, tmp_path, monkeypatch):
        _, raw = workspace
        monkeypatch.setenv("DISPA_CACHE_DIR", str(tmp_path / "cache"))
        assert main(["fragment", "--input", str(raw["drugs"]), "--output", str(tmp_path / "f.csv")]) == 0
        assert any((tmp_path / "cache").iterdir())


class TestTrain:
    def test_layout_and_config_precedence(self, workspace):
        root, _ = workspace
        for mode in ("random", "disjoint"):
            for seed in (0, 1):
                report = json.loads((root / f"out/runs/dispa/{mode}/seed{seed}/report.json").read_text())
                assert report["config"]["d_a"] == 8        # from the config file
                assert report["config"]["epochs"] == 3     # flag beats the file
                assert (root / f"out/runs/dispa/{mode}/seed{seed}/best.ckpt").exists()
        table = rows(root / "out/summary_table.csv")
        assert [r["split"] for r in table] == ["random", "disjoint"]
        assert all(r["n_runs"] == "2" and "±" in r["rmse"] for r in table)
        assert verify_manifest(root / "out") == []

    def test_rerun_is_byte_identical(self, workspace, tmp_path):
        root, _ = workspace
        assert main(["train", "--bundle", str(root / "bundle"), "--out", str(tmp_path), "--config",
                     str(root / "train.cfg"), "--epochs", "3", "--splits", "random,disjoint", "--seeds", "2"]) == 0
        first = sorted(p.relative_to(root / "out") for p in (root / "out").rglob("*") if p.is_file())
        assert first == sorted(p.relative_to(tmp_path) for p in tmp_path.rglob("*") if p.is_file())
        for rel in first:
            if rel.name != "manifest.json":  # records the output path
                assert (root / "out" / rel).read_bytes() == (tmp_path / rel).read_bytes(), rel

    def test_unknown_config_key(self, workspace, capsys):
        root, _ = workspace
        (root / "bad.cfg").write_text("learning_rat = 0.1\n")
        rc = main(["train", "--bundle", str(root / "bundle"), "--out", str(root / "x"), "--config",
                   str(root / "bad.cfg")])
        assert rc == 2
        assert "unknown keys" in json.loads(capsys.readouterr().err.strip().splitlines()[-1])["message"]

    def test_read_config_file(self, tmp_path):
        (tmp_path / "c.cfg").write_text("a = 1\n\n# note\nb=x y\n")
        assert read_config_file(tmp_path / "c.cfg") == {"a": "1", "b": "x y"}


class TestInference:
    def ckpt(self, root):
        return str(root / "out/runs/dispa/random/seed0/best.ckpt")

    def test_evaluate(self, workspace, tmp_path):
        root, _ = workspace
        assert main(["evaluate", "--bundle", str(root / "bundle"), "--checkpoint", self.ckpt(root),
                     "--out", str(tmp_path)]) == 0
        metrics = json.loads((tmp_path / "metrics.json").read_text())
        report = json.loads((root / "out/runs/dispa/random/seed0/report.json").read_text())
        assert metrics["rmse"] == pytest.approx(report["metrics"]["test"]["rmse"], abs=1e-12)
        assert len(rows(tmp_path / "per_drug_pcc.csv")) == len({r["drug_id"] for r in rows(tmp_path / "predictions.csv")})

    def test_predict_new_units(self, workspace, tmp_path):
        root, raw = workspace
        expr = rows(raw["expression"])[:4]
        with open(tmp_path / "new.csv", "w", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=list(expr[0]))
            w.writeheader()
            for i, r in enumerate(expr):
                w.writerow({**r, "cell_id": f"spot{i}"})
        assert main(["predict", "--bundle", str(root / "bundle"), "--checkpoint", self.ckpt(root),
                     "--expression", str(tmp_path / "new.csv"), "--drugs", "D001,D002",
                     "--out", str(tmp_path / "p")]) == 0
        out = rows(tmp_path / "p/predictions.csv")
        assert len(out) == 8 and {r["drug_id"] for r in out} == {"D001", "D002"}
        assert all(np.isfinite(float(r["ln_ic50_pred"])) for r in out)

    def test_predict_matches_evaluate_on_training_cells(self, workspace, tmp_path):
        root, raw = workspace
        assert main(["evaluate", "--bundle", str(root / "bundle"), "--checkpoint", self.ckpt(root),
                     "--part", "all", "--out", str(tmp_path / "e")]) == 0
        assert main(["predict", "--bundle", str(root / "bundle"), "--checkpoint", self.ckpt(root),
                     "--expression", str(raw["expression"]), "--out", str(tmp_path / "p")]) == 0
        ev = {(r["cell_id"], r["drug_id"]): float(r["ln_ic50_pred"]) for r in rows(tmp_path / "e/predictions.csv")}
        pr = {(r["unit_id"], r["drug_id"]): float(r["ln_ic50_pred"]) for r in rows(tmp_path / "p/predictions.csv")}
        assert max(abs(ev[k] - pr[k]) for k in ev) < 1e-9

    def test_mismatch_is_structured_error(self, workspace, tmp_path, capsys):
        root, _ = workspace
        rc = main(["evaluate", "--bundle", str(root / "bundle"), "--checkpoint", self.ckpt(root),
                   "--d-a", "64", "--out", str(tmp_path)])
        err = json.loads(capsys.readouterr().err.strip().splitlines()[-1])
        assert rc == 2 and "config hash mismatch" in err["message"]

    def test_missing_checkpoint(self, workspace, tmp_path, capsys):
        root, _ = workspace
        rc = main(["evaluate", "--bundle", str(root / "bundle"), "--checkpoint", str(tmp_path / "nope.ckpt"),
                   "--out", str(tmp_path)])
        assert rc == 2 and "not found" in capsys.readouterr().err

    @pytest.mark.parametrize("fmt", ["csv", "json"])
    def test_attention(self, workspace, tmp_path, fmt):
        root, _ = workspace
        assert main(["attention", "--bundle", str(root / "bundle"), "--checkpoint", self.ckpt(root),
                     "--format", fmt, "--out", str(tmp_path)]) == 0
        assert (tmp_path / f"attention.{fmt}").stat().st_size > 0
        align = rows(tmp_path / "alignment.csv")
        assert len(align) == 10 and all(-1.0 <= float(r["score"]) <= 1.0 for r in align)


class TestCompareGroups:
    def test_outputs(self, tmp_path):
        rng = np.random.default_rng(0)
        units = [f"s{r}_{c}" for r in range(4) for c in range(4)]
        with open(tmp_path / "pred.csv", "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["unit_id", "drug_id", "ln_ic50_pred"])
            for j in range(5):
                for i, u in enumerate(units):
                    w.writerow([u, f"D{j}", (-3.0 if (i < 8 and j == 0) else 0.0) + 0.01 * rng.normal()])
        with open(tmp_path / "labels.csv", "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["unit_id", "group"])
            w.writerows((u, "top" if i < 8 else "bottom") for i, u in enumerate(units))
        with open(tmp_path / "coords.csv", "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["unit_id", "x", "y"])
            w.writerows((u, i // 4, i % 4) for i, u in enumerate(units))
        assert main(["compare-groups", "--predictions", str(tmp_path / "pred.csv"), "--labels",
                     str(tmp_path / "labels.csv"), "--coords", str(tmp_path / "coords.csv"), "--k", "4",
                     "--n-perm", "99", "--pairwise", "--out", str(tmp_path / "o")]) == 0
        top = rows(tmp_path / "o/selective_top_vs_bottom.csv")
        assert [r["drug_id"] for r in top if float(r["p_adjusted"]) < 0.05] == ["D0"]
        moran = {r["drug_id"]: float(r["morans_i"]) for r in rows(tmp_path / "o/morans_i.csv")}
        assert moran["D0"] > 0.3


class TestMisc:
    def test_selftest(self, capsys):
        assert main(["selftest"]) == 0
        out = capsys.readouterr().out
        assert "FAIL" not in out and out.count("PASS") == 6

    def test_threads_sets_env(self, monkeypatch, capsys):
        for var in THREAD_ENV_VARS:
            monkeypatch.delenv(var, raising=False)
        assert main(["fragment", "--print-rules", "--threads", "1"]) == 0
        import os

        assert all(os.environ[v] == "1" for v in THREAD_ENV_VARS)

    def test_console_script_version(self):
        out = subprocess.run([sys.executable, "-m", "dispa.cli", "--version"], capture_output=True, text=True)
        assert out.returncode == 0 and out.stdout.strip()
