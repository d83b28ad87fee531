import csv
import subprocess
import sys

import numpy as np
import pytest

from evidx import netpbm
from evidx.cli import main, read_config
from evidx.engine import ops
from evidx.errors import ParameterError


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    corpus = root / "corpus"
    assert main(["gen-data", "--out", str(corpus), "--n-per-class", "5", "--size", "32", "--seed", "3"]) == 0
    model = root / "model.evdx"
    assert main(["train", "--corpus", str(corpus), "--out", str(model), "--epochs", "1", "--seed", "1"]) == 0
    return root, corpus, model


def _explain(ws, out, *extra):
    root, corpus, model = ws
    return main(["explain", "--model", str(model), "--image", str(corpus / "img00005.ppm"), "--out", str(out), "--steps", "4", *extra])


def test_gen_data_counts(tmp_path):
    out = tmp_path / "c"
    assert main(["gen-data", "--out", str(out), "--n-per-class", "200", "--size", "32"]) == 0
    assert len(list(out.glob("img?????.ppm"))) == 800
    assert len(list(out.glob("*_truth.pgm"))) == 800
    with open(out / "manifest.csv") as fh:
        assert len(list(csv.DictReader(fh))) == 800


def test_gen_data_rerun_byte_identical(tmp_path):
    for name in ("a", "b"):
        assert main(["gen-data", "--out", str(tmp_path / name), "--n-per-class", "2", "--size", "32", "--seed", "9"]) == 0
    for f in sorted((tmp_path / "a").iterdir()):
        assert f.read_bytes() == (tmp_path / "b" / f.name).read_bytes()


def test_gen_data_small_size_exit_1(tmp_path, capsys):
    assert main(["gen-data", "--out", str(tmp_path), "--size", "16"]) == 1
    assert "32" in capsys.readouterr().err


def test_usage_errors_exit_1(capsys):
    assert main([]) == 1
    assert main(["explain", "--model", "m"]) == 1
    assert main(["frobnicate"]) == 1


def test_train_prints_accuracy(workspace, capsys, tmp_path):
    _, corpus, _ = workspace
    assert main(["train", "--corpus", str(corpus), "--out", str(tmp_path / "m.evdx"), "--epochs", "1"]) == 0
    line = capsys.readouterr().out.strip()
    assert line.startswith("train_accuracy=") and "test_accuracy=" in line and "seed=42" in line


def test_explain_writes_artifacts_and_is_deterministic(workspace, tmp_path):
    codes = [_explain(workspace, tmp_path / name, "--seed", "2") for name in ("a", "b")]
    assert codes[0] == codes[1] and codes[0] in (0, 5)
    for name in ("mask.pgm", "mask_binary.pgm", "masked.ppm"):
        a = (tmp_path / "a" / name).read_bytes()
        assert a == (tmp_path / "b" / name).read_bytes()
        assert b"# evidx explain seed=2\n" in a
    binary = netpbm.read_pgm(tmp_path / "a" / "mask_binary.pgm")
    assert set(np.unique(binary)) <= {0.0, 1.0}
    with open(tmp_path / "a" / "report.csv") as fh:
        rows = list(csv.DictReader(fh))
    assert len(rows) == 1 and rows[0]["seed"] == "2" and rows[0]["image_id"] == "img00005"
    assert codes[0] == (0 if rows[0]["decision_preserved"] == "1" else 5)


def test_explain_appends_report(workspace, tmp_path):
    _explain(workspace, tmp_path)
    _explain(workspace, tmp_path)
    assert len((tmp_path / "report.csv").read_text().splitlines()) == 3


def test_explain_zero_steps_exit_1(workspace, tmp_path):
    root, corpus, model = workspace
    code = main(["explain", "--model", str(model), "--image", str(corpus / "img00001.ppm"), "--out", str(tmp_path), "--steps", "0"])
    assert code == 1


def test_explain_size_mismatch_names_both(workspace, tmp_path, capsys):
    _, _, model = workspace
    big = tmp_path / "big.ppm"
    netpbm.write_ppm(big, np.zeros((3, 64, 64)))
    assert main(["explain", "--model", str(model), "--image", str(big), "--out", str(tmp_path / "o")]) == 1
    err = capsys.readouterr().err
    assert "64x64" in err and "32x32" in err


def test_missing_or_corrupt_files_exit_2(workspace, tmp_path):
    root, corpus, model = workspace
    bad = tmp_path / "bad.evdx"
    bad.write_bytes(b"NOPE" + bytes(20))
    assert main(["explain", "--model", str(bad), "--image", str(corpus / "img00001.ppm"), "--out", str(tmp_path)]) == 2
    assert main(["explain", "--model", str(tmp_path / "none.evdx"), "--image", "x.ppm", "--out", str(tmp_path)]) == 2


def test_config_file_and_flag_override(workspace, tmp_path):
    cfg = tmp_path / "run.cfg"
    cfg.write_text("# tiny run\nsteps = 2\nseed = 7  # trailing comment\nlambda-area = 80\n")
    assert read_config(cfg) == {"steps": "2", "seed": "7", "lambda_area": "80"}
    assert _explain(workspace, tmp_path / "file", "--config", str(cfg)) in (0, 5)
    assert b"seed=7" in (tmp_path / "file" / "mask.pgm").read_bytes()
    assert _explain(workspace, tmp_path / "flag", "--config", str(cfg), "--seed", "8") in (0, 5)
    assert b"seed=8" in (tmp_path / "flag" / "mask.pgm").read_bytes()


@pytest.mark.parametrize("text", ["stpes = 3\n", "preset = isic\n", "steps = many\n", "just words\n"])
def test_config_errors_exit_1(workspace, tmp_path, text):
    cfg = tmp_path / "bad.cfg"
    cfg.write_text(text)
    assert _explain(workspace, tmp_path, "--config", str(cfg)) == 1


def test_read_config_rejects_garbage(tmp_path):
    cfg = tmp_path / "c.cfg"
    cfg.write_text("steps 3\n")
    with pytest.raises(ParameterError):
        read_config(cfg)


def test_gradcam_command(workspace, tmp_path):
    root, corpus, model = workspace
    args = ["gradcam", "--model", str(model), "--image", str(corpus / "img00006.ppm"), "--out", str(tmp_path), "--keep-fraction", "0.25"]
    assert main(args + ["--layer", "block2"]) == 0
    heat = netpbm.read_pgm(tmp_path / "heatmap.pgm")
    assert heat.shape == (32, 32)
    assert netpbm.read_pgm(tmp_path / "gradcam_mask.pgm").sum() == 256
    assert main(args + ["--layer", "block9"]) == 1
    assert main(args[:-2] + ["--keep-fraction", "0"]) == 1


def test_evaluate_three_methods(workspace, tmp_path, capsys):
    root, corpus, model = workspace
    out = tmp_path / "eval.csv"
    argv = ["evaluate", "--model", str(model), "--corpus", str(corpus), "--out", str(out), "--n", "2", "--steps", "3", "--rob-trials", "4"]
    assert main(argv) == 0
    with open(out) as fh:
        rows = list(csv.DictReader(fh))
    assert [r["method"] for r in rows] == ["medcam", "gradcam", "random"] * 2
    assert [r["image_id"] for r in rows] == sorted(r["image_id"] for r in rows)
    with open(tmp_path / "eval_summary.csv") as fh:
        summary = list(csv.DictReader(fh))
    assert {r["method"] for r in summary} == {"medcam", "gradcam", "random"}
    # area budget is shared across methods
    areas = {r["method"]: r["area_fraction"] for r in rows[:3]}
    assert abs(float(areas["random"]) - float(areas["medcam"])) < 1e-9
    assert main(argv[:-6] + ["--methods", "medcam,lime"]) == 1


def test_evaluate_reproducible(workspace, tmp_path):
    root, corpus, model = workspace

    def run(name):
        out = tmp_path / name
        argv = ["evaluate", "--model", str(model), "--corpus", str(corpus), "--out", str(out), "--n", "2", "--steps", "2", "--rob-trials", "3"]
        assert main(argv) == 0
        with open(out) as fh:
            return [{k: v for k, v in r.items() if k != "wall_seconds"} for r in csv.DictReader(fh)]

    assert run("a.csv") == run("b.csv")


def test_selftest_command(capsys):
    assert main(["selftest", "--trials", "3"]) == 0
    assert "overall" in capsys.readouterr().out


def test_selftest_failure_exit_4(monkeypatch):
    original = ops.Exp.backward
    monkeypatch.setattr(ops.Exp, "backward", lambda self, g: tuple(2 * d for d in original(self, g)))
    assert main(["selftest", "--trials", "3"]) == 4


def test_module_entry_point():
    done = subprocess.run([sys.executable, "-m", "evidx", "gen-data", "--out", "/nonexistent-dir/x", "--size", "8"], capture_output=True)
    assert done.returncode == 1


def test_unwritable_output_exit_2(tmp_path):
    blocker = tmp_path / "file"
    blocker.write_text("")
    assert main(["gen-data", "--out", str(blocker / "sub"), "--size", "32", "--n-per-class", "1"]) == 2


def test_evaluate_rows_independent_of_worker_count(workspace, tmp_path):
    root, corpus, model = workspace
    rows = []
    for workers in ("1", "2"):
        out = tmp_path / f"w{workers}.csv"
        argv = ["evaluate", "--model", str(model), "--corpus", str(corpus), "--out", str(out), "--n", "3"]
        assert main(argv + ["--steps", "2", "--rob-trials", "3", "--split", "all", "--workers", workers]) == 0
        with open(out) as fh:
            rows.append([{k: v for k, v in r.items() if k != "wall_seconds"} for r in csv.DictReader(fh)])
    assert rows[0] == rows[1] and len(rows[0]) == 9
