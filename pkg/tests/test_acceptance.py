"""Acceptance suite: one test per criterion, each printing a PASS/FAIL line.

Everything runs at full size through the command line: the default corpus
(250 images per class at 64x64, seed 42), a 20-epoch classifier, and a
100-image held-out evaluation. Expect roughly half an hour on one CPU core.

Run alone with ``pytest -v tests/test_acceptance.py`` or as a script.
"""

import contextlib
import csv
import io
import re
import sys
import time
from dataclasses import dataclass, field

import numpy as np
import pytest

from evidx.classifier import load_model
from evidx.cli import main
from evidx.explainer import ExplainerConfig, explain
from evidx.metrics import aggregate, read_reports, summary_value
from evidx.selftest import run_selftest
from evidx.synth import read_corpus, split_corpus

N_EVAL = 100
SWEEP_RUNS = 20
REPRO_RUNS = 10


@dataclass
class Run:
    root: object
    corpus: object = None
    model: object = None
    train_seconds: float = 0.0
    test_accuracy: float = 0.0
    eval_csv: object = None
    reports: list = field(default_factory=list)


def _line(number, ok, text):
    status = "PASS" if ok else "FAIL"
    return f"[{status}] criterion {number:>2}: {text}"


@pytest.fixture(scope="module")
def run(tmp_path_factory):
    root = tmp_path_factory.mktemp("acceptance")
    r = Run(root, corpus=root / "corpus", model=root / "model.evdx", eval_csv=root / "eval.csv")
    assert main(["gen-data", "--out", str(r.corpus)]) == 0
    return r


@pytest.fixture(scope="module")
def trained(run):
    started = time.perf_counter()
    buf = io.StringIO()
    with contextlib.redirect_stdout(buf):
        code = main(["train", "--corpus", str(run.corpus), "--out", str(run.model), "--seed", "42"])
    out = buf.getvalue()
    run.train_seconds = time.perf_counter() - started
    assert code == 0
    run.test_accuracy = float(re.search(r"test_accuracy=([0-9.]+)", out).group(1))
    return run


@pytest.fixture(scope="module")
def evaluated(trained):
    code = main(["evaluate", "--model", str(trained.model), "--corpus", str(trained.corpus), "--out", str(trained.eval_csv), "--n", str(N_EVAL)])
    assert code == 0
    trained.reports = read_reports(trained.eval_csv)
    return trained


def _report(capsys, number, ok, text):
    with capsys.disabled():
        print("\n" + _line(number, ok, text))
    assert ok, text


def _medcam(reports):
    return [r for r in reports if r.method == "medcam"]


def test_1_selftest(capsys):
    report = run_selftest()
    worst_grad = max(r.worst for r in report.results if r.name != "conv2d_oracle")
    conv = next(r for r in report.results if r.name == "conv2d_oracle")
    ok = report.passed and report.seconds < 60 and min(r.trials for r in report.results) >= 50
    _report(
        capsys,
        1,
        ok,
        f"{len(report.results)} checks, worst gradient rel. error {worst_grad:.2e} (< 1e-4), "
        f"conv vs naive {conv.worst:.2e} (< 1e-12), {report.seconds:.1f} s (< 60 s)",
    )


def test_2_classifier(trained, capsys):
    ok = trained.test_accuracy >= 0.90 and trained.train_seconds < 600
    _report(capsys, 2, ok, f"held-out accuracy {trained.test_accuracy:.4f} (>= 0.90) in {trained.train_seconds:.0f} s (< 600 s)")


def test_3_fidelity_at_minimality(evaluated, capsys):
    med = _medcam(evaluated.reports)
    preserved = [r for r in med if r.decision_preserved]
    rate = len(preserved) / len(med)
    mean_area = float(np.mean([r.area_fraction for r in med]))
    nontrivial = all(r.area_fraction < 1 for r in preserved)
    ok = len(med) == N_EVAL and rate >= 0.90 and mean_area < 0.5 and nontrivial
    _report(
        capsys,
        3,
        ok,
        f"preserved {len(preserved)}/{len(med)} (>= 90%), mean area {mean_area:.4f} (< 0.5), "
        f"all preserved areas < 1: {nontrivial}",
    )


def test_4_confidence_direction(evaluated, capsys):
    preserved = [r for r in _medcam(evaluated.reports) if r.decision_preserved]
    conf_x = float(np.mean([r.conf_x for r in preserved]))
    conf_e = float(np.mean([r.conf_e for r in preserved]))
    delta = conf_e - conf_x
    _report(capsys, 4, delta >= -0.02, f"mean conf {conf_x:.4f} -> {conf_e:.4f}, delta {delta:+.4f} (>= -0.02)")


def test_5_crispness(evaluated, capsys):
    med = _medcam(evaluated.reports)
    crisp = sum(r.bin_fraction >= 0.95 for r in med)
    _report(capsys, 5, crisp >= 90, f"{crisp}/{len(med)} masks with >= 95% pixels within 0.1 of 0 or 1 (>= 90)")


def test_6_robustness(evaluated, capsys):
    preserved = [r for r in _medcam(evaluated.reports) if r.decision_preserved]
    rate = float(np.mean([r.rob_pass_rate for r in preserved]))
    _report(capsys, 6, rate >= 0.90, f"pass rate {rate:.4f} over 20 fresh backgrounds x {len(preserved)} preserved images (>= 0.90)")


def test_7_baselines(evaluated, capsys):
    rows = aggregate(evaluated.reports)
    iou = {m: summary_value(rows, m, "truth_iou") for m in ("medcam", "gradcam", "random")}
    kept = {m: summary_value(rows, m, "preservation_rate") for m in ("medcam", "gradcam", "random")}
    ok = all(iou["medcam"] > iou[m] and kept["medcam"] > kept[m] for m in ("gradcam", "random"))
    margins = ", ".join(f"vs {m}: IoU {iou['medcam'] - iou[m]:+.4f}, preservation {kept['medcam'] - kept[m]:+.4f}" for m in ("gradcam", "random"))
    text = (
        f"IoU medcam/gradcam/random {iou['medcam']:.4f}/{iou['gradcam']:.4f}/{iou['random']:.4f}; "
        f"preservation {kept['medcam']:.4f}/{kept['gradcam']:.4f}/{kept['random']:.4f}; margins {margins}"
    )
    _report(capsys, 7, ok, text)


def test_8_minimality_pressure(evaluated, capsys):
    model = load_model(evaluated.model)
    _, test = split_corpus(read_corpus(evaluated.corpus))
    base = {r.image_id: r.area_fraction for r in _medcam(evaluated.reports)}
    default = ExplainerConfig.from_preset("default")
    heavy = ExplainerConfig.from_preset("default", lambda_area=10 * default.lambda_area)
    violations = []
    for item in test[:SWEEP_RUNS]:
        _, _, rep = explain(item.pixels, model, heavy, image_id=item.image_id)
        if rep.area_fraction > base[item.image_id]:
            violations.append(f"{item.image_id} {base[item.image_id]:.4f}->{rep.area_fraction:.4f}")
    detail = "; ".join(violations) or "none"
    _report(capsys, 8, len(violations) <= 2, f"{len(violations)} violations in {SWEEP_RUNS} runs at 10x lambda_area (<= 2): {detail}")


def _explain_cli(run, out):
    image = run.corpus / "img00002.ppm"
    started = time.perf_counter()
    code = main(["explain", "--model", str(run.model), "--image", str(image), "--out", str(out)])
    return code, time.perf_counter() - started


@pytest.fixture(scope="module")
def explained_twice(evaluated):
    return [_explain_cli(evaluated, evaluated.root / d) for d in ("ex_a", "ex_b")]


def test_9_runtime(evaluated, explained_twice, capsys):
    worst = max(secs for _, secs in explained_twice)
    median = float(np.median([r.wall_seconds for r in _medcam(evaluated.reports)]))
    _report(capsys, 9, worst <= 30, f"single explanation {worst:.1f} s (<= 30 s); median over the evaluation {median:.1f} s")


def _rows(path):
    with open(path) as fh:
        return [{k: v for k, v in r.items() if k != "wall_seconds"} for r in csv.DictReader(fh)]


def test_10_determinism(evaluated, explained_twice, capsys):
    codes = {code for code, _ in explained_twice}
    same = len(codes) == 1 and all(
        (evaluated.root / "ex_a" / f).read_bytes() == (evaluated.root / "ex_b" / f).read_bytes()
        for f in ("mask.pgm", "mask_binary.pgm", "masked.ppm")
    )
    # re-evaluate a prefix; wall time is the only field allowed to differ
    again = evaluated.root / "eval_again.csv"
    argv = ["evaluate", "--model", str(evaluated.model), "--corpus", str(evaluated.corpus), "--out", str(again)]
    assert main(argv + ["--n", str(REPRO_RUNS), "--workers", "1"]) == 0
    second = _rows(again)
    ids = {r["image_id"] for r in second}
    reproduced = len(second) == 3 * REPRO_RUNS and [r for r in _rows(evaluated.eval_csv) if r["image_id"] in ids] == second
    _report(capsys, 10, same and reproduced, f"explain outputs byte-identical: {same}; {len(second)} evaluation rows reproduced: {reproduced}")


if __name__ == "__main__":
    sys.exit(pytest.main(["-v", "-s", __file__]))
