"""Command line entry point: ``evidx <command> [options]``.

Exit codes: 0 success, 1 usage or validation error, 2 I/O or format error,
3 numeric divergence, 4 self-test failure, 5 explanation did not preserve
the classifier's decision.
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from . import netpbm
from .classifier import load_model, logits_of, probabilities, save_model, train_classifier
from .errors import DimensionError, EvidxError, FormatError, ParameterError, SelfTestFailure
from .evaluate import EvalItem, evaluate, parse_methods
from .explainer import TERMS, ExplainerConfig, explain
from .gradcam import DEFAULT_LAYER, gradcam, threshold_heatmap
from .metrics import aggregate, score_mask, write_reports, write_summary
from .robustness import CLI_BACKGROUND_NAMES
from .selftest import run_selftest
from .synth import MIN_IMAGE_SIZE, generate_corpus, read_corpus, split_corpus, write_corpus

NOT_PRESERVED_EXIT = 5
IO_EXIT = 2

logger = logging.getLogger("evidx")


class _Parser(argparse.ArgumentParser):
    # usage errors map to exit code 1 rather than argparse's default 2
    def error(self, message):
        raise ParameterError(f"{self.prog}: {message}")


# --- config file --------------------------------------------------------------


def read_config(path) -> dict:
    """Flat ``key = value`` file; ``#`` starts a comment."""
    values = {}
    try:
        lines = Path(path).read_text().splitlines()
    except OSError as exc:
        raise FormatError(f"cannot read config file {path}: {exc.strerror}") from None
    for number, raw in enumerate(lines, 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ParameterError(f"{path}:{number}: expected 'key = value', got {raw.strip()!r}")
        key, value = (part.strip() for part in line.split("=", 1))
        values[key.replace("-", "_")] = value
    return values


def _apply_config(parser: argparse.ArgumentParser, sub: argparse.ArgumentParser, argv, args):
    values = read_config(args.config)
    actions = {a.dest: a for a in sub._actions if a.dest not in ("help", "config")}
    unknown = sorted(set(values) - set(actions))
    if unknown:
        raise ParameterError(f"unknown key(s) in {args.config}: {', '.join(unknown)}; valid keys: {', '.join(sorted(actions))}")
    for key, value in values.items():
        action = actions[key]
        if action.type is not None:
            try:
                values[key] = action.type(value)
            except (TypeError, ValueError):
                raise ParameterError(f"{args.config}: bad value for {key}: {value!r}") from None
        if action.choices is not None and values[key] not in action.choices:
            raise ParameterError(f"{args.config}: {key} must be one of {sorted(action.choices)}, got {value!r}")
    # flags given on the command line are parsed after these defaults, so they win
    sub.set_defaults(**values)
    return parser.parse_args(argv)


# --- shared flag groups ---------------------------------------------------------


def _explainer_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--preset", choices=("bach", "ham", "default"), default="default")
    for term in TERMS:
        p.add_argument(f"--lambda-{term}", type=float, default=None, help=f"override the preset's lambda_{term}")
    p.add_argument("--steps", type=int, default=ExplainerConfig.steps)
    p.add_argument("--lr", type=float, default=ExplainerConfig.lr)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--background", choices=sorted(CLI_BACKGROUND_NAMES), default="uniform")
    p.add_argument("--threshold", type=float, default=ExplainerConfig.binarize_threshold)
    p.add_argument("--distance", choices=("mse", "cosine"), default=ExplainerConfig.distance_kind)
    p.add_argument("--rob-samples", type=int, default=ExplainerConfig.rob_samples_per_step)
    p.add_argument("--rob-trials", type=int, default=20, help="fresh backgrounds for the final robustness check")
    p.add_argument("--pool", help="corpus directory supplying backgrounds for --background corpus")


def explainer_config(args) -> ExplainerConfig:
    overrides = {f"lambda_{t}": getattr(args, f"lambda_{t}") for t in TERMS if getattr(args, f"lambda_{t}") is not None}
    return ExplainerConfig.from_preset(
        args.preset,
        steps=args.steps,
        lr=args.lr,
        seed=args.seed,
        background_kind=CLI_BACKGROUND_NAMES[args.background],
        binarize_threshold=args.threshold,
        distance_kind=args.distance,
        rob_samples_per_step=args.rob_samples,
        **overrides,
    )


def _pool(args) -> Optional[list]:
    if args.background != "corpus":
        return None
    if not args.pool:
        raise ParameterError("--background corpus needs --pool <corpus dir>")
    return [item.pixels for item in read_corpus(args.pool)]


def _load_image(path, model) -> np.ndarray:
    image = netpbm.read_ppm(path)
    want = (model.in_channels, model.image_size, model.image_size)
    if image.shape != want:
        raise DimensionError(
            f"image {path} is {image.shape[2]}x{image.shape[1]} but the model expects {model.image_size}x{model.image_size}"
        )
    return image


def _out_dir(path) -> Path:
    out = Path(path)
    out.mkdir(parents=True, exist_ok=True)
    return out


# --- commands -------------------------------------------------------------------


def cmd_gen_data(args) -> int:
    if args.size < MIN_IMAGE_SIZE:
        raise ParameterError(f"--size must be >= {MIN_IMAGE_SIZE}, got {args.size}")
    corpus = generate_corpus(args.n_per_class, args.size, args.seed)
    manifest = write_corpus(corpus, args.out)
    print(f"wrote {len(corpus)} images to {manifest.parent} (seed {args.seed})")
    return 0


def cmd_train(args) -> int:
    corpus = read_corpus(args.corpus)
    train, test = split_corpus(corpus, args.test_fraction)
    result = train_classifier(train, epochs=args.epochs, lr=args.lr, seed=args.seed, test_corpus=test, batch_size=args.batch_size)
    save_model(result.model, args.out)
    print(
        f"train_accuracy={result.train_accuracy:.4f} test_accuracy={result.test_accuracy:.4f} "
        f"n_train={len(train)} n_test={len(test)} seed={args.seed} model={args.out}"
    )
    return 0


def cmd_explain(args) -> int:
    config = explainer_config(args)
    model = load_model(args.model)
    image = _load_image(args.image, model)
    truth = netpbm.read_pgm(args.truth) > 0.5 if args.truth else None
    image_id = Path(args.image).stem
    mask, e, report = explain(image, model, config, pool=_pool(args), truth_mask=truth, image_id=image_id, rob_trials=args.rob_trials)
    out = _out_dir(args.out)
    note = f"evidx explain seed={config.seed}"
    netpbm.write_pgm(out / "mask.pgm", mask.values, note)
    netpbm.write_pgm(out / "mask_binary.pgm", mask.binarized.astype(np.float64), note)
    netpbm.write_ppm(out / "masked.ppm", e, note)
    write_reports(out / "report.csv", [report], append=True)
    status = "preserved" if report.decision_preserved else "NOT preserved"
    print(
        f"{image_id}: class {report.y} {status}; conf {report.conf_x:.4f} -> {report.conf_e:.4f}; "
        f"area {report.area_fraction:.4f}; robustness {report.rob_pass_rate:.2f}; seed {config.seed}"
    )
    return 0 if report.decision_preserved else NOT_PRESERVED_EXIT


def cmd_gradcam(args) -> int:
    model = load_model(args.model)
    image = _load_image(args.image, model)
    probs = probabilities(logits_of(model, image[None]))[0]
    target = int(np.argmax(probs)) if args.target is None else args.target
    heat = gradcam(model, image, target, args.layer)
    binary = threshold_heatmap(heat, args.keep_fraction)
    image_id = Path(args.image).stem
    report = score_mask(
        model,
        image,
        binary,
        target,
        image_id=image_id,
        method="gradcam",
        conf_x=float(probs[target]),
        continuous=heat.values,
        rob_trials=args.rob_trials,
        rob_seed=args.seed,
        background_kind=CLI_BACKGROUND_NAMES[args.background],
        pool=_pool(args),
        seed=args.seed,
    )
    out = _out_dir(args.out)
    note = f"evidx gradcam layer={args.layer} seed={args.seed}"
    netpbm.write_pgm(out / "heatmap.pgm", heat.values, note)
    netpbm.write_pgm(out / "gradcam_mask.pgm", binary.astype(np.float64), note)
    write_reports(out / "report.csv", [report], append=True)
    flag = " (zero map)" if heat.zero else ""
    print(f"{image_id}: class {target} layer {args.layer}{flag}; kept {binary.mean():.4f}; preserved {report.decision_preserved}")
    return 0


def cmd_evaluate(args) -> int:
    config = explainer_config(args)
    methods = parse_methods(args.methods)
    if args.n < 1:
        raise ParameterError(f"--n must be >= 1, got {args.n}")
    model = load_model(args.model)
    corpus = read_corpus(args.corpus)
    pool_items = corpus
    if args.split == "test":
        pool_items, corpus = split_corpus(corpus, args.test_fraction)
    items = [EvalItem(c.image_id, c.pixels, c.label, c.truth_mask) for c in corpus[: args.n]]
    pool = [c.pixels for c in pool_items] if args.background == "corpus" else None

    def progress(reports):
        logger.info("%s done", reports[0].image_id)

    reports = evaluate(model, items, config, methods, pool=pool, workers=args.workers, layer=args.layer, rob_trials=args.rob_trials, progress=progress)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    write_reports(out, reports)
    rows = aggregate(reports)
    summary = out.with_name(out.stem + "_summary.csv")
    write_summary(summary, rows)
    for row in rows:
        print(f"{row['method']:<8} {row['metric']:<18} {row['mean']:.4f} +- {row['std']:.4f} (n={row['n']})")
    print(f"wrote {out} and {summary} (seed {config.seed})")
    return 0


def cmd_selftest(args) -> int:
    report = run_selftest(trials=args.trials, seed=args.seed)
    print(report.table())
    if not report.passed:
        raise SelfTestFailure("engine self-test failed")
    return 0


# --- parser -------------------------------------------------------------------


def build_parser():
    parser = _Parser(prog="evidx", description="Per-image evidence masks for a small CNN classifier.")
    parser.add_argument("-v", "--verbose", action="store_true")
    subs = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)
    commands = {}

    def add(name, func, help_text):
        p = subs.add_parser(name, help=help_text)
        p.add_argument("--config", help="flat key = value file; flags override its values")
        p.set_defaults(func=func)
        commands[name] = p
        return p

    p = add("gen-data", cmd_gen_data, "generate the synthetic corpus")
    p.add_argument("--out", required=True)
    p.add_argument("--n-per-class", type=int, default=250)
    p.add_argument("--size", type=int, default=64)
    p.add_argument("--seed", type=int, default=42)

    p = add("train", cmd_train, "train the classifier on a corpus directory")
    p.add_argument("--corpus", required=True)
    p.add_argument("--out", required=True, help="model file to write")
    p.add_argument("--epochs", type=int, default=20)
    p.add_argument("--lr", type=float, default=3e-3)
    p.add_argument("--seed", type=int, default=42)
    p.add_argument("--batch-size", type=int, default=32)
    p.add_argument("--test-fraction", type=float, default=0.2)

    p = add("explain", cmd_explain, "optimise an evidence mask for one image")
    p.add_argument("--model", required=True)
    p.add_argument("--image", required=True)
    p.add_argument("--truth", help="optional truth-mask PGM for IoU")
    p.add_argument("--out", required=True, help="output directory")
    _explainer_flags(p)

    p = add("gradcam", cmd_gradcam, "Grad-CAM heatmap and top-k mask for one image")
    p.add_argument("--model", required=True)
    p.add_argument("--image", required=True)
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--layer", default=DEFAULT_LAYER)
    p.add_argument("--keep-fraction", type=float, default=0.1)
    p.add_argument("--target", type=int, default=None, help="class to explain (default: predicted)")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--background", choices=sorted(CLI_BACKGROUND_NAMES), default="uniform")
    p.add_argument("--rob-trials", type=int, default=20)
    p.add_argument("--pool")

    p = add("evaluate", cmd_evaluate, "compare methods over held-out images")
    p.add_argument("--model", required=True)
    p.add_argument("--corpus", required=True)
    p.add_argument("--out", required=True, help="per-image CSV; the summary goes next to it")
    p.add_argument("--methods", default="medcam,gradcam,random")
    p.add_argument("--n", type=int, default=100)
    p.add_argument("--split", choices=("test", "all"), default="test")
    p.add_argument("--test-fraction", type=float, default=0.2)
    p.add_argument("--workers", type=int, default=1)
    p.add_argument("--layer", default=DEFAULT_LAYER)
    _explainer_flags(p)

    p = add("selftest", cmd_selftest, "gradient checks and op oracles for the engine")
    p.add_argument("--trials", type=int, default=50)
    p.add_argument("--seed", type=int, default=0)
    return parser, commands


def main(argv: Optional[Sequence[str]] = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser, commands = build_parser()
    try:
        args = parser.parse_args(argv)
        if args.config:
            args = _apply_config(parser, commands[args.command], argv, args)
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
        return args.func(args)
    except EvidxError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return IO_EXIT


if __name__ == "__main__":
    sys.exit(main())
