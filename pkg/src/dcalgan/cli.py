"""Command-line entry point: ``dcalgan <subcommand> [--config FILE] [--key value ...]``.

Settings come from built-in defaults, then an optional ``key = value`` config
file, then command-line flags. Unknown keys are rejected. Every command that
writes files does so under ``<out>/<command>-<hash>-s<seed>/`` where the hash
covers the effective settings, and echoes those settings to ``config.txt``.

Exit codes: 0 ok, 1 usage or config error, 2 data error, 3 numeric failure,
4 theory identity violated.
"""

from __future__ import annotations

import os

# single-threaded BLAS keeps float reductions in a fixed order (bitwise reruns)
for _var in ("OPENBLAS_NUM_THREADS", "OMP_NUM_THREADS", "MKL_NUM_THREADS"):
    os.environ.setdefault(_var, "1")

import argparse
import csv
import hashlib
import logging
import sys
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Callable, Sequence

from . import classify, data, theory, training
from .checkpoint import load_checkpoint
from .errors import ConfigError, DataError, NumericError
from .models import FUSION_LAYERS, get_config

logger = logging.getLogger("dcalgan")

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_NUMERIC, EXIT_THEORY = 0, 1, 2, 3, 4
THEORY_TOL = 1e-12


class TheoryViolation(Exception):
    pass


# -- settings ------------------------------------------------------------------


def _int_list(text: str) -> tuple[int, ...]:
    return tuple(int(t) for t in text.split(",") if t.strip())


def _str_list(text: str) -> tuple[str, ...]:
    return tuple(t.strip() for t in text.split(",") if t.strip())


def _opt_int(text: str) -> int | None:
    return None if text.lower() in ("", "none") else int(text)


def _opt_pair(text: str) -> tuple[int, int] | None:
    if text.lower() in ("", "none"):
        return None
    vals = _int_list(text)
    if len(vals) != 2:
        raise ValueError("expected two comma-separated integers")
    return vals  # type: ignore[return-value]


@dataclass(frozen=True)
class Key:
    parse: Callable[[str], Any]
    default: Any
    help: str


KEYS: dict[str, Key] = {
    # network and training
    "preset": Key(str, "desk", "network preset: desk (64x64) or paper (512x512)"),
    "fusion": Key(str, "F2", "fusion mode F1, F2 or F3 (evaluate: comma list)"),
    "seed": Key(int, 0, "seed for initialization, shuffling, noise and CV folds"),
    "batch_size": Key(int, 64, "training batch size (>= 2)"),
    "epochs": Key(int, 1, "training epochs (total, counting a resumed run)"),
    "iterations": Key(_opt_int, None, "train for exactly this many iterations instead of whole epochs"),
    "lr": Key(float, 0.0002, "Adam learning rate for both networks"),
    "beta1": Key(float, 0.5, "Adam beta1"),
    "d_steps": Key(int, 1, "discriminator updates per generator update"),
    "checkpoint_every": Key(int, 0, "write a checkpoint every N epochs (0: final only)"),
    "grid_epochs": Key(_int_list, training.DEFAULT_GRID_EPOCHS, "epochs at which sample grids are written"),
    "rows": Key(int, 8, "sample grid rows"),
    "cols": Key(int, 8, "sample grid columns"),
    "image_format": Key(str, "pgm", "image file format: pgm or png"),
    # classifier
    "svm_c": Key(float, 1.0, "SVM regularization trade-off C"),
    "k": Key(str, "10", "folds for cross-validation (evaluate: comma list)"),
    "svm_max_iters": Key(int, 20000, "SVM gradient-descent iteration cap"),
    "svm_tol": Key(float, 1e-12, "SVM relative-decrease stopping tolerance"),
    # synthetic data
    "n_per_class": Key(int, 100, "synthetic images per class"),
    "size": Key(int, 64, "synthetic image side in pixels"),
    "class_counts": Key(_opt_pair, None, "optional n_pos,n_neg override, e.g. 23,61"),
    # theory
    "random_pairs": Key(int, 100, "random distribution pairs checked by verify-theory"),
    # paths
    "data": Key(str, "", "dataset directory (with manifest.txt)"),
    "checkpoint": Key(str, "", "checkpoint file (.dcal)"),
    "features": Key(str, "", "feature matrix file (.dcfm)"),
    "resume": Key(str, "", "checkpoint to resume training from"),
    "out": Key(str, "runs", "root directory for run outputs"),
}

COMMAND_KEYS: dict[str, tuple[str, ...]] = {
    "synth": ("seed", "n_per_class", "size", "class_counts", "image_format", "out"),
    "train": ("preset", "fusion", "seed", "batch_size", "epochs", "iterations", "lr", "beta1", "d_steps",
              "checkpoint_every", "grid_epochs", "rows", "cols", "data", "resume", "out"),
    "sample": ("checkpoint", "rows", "cols", "seed", "image_format", "out"),
    "extract": ("checkpoint", "data", "fusion", "out"),
    "classify": ("features", "checkpoint", "data", "fusion", "svm_c", "k", "seed", "svm_max_iters",
                 "svm_tol", "out"),
    "evaluate": ("checkpoint", "data", "fusion", "k", "seed", "svm_c", "svm_max_iters", "svm_tol", "out"),
    "verify-theory": ("random_pairs", "seed"),
}
# per-command defaults that differ from KEYS
COMMAND_DEFAULTS: dict[str, dict[str, Any]] = {
    "evaluate": {"fusion": "F1,F2,F3", "k": "5,10,20"},
}
# keys that identify inputs but are not hashed into the run directory name
UNHASHED = {"out"}


def read_config_file(path: str | Path) -> dict[str, str]:
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config file {path}: {exc}") from exc
    values: dict[str, str] = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{path}:{lineno}: expected key = value")
        key, value = (s.strip() for s in line.split("=", 1))
        if key not in KEYS:
            raise ConfigError(f"{path}:{lineno}: unknown key {key!r}")
        values[key] = value
    return values


def resolve(command: str, file_values: dict[str, str], flag_values: dict[str, str | None]) -> dict[str, Any]:
    allowed = COMMAND_KEYS[command]
    extra = sorted(set(file_values) - set(allowed))
    if extra:
        raise ConfigError(f"keys not used by {command}: {', '.join(extra)}")
    settings: dict[str, Any] = {}
    for key in allowed:
        raw = flag_values.get(key)
        if raw is None:
            raw = file_values.get(key)
        if raw is None:
            settings[key] = COMMAND_DEFAULTS.get(command, {}).get(key, KEYS[key].default)
            continue
        try:
            settings[key] = KEYS[key].parse(raw)
        except ValueError as exc:
            raise ConfigError(f"bad value for {key}: {raw!r} ({exc})") from None
    return settings


def _render(value: Any) -> str:
    if isinstance(value, (tuple, list)):
        return ",".join(str(v) for v in value)
    return "none" if value is None else str(value)


def config_text(command: str, settings: dict[str, Any]) -> str:
    lines = [f"# dcalgan {command}"] + [f"{k} = {_render(v)}" for k, v in sorted(settings.items())]
    return "\n".join(lines) + "\n"


def run_dir(command: str, settings: dict[str, Any]) -> Path:
    hashed = {k: v for k, v in settings.items() if k not in UNHASHED}
    digest = hashlib.sha256(config_text(command, hashed).encode()).hexdigest()[:10]
    path = Path(settings["out"]) / f"{command}-{digest}-s{settings.get('seed', 0)}"
    path.mkdir(parents=True, exist_ok=True)
    (path / "config.txt").write_text(config_text(command, settings))
    return path


def _require(settings: dict[str, Any], key: str) -> str:
    if not settings[key]:
        raise ConfigError(f"missing required setting {key!r} (use --{key.replace('_', '-')})")
    return settings[key]


def _fusion_modes(text: str) -> list[str]:
    modes = list(_str_list(text))
    bad = [m for m in modes if m not in FUSION_LAYERS]
    if bad or not modes:
        raise ConfigError(f"fusion modes must be chosen from F1, F2, F3; got {text!r}")
    return modes


def _k_values(text: str) -> list[int]:
    try:
        ks = list(_int_list(text))
    except ValueError:
        raise ConfigError(f"k must be an integer or comma list, got {text!r}") from None
    if not ks:
        raise ConfigError("no k given")
    return ks


# -- commands ------------------------------------------------------------------


def cmd_synth(s: dict[str, Any]) -> int:
    spec = data.SynthSpec(n_per_class=s["n_per_class"], size=s["size"], seed=s["seed"],
                          class_counts=s["class_counts"])
    out = run_dir("synth", s)
    ds = data.generate_synthetic(spec)
    root = data.save_dataset(ds, out / "dataset", fmt=s["image_format"])
    print(root)
    return EXIT_OK


def cmd_train(s: dict[str, Any]) -> int:
    net = get_config(s["preset"], s["fusion"])
    tc = training.TrainConfig(batch_size=s["batch_size"], epochs=s["epochs"], lr=s["lr"], beta1=s["beta1"],
                              d_steps_per_g_step=s["d_steps"], seed=s["seed"],
                              sample_grid_epochs=tuple(s["grid_epochs"]),
                              checkpoint_every=s["checkpoint_every"], max_iterations=s["iterations"],
                              grid_rows=s["rows"], grid_cols=s["cols"])
    ds = data.load_dataset(_require(s, "data"), size=net.image_size)
    resume = load_checkpoint(s["resume"], expect=net) if s["resume"] else None
    out = run_dir("train", s)
    result = training.train(ds, net, tc, out_dir=out, resume=resume)
    last = result.records[-1] if result.records else None
    if last is not None:
        print(f"iteration {last.iteration}: l_d={last.l_d:.4f} l_g={last.l_g:.4f}")
    print(out / "final.dcal")
    return EXIT_OK


def cmd_sample(s: dict[str, Any]) -> int:
    ckpt = load_checkpoint(_require(s, "checkpoint"))
    out = run_dir("sample", s)
    path = out / f"grid.{s['image_format']}"
    training.sample_grid(ckpt.params, ckpt.config, s["rows"], s["cols"], s["seed"], path)
    print(path)
    return EXIT_OK


def _features_from_checkpoint(s: dict[str, Any], mode: str) -> classify.FeatureMatrix:
    ckpt = load_checkpoint(_require(s, "checkpoint"))
    ds = data.load_dataset(_require(s, "data"), size=ckpt.config.image_size)
    return classify.extract_features(ckpt, ds, mode)


def cmd_extract(s: dict[str, Any]) -> int:
    mode = _fusion_modes(s["fusion"])[0]
    fm = _features_from_checkpoint(s, mode)
    out = run_dir("extract", s)
    path = out / f"features_{mode}.dcfm"
    classify.save_features(fm, path)
    print(f"{fm.shape[0]} x {fm.shape[1]} features -> {path}")
    return EXIT_OK


def _write_report(report: classify.EvaluationReport, out: Path, stem: str) -> None:
    report.write_csv(out / f"{stem}.csv")
    report.write_roc(out / f"{stem}_roc.csv")
    (out / f"{stem}.txt").write_text(report.summary() + "\n")


def cmd_classify(s: dict[str, Any]) -> int:
    if s["features"]:
        fm = classify.load_features(s["features"])
    else:
        fm = _features_from_checkpoint(s, _fusion_modes(s["fusion"])[0])
    k = _k_values(s["k"])[0]
    out = run_dir("classify", s)
    model = classify.svm_train(fm.rows, fm.labels, s["svm_c"], s["svm_max_iters"], s["svm_tol"])
    (out / "svm_model.json").write_text(model.to_json())
    report = classify.cross_validate(fm, k, s["seed"], s["svm_c"], s["svm_max_iters"], s["svm_tol"])
    _write_report(report, out, "report")
    print(report.summary())
    return EXIT_OK


GRID_HEADER = ("fusion", "k", "mean_accuracy", "mean_sensitivity", "mean_specificity", "mean_precision",
               "mean_auc", "pooled_accuracy", "pooled_auc")


def cmd_evaluate(s: dict[str, Any]) -> int:
    modes = _fusion_modes(s["fusion"])
    ks = _k_values(s["k"])
    widest = max(modes, key=lambda m: len(FUSION_LAYERS[m]))
    base = _features_from_checkpoint(s, widest)
    out = run_dir("evaluate", s)
    rows = []
    for mode in modes:
        fm = base.prefix(mode)
        for k in ks:
            report = classify.cross_validate(fm, k, s["seed"], s["svm_c"], s["svm_max_iters"], s["svm_tol"])
            _write_report(report, out, f"report_{mode}_k{k}")
            rows.append([mode, str(k)] + [repr(report.mean(n)) for n in
                                          ("accuracy", "sensitivity", "specificity", "precision", "auc")]
                        + [repr(report.pooled.accuracy), repr(report.roc.auc)])
            print(f"{mode} k={k:<3} mean accuracy {report.mean_accuracy:.4f}  pooled AUC {report.roc.auc:.4f}")
    with open(out / "grid.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(GRID_HEADER)
        w.writerows(rows)
    print(out / "grid.csv")
    return EXIT_OK


def cmd_verify_theory(s: dict[str, Any]) -> int:
    rows = theory.identity_table(n_random=s["random_pairs"], seed=s["seed"])
    print(theory.format_table(rows))
    worst = max(r.delta for r in rows)
    print(f"max |delta| = {worst:.3g} over {len(rows)} pairs (tolerance {THEORY_TOL:g})")
    if worst > THEORY_TOL:
        raise TheoryViolation(f"identity violated: max |delta| {worst:.3g}")
    return EXIT_OK


COMMANDS: dict[str, tuple[Callable[[dict[str, Any]], int], str]] = {
    "synth": (cmd_synth, "generate a synthetic two-class dataset"),
    "train": (cmd_train, "train the GAN; writes checkpoints, losses.csv and sample grids"),
    "sample": (cmd_sample, "render a grid of generator samples from a checkpoint"),
    "extract": (cmd_extract, "write fused discriminator features for a dataset"),
    "classify": (cmd_classify, "fit the SVM on a feature matrix and cross-validate it"),
    "evaluate": (cmd_evaluate, "sweep fusion modes x fold counts and write the result grid"),
    "verify-theory": (cmd_verify_theory, "check V(D*, G) = 2 JSD - ln 4 on discrete distributions"),
}


# -- argument parsing ----------------------------------------------------------


class _Parser(argparse.ArgumentParser):
    def error(self, message: str):
        self.print_usage(sys.stderr)
        self.exit(EXIT_CONFIG, f"{self.prog}: error: {message}\n")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="dcalgan", description=__doc__.split("\n\n")[0])
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", metavar="command", parser_class=_Parser)
    sub.required = True
    for name, (_, helptext) in COMMANDS.items():
        p = sub.add_parser(name, help=helptext, description=helptext)
        p.add_argument("--config", metavar="FILE", help="key = value settings file")
        for key in COMMAND_KEYS[name]:
            spec = KEYS[key]
            default = COMMAND_DEFAULTS.get(name, {}).get(key, spec.default)
            p.add_argument(f"--{key.replace('_', '-')}", dest=key, metavar="VALUE", default=None,
                           help=f"{spec.help} (default: {_render(default)})")
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    func = COMMANDS[args.command][0]
    try:
        file_values = read_config_file(args.config) if args.config else {}
        flags = {k: getattr(args, k) for k in COMMAND_KEYS[args.command]}
        return func(resolve(args.command, file_values, flags))
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except NumericError as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (DataError, OSError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except TheoryViolation as exc:
        print(f"theory check failed: {exc}", file=sys.stderr)
        return EXIT_THEORY


if __name__ == "__main__":
    sys.exit(main())
