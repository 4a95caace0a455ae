"""Command-line entry point: ``dari synth|train|eval|gradcheck|equiv|dump``.

Settings come from an optional ``key=value`` config file with namespaced keys
(``train.*``, ``synth.*``, ``arch.*``, ``eval.*``, plus ``seed``, ``threads``
and ``out``); ``--set key=value`` and the dedicated flags override the file.

Exit codes: 0 success, 1 invalid input or configuration, 2 runtime or
numerical failure.
"""

from __future__ import annotations

import argparse
import dataclasses
import sys
from pathlib import Path

import numpy as np

from .data import SynthConfig, load_checkpoint, load_dataset, load_manifest, save_checkpoint, write_synth
from .errors import DariError, DegenerateInputError, DivergenceError, StateError
from .evaluation import cmc_curve, write_cmc_csv
from .metric import reconstruct_M
from .model import ArchConfig
from .tensor import make_rng
from .trainer import TrainConfig, train_loop
from .verify import EQUIV_TOL, GRADCHECK_TOL, run_equivalence, run_gradcheck

EXIT_OK, EXIT_INVALID, EXIT_RUNTIME = 0, 1, 2

SECTIONS = {"train": TrainConfig, "synth": SynthConfig, "arch": ArchConfig}
EVAL_KEYS = {"num_splits": 10, "seed": 0}
TOP_KEYS = {"seed", "threads", "out"}


class ConfigError(DariError, ValueError):
    pass


def parse_config_text(text, source="<config>"):
    """``key=value`` lines; blank lines and ``#`` comments are ignored."""
    out = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{lineno}: expected key=value")
        key, value = (part.strip() for part in line.split("=", 1))
        out[key] = value
    return out


def _coerce(value, default, key):
    if not isinstance(value, str):
        return value
    try:
        if isinstance(default, bool):
            if value.lower() in ("1", "true", "yes", "on"):
                return True
            if value.lower() in ("0", "false", "no", "off"):
                return False
            raise ValueError(value)
        if isinstance(default, int):
            return int(value)
        if isinstance(default, float):
            return float(value)
    except ValueError:
        raise ConfigError(f"{key}: cannot parse {value!r} as {type(default).__name__}") from None
    return value


class Settings:
    """Resolved configuration: dataclass sections plus top-level and eval keys."""

    def __init__(self, raw: dict):
        self.values = {name: {} for name in SECTIONS}
        self.eval = dict(EVAL_KEYS)
        self.top = {"seed": None, "threads": 1, "out": None}
        self.explicit = set()
        for key, value in raw.items():
            self.set(key, value)

    def set(self, key, value):
        self.explicit.add(key)
        if key in TOP_KEYS:
            default = {"seed": 0, "threads": 1, "out": ""}[key]
            self.top[key] = _coerce(value, default, key)
            return
        section, _, name = key.partition(".")
        if section == "eval" and name in EVAL_KEYS:
            self.eval[name] = _coerce(value, EVAL_KEYS[name], key)
            return
        if section not in SECTIONS:
            raise ConfigError(f"unknown config key {key!r}")
        defaults = {f.name: f.default for f in dataclasses.fields(SECTIONS[section])}
        if name not in defaults:
            raise ConfigError(f"unknown config key {key!r}")
        self.values[section][name] = _coerce(value, defaults[name], key)

    def build(self, section):
        kwargs = dict(self.values[section])
        seed = self.top["seed"]
        if seed is not None and "seed" in {f.name for f in dataclasses.fields(SECTIONS[section])}:
            kwargs.setdefault("seed", seed)
        return SECTIONS[section](**kwargs)

    @property
    def eval_seed(self):
        if "eval.seed" in self.explicit or self.top["seed"] is None:
            return self.eval["seed"]
        return self.top["seed"]


def _settings(args):
    raw = {}
    if args.config:
        try:
            text = Path(args.config).read_text()
        except OSError as exc:
            raise ConfigError(f"cannot read config {args.config}: {exc}") from exc
        raw.update(parse_config_text(text, args.config))
    for item in args.set or []:
        if "=" not in item:
            raise ConfigError(f"--set expects key=value, got {item!r}")
        key, value = item.split("=", 1)
        raw[key.strip()] = value.strip()
    for key in TOP_KEYS:
        value = getattr(args, key, None)
        if value is not None:
            raw[key] = value
    return Settings(raw)


def _out(settings, default):
    return Path(settings.top["out"] or default)


# -- subcommands -------------------------------------------------------------


def cmd_synth(args, settings):
    config = settings.build("synth").validate()
    out_dir = _out(settings, "synth")
    manifests = write_synth(config, out_dir)
    for m, name in zip(manifests, ("manifest.tsv", "heldout.tsv")):
        print(f"wrote {len(m.records)} records to {out_dir / name}")
    return EXIT_OK


def cmd_train(args, settings):
    config = settings.build("train").validate()
    arch = settings.build("arch")
    dataset = load_dataset(load_manifest(args.manifest))
    out_dir = _out(settings, "run")
    out_dir.mkdir(parents=True, exist_ok=True)
    ckpt, log_path = out_dir / "checkpoint.bin", out_dir / "train.log"
    with open(log_path, "w") as log:
        def on_iteration(rec):
            log.write(rec.log_line() + "\n")
            log.flush()

        try:
            params, state = train_loop(dataset, config, arch, on_iteration=on_iteration)
        except DivergenceError as exc:
            save_checkpoint(exc.params, ckpt, iteration=len(exc.history), extra={"stop_reason": "diverged"})
            print(f"error: {exc}; last finite parameters saved to {ckpt}", file=sys.stderr)
            return EXIT_RUNTIME
    save_checkpoint(params, ckpt, iteration=state.iteration, extra={"stop_reason": state.stop_reason})
    print(f"stop reason: {state.stop_reason} after {state.iteration} iterations")
    print(f"checkpoint: {ckpt}\nlog: {log_path}")
    return EXIT_OK


def cmd_eval(args, settings):
    params, header = load_checkpoint(args.checkpoint)
    dataset = load_dataset(load_manifest(args.manifest))
    curve = cmc_curve(params, dataset, settings.eval["num_splits"], make_rng(settings.eval_seed))
    out = _out(settings, "cmc.csv")
    write_cmc_csv(curve, out)
    g = len(curve.rates)
    print(" ".join(f"rank-{n}={curve.rank(min(n, g)):.4f}" for n in (1, 5, 10)))
    print(f"cmc: {out}")
    return EXIT_OK


def cmd_gradcheck(args, settings):
    seed = settings.top["seed"] or 0
    report = run_gradcheck(seed=seed, corrupt="conv" if args.corrupt_conv else None, tolerance=GRADCHECK_TOL)
    for line in report.lines():
        print(line)
    if report.passed:
        print(f"gradcheck passed (tolerance {GRADCHECK_TOL:g})")
        return EXIT_OK
    print(f"gradcheck FAILED: {', '.join(report.failures)}", file=sys.stderr)
    return EXIT_RUNTIME


def cmd_equiv(args, settings):
    seed = settings.top["seed"] or 0
    report = run_equivalence(seed=seed, classes=args.classes, per_class=args.per_class, triplets=args.triplets)
    print(f"triplets={report.num_triplets} distinct_images={report.num_distinct}")
    print(f"propagations naive={report.naive_forward} dedup={report.dedup_forward}")
    print(f"max_abs_diff={report.max_abs_diff:.3e}")
    if report.passed(EQUIV_TOL):
        print(f"equivalence passed (tolerance {EQUIV_TOL:g})")
        return EXIT_OK
    print("equivalence FAILED", file=sys.stderr)
    return EXIT_RUNTIME


def cmd_dump(args, settings):
    params, header = load_checkpoint(args.checkpoint)
    print(f"format_version={header['format_version']} iteration={header['iteration']} rng={header['rng']}")
    for name, t in params.items():
        print(f"{name} shape={t.shape} norm={np.linalg.norm(t):.6g}")
    if args.matrix:
        if params.metric_layer() is None:
            raise ConfigError("checkpoint has no metric layer")
        np.savetxt(args.matrix, reconstruct_M(params.metric_layer()))
        print(f"M written to {args.matrix}")
    return EXIT_OK


def build_parser():
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="key=value config file")
    common.add_argument("--set", action="append", metavar="KEY=VALUE", help="override one config key")
    common.add_argument("--seed", help="seed for every stage")
    common.add_argument("--threads", help="BLAS thread count (default 1)")
    common.add_argument("--out", help="output directory or file")

    parser = argparse.ArgumentParser(prog="dari", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)
    sub.add_parser("synth", parents=[common], help="write a synthetic two-view dataset")
    p = sub.add_parser("train", parents=[common], help="train on a manifest")
    p.add_argument("--manifest", required=True)
    p = sub.add_parser("eval", parents=[common], help="CMC evaluation of a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--manifest", required=True, help="dataset to evaluate (may differ from the training set)")
    p = sub.add_parser("gradcheck", parents=[common], help="finite-difference gradient checks")
    p.add_argument("--corrupt-conv", action="store_true", help=argparse.SUPPRESS)
    p = sub.add_parser("equiv", parents=[common], help="naive vs deduplicated gradient")
    p.add_argument("--classes", type=int, default=5)
    p.add_argument("--per-class", type=int, default=2)
    p.add_argument("--triplets", type=int, default=50)
    p = sub.add_parser("dump", parents=[common], help="inspect a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--matrix", help="write M = L^T L as text to this path")
    return parser


COMMANDS = {
    "synth": cmd_synth, "train": cmd_train, "eval": cmd_eval,
    "gradcheck": cmd_gradcheck, "equiv": cmd_equiv, "dump": cmd_dump,
}


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        settings = _settings(args)
        from threadpoolctl import threadpool_limits

        with threadpool_limits(limits=max(1, settings.top["threads"])):
            return COMMANDS[args.command](args, settings)
    except (DivergenceError, DegenerateInputError, StateError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    except (DariError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
