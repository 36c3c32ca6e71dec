"""Command-line entry point: synth, train, eval, gradcheck, ensemble.

Every subcommand is deterministic given its flags and seed; rerunning
produces byte-identical output files. Exit codes: 0 success, 1 runtime
failure, 2 usage error.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import os
import sys
from dataclasses import dataclass

import numpy as np

from .bilinear import FACTORED_SHARED, VARIANTS, LabelTree
from .data import (
    Dataset,
    FormatError,
    SynthSpec,
    generate_synthetic,
    load_dataset,
    load_model,
    save_dataset,
    save_model,
)
from .fusion import Ensemble
from .training import (
    MODES,
    TrainConfig,
    build_model,
    evaluate,
    grad_check,
    train_model,
)

logger = logging.getLogger("bimodalnet.cli")

SEED_ENV_VAR = "BIMODALNET_SEED"
GRADCHECK_THRESHOLD = 1e-5


class ArchParseError(ValueError):
    """Architecture string does not parse; carries the failing position."""

    def __init__(self, message: str, position: int):
        super().__init__(f"{message} at position {position}")
        self.position = position


class ConfigError(ValueError):
    """Config file is malformed or names an unknown key."""


def parse_arch(s: str):
    """Parse the bracketed notation "[dims_a | dims_v | F=n]".

    Returns (dims_a, dims_v, fused_dim) as written; the last dim of each
    side is the class count and must match between sides.
    """
    i = 0
    while i < len(s) and s[i].isspace():
        i += 1
    if i >= len(s) or s[i] != "[":
        raise ArchParseError("expected '['", i)
    close = s.find("]", i)
    if close < 0:
        raise ArchParseError("missing ']'", len(s))
    rest = s[close + 1:]
    if rest.strip():
        raise ArchParseError("unexpected text after ']'",
                             close + 1 + (len(rest) - len(rest.lstrip())))
    inner = s[i + 1:close]
    parts = inner.split("|")
    if len(parts) != 3:
        raise ArchParseError(
            f"expected two '|' separators inside the brackets, found {len(parts) - 1}",
            i + 1,
        )
    offsets = [i + 1]
    for p in parts[:-1]:
        offsets.append(offsets[-1] + len(p) + 1)

    def parse_dims(part: str, base: int) -> tuple[int, ...]:
        dims = []
        pos = 0
        for tok in part.split(","):
            stripped = tok.strip()
            tok_pos = base + pos + (len(tok) - len(tok.lstrip()))
            try:
                value = int(stripped)
            except ValueError:
                raise ArchParseError(f"invalid dimension {stripped!r}", tok_pos) from None
            if value < 1:
                raise ArchParseError(f"dimension must be positive, got {value}", tok_pos)
            dims.append(value)
            pos += len(tok) + 1
        return tuple(dims)

    dims_a = parse_dims(parts[0], offsets[0])
    dims_v = parse_dims(parts[1], offsets[1])
    fpart = parts[2].strip()
    fpos = offsets[2] + (len(parts[2]) - len(parts[2].lstrip()))
    if not fpart.startswith("F="):
        raise ArchParseError("expected 'F=<int>' as the third component", fpos)
    try:
        fused_dim = int(fpart[2:].strip())
    except ValueError:
        raise ArchParseError(f"invalid fused dimension {fpart[2:]!r}", fpos + 2) from None
    if fused_dim < 1:
        raise ArchParseError(f"fused dimension must be positive, got {fused_dim}", fpos + 2)
    if dims_a[-1] != dims_v[-1]:
        raise ArchParseError(
            f"mismatched class counts: {dims_a[-1]} != {dims_v[-1]}", offsets[1]
        )
    return dims_a, dims_v, fused_dim


@dataclass
class RunConfig:
    """Train-run settings: config-file values overridden by flags."""

    mode: str = "bilinear"
    arch: str = ""
    variant: str = FACTORED_SHARED
    fusion_top: str = ""
    learning_rate: float = 0.1
    epochs: int = 10
    minibatch_size: int = 32
    init_scale: float = 0.05
    seed: int = 0
    lam: float = 2.0
    data: str = ""
    test_data: str = ""
    out: str = ""
    log: str = ""
    tower_a: str = ""
    tower_v: str = ""


_RUN_FIELDS = {f.name: f.type for f in dataclasses.fields(RunConfig)}


def read_config_file(path: str) -> dict:
    values: dict = {}
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, 1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            key, sep, value = line.partition("=")
            if not sep:
                raise ConfigError(f"{path}:{lineno}: expected key=value, got {raw.strip()!r}")
            key = key.strip().replace("-", "_")
            if key not in _RUN_FIELDS:
                raise ConfigError(f"{path}:{lineno}: unknown key {key!r}")
            value = value.strip()
            kind = _RUN_FIELDS[key]
            try:
                if kind in ("int", int):
                    values[key] = int(value)
                elif kind in ("float", float):
                    values[key] = float(value)
                else:
                    values[key] = value
            except ValueError:
                raise ConfigError(
                    f"{path}:{lineno}: cannot parse {value!r} for key {key!r}"
                ) from None
    return values


def _default_seed() -> int:
    return int(os.environ.get(SEED_ENV_VAR, "0"))


def resolve_run_config(args) -> RunConfig:
    values: dict = {}
    if args.config:
        values.update(read_config_file(args.config))
    for name in _RUN_FIELDS:
        flag = getattr(args, name, None)
        if flag is not None:
            values[name] = flag
    if "seed" not in values:
        values["seed"] = _default_seed()
    return RunConfig(**values)


def _parse_top(text: str) -> tuple[int, ...]:
    text = text.strip()
    if text in ("", "softmax"):
        return ()
    try:
        dims = tuple(int(t) for t in text.split(","))
    except ValueError:
        raise ValueError(f"cannot parse fusion top dims {text!r}") from None
    if any(d < 1 for d in dims):
        raise ValueError(f"fusion top dims must be positive, got {dims}")
    return dims


def _load_warm_tower(path: str):
    model = load_model(path)
    if model.kind != "unimodal":
        raise ValueError(f"{path}: warm-start towers must come from unimodal models")
    return model.tower


def _train_config_from(cfg: RunConfig, dataset: Dataset) -> TrainConfig:
    dims_a: tuple[int, ...] = ()
    dims_v: tuple[int, ...] = ()
    fused_dim = 0
    if cfg.arch:
        full_a, full_v, fused_dim = parse_arch(cfg.arch)
        if len(full_a) < 2 or len(full_v) < 2:
            raise ValueError("architecture must list at least an input dim and the class count")
        if full_a[-1] != dataset.num_classes:
            raise ValueError(
                f"architecture class count {full_a[-1]} does not match "
                f"dataset classes {dataset.num_classes}"
            )
        dims_a, dims_v = full_a[:-1], full_v[:-1]
        if cfg.mode == "bilinear" and fused_dim > dims_a[-1] and fused_dim > dims_v[-1]:
            logger.warning(
                "fused dim F=%d exceeds both final hidden dims (%d, %d)",
                fused_dim, dims_a[-1], dims_v[-1],
            )
    elif cfg.mode != "fused":
        raise ValueError(f"mode {cfg.mode!r} requires --arch")
    return TrainConfig(
        mode=cfg.mode, variant=cfg.variant,
        dims_a=dims_a, dims_v=dims_v, fused_dim=fused_dim,
        fusion_top=_parse_top(cfg.fusion_top), arch=cfg.arch,
        learning_rate=cfg.learning_rate, epochs=cfg.epochs,
        minibatch_size=cfg.minibatch_size, init_scale=cfg.init_scale,
        seed=cfg.seed, lam=cfg.lam,
    )


def _print_record(record: dict) -> None:
    print(json.dumps(record))


def cmd_synth(args) -> int:
    spec = SynthSpec(
        d1=args.d1, d2=args.d2,
        num_classes=args.classes, num_groups=args.groups,
        n_train=args.n_train, n_test=args.n_test,
        noise_std=args.noise_std, interaction_rank=args.rank,
        seed=args.seed if args.seed is not None else _default_seed(),
        linear_scale=args.linear_scale,
    )
    train, test = generate_synthetic(spec)
    save_dataset(train, args.out_train)
    save_dataset(test, args.out_test)
    logger.info("wrote %s (%d samples) and %s (%d samples)",
                args.out_train, train.n, args.out_test, test.n)
    return 0


def cmd_train(args) -> int:
    cfg = resolve_run_config(args)
    if not cfg.data:
        raise ConfigError("train requires --data")
    if not cfg.out:
        raise ConfigError("train requires --out")
    train_set = load_dataset(cfg.data)
    eval_set = load_dataset(cfg.test_data) if cfg.test_data else None
    config = _train_config_from(cfg, train_set)
    warm = None
    if cfg.tower_a or cfg.tower_v:
        warm = (
            _load_warm_tower(cfg.tower_a) if cfg.tower_a else None,
            _load_warm_tower(cfg.tower_v) if cfg.tower_v else None,
        )
    model = build_model(config, train_set.d1, train_set.d2,
                        train_set.num_classes, train_set.tree, warm)
    records = train_model(model, config, train_set, eval_set)
    save_model(model, cfg.out)
    if cfg.log:
        with open(cfg.log, "w", encoding="utf-8") as fh:
            for record in records:
                fh.write(json.dumps(record) + "\n")
    if records:
        _print_record(records[-1])
    logger.info("wrote model to %s", cfg.out)
    return 0


def cmd_eval(args) -> int:
    model = load_model(args.model)
    dataset = load_dataset(args.data)
    metrics = evaluate(model, dataset)
    record = {"split": dataset.split, "n": dataset.n}
    record.update(metrics.record(0, dataset.split))
    del record["epoch"]
    _print_record(record)
    return 0


def cmd_gradcheck(args) -> int:
    dims_a, dims_v, fused_dim = parse_arch(args.arch)
    classes = args.classes
    groups = args.groups if args.groups is not None else classes
    seed = args.seed if args.seed is not None else _default_seed()
    # here the arch sides are the tower stacks themselves; the head's class
    # count comes from --classes
    config = TrainConfig(
        mode=args.mode, variant=args.variant,
        dims_a=dims_a, dims_v=dims_v, fused_dim=fused_dim,
        arch=args.arch, seed=seed, epochs=0, init_scale=args.init_scale,
    )
    tree = LabelTree.balanced(classes, groups)
    model = build_model(config, dims_a[0], dims_v[0], classes, tree)
    rng = np.random.default_rng(np.random.SeedSequence([seed, 99]))
    sample = (
        rng.standard_normal(dims_a[0]),
        rng.standard_normal(dims_v[0]),
        int(rng.integers(classes)),
    )
    report = grad_check(model, sample, h=args.h)
    print(f"max_rel_error={report.max_rel_error:.6e} "
          f"worst={report.worst_param}{list(report.worst_index)} "
          f"checked={report.num_checked} h={report.h:g}")
    if report.passed(GRADCHECK_THRESHOLD):
        print(f"PASS: analytic gradients match central differences "
              f"(threshold {GRADCHECK_THRESHOLD:g})")
        return 0
    print(f"FAIL: max relative error {report.max_rel_error:.3e} "
          f">= {GRADCHECK_THRESHOLD:g}")
    return 1


def cmd_ensemble(args) -> int:
    if len(args.models) < 2:
        print("error: ensemble needs at least 2 model files", file=sys.stderr)
        return 2
    members = [load_model(p) for p in args.models]
    ensemble = Ensemble(members)
    dataset = load_dataset(args.data)
    metrics = evaluate(ensemble, dataset)
    record = {"split": dataset.split, "n": dataset.n, "members": len(members)}
    record.update(metrics.record(0, dataset.split))
    del record["epoch"]
    _print_record(record)
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="bimodalnet",
        description="Bimodal sigmoid towers with fused and bilinear softmax heads.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a planted-interaction dataset pair")
    p.add_argument("--out-train", required=True)
    p.add_argument("--out-test", required=True)
    p.add_argument("--d1", type=int, default=20)
    p.add_argument("--d2", type=int, default=20)
    p.add_argument("--classes", type=int, default=8)
    p.add_argument("--groups", type=int, default=4)
    p.add_argument("--n-train", type=int, default=10000)
    p.add_argument("--n-test", type=int, default=2000)
    p.add_argument("--noise-std", type=float, default=0.1)
    p.add_argument("--rank", type=int, default=2)
    p.add_argument("--linear-scale", type=float, default=1.0)
    p.add_argument("--seed", type=int, default=None)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", help="train a model and write it with its metric log")
    p.add_argument("--config", default="", help="key=value file; flags override")
    p.add_argument("--data", default=None)
    p.add_argument("--test-data", default=None)
    p.add_argument("--mode", choices=MODES, default=None)
    p.add_argument("--arch", default=None, help='e.g. "[360,500,200,1328 | 540,500,200,1328 | F=200]"')
    p.add_argument("--variant", choices=VARIANTS, default=None)
    p.add_argument("--fusion-top", default=None,
                   help='hidden dims of the fused top, e.g. "64,32"; empty or "softmax" for none')
    p.add_argument("--learning-rate", "--lr", type=float, default=None)
    p.add_argument("--epochs", type=int, default=None)
    p.add_argument("--minibatch-size", type=int, default=None)
    p.add_argument("--init-scale", type=float, default=None)
    p.add_argument("--lam", "--lambda", type=float, default=None, dest="lam")
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--tower-a", default=None, help="warm-start tower from a unimodal model")
    p.add_argument("--tower-v", default=None)
    p.add_argument("--out", default=None)
    p.add_argument("--log", default=None, help="write per-epoch records (JSON lines)")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a saved model on a dataset")
    p.add_argument("--model", required=True)
    p.add_argument("--data", required=True)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("gradcheck",
                       help="finite-difference check of the analytic gradients")
    p.add_argument("--arch", required=True,
                   help='tower stacks, e.g. "[3,4,2 | 3,4,2 | F=2]" (class count from --classes)')
    p.add_argument("--classes", type=int, required=True)
    p.add_argument("--groups", type=int, default=None)
    p.add_argument("--variant", choices=VARIANTS, default=FACTORED_SHARED)
    p.add_argument("--mode", choices=MODES, default="bilinear")
    p.add_argument("--h", type=float, default=1e-5)
    p.add_argument("--init-scale", type=float, default=0.5)
    p.add_argument("--seed", type=int, default=None)
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("ensemble", help="average posteriors of saved models")
    p.add_argument("models", nargs="+", help="at least two model files")
    p.add_argument("--data", required=True)
    p.set_defaults(func=cmd_ensemble)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (ArchParseError, ConfigError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (FormatError, OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    raise SystemExit(main())
