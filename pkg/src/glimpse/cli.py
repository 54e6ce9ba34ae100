"""Command-line entry point: ``python3 -m glimpse <command> ...``.

Commands: gen-jittered, train, eval, dump, gradcheck. Exit status is 0 on
success, 1 when arguments or configuration fail validation, and 2 on
runtime failures (I/O, divergence, a failing gradient check).
"""

from __future__ import annotations

import argparse
import sys
from dataclasses import asdict, dataclass, fields
from pathlib import Path
from typing import List, Optional

from .data import IdxFormatError, JitterSpec, LabeledSet, make_jittered, read_idx, write_idx
from .evaluation import (baseline_fc_flops, dump_filters, dump_traces, evaluate,
                         evaluate_cascade)
from .gradcheck import TOLERANCE, run_suite
from .model import GlimpseModel, ModelConfig, load, run_flops, save
from .nn import ContractError
from .training import TrainHyper, TrainingDiverged, train_full

EXIT_OK, EXIT_INVALID, EXIT_RUNTIME = 0, 1, 2


class ConfigError(ValueError):
    pass


@dataclass
class RunConfig:
    """Everything a training or evaluation run needs, as ``key = value`` text."""

    # model geometry
    full_side: int = 48
    low_side: int = 12
    patch_side: int = 12
    scales: int = 2
    classes: int = 10
    hidden: int = 500
    glimpses: int = 2
    weight_sharing: bool = False
    # optimisation
    lam: float = 100.0
    gamma: float = 0.01
    sigma_sq: float = 0.002
    lr: float = 0.05
    momentum: float = 0.9
    batch: int = 50
    epochs: int = 50
    grid_side: int = 3
    grid_step: int = 2
    diversity: bool = True
    contrastive: bool = True
    fine_tune: bool = False
    fine_tune_epochs: int = 10
    seed: int = 0
    # data and output
    train_images: str = "data/train-images.idx"
    train_labels: str = "data/train-labels.idx"
    test_images: str = "data/test-images.idx"
    test_labels: str = "data/test-labels.idx"
    heldout_log: bool = True
    out_dir: str = "runs/default"

    def model_config(self) -> ModelConfig:
        return ModelConfig(self.full_side, self.low_side, self.patch_side, self.scales,
                           self.classes, self.hidden, self.glimpses, self.weight_sharing)

    def hyper(self) -> TrainHyper:
        return TrainHyper(lam=self.lam, gamma=self.gamma, sigma_sq=self.sigma_sq, lr=self.lr,
                          momentum=self.momentum, batch=self.batch, epochs=self.epochs,
                          grid_side=self.grid_side, grid_step=self.grid_step,
                          fine_tune_epochs=self.fine_tune_epochs,
                          diversity_enabled=self.diversity, contrastive=self.contrastive,
                          seed=self.seed)

    def validate(self) -> "RunConfig":
        try:
            self.model_config()
            self.hyper()
        except ContractError as exc:
            raise ConfigError(str(exc)) from exc
        return self

    def to_text(self) -> str:
        return "".join(f"{k} = {_format(v)}\n" for k, v in asdict(self).items())


_TYPES = {f.name: f.type for f in fields(RunConfig)}


def _format(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    return repr(v) if isinstance(v, float) else str(v)


def _coerce(key: str, raw: str):
    kind = _TYPES.get(key)
    if kind is None:
        raise ConfigError(f"unknown config key {key!r}")
    raw = raw.strip()
    try:
        if kind == "bool":
            if raw.lower() not in ("true", "false", "1", "0", "yes", "no"):
                raise ValueError(raw)
            return raw.lower() in ("true", "1", "yes")
        if kind == "int":
            return int(raw)
        if kind == "float":
            return float(raw)
    except ValueError:
        raise ConfigError(f"bad value for {key}: {raw!r} (expected {kind})") from None
    return raw


def parse_config(text: str, base: Optional[RunConfig] = None) -> RunConfig:
    """Parse ``key = value`` lines; ``#`` starts a comment."""
    values = asdict(base or RunConfig())
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected key = value, got {line!r}")
        key, raw = line.split("=", 1)
        values[key.strip()] = _coerce(key.strip(), raw)
    return RunConfig(**values)


def load_config(path: Optional[str], overrides: List[str]) -> RunConfig:
    cfg = RunConfig()
    if path:
        try:
            text = Path(path).read_text(encoding="utf-8")
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc.strerror}") from exc
        cfg = parse_config(text, cfg)
    if overrides:
        cfg = parse_config("\n".join(overrides), cfg)
    return cfg


def _read_set(images: str, labels: str) -> LabeledSet:
    for p in (images, labels):
        if not Path(p).is_file():
            raise ConfigError(f"dataset file not found: {p}")
    return read_idx(images, labels)


# ------------------------------------------------------------ commands

def cmd_gen_jittered(args) -> int:
    canvas, copies = args.canvas, args.copies
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    jobs = [("train", args.train_images, args.train_labels, copies, args.seed)]
    if args.test_images or args.test_labels:
        if not (args.test_images and args.test_labels):
            raise ConfigError("--test-images and --test-labels go together")
        jobs.append(("test", args.test_images, args.test_labels, args.test_copies, args.seed + 1))
    for name, images, labels, k, seed in jobs:
        src = _read_set(images, labels)
        try:
            jit = make_jittered(src, JitterSpec(canvas, k, seed))
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc
        write_idx(jit, out / f"{name}-images.idx", out / f"{name}-labels.idx")
        print(f"{name}: {len(src)} source images -> {len(jit)} images of {canvas}x{canvas} "
              f"(copies={k} seed={seed})")
    return EXIT_OK


def flop_budget(cfg: ModelConfig) -> List[str]:
    base = baseline_fc_flops(cfg.full_side, cfg.hidden, cfg.classes)
    lines = [f"baseline_flops={base}"]
    for g in range(cfg.num_glimpses + 1):
        f = run_flops(cfg, g)
        lines.append(f"glimpses={g} flops={f} speedup={base / f:.2f}")
    return lines


def cmd_train(args) -> int:
    overrides = list(args.set or [])
    for flag, key in (("glimpses", "glimpses"), ("epochs", "epochs"), ("seed", "seed"),
                      ("out_dir", "out_dir")):
        if getattr(args, flag) is not None:
            overrides.append(f"{key} = {getattr(args, flag)}")
    if args.no_diversity:
        overrides.append("diversity = false")
    if args.no_contrastive:
        overrides.append("contrastive = false")
    if args.fine_tune:
        overrides.append("fine_tune = true")
    cfg = load_config(args.config, overrides).validate()
    mcfg, hyper = cfg.model_config(), cfg.hyper()
    print(cfg.to_text(), end="")
    if args.dry_run:
        for line in flop_budget(mcfg):
            print(line)
        return EXIT_OK

    train = _read_set(cfg.train_images, cfg.train_labels)
    heldout = None
    if cfg.heldout_log:
        heldout = _read_set(cfg.test_images, cfg.test_labels)
    for name, ds in (("train", train), ("test", heldout)):
        if ds is not None and ds.images.shape[1:] != (cfg.full_side, cfg.full_side):
            raise ConfigError(f"{name} images are {ds.images.shape[1:]}, "
                              f"config expects full_side={cfg.full_side}")

    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.txt").write_text(cfg.to_text(), encoding="utf-8")
    with open(out / "train.log", "w", encoding="utf-8") as log_file:
        def log(line):
            print(line, flush=True)
            log_file.write(line + "\n")
            log_file.flush()

        def checkpoint(name, model):
            save(model, out / f"{name}.glm")
            log(f"checkpoint={out / f'{name}.glm'}")

        model = GlimpseModel.init(mcfg, cfg.seed)
        train_full(model, train, hyper, log, heldout, checkpoint, fine_tune_last=cfg.fine_tune)
    return EXIT_OK


def _eval_setup(args):
    model = _load_model(args.checkpoint)
    cfg = load_config(args.config, list(args.set or [])).validate() if args.config or args.set \
        else RunConfig()
    if args.config or args.set:
        if cfg.model_config() != model.config:
            raise ConfigError(f"checkpoint {args.checkpoint} has {model.config}, "
                              f"config describes {cfg.model_config()}")
    images = args.test_images or cfg.test_images
    labels = args.test_labels or cfg.test_labels
    data = _read_set(images, labels)
    D = model.config.full_side
    if data.images.shape[1:] != (D, D):
        raise ConfigError(f"checkpoint expects {D}x{D} images, {images} holds "
                          f"{data.images.shape[1]}x{data.images.shape[2]}")
    return model, data


def _load_model(path) -> GlimpseModel:
    if not Path(path).is_file():
        raise ConfigError(f"checkpoint not found: {path}")
    return load(path)


def cmd_eval(args) -> int:
    model, data = _eval_setup(args)
    g = model.config.num_glimpses if args.glimpses is None else args.glimpses
    if not 0 <= g <= model.config.num_glimpses:
        raise ConfigError(f"--glimpses must be in [0, {model.config.num_glimpses}]")
    if args.cascade:
        if not 0 < args.threshold <= 1:
            raise ConfigError("--threshold must be in (0, 1]")
        rep = evaluate_cascade(model, data, args.threshold, args.force_final)
        title = f"cascaded (threshold {args.threshold})"
    else:
        rep = evaluate(model, data, g)
        title = f"{g} glimpse{'s' if g != 1 else ''}"
    text = rep.table(title) + "\n" + "\n".join(rep.lines()) + "\n"
    print(text, end="")
    if args.report:
        Path(args.report).write_text(text, encoding="utf-8")
    return EXIT_OK


def tile_shape(hidden: int):
    """Most square ``rows x cols`` grid with exactly ``hidden`` tiles."""
    rows = max(r for r in range(1, int(hidden ** 0.5) + 1) if hidden % r == 0)
    return rows, hidden // rows


def cmd_dump(args) -> int:
    model = _load_model(args.checkpoint)
    cfg = model.config
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    rows, cols = tile_shape(cfg.hidden)
    if args.what == "filters-n0":
        paths = dump_filters(model.n0, rows, cols, out)
    elif args.what == "filters-n1":
        if cfg.num_glimpses < 1:
            raise ConfigError("model has no glimpse network")
        paths = dump_filters(model.stage(1).net, rows, cols, out, cfg.scales)
    else:
        _, data = _eval_setup(args)
        img, sidecar, _ = dump_traces(model, data, args.n, out)
        paths = [p for p in (img, sidecar) if p is not None]
    for p in paths:
        print(f"wrote {p}")
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    results = run_suite(args.epsilon, args.inject_fault)
    ok = True
    for name, err in results.items():
        passed = err <= TOLERANCE
        ok &= passed
        print(f"{name:32s} max_rel_error={err:.3e} {'ok' if passed else 'FAIL'}")
    print(f"gradcheck {'passed' if ok else 'FAILED'} (tolerance {TOLERANCE:g}, "
          f"epsilon {args.epsilon:g})")
    return EXIT_OK if ok else EXIT_RUNTIME


# -------------------------------------------------------------- parser

class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise ConfigError(message)


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="glimpse", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    g = sub.add_parser("gen-jittered", help="place digits at random offsets on a larger canvas")
    g.add_argument("--train-images", required=True)
    g.add_argument("--train-labels", required=True)
    g.add_argument("--test-images")
    g.add_argument("--test-labels")
    g.add_argument("--out-dir", default="data")
    g.add_argument("--canvas", type=int, default=48)
    g.add_argument("--copies", type=int, default=10, help="jittered copies per training image")
    g.add_argument("--test-copies", type=int, default=3)
    g.add_argument("--seed", type=int, default=0, help="training seed; test uses seed+1")
    g.set_defaults(func=cmd_gen_jittered)

    t = sub.add_parser("train", help="train N0 and the glimpse stages")
    t.add_argument("--config", help="key = value file; flags override it")
    t.add_argument("--set", action="append", metavar="KEY=VALUE", help="override one key")
    t.add_argument("--glimpses", type=int)
    t.add_argument("--epochs", type=int)
    t.add_argument("--seed", type=int)
    t.add_argument("--out-dir", dest="out_dir")
    t.add_argument("--no-diversity", action="store_true")
    t.add_argument("--no-contrastive", action="store_true")
    t.add_argument("--fine-tune", action="store_true")
    t.add_argument("--dry-run", action="store_true", help="validate and print the flop budget")
    t.set_defaults(func=cmd_train)

    def data_args(sp):
        sp.add_argument("--checkpoint", required=True)
        sp.add_argument("--config")
        sp.add_argument("--set", action="append", metavar="KEY=VALUE")
        sp.add_argument("--test-images")
        sp.add_argument("--test-labels")

    e = sub.add_parser("eval", help="error rate and speed-up of a checkpoint")
    data_args(e)
    e.add_argument("--glimpses", type=int)
    e.add_argument("--cascade", action="store_true")
    e.add_argument("--threshold", type=float, default=0.95)
    e.add_argument("--force-final", action="store_true")
    e.add_argument("--report", help="also write the report to this file")
    e.set_defaults(func=cmd_eval)

    d = sub.add_parser("dump", help="filter grids and glimpse traces as PGM")
    d.add_argument("what", choices=["filters-n0", "filters-n1", "traces"])
    data_args(d)
    d.add_argument("--out", required=True)
    d.add_argument("-n", type=int, default=5, help="number of traces")
    d.set_defaults(func=cmd_dump)

    c = sub.add_parser("gradcheck", help="finite-difference check of every training loss")
    c.add_argument("--epsilon", type=float, default=1e-5)
    c.add_argument("--inject-fault", type=float, default=1.0, metavar="FACTOR",
                   help="scale analytic gradients by FACTOR (checks the checker)")
    c.set_defaults(func=cmd_gradcheck)
    return p


def main(argv: Optional[List[str]] = None) -> int:
    try:
        args = build_parser().parse_args(argv)
        return args.func(args)
    except (ConfigError, ContractError, IdxFormatError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID
    except (TrainingDiverged, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
