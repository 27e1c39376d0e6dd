"""Command line: train, eval, sweep, predict, gradcheck, synth.

Settings come from an INI file (``--config``) with sections ``[run]``,
``[model]``, ``[train]``, ``[cv]``, ``[synth]`` and ``[sweep]``; flags
override the file.  Every command that writes files echoes its effective
settings to ``<out>/config.ini``, which can be fed back through ``--config``.
"""

from __future__ import annotations

import argparse
import configparser
import dataclasses
import io
import os
import sys
from typing import Optional

import numpy as np

from . import autograd as ag
from .bagdata import Bag, SynthSpec, build_vocab, dump_jsonl, load_jsonl, pad_batch, stratified_kfold, synth_generate
from .errors import ConfigError, DataError, MilError
from .evalx import (
    DEFAULT_HEAD_ARMS,
    DEFAULT_LOSS_ARMS,
    DEFAULT_POOLING_ARMS,
    compare_losses,
    default_jobs,
    reports_to_csv,
    sweep_heads,
    sweep_pooling,
)
from .metrics import evaluate
from .milnet import ModelConfig, forward, init_params, load_checkpoint, save_checkpoint
from .trainer import TrainConfig, evaluate_scores, focal_loss, train
from .utils import atomic_write_text

EXIT_CODES = {"data": 2, "config": 3, "numeric": 4}
SECTIONS = ("run", "model", "train", "cv", "synth", "sweep")

# flag dest -> (section, key)
_FLAG_KEYS = {
    "seed": ("run", "seed"),
    "jobs": ("run", "jobs"),
    "d_model": ("model", "d_model"),
    "num_heads": ("model", "num_heads"),
    "fc_dims": ("model", "fc_dims"),
    "pooling": ("model", "instance_pooling_mode"),
    "model_kind": ("model", "model_kind"),
    "learning_rate": ("train", "learning_rate"),
    "batch_size": ("train", "batch_size"),
    "max_epochs": ("train", "max_epochs"),
    "loss": ("train", "loss_kind"),
    "alpha": ("train", "alpha"),
    "gamma": ("train", "gamma"),
    "patience": ("train", "early_stop_patience"),
    "k": ("cv", "k"),
    "repetitions": ("cv", "repetitions"),
    "threshold": ("cv", "threshold"),
    "num_bags": ("synth", "num_bags"),
    "vocab_size": ("synth", "vocab_size"),
    "num_witness": ("synth", "num_witness_tokens"),
    "positive_rate": ("synth", "positive_rate"),
    "min_length": ("synth", "min_length"),
    "max_length": ("synth", "max_length"),
    "cooccurrence": ("synth", "cooccurrence"),
    "witness_groups": ("synth", "witness_groups"),
    "arms": ("sweep", "arms"),
}


# --------------------------------------------------------------------------
# configuration


def _parse_value(raw: str, like, where: str):
    """Convert an INI string to the type of the default ``like``."""
    try:
        if isinstance(like, bool):
            return raw.strip().lower() in ("1", "true", "yes", "on")
        if isinstance(like, int):
            return int(raw)
        if isinstance(like, float):
            return float(raw)
        if isinstance(like, tuple):
            items = [s.strip() for s in raw.split(",") if s.strip()]
            if like and isinstance(like[0], int):
                return tuple(int(s) for s in items)
            return tuple(items)
    except ValueError:
        raise ConfigError(f"{where}: cannot parse {raw!r}") from None
    return raw.strip()


def _section_values(parser, section: str, defaults: dict) -> dict:
    out = {}
    if not parser.has_section(section):
        return out
    for key, raw in parser.items(section):
        if key not in defaults:
            raise ConfigError(f"unknown key [{section}] {key}")
        out[key] = _parse_value(raw, defaults[key], f"[{section}] {key}")
    return out


def _dataclass_defaults(cls, **fill) -> dict:
    d = {}
    for f in dataclasses.fields(cls):
        if f.default is not dataclasses.MISSING:
            d[f.name] = f.default
        elif f.name in fill:
            d[f.name] = fill[f.name]
    return d


def _synth_defaults() -> dict:
    d = _dataclass_defaults(SynthSpec)
    lo, hi = d.pop("bag_length_range")
    d.pop("seed")
    d.update(min_length=lo, max_length=hi)
    return d


_SECTION_DEFAULTS = {
    "run": {"seed": 0, "jobs": 1},
    "model": {k: v for k, v in _dataclass_defaults(ModelConfig).items() if k != "seed"},
    "train": {k: v for k, v in _dataclass_defaults(TrainConfig).items() if k != "seed"},
    "cv": {"k": 10, "repetitions": 5, "threshold": 0.5},
    "synth": _synth_defaults(),
    "sweep": {"arms": ("",)},
}


class RunConfig:
    """Effective settings: file values overlaid with command-line flags."""

    def __init__(self, values: dict):
        self.values = values

    @classmethod
    def from_args(cls, args) -> "RunConfig":
        parser = configparser.ConfigParser(interpolation=None)
        if getattr(args, "config", None):
            try:
                with open(args.config, encoding="utf-8") as fh:
                    parser.read_file(fh)
            except OSError as exc:
                raise ConfigError(f"cannot read config {args.config}: {exc.strerror or exc}") from None
            except configparser.Error as exc:
                raise ConfigError(f"malformed config {args.config}: {exc}") from None
            extra = [s for s in parser.sections() if s not in SECTIONS]
            if extra:
                raise ConfigError(f"unknown config sections {extra}")
        values = {s: _section_values(parser, s, _SECTION_DEFAULTS[s]) for s in SECTIONS}
        for dest, (section, key) in _FLAG_KEYS.items():
            v = getattr(args, dest, None)
            if v is None:
                continue
            if isinstance(v, str):
                v = _parse_value(v, _SECTION_DEFAULTS[section][key], f"--{dest.replace('_', '-')}")
            values[section][key] = v
        return cls(values)

    def get(self, section, key, default=None):
        if key in self.values[section]:
            return self.values[section][key]
        if default is not None:
            return default
        return _SECTION_DEFAULTS[section][key]

    @property
    def seed(self) -> int:
        return int(self.get("run", "seed"))

    def jobs(self) -> int:
        j = self.values["run"].get("jobs")
        return int(j) if j else default_jobs()

    def model_config(self, vocab_size: int) -> ModelConfig:
        return ModelConfig(vocab_size=vocab_size, seed=self.seed, **self.values["model"])

    def train_config(self) -> TrainConfig:
        return TrainConfig(seed=self.seed, **self.values["train"])

    def synth_spec(self) -> SynthSpec:
        d = dict(_SECTION_DEFAULTS["synth"])
        d.update(self.values["synth"])
        lo, hi = d.pop("min_length"), d.pop("max_length")
        return SynthSpec(bag_length_range=(int(lo), int(hi)), seed=self.seed, **d)

    def echo(self, sections=SECTIONS, **extra) -> str:
        """INI text of every effective value in ``sections`` (defaults included)."""
        parser = configparser.ConfigParser(interpolation=None)
        for s in sections:
            parser.add_section(s)
            merged = dict(_SECTION_DEFAULTS[s])
            merged.update(self.values[s])
            merged.update(extra.get(s, {}))
            if s == "run":
                merged["jobs"] = self.jobs()
            for key in sorted(merged):
                v = merged[key]
                if isinstance(v, (tuple, list)):
                    v = ",".join(str(x) for x in v)
                parser.set(s, key, str(v))
        buf = io.StringIO()
        parser.write(buf)
        return buf.getvalue()


def _out_dir(args) -> str:
    out = args.out or "."
    os.makedirs(out, exist_ok=True)
    return out


def _write(out, name, text):
    path = os.path.join(out, name)
    atomic_write_text(path, text)
    return path


# --------------------------------------------------------------------------
# commands


def cmd_train(args, cfg: RunConfig) -> int:
    """Train one model; writes ``model.ckpt``, ``history.csv`` and ``config.ini``."""
    train_bags = load_jsonl(args.data)
    if not train_bags:
        raise DataError(f"dataset {args.data} holds no bags")
    if args.val:
        val_bags = load_jsonl(args.val)
    else:
        # hold out one stratified fold of the training file
        splits = stratified_kfold(train_bags, int(cfg.get("cv", "k")), 1, cfg.seed)
        tr, va = splits[0]
        train_bags, val_bags = [train_bags[i] for i in tr], [train_bags[i] for i in va]
    vocab = build_vocab(list(train_bags) + list(val_bags))
    mc = cfg.model_config(len(vocab))
    tc = cfg.train_config()
    params, history = train(train_bags, val_bags, mc, tc, vocab)
    out = _out_dir(args)
    save_checkpoint(params, mc, os.path.join(out, "model.ckpt"), vocab.tokens)
    _write(out, "history.csv", history.to_csv())
    _write(out, "config.ini", cfg.echo(("run", "model", "train", "cv")))
    print(f"best epoch {history.best_epoch} validation auc {history.best_auc!r}")
    return 0


def _checkpoint_vocab(ckpt):
    from .bagdata import Vocabulary

    if ckpt.vocabulary is None:
        raise DataError("checkpoint carries no vocabulary")
    return Vocabulary(tuple(ckpt.vocabulary))


def _encode_or_fail(bags, vocab):
    for b in bags:
        for t in b.tokens:
            if t not in vocab:
                raise DataError(f"vocabulary mismatch: token {t!r} in bag {b.id!r} is not in the checkpoint vocabulary")


def cmd_eval(args, cfg: RunConfig) -> int:
    """Score a dataset with a checkpoint; one report row to stdout and ``report.csv``."""
    ckpt = load_checkpoint(args.checkpoint)
    vocab = _checkpoint_vocab(ckpt)
    bags = load_jsonl(args.data)
    if not bags:
        raise DataError(f"dataset {args.data} holds no bags")
    _encode_or_fail(bags, vocab)
    scores = evaluate_scores(bags, ckpt.params, ckpt.config, vocab)
    report = evaluate(scores, [b.label for b in bags], float(cfg.get("cv", "threshold")))
    report.model = ckpt.config.model_kind
    report.heads = ckpt.config.num_heads
    report.pooling = ckpt.config.instance_pooling_mode
    text = reports_to_csv([report])
    out = _out_dir(args)
    _write(out, "report.csv", text)
    _write(out, "config.ini", cfg.echo(("run", "cv")))
    sys.stdout.write(text)
    return 0


_SWEEPS = {
    "heads": (sweep_heads, DEFAULT_HEAD_ARMS, int),
    "pooling": (sweep_pooling, DEFAULT_POOLING_ARMS, str),
    "loss": (compare_losses, DEFAULT_LOSS_ARMS, str),
}


def cmd_sweep(args, cfg: RunConfig) -> int:
    """Run one sweep; writes per-fold rows, a per-arm summary and ``config.ini``."""
    fn, default_arms, cast = _SWEEPS[args.kind]
    bags = load_jsonl(args.data)
    if not bags:
        raise DataError(f"dataset {args.data} holds no bags")
    arms = tuple(a for a in cfg.get("sweep", "arms") if a) or default_arms
    try:
        arms = tuple(cast(a) for a in arms)
    except ValueError:
        raise ConfigError(f"bad arms for the {args.kind} sweep: {arms}") from None
    if args.kind == "loss" and set(arms) != set(DEFAULT_LOSS_ARMS):
        raise ConfigError("the loss sweep always compares focal and cross_entropy")
    vocab = build_vocab(bags)
    mc, tc = cfg.model_config(len(vocab)), cfg.train_config()
    kw = dict(
        k=int(cfg.get("cv", "k")),
        repetitions=int(cfg.get("cv", "repetitions")),
        seed=cfg.seed,
        jobs=cfg.jobs(),
        threshold=float(cfg.get("cv", "threshold")),
    )
    if args.kind == "heads":
        result = fn(bags, mc, tc, arms, **kw)
    elif args.kind == "pooling":
        result = fn(bags, mc, tc, arms, **kw)
    else:
        result = fn(bags, mc, tc, **kw)
    out = _out_dir(args)
    _write(out, f"sweep_{args.kind}.csv", result.to_csv())
    summary = result.summary_csv()
    _write(out, f"sweep_{args.kind}_summary.csv", summary)
    _write(out, "config.ini", cfg.echo(sweep={"arms": arms}))
    sys.stdout.write(summary)
    return 0


def cmd_predict(args, cfg: RunConfig) -> int:
    """Print the bag probability, then each token with its attention weight."""
    ckpt = load_checkpoint(args.checkpoint)
    vocab = _checkpoint_vocab(ckpt)
    bag = Bag("cli", args.tokens, 0)
    batch = pad_batch([vocab.encode(bag)], [0], [bag.id])
    result = forward(batch, ckpt.params, ckpt.config)
    print(f"probability\t{float(result.probabilities.data[0])!r}")
    if result.attention is not None:
        w = result.attention.data[0]
        for j in np.argsort(-w, kind="stable"):
            print(f"{bag.tokens[j]}\t{float(w[j])!r}")
    return 0


GRADCHECK_BAGS = (("a", "b", "c", "a"), ("d",), ("b", "e", "f", "g", "c"))
GRADCHECK_LABELS = (1, 0, 1)


def gradcheck_config(seed: int = 0) -> ModelConfig:
    """The tiny full model: d_model 8, 2 heads, fc 6 -> 4."""
    return ModelConfig(vocab_size=8, d_model=8, num_heads=2, fc_dims=(6, 4), seed=seed)


def model_gradcheck(seed: int = 0, corrupt: Optional[str] = None, config: Optional[ModelConfig] = None):
    """Finite-difference check of every parameter of a tiny model on three bags.

    The batch mixes bag lengths 4, 1 and 5 so padding is exercised.
    ``corrupt`` names a parameter whose analytic gradient is deliberately
    perturbed (negative control).
    """
    config = config or gradcheck_config(seed)
    bags = [Bag(f"g{i}", toks, y) for i, (toks, y) in enumerate(zip(GRADCHECK_BAGS, GRADCHECK_LABELS))]
    vocab = build_vocab(bags)
    if len(vocab) > config.vocab_size:
        raise ConfigError(f"gradcheck needs vocab_size >= {len(vocab)}")
    batch = pad_batch([vocab.encode(b) for b in bags], GRADCHECK_LABELS, [b.id for b in bags])
    params = init_params(config, config.seed)
    # perturb away from init so layer-norm gains and biases are generic
    rng = np.random.default_rng(config.seed + 1)
    for name, p in params.items():
        p.data += 0.1 * rng.normal(size=p.shape)
    if corrupt is not None and corrupt not in params:
        raise ConfigError(f"no parameter named {corrupt!r}")

    def build():
        return focal_loss(forward(batch, params, config).probabilities, batch.labels)

    hook = None
    if corrupt is not None:
        hook = lambda name, g: g * 1.5 + 1e-3 if name == corrupt else g
    return ag.gradcheck(build, params, grad_hook=hook)


def cmd_gradcheck(args, cfg: RunConfig) -> int:
    report = model_gradcheck(cfg.seed, args.corrupt_param)
    for line in report.lines():
        print(line)
    if not report.passed:
        print(f"error [numeric]: gradient check failed for {', '.join(report.failures())}", file=sys.stderr)
        return EXIT_CODES["numeric"]
    return 0


def cmd_synth(args, cfg: RunConfig) -> int:
    spec = cfg.synth_spec()
    bags = synth_generate(spec)
    out = _out_dir(args)
    _write(out, "bags.jsonl", dump_jsonl(bags))
    _write(out, "config.ini", cfg.echo(("run", "synth")))
    pos = sum(b.label for b in bags)
    print(f"bags: {len(bags)}")
    print(f"positives: {pos}")
    print(f"negatives: {len(bags) - pos}")
    return 0


# --------------------------------------------------------------------------
# argument parsing


def _shared(p):
    p.add_argument("--config", help="INI file with [run] [model] [train] [cv] [synth] [sweep] sections")
    p.add_argument("--seed", type=int, help="master seed (default 0)")
    p.add_argument("--out", help="output directory (default: current directory)")
    p.add_argument("--jobs", type=int, help="parallel fold workers (default: available cores)")


def _model_flags(p):
    p.add_argument("--d-model", type=int)
    p.add_argument("--num-heads", type=int)
    p.add_argument("--fc-dims", help="comma-separated hidden sizes, e.g. 32,16")
    p.add_argument("--pooling", help="instance pooling: self_adaptive, max, mean, sum, lse, attention")
    p.add_argument("--model-kind", help="ami_net_plus or a baseline")


def _train_flags(p):
    p.add_argument("--learning-rate", type=float)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--max-epochs", type=int)
    p.add_argument("--loss", help="focal or cross_entropy")
    p.add_argument("--alpha", type=float)
    p.add_argument("--gamma", type=float)
    p.add_argument("--patience", type=int)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="aminet", description="Multi-instance bag classifier with attention pooling.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train one model with early stopping")
    _shared(p)
    _model_flags(p)
    _train_flags(p)
    p.add_argument("--data", required=True, help="training bags (JSONL)")
    p.add_argument("--val", help="validation bags; default holds out one stratified fold")
    p.add_argument("--k", type=int, help="fold count used for the default hold-out")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="score a dataset with a checkpoint")
    _shared(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--threshold", type=float)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("sweep", help="cross-validated sweep over heads, pooling or loss")
    _shared(p)
    _model_flags(p)
    _train_flags(p)
    p.add_argument("kind", choices=sorted(_SWEEPS))
    p.add_argument("--data", required=True)
    p.add_argument("--k", type=int)
    p.add_argument("--repetitions", type=int)
    p.add_argument("--threshold", type=float)
    p.add_argument("--arms", help="comma-separated arms (default: the standard list)")
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("predict", help="probability and attention weights for one bag")
    _shared(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("tokens", nargs="+")
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("gradcheck", help="finite-difference check of the full model")
    _shared(p)
    p.add_argument("--corrupt-param", help=argparse.SUPPRESS)
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("synth", help="write a synthetic witness dataset")
    _shared(p)
    p.add_argument("--num-bags", type=int)
    p.add_argument("--vocab-size", type=int)
    p.add_argument("--num-witness", type=int)
    p.add_argument("--positive-rate", type=float)
    p.add_argument("--min-length", type=int)
    p.add_argument("--max-length", type=int)
    p.add_argument("--cooccurrence", type=int, help="distinct witnesses a positive bag needs (default 1)")
    p.add_argument(
        "--witness-groups",
        action="store_const",
        const=True,
        help="positives need one fixed group of --cooccurrence witnesses; negatives carry decoy witnesses",
    )
    p.set_defaults(func=cmd_synth)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = RunConfig.from_args(args)
        return args.func(args, cfg)
    except MilError as exc:
        print(f"error [{exc.category}]: {exc}", file=sys.stderr)
        return EXIT_CODES.get(exc.category, 1)
    except OSError as exc:
        print(f"error [io]: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
