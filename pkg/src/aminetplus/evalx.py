"""Cross-validation runner and the heads / pooling / loss sweeps."""

from __future__ import annotations

import csv
import io
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .bagdata import Vocabulary, build_vocab, split_digest, stratified_kfold
from .errors import ConfigError
from .metrics import MetricsReport, confusion_metrics, evaluate, roc_auc  # noqa: F401 (re-exported)
from .milnet import ModelConfig
from .trainer import TrainConfig, evaluate_scores, train

REPORT_COLUMNS = (
    "model",
    "loss",
    "heads",
    "pooling",
    "repetition",
    "fold",
    "auc",
    "accuracy",
    "precision",
    "recall",
    "tp",
    "fp",
    "tn",
    "fn",
)
METRICS = ("auc", "accuracy", "precision", "recall")
AGGREGATION = "mean of per-fold metrics"

DEFAULT_HEAD_ARMS = (0, 4, 8, 16, 32)
DEFAULT_POOLING_ARMS = ("self_adaptive", "max", "mean", "attention")
DEFAULT_LOSS_ARMS = ("focal", "cross_entropy")


def _fmt(value):
    if value is None:
        return ""
    if isinstance(value, float):
        return repr(value)
    return str(value)


def reports_to_csv(reports: Sequence[MetricsReport]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(REPORT_COLUMNS)
    for r in reports:
        w.writerow([_fmt(getattr(r, c)) for c in REPORT_COLUMNS])
    return buf.getvalue()


def fold_seed(seed: int, repetition: int, fold: int) -> int:
    """Per-fold seed derived only from the master seed and the fold's position,
    so serial and parallel runs see the same generators."""
    return int(np.random.SeedSequence([seed, repetition, fold]).generate_state(1)[0])


@dataclass
class CVResult:
    reports: list
    histories: list
    split_digest: str
    model_config: ModelConfig
    train_config: TrainConfig
    models: Optional[list] = None
    splits: Optional[list] = None

    def values(self, metric: str) -> np.ndarray:
        return np.array([getattr(r, metric) for r in self.reports], dtype=np.float64)

    def mean(self, metric: str) -> float:
        return float(np.mean(self.values(metric)))

    def std(self, metric: str) -> float:
        v = self.values(metric)
        return float(np.std(v, ddof=1)) if len(v) > 1 else 0.0

    @property
    def aggregate(self) -> dict:
        return {m: (self.mean(m), self.std(m)) for m in METRICS}

    def to_csv(self) -> str:
        return reports_to_csv(self.reports)


def _run_fold(job):
    (bags, vocab, mc, tc, rep, fold, train_idx, val_idx, threshold, keep) = job
    train_bags = [bags[i] for i in train_idx]
    val_bags = [bags[i] for i in val_idx]
    params, history = train(train_bags, val_bags, mc, tc, vocab)
    scores = evaluate_scores(val_bags, params, mc, vocab, tc.batch_size)
    labels = np.array([b.label for b in val_bags])
    report = evaluate(scores, labels, threshold)
    report.fold, report.repetition = fold, rep
    return report, history, (params if keep else None)


def default_jobs() -> int:
    return len(os.sched_getaffinity(0)) if hasattr(os, "sched_getaffinity") else (os.cpu_count() or 1)


def cv_run(
    bags,
    model_config: ModelConfig,
    train_config: TrainConfig,
    k: int = 10,
    repetitions: int = 5,
    seed: int = 0,
    jobs: int = 1,
    threshold: float = 0.5,
    vocab: Optional[Vocabulary] = None,
    keep_models: bool = False,
) -> CVResult:
    """Stratified ``k``-fold CV repeated ``repetitions`` times.

    Each fold trains with early stopping on its own validation fold and is
    scored there.  Per-fold model and shuffle seeds come from
    :func:`fold_seed`, so ``jobs`` does not change any number.
    """
    if vocab is None:
        vocab = build_vocab(bags)
    if model_config.vocab_size != len(vocab):
        model_config = model_config.replace(vocab_size=len(vocab))
    splits = stratified_kfold(bags, k, repetitions, seed)
    jobs_list = []
    for n, (train_idx, val_idx) in enumerate(splits):
        rep, fold = divmod(n, k)
        s = fold_seed(seed, rep, fold)
        jobs_list.append(
            (
                bags,
                vocab,
                model_config.replace(seed=s),
                train_config.replace(seed=s),
                rep,
                fold,
                train_idx,
                val_idx,
                threshold,
                keep_models,
            )
        )
    if jobs > 1 and len(jobs_list) > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            results = list(pool.map(_run_fold, jobs_list))
    else:
        results = [_run_fold(j) for j in jobs_list]

    digest = model_config.digest()
    reports = []
    for report, _, _ in results:
        report.model = model_config.model_kind
        report.loss = train_config.loss_kind
        report.heads = model_config.num_heads
        report.pooling = model_config.instance_pooling_mode
        report.config_digest = digest
        reports.append(report)
    return CVResult(
        reports=reports,
        histories=[h for _, h, _ in results],
        split_digest=split_digest(splits),
        model_config=model_config,
        train_config=train_config,
        models=[p for _, _, p in results] if keep_models else None,
        splits=splits,
    )


# --------------------------------------------------------------------------
# sweeps


@dataclass
class SweepResult:
    kind: str
    arms: list = field(default_factory=list)
    results: list = field(default_factory=list)

    @property
    def table(self) -> list:
        """``(arm, mean AUC)`` rows in arm order."""
        return [(arm, res.mean("auc")) for arm, res in zip(self.arms, self.results)]

    def result(self, arm) -> CVResult:
        return self.results[self.arms.index(arm)]

    def split_digests(self) -> set:
        return {r.split_digest for r in self.results}

    def to_csv(self) -> str:
        return reports_to_csv([rep for res in self.results for rep in res.reports])

    def summary_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        header = ["arm"]
        for m in METRICS:
            header += [f"mean_{m}", f"std_{m}"]
        w.writerow(header + ["runs", "split_digest", "aggregation"])
        for arm, res in zip(self.arms, self.results):
            row = [arm]
            for m in METRICS:
                row += [repr(res.mean(m)), repr(res.std(m))]
            w.writerow(row + [len(res.reports), res.split_digest, AGGREGATION])
        return buf.getvalue()


def _sweep(kind, arms, configs, bags, k, repetitions, seed, jobs, threshold, keep_models):
    vocab = build_vocab(bags)
    out = SweepResult(kind)
    for arm, (mc, tc) in zip(arms, configs):
        res = cv_run(bags, mc, tc, k, repetitions, seed, jobs, threshold, vocab, keep_models)
        out.arms.append(arm)
        out.results.append(res)
    if len(out.split_digests()) > 1:
        raise RuntimeError("sweep arms saw different fold assignments")
    return out


def sweep_heads(
    bags,
    base_config: ModelConfig,
    train_config: TrainConfig,
    head_counts=DEFAULT_HEAD_ARMS,
    k=10,
    repetitions=5,
    seed=0,
    jobs=1,
    threshold=0.5,
    keep_models=False,
) -> SweepResult:
    """One CV run per head count on shared splits; 0 bypasses self-attention."""
    bad = [h for h in head_counts if h < 0 or (h and base_config.d_model % h)]
    if bad:
        raise ConfigError(f"head counts {bad} do not divide d_model={base_config.d_model}")
    configs = [(base_config.replace(num_heads=int(h)), train_config) for h in head_counts]
    return _sweep("heads", [int(h) for h in head_counts], configs, bags, k, repetitions, seed, jobs, threshold, keep_models)


def sweep_pooling(
    bags,
    base_config: ModelConfig,
    train_config: TrainConfig,
    modes=DEFAULT_POOLING_ARMS,
    k=10,
    repetitions=5,
    seed=0,
    jobs=1,
    threshold=0.5,
    keep_models=False,
) -> SweepResult:
    configs = [(base_config.replace(instance_pooling_mode=m), train_config) for m in modes]
    return _sweep("pooling", list(modes), configs, bags, k, repetitions, seed, jobs, threshold, keep_models)


def compare_losses(
    bags,
    base_config: ModelConfig,
    train_config: TrainConfig,
    k=10,
    repetitions=5,
    seed=0,
    jobs=1,
    threshold=0.5,
    keep_models=False,
) -> SweepResult:
    """Paired focal vs cross-entropy runs that differ only in the loss."""
    configs = [(base_config, train_config.replace(loss_kind=kind)) for kind in DEFAULT_LOSS_ARMS]
    return _sweep("loss", list(DEFAULT_LOSS_ARMS), configs, bags, k, repetitions, seed, jobs, threshold, keep_models)
