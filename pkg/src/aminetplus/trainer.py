"""Focal and cross-entropy losses, Adam, and the early-stopped training loop."""

from __future__ import annotations

import csv
import io
from dataclasses import asdict, dataclass, field
from typing import Optional

import numpy as np

from . import autograd as ag
from .autograd import Tape, Tensor
from .bagdata import Vocabulary, build_vocab, pad_batch
from .errors import ConfigError, DataError, NumericError, ShapeError
from .metrics import roc_auc
from .milnet import PROB_CLAMP, ModelConfig, ParameterSet, forward, init_params

LOSS_KINDS = ("focal", "cross_entropy")


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 0.001
    beta1: float = 0.9
    beta2: float = 0.98
    epsilon: float = 1e-8
    batch_size: int = 512
    max_epochs: int = 200
    loss_kind: str = "focal"
    alpha: float = 0.25
    gamma: float = 2.0
    early_stop_patience: int = 20
    seed: int = 0

    def __post_init__(self):
        self.validate()

    def validate(self):
        if not 0 < self.beta1 < 1 or not 0 < self.beta2 < 1:
            raise ConfigError(f"betas must lie in (0, 1), got {self.beta1}, {self.beta2}")
        if self.learning_rate <= 0:
            raise ConfigError(f"learning_rate must be positive, got {self.learning_rate}")
        if self.epsilon <= 0:
            raise ConfigError("epsilon must be positive")
        if self.gamma < 0:
            raise ConfigError(f"gamma must be non-negative, got {self.gamma}")
        if not 0 < self.alpha <= 1:
            raise ConfigError(f"alpha must lie in (0, 1], got {self.alpha}")
        if self.batch_size < 1 or self.max_epochs < 1 or self.early_stop_patience < 1:
            raise ConfigError("batch_size, max_epochs and early_stop_patience must be positive")
        if self.loss_kind not in LOSS_KINDS:
            raise ConfigError(f"loss_kind must be one of {LOSS_KINDS}, got {self.loss_kind!r}")

    def replace(self, **changes) -> "TrainConfig":
        d = asdict(self)
        d.update(changes)
        return TrainConfig(**d)

    def to_dict(self) -> dict:
        return asdict(self)


# --------------------------------------------------------------------------
# losses


def _targets(y_true, n):
    y = np.asarray(y_true)
    if y.shape != (n,) and not (y.ndim == 0 and n == 1):
        raise ShapeError("labels do not match predictions", y.shape, (n,))
    if not np.all((y == 0) | (y == 1)):
        bad = y[(y != 0) & (y != 1)].reshape(-1)[0]
        raise DataError(f"label {bad!r} is not 0 or 1")
    return y.astype(np.float64).reshape(-1)


def _prepare(y_pred, y_true):
    p = ag.as_tensor(y_pred)
    if p.ndim != 1:
        p = ag.reshape(p, (-1,))
    y = _targets(y_true, p.shape[0])
    return ag.clip(p, PROB_CLAMP, 1.0 - PROB_CLAMP), y


def _prob_true_class(p, y):
    # y * p + (1 - y) * (1 - p), exact for y in {0, 1}
    return ag.add(ag.mul(p, y), ag.mul(ag.add(ag.negate(p), 1.0), 1.0 - y))


def focal_loss(y_pred, y_true, alpha: float = 0.25, gamma: float = 2.0) -> Tensor:
    """Batch mean of ``-alpha * (1 - p_t)**gamma * ln(p_t)``.

    ``p_t`` is the probability given to the true class; predictions are
    clamped to ``[1e-7, 1 - 1e-7]`` first.
    """
    p, y = _prepare(y_pred, y_true)
    pt = _prob_true_class(p, y)
    modulator = ag.power(ag.add(ag.negate(pt), 1.0), gamma)
    per_bag = ag.scale(ag.mul(modulator, ag.log(pt)), -alpha)
    return ag.reduce("mean", per_bag, axis=0)


def cross_entropy(y_pred, y_true) -> Tensor:
    p, y = _prepare(y_pred, y_true)
    one_minus = ag.add(ag.negate(p), 1.0)
    per_bag = ag.negate(ag.add(ag.mul(ag.log(p), y), ag.mul(ag.log(one_minus), 1.0 - y)))
    return ag.reduce("mean", per_bag, axis=0)


def loss_fn(config: TrainConfig):
    if config.loss_kind == "focal":
        return lambda p, y: focal_loss(p, y, config.alpha, config.gamma)
    return cross_entropy


# --------------------------------------------------------------------------
# optimizer


@dataclass
class AdamState:
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


FROZEN_ROWS = {"embedding": 0}


def adam_step(params, grads, state: AdamState, t: int, config: TrainConfig):
    """One bias-corrected Adam update, applied in place to ``params``.

    ``grads`` maps parameter names to arrays.  Row 0 of the embedding table
    (the pad row) is never updated.
    """
    if t < 1:
        raise ValueError(f"Adam step index starts at 1, got {t}")
    b1, b2 = config.beta1, config.beta2
    c1 = 1.0 - b1**t
    c2 = 1.0 - b2**t
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            continue
        if g.shape != p.shape:
            raise ShapeError(f"gradient for {name} has the wrong shape", g.shape, p.shape)
        m = state.m.get(name)
        v = state.v.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(p.data)
            v = state.v[name] = np.zeros_like(p.data)
        elif m.shape != p.shape or v.shape != p.shape:
            raise ShapeError(f"optimizer state for {name} has the wrong shape", m.shape, p.shape)
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        update = config.learning_rate * (m / c1) / (np.sqrt(v / c2) + config.epsilon)
        row = FROZEN_ROWS.get(name)
        if row is not None:
            update[row] = 0.0
        p.data -= update
        if not np.all(np.isfinite(p.data)):
            raise NumericError(f"parameter {name} became non-finite at step {t}")
    state.step = t
    return params, state


# --------------------------------------------------------------------------
# training loop


class EarlyStopping:
    """Tracks the best validation score and when patience runs out.

    Only a score above the best so far resets patience.  A score equal to the
    best is still a best score: :meth:`update` returns True for it so the
    caller keeps the later, longer-trained weights.  Validation AUC often
    saturates at 1.0 on easy folds, where keeping the first epoch to reach it
    would keep an undertrained model.
    """

    def __init__(self, patience: int):
        self.patience = patience
        self.best_score = -np.inf
        self.best_epoch = 0
        self.stale = 0

    def update(self, epoch: int, score: float) -> bool:
        if score > self.best_score:
            self.stale = 0
        else:
            self.stale += 1
            if score < self.best_score:
                return False
        self.best_score = score
        self.best_epoch = epoch
        return True

    @property
    def should_stop(self) -> bool:
        return self.stale >= self.patience


@dataclass
class EpochRecord:
    epoch: int
    train_loss: float
    val_auc: float


@dataclass
class TrainHistory:
    records: list = field(default_factory=list)
    best_epoch: int = 0

    @property
    def best_auc(self) -> float:
        return next(r.val_auc for r in self.records if r.epoch == self.best_epoch)

    @property
    def train_losses(self) -> list:
        return [r.train_loss for r in self.records]

    @property
    def val_aucs(self) -> list:
        return [r.val_auc for r in self.records]

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["epoch", "train_loss", "val_auc", "is_best"])
        for r in self.records:
            w.writerow([r.epoch, repr(r.train_loss), repr(r.val_auc), int(r.epoch == self.best_epoch)])
        return buf.getvalue()


def _encode(bags, vocab):
    return [vocab.encode(b) for b in bags]


BUCKET_BATCHES = 8


def _batches(encoded, bags, order, batch_size):
    for start in range(0, len(order), batch_size):
        idx = order[start : start + batch_size]
        yield pad_batch([encoded[i] for i in idx], [bags[i].label for i in idx], [bags[i].id for i in idx])


def epoch_batches(lengths, batch_size: int, rng) -> list:
    """Index batches for one epoch: shuffle, sort by length inside windows of
    ``BUCKET_BATCHES`` batches to cut padding, then shuffle the batch order.

    Every index appears exactly once; the last short batch is kept.
    """
    lengths = np.asarray(lengths)
    order = rng.permutation(len(lengths))
    window = batch_size * BUCKET_BATCHES
    batches = []
    for start in range(0, len(order), window):
        chunk = order[start : start + window]
        chunk = chunk[np.argsort(lengths[chunk], kind="stable")]
        batches.extend(chunk[i : i + batch_size] for i in range(0, len(chunk), batch_size))
    return [batches[i] for i in rng.permutation(len(batches))]


def evaluate_scores(bags, params, config: ModelConfig, vocab: Vocabulary, batch_size=512) -> np.ndarray:
    encoded = _encode(bags, vocab)
    order = np.arange(len(bags))
    return np.concatenate(
        [forward(b, params, config).probabilities.data for b in _batches(encoded, bags, order, batch_size)]
    )


def train(
    train_bags,
    val_bags,
    model_config: ModelConfig,
    train_config: TrainConfig,
    vocab: Optional[Vocabulary] = None,
    params: Optional[ParameterSet] = None,
):
    """Fit on ``train_bags`` with early stopping on validation AUC.

    Returns ``(best_params, history)`` where ``best_params`` is a copy of the
    weights from the epoch with the highest validation AUC.
    """
    if not train_bags or not val_bags:
        raise DataError("training and validation sets must both be non-empty")
    val_labels = np.array([b.label for b in val_bags])
    if len(set(val_labels.tolist())) < 2:
        raise DataError("AUC undefined: validation set holds a single class")
    if vocab is None:
        vocab = build_vocab(list(train_bags) + list(val_bags))
    if len(vocab) > model_config.vocab_size:
        raise ConfigError(f"vocabulary has {len(vocab)} ids but model vocab_size is {model_config.vocab_size}")
    if params is None:
        params = init_params(model_config, model_config.seed)

    rng = np.random.default_rng(train_config.seed)
    encoded = _encode(train_bags, vocab)
    objective = loss_fn(train_config)
    state = AdamState()
    stopper = EarlyStopping(train_config.early_stop_patience)
    history = TrainHistory()
    best = params.copy()
    step = 0

    lengths = [len(e) for e in encoded]
    for epoch in range(1, train_config.max_epochs + 1):
        total = 0.0
        for idx in epoch_batches(lengths, train_config.batch_size, rng):
            batch = pad_batch(
                [encoded[i] for i in idx], [train_bags[i].label for i in idx], [train_bags[i].id for i in idx]
            )
            with Tape() as tape:
                probs = forward(batch, params, model_config).probabilities
                loss = objective(probs, batch.labels)
            ag.backward(loss, tape)
            step += 1
            adam_step(params, {n: p.grad for n, p in params.items() if p.grad is not None}, state, step, train_config)
            total += loss.item() * len(batch)
        train_loss = total / len(train_bags)

        scores = evaluate_scores(val_bags, params, model_config, vocab, train_config.batch_size)
        auc = roc_auc(scores, val_labels)
        history.records.append(EpochRecord(epoch, train_loss, auc))
        if stopper.update(epoch, auc):
            best = params.copy()
        if stopper.should_stop:
            break

    history.best_epoch = stopper.best_epoch
    return best, history
