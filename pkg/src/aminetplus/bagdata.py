"""Bags of tokens: loading, vocabulary, padding, CV splits, synthetic data."""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import dataclass, field
from typing import Iterable, Optional, Sequence

import numpy as np

from .errors import ConfigError, DataError
from .utils import atomic_write_text

PAD_ID = 0
PAD_TOKEN = "<pad>"


@dataclass(frozen=True)
class Bag:
    """One record: a multiset of instance tokens with a binary label."""

    id: str
    tokens: tuple
    label: int

    def __post_init__(self):
        object.__setattr__(self, "tokens", tuple(self.tokens))
        if not self.tokens:
            raise DataError(f"bag {self.id!r} has no instances")
        if self.label not in (0, 1) or isinstance(self.label, bool):
            raise DataError(f"bag {self.id!r} has label {self.label!r}; expected 0 or 1")
        if PAD_TOKEN in self.tokens:
            raise DataError(f"bag {self.id!r} contains the reserved token {PAD_TOKEN!r}")


@dataclass(frozen=True)
class Vocabulary:
    """Token/id bijection with id 0 reserved for padding."""

    tokens: tuple  # tokens[i] is the token with id i + 1
    index: dict = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        index = {}
        for i, tok in enumerate(self.tokens, start=1):
            if tok in index or tok == PAD_TOKEN:
                raise DataError(f"vocabulary token {tok!r} is duplicated or reserved")
            index[tok] = i
        object.__setattr__(self, "index", index)

    def __len__(self):
        """Number of ids including the pad id."""
        return len(self.tokens) + 1

    def __contains__(self, token):
        return token in self.index

    def id_of(self, token, bag_id=None) -> int:
        try:
            return self.index[token]
        except KeyError:
            where = f" in bag {bag_id!r}" if bag_id is not None else ""
            raise DataError(f"unknown token {token!r}{where}") from None

    def token_of(self, token_id: int) -> str:
        return PAD_TOKEN if token_id == PAD_ID else self.tokens[token_id - 1]

    def encode(self, bag: Bag) -> np.ndarray:
        return np.array([self.id_of(t, bag.id) for t in bag.tokens], dtype=np.int64)


@dataclass(frozen=True)
class BatchedBags:
    """Rectangular block of token ids padded with 0, plus its validity mask."""

    token_ids: np.ndarray  # (B, L) int64
    mask: np.ndarray  # (B, L) bool
    labels: np.ndarray  # (B,) int64
    ids: tuple

    def __len__(self):
        return self.token_ids.shape[0]

    def unpad(self) -> list:
        return [row[m] for row, m in zip(self.token_ids, self.mask)]


def load_jsonl(path) -> list:
    """Read newline-delimited bag records, keeping file order.

    Each record has ``instances`` (non-empty string array), ``label`` (0/1)
    and an optional string ``id``; missing ids become ``"line-<n>"``.
    """
    bags = []
    try:
        fh = open(path, encoding="utf-8")
    except OSError as exc:
        raise DataError(f"cannot read dataset {path}: {exc.strerror or exc}") from None
    with fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
            except json.JSONDecodeError as exc:
                raise DataError(f"{path}:{lineno}: malformed record ({exc.msg})") from None
            if not isinstance(rec, dict):
                raise DataError(f"{path}:{lineno}: record is not an object")
            bag_id = rec.get("id", f"line-{lineno}")
            inst = rec.get("instances")
            label = rec.get("label")
            if not isinstance(bag_id, str):
                raise DataError(f"{path}:{lineno}: id must be a string")
            if not isinstance(inst, list) or not all(isinstance(t, str) for t in inst):
                raise DataError(f"{path}:{lineno}: instances must be an array of strings (bag {bag_id!r})")
            if not inst:
                raise DataError(f"{path}:{lineno}: bag {bag_id!r} has an empty instances array")
            if isinstance(label, bool) or label not in (0, 1):
                raise DataError(f"{path}:{lineno}: label {label!r} is not 0 or 1 (bag {bag_id!r})")
            try:
                bags.append(Bag(bag_id, inst, int(label)))
            except DataError as exc:
                raise DataError(f"{path}:{lineno}: {exc}") from None
    return bags


def dump_jsonl(bags: Iterable[Bag]) -> str:
    lines = [
        json.dumps({"id": b.id, "instances": list(b.tokens), "label": b.label}, ensure_ascii=False)
        for b in bags
    ]
    return "\n".join(lines) + "\n"


def write_jsonl(bags: Iterable[Bag], path) -> None:
    atomic_write_text(path, dump_jsonl(bags))


def build_vocab(bags: Sequence[Bag]) -> Vocabulary:
    """Assign ids 1..T in order of first appearance."""
    if not bags:
        raise DataError("cannot build a vocabulary from zero bags")
    seen = {}
    for bag in bags:
        for tok in bag.tokens:
            if tok not in seen:
                seen[tok] = None
    return Vocabulary(tuple(seen))


def pad_batch(encoded: Sequence[np.ndarray], labels, ids) -> BatchedBags:
    width = max(len(e) for e in encoded)
    block = np.zeros((len(encoded), width), dtype=np.int64)
    mask = np.zeros((len(encoded), width), dtype=bool)
    for i, e in enumerate(encoded):
        block[i, : len(e)] = e
        mask[i, : len(e)] = True
    return BatchedBags(block, mask, np.asarray(labels, dtype=np.int64), tuple(ids))


def batchify(bags: Sequence[Bag], vocab: Vocabulary, batch_size: int) -> list:
    """Split ``bags`` into consecutive batches, each padded to its own longest bag.

    The last short batch is kept.
    """
    if batch_size < 1:
        raise ConfigError(f"batch_size must be positive, got {batch_size}")
    encoded = [vocab.encode(b) for b in bags]
    out = []
    for start in range(0, len(bags), batch_size):
        chunk = bags[start : start + batch_size]
        out.append(
            pad_batch(encoded[start : start + batch_size], [b.label for b in chunk], [b.id for b in chunk])
        )
    return out


# --------------------------------------------------------------------------
# cross-validation splits


def stratified_kfold(labels, k: int, repetitions: int = 1, seed: int = 0) -> list:
    """Stratified ``k``-fold assignment, reshuffled for every repetition.

    ``labels`` may be a sequence of :class:`Bag` or of 0/1 ints.  Within a
    repetition each class is shuffled and dealt round-robin over the folds,
    continuing where the previous class stopped.  Returns a flat list of
    ``(train_idx, val_idx)`` pairs ordered repetition-major.
    """
    y = np.array([b.label if isinstance(b, Bag) else int(b) for b in labels], dtype=np.int64)
    if k < 2:
        raise ConfigError(f"k must be at least 2, got {k}")
    if repetitions < 1:
        raise ConfigError(f"repetitions must be positive, got {repetitions}")
    classes = sorted(set(y.tolist()))
    for c in classes:
        n_c = int(np.sum(y == c))
        if n_c < k:
            raise DataError(f"class {c} has {n_c} members, fewer than k={k}")

    splits = []
    all_idx = np.arange(len(y))
    for rep in range(repetitions):
        rng = np.random.default_rng([seed, rep])
        fold_of = np.empty(len(y), dtype=np.int64)
        offset = 0
        for c in classes:
            members = rng.permutation(np.flatnonzero(y == c))
            fold_of[members] = (offset + np.arange(len(members))) % k
            offset = (offset + len(members)) % k
        for f in range(k):
            val = all_idx[fold_of == f]
            train = all_idx[fold_of != f]
            splits.append((train, val))
    return splits


def split_digest(splits) -> str:
    h = hashlib.sha256()
    for train, val in splits:
        h.update(np.asarray(train, dtype=np.int64).tobytes())
        h.update(b"|")
        h.update(np.asarray(val, dtype=np.int64).tobytes())
        h.update(b"#")
    return h.hexdigest()[:16]


# --------------------------------------------------------------------------
# synthetic witness data


@dataclass(frozen=True)
class SynthSpec:
    """Parameters of the witness generator.

    Tokens ``w0 .. w{num_witness_tokens-1}`` are witnesses; the rest are
    ``t<i>``.  A bag is positive exactly when it holds at least
    ``cooccurrence`` distinct witnesses.  With ``cooccurrence=1`` this is the
    standard multi-instance assumption; larger values make negatives carry up
    to ``cooccurrence - 1`` witnesses, so a single witness is not enough.

    With ``witness_groups=True`` the witnesses are split into consecutive
    groups of ``cooccurrence`` (a remainder stays ungrouped).  A positive bag
    holds exactly one complete group; a negative bag holds up to
    ``cooccurrence`` witnesses but never a complete group, so the witness
    count alone no longer separates the classes; only which tokens co-occur does.
    """

    num_bags: int = 1000
    vocab_size: int = 100
    num_witness_tokens: int = 5
    positive_rate: float = 0.057
    bag_length_range: tuple = (3, 17)
    seed: int = 0
    cooccurrence: int = 1
    witness_groups: bool = False

    def validate(self):
        lo, hi = self.bag_length_range
        if self.num_bags < 1:
            raise ConfigError("num_bags must be positive")
        if not 0 < self.positive_rate < 1:
            raise ConfigError(f"positive_rate must lie in (0, 1), got {self.positive_rate}")
        if not 0 < self.num_witness_tokens < self.vocab_size:
            raise ConfigError("need 0 < num_witness_tokens < vocab_size")
        if lo < 1 or hi < lo:
            raise ConfigError(f"bag_length_range {self.bag_length_range} is infeasible")
        if not 1 <= self.cooccurrence <= self.num_witness_tokens:
            raise ConfigError("cooccurrence must be between 1 and num_witness_tokens")
        if self.witness_groups and (
            self.cooccurrence < 2 or self.num_witness_tokens - len(self.groups) < self.cooccurrence
        ):
            raise ConfigError("witness_groups needs cooccurrence >= 2 and room for a decoy set without a full group")
        if lo < self.cooccurrence:
            raise ConfigError("minimum bag length is shorter than the witnesses a positive bag needs")
        if self.vocab_size - self.num_witness_tokens < 1:
            raise ConfigError("no non-witness tokens left")

    @property
    def witness_tokens(self) -> tuple:
        return tuple(f"w{i}" for i in range(self.num_witness_tokens))

    @property
    def groups(self) -> tuple:
        c = self.cooccurrence
        w = self.witness_tokens
        return tuple(w[i : i + c] for i in range(0, len(w) - c + 1, c))

    @property
    def filler_tokens(self) -> tuple:
        return tuple(f"t{i}" for i in range(self.vocab_size - self.num_witness_tokens))

    @property
    def num_positive(self) -> int:
        # half-up rounding, not banker's
        return int(math.floor(self.positive_rate * self.num_bags + 0.5))


def synth_generate(spec: SynthSpec) -> list:
    spec.validate()
    rng = np.random.default_rng(spec.seed)
    witness = spec.witness_tokens
    filler = spec.filler_tokens
    n = spec.num_bags
    labels = np.zeros(n, dtype=np.int64)
    labels[rng.permutation(n)[: spec.num_positive]] = 1
    lo, hi = spec.bag_length_range
    width = len(str(n - 1))

    bags = []
    for i in range(n):
        length = int(rng.integers(lo, hi + 1))
        if spec.witness_groups:
            chosen = _grouped_witnesses(spec, bool(labels[i]), rng)
            n_wit = len(chosen)
        else:
            n_wit = spec.cooccurrence if labels[i] else int(rng.integers(0, spec.cooccurrence))
            chosen = [witness[j] for j in rng.choice(len(witness), size=n_wit, replace=False)]
        rest = [filler[j] for j in rng.integers(0, len(filler), size=length - n_wit)]
        tokens = chosen + rest
        order = rng.permutation(len(tokens))
        bags.append(Bag(f"bag-{i:0{width}d}", [tokens[j] for j in order], int(labels[i])))
    return bags


def _grouped_witnesses(spec: SynthSpec, positive: bool, rng) -> list:
    groups = spec.groups
    if positive:
        return list(groups[int(rng.integers(len(groups)))])
    witness = spec.witness_tokens
    n_wit = int(rng.integers(0, spec.cooccurrence + 1))
    while True:
        chosen = [witness[j] for j in rng.choice(len(witness), size=n_wit, replace=False)]
        if not has_complete_group(chosen, spec):
            return chosen


def has_complete_group(tokens, spec: SynthSpec) -> bool:
    present = set(tokens)
    return any(present.issuperset(g) for g in spec.groups)


def witness_count(bag: Bag, spec: SynthSpec) -> int:
    return len(set(bag.tokens) & set(spec.witness_tokens))
