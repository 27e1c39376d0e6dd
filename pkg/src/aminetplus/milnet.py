"""The attention-pooled bag classifier and the deep multi-instance baselines, built on :mod:`.autograd`.

Pipeline for ``ami_net_plus``::

    tokens -> embedding -> multi-head self-attention + residual + layer norm
           -> fully connected stages (instance representations H)
           -> { self-adaptive pooling over instances, gated attention pooling }
           -> linear scorer on [z_att ; z_pool] -> sigmoid

All batch tensors are ``(B, L, ...)`` with a boolean ``(B, L)`` mask; padded
rows are re-zeroed after every affine stage, so they never influence a
valid output.
"""

from __future__ import annotations

import hashlib
import json
import math
import struct
from collections import OrderedDict
from collections.abc import Mapping
from dataclasses import asdict, dataclass, field
from typing import NamedTuple, Optional

import numpy as np

from . import autograd as ag
from .autograd import Tensor
from .bagdata import BatchedBags
from .errors import CheckpointError, ConfigError, DataError
from .utils import atomic_write_bytes

POOLING_VIEWS = ("max", "mean", "sum", "lse")
INSTANCE_POOLING_MODES = ("self_adaptive", "max", "mean", "sum", "lse", "attention")
MODEL_KINDS = ("ami_net_plus", "mi_net", "big_mi_net", "att_net", "gated_att_net")
BASELINE_KINDS = MODEL_KINDS[1:]
PROB_CLAMP = 1e-7
CHECKPOINT_FORMAT = "milnet-ckpt-v1"


@dataclass(frozen=True)
class ModelConfig:
    vocab_size: int
    d_model: int = 512
    num_heads: int = 4
    fc_dims: tuple = (256, 128)
    pooling_views: tuple = POOLING_VIEWS
    instance_pooling_mode: str = "self_adaptive"
    model_kind: str = "ami_net_plus"
    seed: int = 0
    layer_norm_eps: float = 1e-6

    def __post_init__(self):
        object.__setattr__(self, "fc_dims", tuple(int(d) for d in self.fc_dims))
        object.__setattr__(self, "pooling_views", tuple(self.pooling_views))
        self.validate()

    def validate(self):
        if self.vocab_size < 2:
            raise ConfigError(f"vocab_size must be at least 2 (pad + one token), got {self.vocab_size}")
        if self.d_model < 1:
            raise ConfigError(f"d_model must be positive, got {self.d_model}")
        if self.num_heads < 0:
            raise ConfigError(f"num_heads must be non-negative, got {self.num_heads}")
        if self.num_heads and self.d_model % self.num_heads:
            raise ConfigError(f"d_model={self.d_model} is not divisible by num_heads={self.num_heads}")
        if not self.fc_dims or any(d < 1 for d in self.fc_dims):
            raise ConfigError(f"fc_dims must be a non-empty list of positive sizes, got {self.fc_dims}")
        if self.model_kind not in MODEL_KINDS:
            raise ConfigError(f"model_kind must be one of {MODEL_KINDS}, got {self.model_kind!r}")
        if self.instance_pooling_mode not in INSTANCE_POOLING_MODES:
            raise ConfigError(
                f"instance_pooling_mode must be one of {INSTANCE_POOLING_MODES}, got {self.instance_pooling_mode!r}"
            )
        bad = [v for v in self.pooling_views if v not in POOLING_VIEWS]
        if bad or len(set(self.pooling_views)) != len(self.pooling_views):
            raise ConfigError(f"pooling_views must be distinct members of {POOLING_VIEWS}, got {self.pooling_views}")
        if self.instance_pooling_mode == "self_adaptive" and not self.pooling_views:
            raise ConfigError("self_adaptive pooling needs at least one pooling view")
        if self.layer_norm_eps <= 0:
            raise ConfigError("layer_norm_eps must be positive")

    @property
    def d_k(self) -> int:
        return self.d_model // self.num_heads if self.num_heads else self.d_model

    @property
    def repr_dim(self) -> int:
        return self.fc_dims[-1]

    def replace(self, **changes) -> "ModelConfig":
        d = asdict(self)
        d.update(changes)
        return ModelConfig(**d)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["fc_dims"] = list(self.fc_dims)
        d["pooling_views"] = list(self.pooling_views)
        return d

    @classmethod
    def from_dict(cls, d) -> "ModelConfig":
        try:
            return cls(**d)
        except TypeError as exc:
            raise ConfigError(f"bad model config: {exc}") from None

    def digest(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:12]

    def param_shapes(self) -> "OrderedDict[str, tuple]":
        """Name and shape of every trainable tensor, in initialization order."""
        d, m = self.d_model, self.repr_dim
        shapes = OrderedDict(embedding=(self.vocab_size, d))
        kind = self.model_kind
        if kind == "ami_net_plus" and self.num_heads:
            for h in range(self.num_heads):
                for role in ("query", "key", "value"):
                    shapes[f"attn.{h}.{role}"] = (d, self.d_k)
            shapes["attn.output"] = (self.num_heads * self.d_k, d)
            shapes["norm.gain"] = (d,)
            shapes["norm.bias"] = (d,)
        fan_in = d
        for i, width in enumerate(self.fc_dims):
            shapes[f"ffn.{i}.weight"] = (fan_in, width)
            shapes[f"ffn.{i}.bias"] = (width,)
            fan_in = width
        if kind == "ami_net_plus":
            if self.instance_pooling_mode == "self_adaptive":
                shapes["pool.view_weights"] = (len(self.pooling_views), 1)
            elif self.instance_pooling_mode == "attention":
                shapes["pool.attn_w1"] = (m, 1)
                shapes["pool.attn_w2"] = (m, m)
        if kind in ("ami_net_plus", "att_net", "gated_att_net"):
            shapes["gate.w1"] = (m, 1)
            shapes["gate.w2"] = (m, m)
            if kind != "att_net":
                shapes["gate.w3"] = (m, m)
        shapes["score.weight"] = (2 * m if kind == "ami_net_plus" else m, 1)
        shapes["score.bias"] = (1,)
        return shapes


class ParameterSet(Mapping):
    """Ordered name -> :class:`Tensor` mapping holding one model's weights."""

    def __init__(self, tensors=None):
        self._tensors = OrderedDict()
        for name, value in (tensors or {}).items():
            t = value if isinstance(value, Tensor) else Tensor(value)
            t.requires_grad = True
            t.name = name
            self._tensors[name] = t

    def __getitem__(self, name) -> Tensor:
        return self._tensors[name]

    def __iter__(self):
        return iter(self._tensors)

    def __len__(self):
        return len(self._tensors)

    def shapes(self) -> "OrderedDict[str, tuple]":
        return OrderedDict((n, t.shape) for n, t in self._tensors.items())

    def copy(self) -> "ParameterSet":
        return ParameterSet({n: t.data.copy() for n, t in self._tensors.items()})

    def all_finite(self) -> bool:
        return all(np.all(np.isfinite(t.data)) for t in self._tensors.values())

    def check_shapes(self, config: ModelConfig) -> None:
        expected = config.param_shapes()
        found = self.shapes()
        problems = []
        for name, shape in expected.items():
            if name not in found:
                problems.append(f"{name}: expected {shape}, missing")
            elif tuple(found[name]) != tuple(shape):
                problems.append(f"{name}: expected {tuple(shape)}, found {tuple(found[name])}")
        problems += [f"{name}: unexpected tensor" for name in found if name not in expected]
        if problems:
            raise CheckpointError("parameter/config mismatch: " + "; ".join(problems))


def glorot_bound(fan_in: int, fan_out: int) -> float:
    return math.sqrt(6.0 / (fan_in + fan_out))


def init_params(config: ModelConfig, rng_seed: Optional[int] = None) -> ParameterSet:
    """Fresh weights: Glorot-uniform matrices, zero biases, unit layer-norm
    gain, N(0, 1/d_model) embeddings with an all-zero pad row."""
    config.validate()
    rng = np.random.default_rng(config.seed if rng_seed is None else rng_seed)
    tensors = OrderedDict()
    for name, shape in config.param_shapes().items():
        if name == "embedding":
            arr = rng.normal(0.0, 1.0 / math.sqrt(config.d_model), size=shape)
            arr[0] = 0.0
        elif name == "norm.gain":
            arr = np.ones(shape)
        elif len(shape) == 1:
            arr = np.zeros(shape)
        else:
            bound = glorot_bound(*shape)
            arr = rng.uniform(-bound, bound, size=shape)
        tensors[name] = arr
    return ParameterSet(tensors)


# --------------------------------------------------------------------------
# layers


def _maskf(mask):
    return np.asarray(mask, dtype=np.float64)[..., None]


def embed_bags(batch: BatchedBags, table: Tensor):
    """Look up token embeddings; pad positions come out as exact zeros."""
    ids = batch.token_ids
    v = table.shape[0]
    bad = (ids < 0) | (ids >= v)
    if np.any(bad):
        row, col = np.argwhere(bad)[0]
        raise DataError(f"token id {int(ids[row, col])} outside vocabulary of size {v} in bag {batch.ids[row]!r}")
    x = ag.gather_rows(table, ids)
    return ag.mul(x, _maskf(batch.mask)), batch.mask


def _attend(q, k, v, mask, d_k):
    key_mask = mask[..., None, :]
    sim = ag.scale(ag.matmul(q, ag.transpose(k)), 1.0 / math.sqrt(d_k))
    weights = ag.masked_softmax(sim, key_mask, axis=-1)
    return ag.matmul(weights, v), weights


def scaled_dot_attention(x, mask):
    """Self-attention with queries = keys = values = ``x``.

    ``x`` is ``(L, d_k)`` or ``(B, L, d_k)``; masked rows of the output are
    zero and masked columns get zero weight.
    """
    x = ag.as_tensor(x)
    mask = np.asarray(mask, dtype=bool)
    out, _ = _attend(x, x, x, mask, x.shape[-1])
    return ag.mul(out, _maskf(mask))


def multi_head_block(x, mask, params, config: ModelConfig):
    """Multi-head self-attention, residual connection and layer norm.

    With ``num_heads == 0`` the block is the identity and ``x`` is returned
    unchanged.
    """
    if config.num_heads == 0:
        return x
    mask = np.asarray(mask, dtype=bool)
    heads = []
    for h in range(config.num_heads):
        q = ag.matmul(x, params[f"attn.{h}.query"])
        k = ag.matmul(x, params[f"attn.{h}.key"])
        v = ag.matmul(x, params[f"attn.{h}.value"])
        heads.append(_attend(q, k, v, mask, config.d_k)[0])
    joined = heads[0] if len(heads) == 1 else ag.concat(heads, axis=-1)
    projected = ag.matmul(joined, params["attn.output"])
    normed = ag.layer_norm(ag.add(x, projected), params["norm.gain"], params["norm.bias"], config.layer_norm_eps)
    return ag.mul(normed, _maskf(mask))


def instance_ffn(x, mask, params, config: ModelConfig):
    mf = _maskf(mask)
    for i in range(len(config.fc_dims)):
        x = ag.relu(ag.add(ag.matmul(x, params[f"ffn.{i}.weight"]), params[f"ffn.{i}.bias"]))
        x = ag.mul(x, mf)
    return x


def pooled_views(h, mask, views=POOLING_VIEWS):
    """One ``(..., M)`` tensor per view, pooling over the instance axis."""
    inst_mask = np.asarray(mask, dtype=bool)[..., None]
    return [ag.reduce(v, h, axis=-2, mask=inst_mask) for v in views]


def self_adaptive_pool(h, mask, view_weights, views=POOLING_VIEWS):
    """Learned linear combination of max/mean/sum/lse pooled views."""
    pooled = pooled_views(h, mask, views)
    lead = pooled[0].shape
    stacked = ag.concat([ag.reshape(p, lead + (1,)) for p in pooled], axis=-1)
    return ag.reshape(ag.matmul(stacked, view_weights), lead)


def _softmax_pool(h, gate, mask):
    weights = ag.masked_softmax(ag.reshape(gate, gate.shape[:-1]), mask, axis=-1)
    lead = weights.shape[:-1]
    z = ag.matmul(ag.reshape(weights, lead + (1, weights.shape[-1])), h)
    return ag.reshape(z, lead + (h.shape[-1],)), weights


def gated_attention_pool(h, mask, w1, w2, w3):
    """Attention weights from ``w1^T (tanh(h W2) * sigmoid(h W3))`` per instance.

    Returns ``(z, weights)``; weights are a masked softmax over instances.
    """
    h = ag.as_tensor(h)
    mask = np.asarray(mask, dtype=bool)
    gate = ag.matmul(ag.mul(ag.tanh(ag.matmul(h, w2)), ag.sigmoid(ag.matmul(h, w3))), w1)
    return _softmax_pool(h, gate, mask)


def attention_pool(h, mask, w1, w2):
    """Ungated variant: ``w1^T tanh(h W2)``."""
    h = ag.as_tensor(h)
    mask = np.asarray(mask, dtype=bool)
    gate = ag.matmul(ag.tanh(ag.matmul(h, w2)), w1)
    return _softmax_pool(h, gate, mask)


def _probability(logit):
    return ag.clip(ag.sigmoid(logit), PROB_CLAMP, 1.0 - PROB_CLAMP)


def _linear_score(z, weight, bias):
    lead = z.shape[:-1]
    flat = ag.reshape(z, (-1, z.shape[-1]))
    logit = ag.reshape(ag.matmul(flat, weight), lead)
    return ag.add(logit, ag.reshape(bias, ())) if not lead else ag.add(logit, bias)


def bag_score(z_att, z_pool, weight, bias):
    """Sigmoid of a linear score on ``[z_att ; z_pool]``, clamped to
    ``[1e-7, 1 - 1e-7]``."""
    z = ag.concat([ag.as_tensor(z_att), ag.as_tensor(z_pool)], axis=-1)
    return _probability(_linear_score(z, weight, bias))


class ForwardOutput(NamedTuple):
    probabilities: Tensor  # (B,)
    attention: Optional[Tensor]  # (B, L) bag-level attention weights, if the model has them


def _check_batch(batch: BatchedBags):
    empty = ~batch.mask.any(axis=1)
    if np.any(empty):
        raise DataError(f"bag {batch.ids[int(np.flatnonzero(empty)[0])]!r} has no valid instances")


def _instance_pool(h, mask, params, config):
    mode = config.instance_pooling_mode
    if mode == "self_adaptive":
        return self_adaptive_pool(h, mask, params["pool.view_weights"], config.pooling_views)
    if mode == "attention":
        return attention_pool(h, mask, params["pool.attn_w1"], params["pool.attn_w2"])[0]
    return pooled_views(h, mask, (mode,))[0]


def forward(batch: BatchedBags, params, config: ModelConfig) -> ForwardOutput:
    """Bag probabilities for ``batch`` (dispatches baselines by ``model_kind``)."""
    if config.model_kind != "ami_net_plus":
        return baseline_forward(config.model_kind, batch, params, config)
    _check_batch(batch)
    x, mask = embed_bags(batch, params["embedding"])
    x = multi_head_block(x, mask, params, config)
    h = instance_ffn(x, mask, params, config)
    z_pool = _instance_pool(h, mask, params, config)
    z_att, weights = gated_attention_pool(h, mask, params["gate.w1"], params["gate.w2"], params["gate.w3"])
    prob = bag_score(z_att, z_pool, params["score.weight"], params["score.bias"])
    return ForwardOutput(prob, weights)


def baseline_forward(kind: str, batch: BatchedBags, params, config: ModelConfig) -> ForwardOutput:
    """mi-Net, MI-Net, attention and gated-attention networks.

    All share the embedding and fully connected trunk and skip self-attention.
    """
    if kind not in BASELINE_KINDS:
        raise ConfigError(f"unknown baseline {kind!r}; expected one of {BASELINE_KINDS}")
    _check_batch(batch)
    x, mask = embed_bags(batch, params["embedding"])
    h = instance_ffn(x, mask, params, config)
    w, b = params["score.weight"], params["score.bias"]
    if kind == "mi_net":
        inst = _probability(_linear_score(h, w, b))
        return ForwardOutput(ag.reduce("max", inst, axis=-1, mask=mask), None)
    if kind == "big_mi_net":
        z = ag.reduce("max", h, axis=-2, mask=mask[..., None])
        return ForwardOutput(_probability(_linear_score(z, w, b)), None)
    if kind == "att_net":
        z, weights = attention_pool(h, mask, params["gate.w1"], params["gate.w2"])
    else:
        z, weights = gated_attention_pool(h, mask, params["gate.w1"], params["gate.w2"], params["gate.w3"])
    return ForwardOutput(_probability(_linear_score(z, w, b)), weights)


def predict_proba(batches, params, config: ModelConfig) -> np.ndarray:
    """Probabilities for a list of batches, evaluated without a tape."""
    return np.concatenate([forward(b, params, config).probabilities.data for b in batches])


# --------------------------------------------------------------------------
# checkpoints
#
# layout: b"milnet-ckpt-v1\n" | u64 little-endian header length | JSON header
#         | float64 little-endian payload, tensors back to back


_MAGIC = (CHECKPOINT_FORMAT + "\n").encode()


class Checkpoint(NamedTuple):
    params: ParameterSet
    config: ModelConfig
    vocabulary: Optional[tuple]


def save_checkpoint(params: ParameterSet, config: ModelConfig, path, vocabulary=None) -> None:
    params.check_shapes(config)
    chunks, entries, offset = [], [], 0
    for name, t in params.items():
        raw = np.ascontiguousarray(t.data, dtype="<f8").tobytes()
        entries.append({"name": name, "shape": list(t.shape), "offset": offset, "nbytes": len(raw)})
        chunks.append(raw)
        offset += len(raw)
    payload = b"".join(chunks)
    header = {
        "format": CHECKPOINT_FORMAT,
        "config": config.to_dict(),
        "vocabulary": None if vocabulary is None else list(vocabulary),
        "tensors": entries,
        "payload_bytes": len(payload),
        "payload_sha256": hashlib.sha256(payload).hexdigest(),
    }
    head = json.dumps(header, sort_keys=True).encode("utf-8")
    atomic_write_bytes(path, _MAGIC + struct.pack("<Q", len(head)) + head + payload)


def read_checkpoint_header(blob: bytes) -> tuple:
    """Split a checkpoint into ``(header dict, payload bytes)``."""
    if not blob.startswith(_MAGIC):
        first = blob.split(b"\n", 1)[0][:40]
        raise CheckpointError(f"not a {CHECKPOINT_FORMAT} checkpoint (found tag {first!r})")
    pos = len(_MAGIC)
    if len(blob) < pos + 8:
        raise CheckpointError("checkpoint truncated inside the header length")
    (n,) = struct.unpack("<Q", blob[pos : pos + 8])
    pos += 8
    if len(blob) < pos + n:
        raise CheckpointError("checkpoint truncated inside the header")
    try:
        header = json.loads(blob[pos : pos + n].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"checkpoint header unreadable: {exc}") from None
    return header, blob[pos + n :]


def load_checkpoint(path) -> Checkpoint:
    try:
        with open(path, "rb") as fh:
            blob = fh.read()
    except OSError as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc.strerror or exc}") from None
    header, payload = read_checkpoint_header(blob)
    if header.get("format") != CHECKPOINT_FORMAT:
        raise CheckpointError(f"checkpoint version {header.get('format')!r}, expected {CHECKPOINT_FORMAT!r}")
    if len(payload) != header.get("payload_bytes"):
        raise CheckpointError(
            f"checkpoint payload truncated: expected {header.get('payload_bytes')} bytes, found {len(payload)}"
        )
    if hashlib.sha256(payload).hexdigest() != header.get("payload_sha256"):
        raise CheckpointError("checkpoint payload checksum mismatch")
    config = ModelConfig.from_dict(header["config"])

    expected = config.param_shapes()
    found = OrderedDict((e["name"], tuple(e["shape"])) for e in header["tensors"])
    problems = [
        f"{name}: expected {shape}, found {found.get(name, 'nothing')}"
        for name, shape in expected.items()
        if found.get(name) != tuple(shape)
    ]
    problems += [f"{name}: unexpected tensor {shape}" for name, shape in found.items() if name not in expected]
    if problems:
        raise CheckpointError("checkpoint shapes do not match its config: " + "; ".join(problems))

    tensors = OrderedDict()
    for e in header["tensors"]:
        raw = payload[e["offset"] : e["offset"] + e["nbytes"]]
        tensors[e["name"]] = np.frombuffer(raw, dtype="<f8").astype(np.float64).reshape(e["shape"])
    vocab = header.get("vocabulary")
    if vocab is not None and len(vocab) + 1 != config.vocab_size:
        raise CheckpointError(
            f"checkpoint vocabulary has {len(vocab) + 1} ids but config vocab_size is {config.vocab_size}"
        )
    return Checkpoint(ParameterSet(tensors), config, None if vocab is None else tuple(vocab))
