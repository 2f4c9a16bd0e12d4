"""Pre-norm transformer encoder with sequence and token classification heads."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, replace

import numpy as np

from .errors import ConfigError, DataError
from .tensor import Tape, Tensor

IGNORE_INDEX = -100
HEAD_KINDS = ("sequence", "token")
MASK_VALUE = -1e9


@dataclass(frozen=True)
class ModelConfig:
    layers: int
    model_dim: int
    heads: int
    ffn_dim: int
    vocab_size: int
    max_positions: int
    num_labels: int
    head_kind: str = "sequence"
    dropout: float = 0.1
    init_std: float = 0.02
    layer_norm_eps: float = 1e-12

    def __post_init__(self):
        self.validate()

    def validate(self):
        # layers == 0 is allowed: the degenerate encoder is embeddings only
        if self.layers < 0:
            raise ConfigError(f"layers must be >= 0, got {self.layers}")
        for name in ("model_dim", "heads", "ffn_dim", "vocab_size", "max_positions", "num_labels"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1, got {getattr(self, name)}")
        if self.model_dim % self.heads:
            raise ConfigError(
                f"model_dim {self.model_dim} is not divisible by heads {self.heads}"
            )
        if self.head_kind not in HEAD_KINDS:
            raise ConfigError(f"head_kind must be one of {HEAD_KINDS}, got {self.head_kind!r}")
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigError(f"dropout must be in [0, 1), got {self.dropout}")

    @property
    def head_dim(self) -> int:
        return self.model_dim // self.heads

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        return cls(**d)


@dataclass(frozen=True)
class Tier:
    """Named architecture recipe; vocab and label counts come from the task."""

    name: str
    layers: int
    model_dim: int
    heads: int
    ffn_dim: int
    vocab_size: int | None = None
    max_positions: int | None = None

    def config(self, vocab_size=None, max_positions=None, num_labels=2, head_kind="sequence", **kw):
        v = vocab_size if vocab_size is not None else self.vocab_size
        p = max_positions if max_positions is not None else self.max_positions
        if v is None or p is None:
            raise ConfigError(f"tier {self.name!r} needs vocab_size and max_positions from the task")
        return ModelConfig(
            self.layers, self.model_dim, self.heads, self.ffn_dim, v, p, num_labels, head_kind, **kw
        )


# Full-size analogs of the BERT family (accounting only) and desk-scale tiers
# that keep the family's layer/width ratios: distil = half of base's layers.
TIERS = {
    t.name: t
    for t in (
        Tier("bert-base", 12, 768, 12, 3072, 30522, 512),
        Tier("distilbert", 6, 768, 12, 3072, 30522, 512),
        Tier("mobilebert", 24, 256, 4, 896, 30522, 512),
        Tier("tinybert", 4, 312, 12, 1200, 30522, 512),
        Tier("desk-tiny", 1, 16, 2, 32),
        Tier("desk-mobile", 4, 16, 2, 32),
        Tier("desk-distil", 1, 32, 4, 64),
        Tier("desk-base", 2, 32, 4, 64),
        Tier("desk-wide", 1, 128, 4, 256),
    )
}


def get_tier(name: str) -> Tier:
    try:
        return TIERS[name]
    except KeyError:
        raise ConfigError(f"unknown tier {name!r}; known tiers: {', '.join(TIERS)}") from None


@dataclass
class TaskBatch:
    ids: np.ndarray  # int64 [batch, seq]
    mask: np.ndarray  # bool [batch, seq], True = real token
    labels: np.ndarray | None = None  # [batch] or [batch, seq]

    def __post_init__(self):
        self.ids = np.asarray(self.ids, dtype=np.int64)
        self.mask = np.asarray(self.mask, dtype=bool)
        if self.ids.ndim != 2 or self.mask.shape != self.ids.shape:
            raise DataError(f"ids {self.ids.shape} and mask {self.mask.shape} must be equal 2-D shapes")
        if self.labels is not None:
            self.labels = np.asarray(self.labels, dtype=np.int64)

    def __len__(self):
        return self.ids.shape[0]


def _layer_names(i: int) -> list[str]:
    p = f"layers.{i}."
    names = []
    for proj in ("q", "k", "v", "o"):
        names += [p + f"attn.{proj}.weight", p + f"attn.{proj}.bias"]
    names += [p + "ffn.w1.weight", p + "ffn.w1.bias", p + "ffn.w2.weight", p + "ffn.w2.bias"]
    names += [p + "ln1.gamma", p + "ln1.beta", p + "ln2.gamma", p + "ln2.beta"]
    return names


def param_shapes(config: ModelConfig) -> dict[str, tuple[int, ...]]:
    """Ordered parameter names and shapes. Linear weights are stored [in, out]."""
    d, f = config.model_dim, config.ffn_dim
    shapes = {
        "embed.token": (config.vocab_size, d),
        "embed.position": (config.max_positions, d),
    }
    for i in range(config.layers):
        for name in _layer_names(i):
            if name.endswith("ffn.w1.weight"):
                shapes[name] = (d, f)
            elif name.endswith("ffn.w1.bias"):
                shapes[name] = (f,)
            elif name.endswith("ffn.w2.weight"):
                shapes[name] = (f, d)
            elif name.endswith(".weight"):
                shapes[name] = (d, d)
            else:
                shapes[name] = (d,)
    shapes["head.weight"] = (d, config.num_labels)
    shapes["head.bias"] = (config.num_labels,)
    return shapes


def param_group(name: str) -> str:
    if name.startswith("embed."):
        return "embeddings"
    if name.startswith("head."):
        return "head"
    if ".attn." in name:
        return "attention"
    if ".ffn." in name:
        return "ffn"
    return "layernorm"


def truncated_normal(rng: np.random.Generator, shape, std: float, bound: float = 2.0) -> np.ndarray:
    """Normal(0, std) samples redrawn until they fall inside +-bound standard deviations."""
    out = rng.standard_normal(shape)
    bad = np.abs(out) > bound
    while bad.any():
        out[bad] = rng.standard_normal(int(bad.sum()))
        bad = np.abs(out) > bound
    return out * std


class EncoderModel:
    """Parameters of one encoder plus an optional attached adapter."""

    def __init__(self, config: ModelConfig, params: dict[str, Tensor]):
        self.config = config
        self.params = params
        self.adapter = None

    def parameters(self) -> dict[str, Tensor]:
        """Base parameters followed by adapter parameters (if any)."""
        out = dict(self.params)
        if self.adapter is not None:
            out.update(self.adapter.params)
        return out

    def base_names(self) -> list[str]:
        return list(self.params)

    @property
    def hidden_dropout(self) -> float:
        override = getattr(self.adapter, "hidden_dropout", None)
        return self.config.dropout if override is None else override

    def clone(self) -> "EncoderModel":
        """Deep copy, adapter included; the copy shares no arrays with self."""
        twin = EncoderModel(
            self.config,
            {k: Tensor(t.data, t.requires_grad, name=k) for k, t in self.params.items()},
        )
        if self.adapter is not None:
            twin.adapter = self.adapter.clone()
        return twin

    def __getitem__(self, name):
        return self.parameters()[name]


def build_model(config: ModelConfig, seed: int = 0) -> EncoderModel:
    config.validate()
    rng = np.random.default_rng(seed)
    params = {}
    for name, shape in param_shapes(config).items():
        if name.endswith(".gamma"):
            data = np.ones(shape)
        elif name.endswith(".bias") or name.endswith(".beta"):
            data = np.zeros(shape)
        else:
            data = truncated_normal(rng, shape, config.init_std)
        params[name] = Tensor(data, requires_grad=True, name=name)
    return EncoderModel(config, params)


def _linear(tape, model, prefix, x, site, layer, rng):
    out = tape.add(tape.matmul(x, model.params[prefix + ".weight"]), model.params[prefix + ".bias"])
    if model.adapter is not None:
        out = model.adapter.after_linear(tape, layer, site, x, out, rng)
    return out


def _attention_mask(mask: np.ndarray, heads: int) -> Tensor:
    b, s = mask.shape
    add = np.where(mask, 0.0, MASK_VALUE)[:, None, None, :]
    return Tensor(np.broadcast_to(add, (b, heads, s, s)).copy())


def _split_heads(tape, x, b, s, h, dh):
    return tape.transpose(tape.reshape(x, (b, s, h, dh)), (0, 2, 1, 3))


def _block(tape, model, i, x, attn_mask, rng):
    cfg = model.config
    b, s, d = x.shape
    h, dh = cfg.heads, cfg.head_dim
    p = f"layers.{i}."
    pdrop = model.hidden_dropout

    a = tape.layernorm(x, model.params[p + "ln1.gamma"], model.params[p + "ln1.beta"], cfg.layer_norm_eps)
    q = _linear(tape, model, p + "attn.q", a, "query", i, rng)
    k = _linear(tape, model, p + "attn.k", a, "key", i, rng)
    v = _linear(tape, model, p + "attn.v", a, "value", i, rng)
    qh = _split_heads(tape, q, b, s, h, dh)
    kt = tape.transpose(_split_heads(tape, k, b, s, h, dh), (0, 1, 3, 2))
    vh = _split_heads(tape, v, b, s, h, dh)
    scores = tape.add(tape.scale(tape.matmul(qh, kt), 1.0 / math.sqrt(dh)), attn_mask)
    ctx = tape.matmul(tape.softmax(scores), vh)
    ctx = tape.reshape(tape.transpose(ctx, (0, 2, 1, 3)), (b, s, d))
    attn_out = _linear(tape, model, p + "attn.o", ctx, "output", i, rng)
    x = tape.add(x, tape.dropout(attn_out, pdrop, rng))

    m = tape.layernorm(x, model.params[p + "ln2.gamma"], model.params[p + "ln2.beta"], cfg.layer_norm_eps)
    hid = tape.gelu(_linear(tape, model, p + "ffn.w1", m, "ffn_in", i, rng))
    if model.adapter is not None:
        hid = model.adapter.after_activation(tape, i, hid, rng)
    ffn_out = _linear(tape, model, p + "ffn.w2", hid, "ffn_out", i, rng)
    return tape.add(x, tape.dropout(ffn_out, pdrop, rng))


def check_batch(model: EncoderModel, batch: TaskBatch):
    cfg = model.config
    if batch.ids.size and (batch.ids.min() < 0 or batch.ids.max() >= cfg.vocab_size):
        raise DataError(f"token id out of range [0, {cfg.vocab_size}): max id {batch.ids.max()}")
    if batch.ids.shape[1] > cfg.max_positions:
        raise DataError(f"sequence length {batch.ids.shape[1]} exceeds max_positions {cfg.max_positions}")


def encode(model: EncoderModel, batch: TaskBatch, tape: Tape | None = None, rng=None) -> Tensor:
    """Hidden states [batch, seq, d]. Dropout is active only when ``rng`` is given."""
    check_batch(model, batch)
    tape = tape if tape is not None else Tape(record=False)
    b, s = batch.ids.shape
    x = tape.add(
        tape.embedding(model.params["embed.token"], batch.ids),
        tape.embedding(model.params["embed.position"], np.broadcast_to(np.arange(s), (b, s))),
    )
    x = tape.dropout(x, model.hidden_dropout, rng)
    if model.config.layers:
        attn_mask = _attention_mask(batch.mask, model.config.heads)
        for i in range(model.config.layers):
            x = _block(tape, model, i, x, attn_mask, rng)
    return x


def _pool(tape, hidden, mask):
    # masked mean over real tokens, expressed as a batched matmul
    w = mask / np.maximum(mask.sum(axis=1, keepdims=True), 1)
    b, s, d = hidden.shape
    pooled = tape.matmul(Tensor(w[:, None, :]), hidden)
    return tape.reshape(pooled, (b, d))


def predict(model: EncoderModel, batch: TaskBatch, tape: Tape | None = None, rng=None) -> Tensor:
    """Logits: [batch, num_labels] for sequence heads, [batch, seq, num_labels] for token heads."""
    tape = tape if tape is not None else Tape(record=False)
    hidden = encode(model, batch, tape, rng)
    if model.config.head_kind == "sequence":
        hidden = _pool(tape, hidden, batch.mask)
    return tape.add(tape.matmul(hidden, model.params["head.weight"]), model.params["head.bias"])


def loss(model: EncoderModel, batch: TaskBatch, tape: Tape, rng=None) -> Tensor:
    """Mean cross-entropy over non-ignored positions."""
    if batch.labels is None:
        raise DataError("batch has no labels")
    expected = (len(batch),) if model.config.head_kind == "sequence" else batch.ids.shape
    if batch.labels.shape != expected:
        raise DataError(
            f"{model.config.head_kind} head expects labels of shape {expected}, got {batch.labels.shape}"
        )
    labels = batch.labels
    if model.config.head_kind == "token":
        labels = np.where(batch.mask, labels, IGNORE_INDEX)
    logits = predict(model, batch, tape, rng)
    return tape.cross_entropy(logits, labels, IGNORE_INDEX)


def count_params(model_or_config) -> dict:
    """Parameter totals with a per-group breakdown.

    Given a config this evaluates the closed form; given a model it enumerates
    the base tensors (adapters are not base parameters).
    """
    if isinstance(model_or_config, EncoderModel):
        by_group = dict.fromkeys(("embeddings", "attention", "ffn", "layernorm", "head"), 0)
        for name, t in model_or_config.params.items():
            by_group[param_group(name)] += t.size
        return {"total": sum(by_group.values()), "by_group": by_group}
    c = model_or_config
    d, f, L = c.model_dim, c.ffn_dim, c.layers
    by_group = {
        "embeddings": c.vocab_size * d + c.max_positions * d,
        "attention": L * 4 * (d * d + d),
        "ffn": L * (d * f + f + f * d + d),
        "layernorm": L * 4 * d,
        "head": d * c.num_labels + c.num_labels,
    }
    return {"total": sum(by_group.values()), "by_group": by_group}


def with_overrides(config: ModelConfig, **kw) -> ModelConfig:
    return replace(config, **kw)
