"""LoRA and IA3 adapters: injection, freezing, accounting, and merging."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, StateError
from .model import EncoderModel, ModelConfig, truncated_normal
from .tensor import Tensor

LORA_TARGETS = ("query", "key", "value", "ffn")

# adapter site -> base weight prefix (within a layer)
_SITE_PREFIX = {
    "query": "attn.q",
    "key": "attn.k",
    "value": "attn.v",
    "ffn_in": "ffn.w1",
    "ffn_out": "ffn.w2",
}


@dataclass(frozen=True)
class LoraConfig:
    rank: int = 8
    alpha: float = 8.0
    dropout: float = 0.1
    target_modules: tuple[str, ...] = ("key", "value")
    layers: tuple[int, ...] | None = None
    init_std: float = 0.02

    def __post_init__(self):
        object.__setattr__(self, "target_modules", tuple(self.target_modules))
        if self.layers is not None:
            object.__setattr__(self, "layers", tuple(self.layers))
        if self.rank < 1:
            raise ConfigError(f"LoRA rank must be >= 1, got {self.rank}")
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigError(f"LoRA dropout must be in [0, 1), got {self.dropout}")
        bad = set(self.target_modules) - set(LORA_TARGETS)
        if bad or not self.target_modules:
            raise ConfigError(f"target_modules must be a non-empty subset of {LORA_TARGETS}, got {self.target_modules}")

    @property
    def scaling(self) -> float:
        return self.alpha / self.rank

    def sites(self) -> list[str]:
        out = []
        for t in LORA_TARGETS:
            if t in self.target_modules:
                out += ["ffn_in", "ffn_out"] if t == "ffn" else [t]
        return out

    def to_dict(self):
        return {
            "rank": self.rank,
            "alpha": self.alpha,
            "dropout": self.dropout,
            "target_modules": list(self.target_modules),
            "layers": None if self.layers is None else list(self.layers),
            "init_std": self.init_std,
        }


@dataclass(frozen=True)
class Ia3Config:
    dropout: float = 0.1
    layers: tuple[int, ...] | None = None

    def __post_init__(self):
        if self.layers is not None:
            object.__setattr__(self, "layers", tuple(self.layers))
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigError(f"IA3 dropout must be in [0, 1), got {self.dropout}")

    def to_dict(self):
        return {"dropout": self.dropout, "layers": None if self.layers is None else list(self.layers)}


def _layers(config: ModelConfig, layers):
    if layers is None:
        return list(range(config.layers))
    bad = [i for i in layers if not 0 <= i < config.layers]
    if bad:
        raise ConfigError(f"layers {bad} do not exist in a {config.layers}-layer model")
    return sorted(set(layers))


def _site_dims(config: ModelConfig, site: str) -> tuple[int, int]:
    """(in, out) of the base weight behind an adapter site."""
    d, f = config.model_dim, config.ffn_dim
    return {"ffn_in": (d, f), "ffn_out": (f, d)}.get(site, (d, d))


def lora_shapes(config: ModelConfig, cfg: LoraConfig) -> dict[str, tuple[int, int]]:
    """Names and shapes of the A (r x in) and B (out x r) matrices LoRA would add."""
    shapes = {}
    for i in _layers(config, cfg.layers):
        for site in cfg.sites():
            k, d = _site_dims(config, site)
            if cfg.rank > min(d, k):
                raise ConfigError(f"LoRA rank {cfg.rank} exceeds min(d, k) = {min(d, k)} for {site}")
            base = f"layers.{i}.{_SITE_PREFIX[site]}"
            shapes[base + ".lora_A"] = (cfg.rank, k)
            shapes[base + ".lora_B"] = (d, cfg.rank)
    return shapes


def ia3_shapes(config: ModelConfig, cfg: Ia3Config) -> dict[str, tuple[int]]:
    shapes = {}
    for i in _layers(config, cfg.layers):
        shapes[f"layers.{i}.attn.k.ia3"] = (config.model_dim,)
        shapes[f"layers.{i}.attn.v.ia3"] = (config.model_dim,)
        shapes[f"layers.{i}.ffn.act.ia3"] = (config.ffn_dim,)
    return shapes


def lora_param_count(config: ModelConfig, cfg: LoraConfig) -> int:
    """Closed form: r * (d + k) per targeted matrix."""
    per_layer = 0
    for site in cfg.sites():
        k, d = _site_dims(config, site)
        per_layer += cfg.rank * (d + k)
    return per_layer * len(_layers(config, cfg.layers))


def ia3_param_count(config: ModelConfig, cfg: Ia3Config) -> int:
    """Closed form: d_k + d_v + d_ff per adapted layer."""
    return len(_layers(config, cfg.layers)) * (2 * config.model_dim + config.ffn_dim)


@dataclass
class LoraState:
    config: LoraConfig
    params: dict[str, Tensor]
    merged: bool = False
    kind: str = field(default="lora", init=False)
    hidden_dropout = None

    def _pair(self, layer, site):
        base = f"layers.{layer}.{_SITE_PREFIX[site]}"
        a = self.params.get(base + ".lora_A")
        return (a, self.params[base + ".lora_B"]) if a is not None else None

    def after_linear(self, tape, layer, site, x, out, rng):
        if site not in _SITE_PREFIX:
            return out
        pair = self._pair(layer, site)
        if pair is None:
            return out
        a, b = pair
        xin = tape.dropout(x, self.config.dropout, rng)
        delta = tape.matmul(tape.matmul(xin, tape.transpose(a)), tape.transpose(b))
        return tape.add(out, tape.scale(delta, self.config.scaling))

    def after_activation(self, tape, layer, hid, rng):
        return hid

    def clone(self):
        return LoraState(self.config, {k: Tensor(t.data, t.requires_grad, k) for k, t in self.params.items()}, self.merged)


@dataclass
class Ia3State:
    config: Ia3Config
    params: dict[str, Tensor]
    merged: bool = False
    kind: str = field(default="ia3", init=False)

    @property
    def hidden_dropout(self):
        return self.config.dropout

    def after_linear(self, tape, layer, site, x, out, rng):
        name = {"key": "attn.k", "value": "attn.v"}.get(site)
        vec = self.params.get(f"layers.{layer}.{name}.ia3") if name else None
        return out if vec is None else tape.mul(out, vec)

    def after_activation(self, tape, layer, hid, rng):
        vec = self.params.get(f"layers.{layer}.ffn.act.ia3")
        return hid if vec is None else tape.mul(hid, vec)

    def clone(self):
        return Ia3State(self.config, {k: Tensor(t.data, t.requires_grad, k) for k, t in self.params.items()}, self.merged)


def _freeze_base(model: EncoderModel):
    # the task head keeps training alongside the adapter
    for name, t in model.params.items():
        t.requires_grad = name.startswith("head.")


def inject_lora(model: EncoderModel, cfg: LoraConfig | None = None, seed: int = 0):
    """Attach LoRA adapters in place and freeze the base. Returns (model, state)."""
    cfg = cfg or LoraConfig()
    if model.adapter is not None:
        raise StateError(f"model already carries a {model.adapter.kind} adapter")
    rng = np.random.default_rng(seed)
    params = {}
    for name, shape in lora_shapes(model.config, cfg).items():
        if name.endswith("lora_A"):
            data = truncated_normal(rng, shape, cfg.init_std)
        else:
            data = np.zeros(shape)
        params[name] = Tensor(data, requires_grad=True, name=name)
    state = LoraState(cfg, params)
    _freeze_base(model)
    model.adapter = state
    return model, state


def inject_ia3(model: EncoderModel, cfg: Ia3Config | None = None):
    """Attach IA3 scaling vectors (all ones) in place and freeze the base."""
    cfg = cfg or Ia3Config()
    if model.adapter is not None:
        raise StateError(f"model already carries a {model.adapter.kind} adapter")
    params = {
        name: Tensor(np.ones(shape), requires_grad=True, name=name)
        for name, shape in ia3_shapes(model.config, cfg).items()
    }
    state = Ia3State(cfg, params)
    _freeze_base(model)
    model.adapter = state
    return model, state


def merge(model: EncoderModel) -> EncoderModel:
    """Fold the attached adapter into the base weights and detach it.

    LoRA adds ``scaling * (B @ A)`` to each targeted weight. IA3 scales the
    output columns of W_k, W_v (and their biases) and the input rows of W_2.
    The merged model is a plain model with every parameter trainable.
    """
    state = model.adapter
    if state is None or state.merged:
        raise StateError("no unmerged adapter attached (already merged?)")
    p = model.params
    if state.kind == "lora":
        for name, a in state.params.items():
            if not name.endswith(".lora_A"):
                continue
            base = name[: -len(".lora_A")]
            b = state.params[base + ".lora_B"]
            w = p[base + ".weight"]
            # stored weights are [in, out] = (B A)^T shaped
            w.data = w.data + state.config.scaling * (b.data @ a.data).T
    else:
        for name, vec in state.params.items():
            layer = name.split(".")[1]
            pre = f"layers.{layer}."
            if ".attn.k." in name or ".attn.v." in name:
                proj = pre + ("attn.k" if ".attn.k." in name else "attn.v")
                p[proj + ".weight"].data = p[proj + ".weight"].data * vec.data
                p[proj + ".bias"].data = p[proj + ".bias"].data * vec.data
            else:
                w2 = p[pre + "ffn.w2.weight"]
                w2.data = vec.data[:, None] * w2.data
    state.merged = True
    model.adapter = None
    for t in p.values():
        t.requires_grad = True
    return model


def set_full_finetune(model: EncoderModel) -> EncoderModel:
    if model.adapter is not None:
        raise StateError("full fine-tuning needs a model without adapters")
    for t in model.params.values():
        t.requires_grad = True
    return model


def count_trainable(model: EncoderModel) -> dict:
    trainable = frozen = 0
    for t in model.parameters().values():
        if t.requires_grad:
            trainable += t.size
        else:
            frozen += t.size
    return {"trainable": trainable, "frozen": frozen, "total": trainable + frozen}


def snapshot(model: EncoderModel, names=None) -> dict[str, bytes]:
    """Byte images of the frozen base tensors (or of ``names``), for assert_frozen."""
    if names is None:
        names = [n for n, t in model.params.items() if not t.requires_grad]
    return {n: model.params[n].data.tobytes() for n in names}


@dataclass
class FrozenReport:
    checked: int
    violations: list[str]

    @property
    def ok(self) -> bool:
        return not self.violations


def assert_frozen(model: EncoderModel, snap: dict[str, bytes]) -> FrozenReport:
    """Compare tensors bitwise against their snapshot; list the ones that moved."""
    changed = [n for n, raw in snap.items() if model.params[n].data.tobytes() != raw]
    return FrozenReport(len(snap), changed)


def adapter_config_from_dict(kind: str, d: dict):
    if kind == "lora":
        return LoraConfig(**d)
    if kind == "ia3":
        return Ia3Config(**d)
    raise ConfigError(f"unknown adapter kind {kind!r}")
