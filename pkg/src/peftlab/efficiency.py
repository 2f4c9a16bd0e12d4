"""Parameter, memory, FLOPs and cost accounting plus the holistic efficiency index."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from .errors import CohortError, ConfigError
from .model import ModelConfig

BYTES_PER_PARAM = {"fp32": 4, "bf16": 2, "fp16": 2}
GIB = 2**30

# (model, method, train hours, inference hours, total cost GBP)
COST_TABLE = (
    ("Llama-2-7b", "LORA", 51.07, 4.06, 112.22),
    ("BioBERT", "Full", 2.51, 0.22, 5.56),
    ("BioBERT", "LORA", 2.16, 0.22, 4.84),
    ("BioMobileBERT", "Full", 1.57, 0.14, 3.48),
    ("BioMobileBERT", "LORA", 1.35, 0.14, 3.03),
    ("BioDistilBERT", "Full", 1.35, 0.12, 2.99),
    ("BioDistilBERT", "LORA", 1.21, 0.13, 2.73),
    ("TinyBioBERT", "Full", 0.53, 0.06, 1.20),
    ("TinyBioBERT", "LORA", 0.46, 0.06, 1.06),
)

# (model, params in millions, precision, VRAM GB as published)
MEMORY_TABLE = (
    ("Tiny-BERT", 13.87, "fp32", 0.052),
    ("Mobile-BERT", 24.58, "fp32", 0.092),
    ("Distil-BERT", 65.78, "fp32", 0.245),
    ("BERT", 108.31, "fp32", 0.403),
    ("Llama2-7b", 6607.34, "fp32", 24.6),
    ("Llama2-7b (bfloat16)", 6607.34, "bf16", 12.37),
)


def bytes_per_param(precision: str) -> int:
    try:
        return BYTES_PER_PARAM[precision]
    except KeyError:
        raise ConfigError(f"unknown precision {precision!r}; use one of {sorted(BYTES_PER_PARAM)}") from None


def estimate_vram(params: float, precision: str = "fp32") -> float:
    """Weights-only memory in GiB (no activations, no optimizer state)."""
    if params < 0:
        raise ConfigError(f"params must be >= 0, got {params}")
    return params * bytes_per_param(precision) / GIB


def estimate_flops(config: ModelConfig, num_tokens: int = 10) -> float:
    """Analytic forward FLOPs for ``num_tokens`` tokens, 1 MAC = 2 FLOPs.

    Per token and layer: 4 d^2 MACs for the Q/K/V/O projections, 2 n d for
    attention scores and mixing, 2 d d_ff for the FFN. The head adds d * C
    MACs once (sequence) or per token (token). Embedding lookups, softmax,
    layernorm and biases are not counted.
    """
    if num_tokens < 1:
        raise ConfigError(f"num_tokens must be >= 1, got {num_tokens}")
    d, f, n = config.model_dim, config.ffn_dim, num_tokens
    per_token_layer = 4 * d * d + 2 * n * d + 2 * d * f
    head_macs = d * config.num_labels * (n if config.head_kind == "token" else 1)
    return float(2 * (per_token_layer * n * config.layers + head_macs))


@dataclass(frozen=True)
class RunStats:
    label: str
    T: float
    P: float
    S: float

    def __post_init__(self):
        if min(self.T, self.P, self.S) < 0:
            raise CohortError(f"{self.label}: T, P, S must be >= 0")
        if self.S < self.P:
            raise CohortError(f"{self.label}: total params S={self.S} below trainable P={self.P}")


def _minmax(x: np.ndarray) -> np.ndarray:
    span = x.max() - x.min()
    return np.zeros_like(x) if span == 0 else (x - x.min()) / span


def efficiency_components(cohort) -> dict[str, dict]:
    """Per-run normalized axes, raw mean, and final efficiency (1 = most efficient).

    Each of T, P, S is min-max scaled across the cohort (an axis with no
    spread contributes 0), the three are averaged, and the average is
    min-max scaled again and inverted.
    """
    cohort = list(cohort)
    if len(cohort) < 2:
        raise CohortError(f"efficiency needs at least 2 runs, got {len(cohort)}")
    labels = [r.label for r in cohort]
    if len(set(labels)) != len(labels):
        raise CohortError("run labels must be unique within a cohort")
    axes = {k: _minmax(np.array([getattr(r, k) for r in cohort], dtype=float)) for k in "TPS"}
    raw = (axes["T"] + axes["P"] + axes["S"]) / 3.0
    if raw.max() == raw.min():
        raise CohortError("indistinguishable cohort: every run has the same raw efficiency score")
    final = 1.0 - _minmax(raw)
    return {
        lab: {"T_norm": axes["T"][i], "P_norm": axes["P"][i], "S_norm": axes["S"][i], "raw": raw[i], "efficiency": final[i]}
        for i, lab in enumerate(labels)
    }


def efficiency_index(cohort) -> dict[str, float]:
    return {k: float(v["efficiency"]) for k, v in efficiency_components(cohort).items()}


@dataclass(frozen=True)
class CostRates:
    train_rate: float
    infer_rate: float
    currency: str = "GBP"
    name: str = "custom"

    def __post_init__(self):
        if self.train_rate < 0 or self.infer_rate < 0:
            raise ConfigError("rates must be >= 0")

    def to_dict(self):
        return asdict(self)

    def save(self, path):
        Path(path).write_text(json.dumps(self.to_dict(), indent=2) + "\n")

    @classmethod
    def load(cls, path):
        return cls(**json.loads(Path(path).read_text()))


def estimate_cost(train_hours: float, infer_hours: float, rates: CostRates) -> float:
    if train_hours < 0 or infer_hours < 0:
        raise ConfigError("hours must be >= 0")
    return train_hours * rates.train_rate + infer_hours * rates.infer_rate


def fit_rates(rows=COST_TABLE, currency: str = "GBP", name: str = "fitted") -> CostRates:
    """Least-squares (train_rate, infer_rate) from (train_h, infer_h, cost) rows.

    Solves the 2x2 normal equations directly.
    """
    t = np.array([r[-3] for r in rows], dtype=float)
    i = np.array([r[-2] for r in rows], dtype=float)
    c = np.array([r[-1] for r in rows], dtype=float)
    a11, a12, a22 = t @ t, t @ i, i @ i
    b1, b2 = t @ c, i @ c
    det = a11 * a22 - a12 * a12
    if det == 0:
        raise ConfigError("cost rows are degenerate; rates are not identifiable")
    return CostRates((a22 * b1 - a12 * b2) / det, (a11 * b2 - a12 * b1) / det, currency, name)


# Hourly rates recovered from the published cost table (train on g5.16xlarge,
# inference on g4dn.16xlarge); the source never prints them.
DEFAULT_RATES = fit_rates(name="aws-ec2-gbp-fitted")


def rate_profile(name_or_path: str | None) -> CostRates:
    if name_or_path in (None, "", DEFAULT_RATES.name, "default"):
        return DEFAULT_RATES
    path = Path(name_or_path)
    if not path.exists():
        raise ConfigError(f"unknown rate profile {name_or_path!r} (not a file and not {DEFAULT_RATES.name!r})")
    return CostRates.load(path)
