"""Training loop, evaluation, budget sweeps and the LoRA rank sweep."""

from __future__ import annotations

import hashlib
import json
import math
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from . import model as M
from .data import Dataset, FewShotSpec, bio_spans, encode_dataset, iter_batches, sample_few_shot
from .errors import BudgetError, ConfigError, DataError, NumericError, StateError
from .metrics import binary_auroc, f1_scores, macro_auroc, span_f1
from .peft import (
    FrozenReport,
    Ia3Config,
    LoraConfig,
    assert_frozen,
    count_trainable,
    inject_ia3,
    inject_lora,
    set_full_finetune,
    snapshot,
)
from .tensor import Tape

MODES = ("full", "lora", "ia3")
BUDGET_KINDS = ("time_seconds", "samples_per_class", "epochs")
METRICS = ("f1_micro", "f1_macro", "auroc_macro", "accuracy")


@dataclass(frozen=True)
class TrainConfig:
    mode: str = "full"
    learning_rate: float = 3e-4
    batch_size: int = 32
    max_epochs: int = 5
    eval_every: int = 50
    seed: int = 0
    metric: str = "f1_macro"
    betas: tuple[float, float] = (0.9, 0.999)
    adam_eps: float = 1e-8

    def __post_init__(self):
        if self.mode not in MODES:
            raise ConfigError(f"mode must be one of {MODES}, got {self.mode!r}")
        if not self.learning_rate > 0:
            raise ConfigError(f"learning_rate must be > 0, got {self.learning_rate}")
        if self.batch_size < 1 or self.max_epochs < 1 or self.eval_every < 1:
            raise ConfigError("batch_size, max_epochs and eval_every must be >= 1")


@dataclass(frozen=True)
class Budget:
    kind: str
    value: float

    def __post_init__(self):
        if self.kind not in BUDGET_KINDS:
            raise BudgetError(f"budget kind must be one of {BUDGET_KINDS}, got {self.kind!r}")
        if not self.value > 0:
            raise BudgetError(f"budget value must be > 0, got {self.value}")
        if self.kind != "time_seconds" and int(self.value) != self.value:
            raise BudgetError(f"{self.kind} budget must be a whole number, got {self.value}")


@dataclass
class Checkpoint:
    step: int
    elapsed_seconds: float
    train_loss: float | None
    metrics: dict


@dataclass
class TrainResult:
    mode: str
    budget: Budget
    metric: str
    checkpoints: list[Checkpoint]
    losses: list[float]
    trainable_params: int
    total_params: int
    train_size: int
    steps: int
    stop_elapsed: float
    max_step_seconds: float
    stopped_by: str
    frozen: FrozenReport | None = None

    @property
    def peak(self) -> Checkpoint:
        best = None
        for c in self.checkpoints:
            v = c.metrics.get(self.metric, float("nan"))
            v = -math.inf if v is None or np.isnan(v) else v
            if best is None or v > best[0]:
                best = (v, c)
        return best[1]

    @property
    def time_to_peak(self) -> float:
        return self.peak.elapsed_seconds

    def to_dict(self) -> dict:
        d = asdict(self)
        d["budget"] = asdict(self.budget)
        d["peak_step"] = self.peak.step
        d["time_to_peak"] = self.time_to_peak
        d["frozen"] = None if self.frozen is None else asdict(self.frozen)
        return d


class Adam:
    """Adam with constant learning rate; only tensors with requires_grad are tracked."""

    def __init__(self, params: dict, lr: float, betas=(0.9, 0.999), eps=1e-8):
        self.params = {n: t for n, t in params.items() if t.requires_grad}
        self.lr, (self.b1, self.b2), self.eps = lr, betas, eps
        self.m = {n: np.zeros_like(t.data) for n, t in self.params.items()}
        self.v = {n: np.zeros_like(t.data) for n, t in self.params.items()}
        self.t = 0

    def step(self, grads: dict[int, np.ndarray]):
        self.t += 1
        c1 = 1.0 - self.b1**self.t
        c2 = 1.0 - self.b2**self.t
        for n, p in self.params.items():
            g = grads.get(p.uid)
            if g is None:
                continue
            m = self.m[n]
            v = self.v[n]
            m *= self.b1
            m += (1.0 - self.b1) * g
            v *= self.b2
            v += (1.0 - self.b2) * g * g
            p.data -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


def prepare_model(config: M.ModelConfig, mode: str, seed: int = 0, lora: LoraConfig | None = None, ia3: Ia3Config | None = None):
    """Fresh model for ``mode``: all-trainable, or base frozen under an adapter."""
    model = M.build_model(config, seed)
    if mode == "full":
        set_full_finetune(model)
    elif mode == "lora":
        inject_lora(model, lora or LoraConfig(), seed=seed + 1)
    elif mode == "ia3":
        inject_ia3(model, ia3 or Ia3Config())
    else:
        raise ConfigError(f"mode must be one of {MODES}, got {mode!r}")
    return model


@dataclass(frozen=True)
class ModelFactory:
    """Picklable ``seed -> model`` recipe used by sweeps."""

    config: M.ModelConfig
    mode: str = "full"
    lora: LoraConfig = field(default_factory=LoraConfig)
    ia3: Ia3Config = field(default_factory=Ia3Config)

    def __call__(self, seed: int):
        return prepare_model(self.config, self.mode, seed, self.lora, self.ia3)


# -- evaluation ------------------------------------------------------------------


def predict_proba(model, enc, batch_size=128):
    """Softmax scores for every example (sequence) or every real token (token)."""
    probs, gold = [], []
    for start in range(0, len(enc), batch_size):
        batch = enc.batch(np.arange(start, min(start + batch_size, len(enc))))
        logits = M.predict(model, batch).data
        z = logits - logits.max(axis=-1, keepdims=True)
        p = np.exp(z)
        p /= p.sum(axis=-1, keepdims=True)
        if logits.ndim == 2:
            probs.append(p)
            gold.append(batch.labels)
        else:
            probs.append(p)
            gold.append(np.where(batch.mask, batch.labels, M.IGNORE_INDEX))
    return probs, gold


def evaluate(model, dataset: Dataset, metrics=METRICS, batch_size: int = 128, enc=None) -> dict:
    """Metrics of ``model`` on ``dataset`` with dropout off.

    Sequence tasks: F1 from confusion counts, macro AUROC over one-vs-rest
    softmax scores, plus ``auroc_binary`` (positive class = 1) for two-label
    tasks. Token tasks: token-level scores over real tokens with the O tag
    excluded from F1, plus exact-match ``span_f1``. Classes without positive
    gold examples are skipped in AUROC and listed under ``auroc_skipped``.
    """
    if len(dataset) == 0:
        raise DataError("cannot evaluate on an empty dataset")
    enc = enc if enc is not None else encode_dataset(dataset)
    probs, gold = predict_proba(model, enc, batch_size)
    C = dataset.num_labels
    out = {}
    if dataset.kind == "sequence":
        P = np.concatenate(probs)
        y = np.concatenate(gold)
        pred = P.argmax(axis=1)
        out["f1_micro"], out["f1_macro"] = f1_scores(y, pred, C)
        out["auroc_macro"], skipped = macro_auroc(y, P)
        if C == 2:
            out["auroc_binary"] = binary_auroc(y == 1, P[:, 1])
    else:
        flat_p, flat_y, pred_spans, gold_spans = [], [], set(), set()
        row = 0
        for P, Y in zip(probs, gold):
            for b in range(P.shape[0]):
                keep = Y[b] != M.IGNORE_INDEX
                flat_p.append(P[b][keep])
                flat_y.append(Y[b][keep])
                names_g = [dataset.label_names[j] for j in Y[b][keep]]
                names_p = [dataset.label_names[j] for j in P[b][keep].argmax(axis=1)]
                gold_spans |= {(row,) + s for s in bio_spans(names_g)}
                pred_spans |= {(row,) + s for s in bio_spans(names_p)}
                row += 1
        P = np.concatenate(flat_p)
        y = np.concatenate(flat_y)
        pred = P.argmax(axis=1)
        o = dataset.label_names.index("O")
        out["f1_micro"], out["f1_macro"] = f1_scores(y, pred, C, exclude=(o,))
        out["auroc_macro"], skipped = macro_auroc(y, P)
        out["span_f1"] = span_f1(gold_spans, pred_spans)
    out["accuracy"] = float((pred == y).mean())
    out["auroc_skipped"] = skipped
    wanted = set(metrics) | {"auroc_binary", "span_f1", "auroc_skipped"}
    return {k: v for k, v in out.items() if k in wanted}


# -- training --------------------------------------------------------------------


def _check_mode(model, cfg: TrainConfig):
    kind = None if model.adapter is None else model.adapter.kind
    if (cfg.mode == "full") != (kind is None) or (kind is not None and kind != cfg.mode):
        raise StateError(f"train config mode {cfg.mode!r} does not match model adapter {kind!r}")


def train(model, dataset: Dataset, cfg: TrainConfig, budget: Budget, eval_dataset: Dataset | None = None, frozen_snapshot=None) -> TrainResult:
    """Train in place until the budget or ``max_epochs`` runs out.

    Evaluation happens at step 0, every ``eval_every`` steps and once at the
    stop step. Elapsed time counts training steps only (evaluation is
    excluded). A step whose gradient pass ends past a time budget is not
    applied, so the clock overshoots the budget by at most one step.
    """
    _check_mode(model, cfg)
    if len(dataset) == 0:
        raise DataError("training dataset is empty")
    if model.config.head_kind != dataset.kind:
        raise ConfigError(f"{model.config.head_kind} head cannot train on a {dataset.kind} task")
    eval_dataset = eval_dataset if eval_dataset is not None else dataset
    ss = np.random.SeedSequence(cfg.seed)
    shuffle_rng, dropout_rng = (np.random.default_rng(s) for s in ss.spawn(2))

    if budget.kind == "samples_per_class":
        dataset = sample_few_shot(dataset, FewShotSpec(int(budget.value), cfg.seed))
    epochs = int(budget.value) if budget.kind == "epochs" else cfg.max_epochs
    time_limit = budget.value if budget.kind == "time_seconds" else math.inf

    width = max(dataset.max_len, eval_dataset.max_len)
    enc = encode_dataset(dataset, width)
    eval_enc = encode_dataset(eval_dataset, width)
    snap = frozen_snapshot if frozen_snapshot is not None else snapshot(model)
    counts = count_trainable(model)
    opt = Adam(model.parameters(), cfg.learning_rate, cfg.betas, cfg.adam_eps)

    checkpoints = [Checkpoint(0, 0.0, None, evaluate(model, eval_dataset, enc=eval_enc))]
    losses: list[float] = []
    step, elapsed, max_step = 0, 0.0, 0.0
    since_eval: list[float] = []
    stopped_by = "epochs"
    for _ in range(epochs):
        for batch in iter_batches(enc, cfg.batch_size, shuffle_rng):
            if elapsed >= time_limit:
                stopped_by = "time"
                break
            t0 = time.perf_counter()
            tape = Tape()
            loss = M.loss(model, batch, tape, dropout_rng)
            value = float(loss.data)
            if not np.isfinite(value):
                raise NumericError(f"loss became {value} at step {step + 1} (mode {cfg.mode}, lr {cfg.learning_rate})")
            grads = tape.backward(loss)
            if elapsed + time.perf_counter() - t0 > time_limit:
                # the step would end past the ceiling: spend the time, drop the update
                elapsed += time.perf_counter() - t0
                stopped_by = "time"
                break
            opt.step(grads)
            dt = time.perf_counter() - t0
            elapsed += dt
            max_step = max(max_step, dt)
            step += 1
            losses.append(value)
            since_eval.append(value)
            if step % cfg.eval_every == 0:
                checkpoints.append(Checkpoint(step, elapsed, float(np.mean(since_eval)), evaluate(model, eval_dataset, enc=eval_enc)))
                since_eval = []
        else:
            continue
        break
    if checkpoints[-1].step != step:
        checkpoints.append(Checkpoint(step, elapsed, float(np.mean(since_eval)), evaluate(model, eval_dataset, enc=eval_enc)))
    return TrainResult(
        mode=cfg.mode,
        budget=budget,
        metric=cfg.metric,
        checkpoints=checkpoints,
        losses=losses,
        trainable_params=counts["trainable"],
        total_params=counts["total"],
        train_size=len(dataset),
        steps=step,
        stop_elapsed=elapsed,
        max_step_seconds=max_step,
        stopped_by=stopped_by,
        frozen=assert_frozen(model, snap),
    )


# -- sweeps ----------------------------------------------------------------------


def result_row(res: TrainResult, **extra) -> dict:
    peak = res.peak
    row = dict(extra)
    row.update(
        budget_kind=res.budget.kind,
        budget=res.budget.value,
        mode=res.mode,
        T=res.time_to_peak,
        P=res.trainable_params,
        S=res.total_params,
        peak_step=peak.step,
        steps=res.steps,
        train_size=res.train_size,
        stop_elapsed=res.stop_elapsed,
        max_step_seconds=res.max_step_seconds,
        metric=res.metric,
        peak_metric=peak.metrics.get(res.metric),
    )
    for k, v in peak.metrics.items():
        if k != "auroc_skipped":
            row[k] = v
    return row


def _run_budget_cell(args):
    index, factory, dataset, eval_dataset, cfg, budget, seed = args
    model = factory(seed)
    res = train(model, dataset, replace(cfg, seed=seed), budget, eval_dataset)
    return index, res


def _map(fn, jobs, workers: int):
    if workers <= 1:
        return [fn(j) for j in jobs]
    with ProcessPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, jobs))


@dataclass
class SweepTable:
    rows: list[dict]
    results: list[TrainResult]

    def median_by_budget(self, column: str = "peak_metric") -> dict[float, float]:
        out = {}
        for b in sorted({r["budget"] for r in self.rows}):
            out[b] = float(np.median([r[column] for r in self.rows if r["budget"] == b]))
        return out


def run_budget_sweep(factory, dataset: Dataset, budgets, cfg: TrainConfig, eval_dataset=None, seeds=(0,), workers: int = 1) -> SweepTable:
    """One fresh model per (budget, seed) cell; all cells share the eval split.

    A cell's randomness depends only on its seed, so the table is the same
    for any ``workers`` value.
    """
    budgets = list(budgets)
    values = [b.value for b in budgets]
    if values != sorted(values):
        raise BudgetError(f"budgets must be sorted ascending, got {values}")
    jobs = []
    for bi, b in enumerate(budgets):
        for seed in seeds:
            jobs.append((len(jobs), factory, dataset, eval_dataset, cfg, b, seed))
    done = sorted(_map(_run_budget_cell, jobs, workers), key=lambda x: x[0])
    rows, results = [], []
    for (index, res), job in zip(done, jobs):
        rows.append(result_row(res, cell=index, seed=job[-1]))
        results.append(res)
    return SweepTable(rows, results)


DEFAULT_RANK_SPACE = {
    "dropout": [0.1, 0.3, 0.5],
    "alpha": [0.3, 0.5, 1.0],
    "learning_rate": ("loguniform", 1e-5, 1e-3),
}


def sample_trial(space: dict, rng: np.random.Generator) -> dict:
    out = {}
    for name in sorted(space):
        spec = space[name]
        if isinstance(spec, (tuple, list)) and spec and spec[0] == "loguniform":
            lo, hi = math.log(spec[1]), math.log(spec[2])
            out[name] = float(math.exp(rng.uniform(lo, hi)))
        elif isinstance(spec, (tuple, list)):
            out[name] = spec[int(rng.integers(len(spec)))]
        else:
            out[name] = spec
    return out


def _run_rank_cell(args):
    index, config, lora_base, params, dataset, eval_dataset, cfg, budget, rank = args
    lora = replace(lora_base, rank=rank, alpha=float(params.get("alpha", lora_base.alpha)), dropout=float(params.get("dropout", lora_base.dropout)))
    tcfg = replace(cfg, mode="lora", learning_rate=float(params.get("learning_rate", cfg.learning_rate)))
    model = prepare_model(config, "lora", cfg.seed, lora=lora)
    res = train(model, dataset, tcfg, budget, eval_dataset)
    return index, res


@dataclass
class RankSweep:
    ranks: list[int]
    trials: list[dict]
    scores: dict[int, list[float]]
    metric: str
    reference_rank: int = 8

    @property
    def best(self) -> dict[int, dict]:
        out = {}
        for r in self.ranks:
            s = self.scores[r]
            i = int(np.argmax(s))  # earliest trial wins ties
            out[r] = {"trial": i, "score": s[i], "params": self.trials[i]}
        return out

    @property
    def deltas(self) -> dict[int, float]:
        best = self.best
        ref = best[self.reference_rank]["score"]
        return {r: best[r]["score"] - ref for r in self.ranks}

    def best_config_hash(self) -> str:
        payload = json.dumps({str(r): v["params"] for r, v in self.best.items()}, sort_keys=True)
        return hashlib.sha256(payload.encode()).hexdigest()

    def rows(self) -> list[dict]:
        best, deltas = self.best, self.deltas
        return [
            {"rank": r, "best_trial": best[r]["trial"], "best_score": best[r]["score"], "delta": deltas[r], "metric": self.metric, **{f"best_{k}": v for k, v in best[r]["params"].items()}}
            for r in self.ranks
        ]


def sweep_lora_rank(
    dataset: Dataset,
    eval_dataset: Dataset,
    config: M.ModelConfig,
    ranks=(8, 16, 32, 64, 128),
    trials: int = 20,
    space: dict | None = None,
    cfg: TrainConfig | None = None,
    budget: Budget | None = None,
    lora: LoraConfig | None = None,
    seed: int = 0,
    workers: int = 1,
) -> RankSweep:
    """Seeded random search at each fixed rank; report best score per rank.

    Every rank sees the same ``trials`` hyperparameter draws and the same base
    weights, so differences between ranks come from the rank alone.
    """
    if trials < 1:
        raise ConfigError(f"trials must be >= 1, got {trials}")
    ranks = list(ranks)
    if 8 not in ranks:
        raise ConfigError("rank sweep reports deltas against r=8, which must be included")
    space = DEFAULT_RANK_SPACE if space is None else space
    cfg = cfg or TrainConfig(mode="lora", metric="auroc_macro", seed=seed)
    budget = budget or Budget("epochs", 2)
    lora = lora or LoraConfig()
    draws = [sample_trial(space, np.random.default_rng([seed, t])) for t in range(trials)]
    jobs = []
    for r in ranks:
        for p in draws:
            jobs.append((len(jobs), config, lora, p, dataset, eval_dataset, cfg, budget, r))
    done = sorted(_map(_run_rank_cell, jobs, workers), key=lambda x: x[0])
    scores = {r: [] for r in ranks}
    for (index, res), job in zip(done, jobs):
        v = res.peak.metrics.get(cfg.metric)
        scores[job[-1]].append(-math.inf if v is None or np.isnan(v) else float(v))
    return RankSweep(ranks, draws, scores, cfg.metric)
