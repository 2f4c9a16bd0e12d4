"""Experiment matrices, report bundles, figures and accounting tables.

A bundle directory looks like::

    bundle.json          spec, spec hash, cell ids
    cells/<id>.json      full checkpoint trace of one cell
    cells/<id>.done      completion marker (resumability)
    matrix.csv           one row per cell
    efficiency.json/csv  holistic efficiency over all cells
    failures.json        cells that raised, with messages
    figures/             plots written by ``cmd_plot``
"""

from __future__ import annotations

import csv
import hashlib
import io
import json
import logging
import os
import tempfile
from dataclasses import dataclass, field
from pathlib import Path

import jsonschema

from . import plotting
from .data import Dataset, gen_ner_task, gen_sequence_task, load_jsonl
from .efficiency import (
    CostRates,
    DEFAULT_RATES,
    RunStats,
    efficiency_components,
    estimate_cost,
    estimate_flops,
    estimate_vram,
)
from .errors import CohortError, PeftLabError, ReportError, SchemaError
from .harness import Budget, TrainConfig, prepare_model, result_row, train
from .model import count_params, get_tier
from .peft import Ia3Config, LoraConfig

log = logging.getLogger(__name__)

MATRIX_COLUMNS = [
    "cell_id", "tier", "mode", "budget_kind", "budget", "seed",
    "T", "P", "S", "peak_step", "steps", "train_size", "stop_elapsed", "max_step_seconds",
    "metric", "peak_metric", "f1_micro", "f1_macro", "auroc_macro", "accuracy", "auroc_binary", "span_f1",
]
METRIC_COLUMNS = ["peak_metric", "f1_micro", "f1_macro", "auroc_macro", "accuracy", "auroc_binary", "span_f1"]
FIGURES = ("params_vs_performance", "budget_curves", "efficiency_scatter", "rank_deltas")

SPEC_SCHEMA = {
    "type": "object",
    "required": ["tiers", "modes", "task", "budgets", "seeds"],
    "additionalProperties": False,
    "properties": {
        "name": {"type": "string"},
        "tiers": {"type": "array", "items": {"type": "string"}, "minItems": 1},
        "modes": {"type": "array", "items": {"enum": ["full", "lora", "ia3"]}, "minItems": 1, "uniqueItems": True},
        "task": {
            "type": "object",
            "required": ["kind"],
            "properties": {
                "kind": {"enum": ["sequence", "ner", "jsonl"]},
                "n_train": {"type": "integer", "minimum": 1},
                "n_eval": {"type": "integer", "minimum": 1},
                "num_classes": {"type": "integer", "minimum": 2},
                "vocab_size": {"type": "integer", "minimum": 2},
                "seq_len": {"type": "integer", "minimum": 1},
                "noise": {"type": "number", "minimum": 0, "maximum": 1},
                "marker_len": {"type": "integer", "minimum": 1},
                "entity_types": {"type": "integer", "minimum": 1},
                "o_fraction": {"type": "number", "exclusiveMinimum": 0, "maximum": 1},
                "seed": {"type": "integer"},
                "task_kind": {"enum": ["sequence", "token"]},
                "train": {"type": "string"},
                "eval": {"type": "string"},
            },
        },
        "budgets": {
            "type": "array",
            "minItems": 1,
            "items": {
                "type": "object",
                "required": ["kind", "value"],
                "additionalProperties": False,
                "properties": {
                    "kind": {"enum": ["time_seconds", "samples_per_class", "epochs"]},
                    "value": {"type": "number", "exclusiveMinimum": 0},
                },
            },
        },
        "seeds": {"type": "array", "items": {"type": "integer"}, "minItems": 1, "uniqueItems": True},
        "metric": {"enum": ["f1_micro", "f1_macro", "auroc_macro", "accuracy"]},
        "train": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "learning_rate": {"type": "number", "exclusiveMinimum": 0},
                "batch_size": {"type": "integer", "minimum": 1},
                "max_epochs": {"type": "integer", "minimum": 1},
                "eval_every": {"type": "integer", "minimum": 1},
            },
        },
        "lora": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "rank": {"type": "integer", "minimum": 1},
                "alpha": {"type": "number"},
                "dropout": {"type": "number", "minimum": 0, "exclusiveMaximum": 1},
                "target_modules": {"type": "array", "items": {"enum": ["query", "key", "value", "ffn"]}, "minItems": 1},
            },
        },
        "ia3": {
            "type": "object",
            "additionalProperties": False,
            "properties": {"dropout": {"type": "number", "minimum": 0, "exclusiveMaximum": 1}},
        },
    },
}


def validate_spec(spec: dict) -> dict:
    validator = jsonschema.Draft202012Validator(SPEC_SCHEMA)
    errors = sorted(validator.iter_errors(spec), key=lambda e: list(e.absolute_path))
    if errors:
        e = errors[0]
        raise SchemaError(e.message, e.absolute_path)
    for i, t in enumerate(spec["tiers"]):
        try:
            get_tier(t)
        except PeftLabError as exc:
            raise SchemaError(str(exc), ("tiers", i)) from None
    task = spec["task"]
    if task["kind"] == "jsonl":
        for key in ("train", "eval", "task_kind"):
            if key not in task:
                raise SchemaError(f"jsonl task needs {key!r}", ("task",))
    return spec


def load_spec(path) -> dict:
    try:
        spec = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise SchemaError(f"invalid JSON: {exc.msg} (line {exc.lineno})") from None
    return validate_spec(spec)


def spec_hash(spec: dict) -> str:
    return hashlib.sha256(json.dumps(spec, sort_keys=True).encode()).hexdigest()


@dataclass(frozen=True)
class Cell:
    tier: str
    mode: str
    budget: Budget
    seed: int

    @property
    def cell_id(self) -> str:
        return f"{self.tier}__{self.mode}__{self.budget.kind}-{self.budget.value:g}__seed{self.seed}"


def cells(spec: dict) -> list[Cell]:
    out = []
    for tier in spec["tiers"]:
        for mode in spec["modes"]:
            for b in spec["budgets"]:
                for seed in spec["seeds"]:
                    out.append(Cell(tier, mode, Budget(b["kind"], b["value"]), seed))
    ids = [c.cell_id for c in out]
    if len(set(ids)) != len(ids):
        raise SchemaError("duplicate cells in the experiment matrix", ("budgets",))
    return out


def build_task(task: dict, base_dir=".") -> tuple[Dataset, Dataset]:
    kind = task["kind"]
    seed = task.get("seed", 0)
    n_train, n_eval = task.get("n_train", 2000), task.get("n_eval", 500)
    if kind == "sequence":
        kw = {k: task[k] for k in ("num_classes", "vocab_size", "seq_len", "noise", "marker_len") if k in task}
        return gen_sequence_task(seed, n_train, **kw), gen_sequence_task(seed + 1, n_eval, **kw)
    if kind == "ner":
        kw = {k: task[k] for k in ("entity_types", "seq_len", "o_fraction") if k in task}
        return gen_ner_task(seed, n_train, **kw), gen_ner_task(seed + 1, n_eval, **kw)
    base = Path(base_dir)
    tr = load_jsonl(base / task["train"], task["task_kind"])
    ev = load_jsonl(base / task["eval"], task["task_kind"], vocab=tr.vocab, label_names=tr.label_names)
    return tr, ev


def train_config(spec: dict, mode: str, seed: int) -> TrainConfig:
    t = spec.get("train", {})
    return TrainConfig(mode=mode, seed=seed, metric=spec.get("metric", "f1_macro"), **t)


def _atomic_write(path: Path, text: str):
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.")
    with os.fdopen(fd, "w") as fh:
        fh.write(text)
    os.replace(tmp, path)


def _run_cell(args):
    cell, spec, train_ds, eval_ds, cells_dir = args
    try:
        cfg = train_config(spec, cell.mode, cell.seed)
        width = max(train_ds.max_len, eval_ds.max_len)
        mcfg = get_tier(cell.tier).config(len(train_ds.vocab), width, train_ds.num_labels, train_ds.kind)
        lora = LoraConfig(**spec.get("lora", {}))
        ia3 = Ia3Config(**spec.get("ia3", {}))
        model = prepare_model(mcfg, cell.mode, cell.seed, lora, ia3)
        res = train(model, train_ds, cfg, cell.budget, eval_ds)
    except PeftLabError as exc:
        return cell.cell_id, f"{type(exc).__name__}: {exc}"
    trace = res.to_dict()
    trace.update(
        cell_id=cell.cell_id,
        tier=cell.tier,
        seed=cell.seed,
        model_config=mcfg.to_dict(),
        row=result_row(res, cell_id=cell.cell_id, tier=cell.tier, seed=cell.seed),
    )
    cells_dir = Path(cells_dir)
    _atomic_write(cells_dir / f"{cell.cell_id}.json", json.dumps(trace, sort_keys=True, default=float))
    _atomic_write(cells_dir / f"{cell.cell_id}.done", "")
    return cell.cell_id, None


@dataclass
class RunOutcome:
    bundle: Path
    executed: list[str] = field(default_factory=list)
    skipped: list[str] = field(default_factory=list)
    failed: dict[str, str] = field(default_factory=dict)


def cmd_run(spec_path, out_dir, workers: int = 1) -> RunOutcome:
    """Execute every missing cell of the experiment matrix and rebuild the reports.

    Cells with an on-disk ``.done`` marker are skipped. A bundle made from a
    different spec (hash mismatch) is refused.
    """
    spec = load_spec(spec_path)
    out = Path(out_dir)
    h = spec_hash(spec)
    manifest_path = out / "bundle.json"
    if manifest_path.exists():
        old = json.loads(manifest_path.read_text())
        if old.get("spec_hash") != h:
            raise ReportError(f"{out} holds a bundle for a different spec (hash {old.get('spec_hash', '?')[:12]} != {h[:12]})")
    matrix = cells(spec)
    cells_dir = out / "cells"
    cells_dir.mkdir(parents=True, exist_ok=True)
    _atomic_write(manifest_path, json.dumps({"spec_hash": h, "spec": spec, "cells": [c.cell_id for c in matrix]}, indent=2, sort_keys=True))

    train_ds, eval_ds = build_task(spec["task"], Path(spec_path).parent)
    outcome = RunOutcome(out)
    todo = []
    for c in matrix:
        if (cells_dir / f"{c.cell_id}.done").exists() and (cells_dir / f"{c.cell_id}.json").exists():
            outcome.skipped.append(c.cell_id)
        else:
            todo.append((c, spec, train_ds, eval_ds, str(cells_dir)))
    if workers > 1 and len(todo) > 1:
        from concurrent.futures import ProcessPoolExecutor

        with ProcessPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(_run_cell, todo))
    else:
        results = [_run_cell(j) for j in todo]
    for cell_id, err in results:
        if err is None:
            outcome.executed.append(cell_id)
        else:
            outcome.failed[cell_id] = err
            log.warning("cell %s failed: %s", cell_id, err)
    rebuild_reports(out)
    return outcome


def load_traces(bundle) -> list[dict]:
    bundle = Path(bundle)
    manifest = json.loads((bundle / "bundle.json").read_text())
    traces = []
    for cell_id in manifest["cells"]:
        p = bundle / "cells" / f"{cell_id}.json"
        if p.exists() and (bundle / "cells" / f"{cell_id}.done").exists():
            traces.append(json.loads(p.read_text()))
    return traces


def write_csv(path: Path, rows: list[dict], columns: list[str]):
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=columns, extrasaction="ignore", lineterminator="\n")
    w.writeheader()
    for r in rows:
        w.writerow({k: ("" if r.get(k) is None else r.get(k)) for k in columns})
    _atomic_write(path, buf.getvalue())


def read_csv(path: Path) -> list[dict]:
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def efficiency_rows(rows: list[dict]) -> list[dict]:
    """Efficiency components for each matrix row (label = cell id)."""
    cohort = [RunStats(r["cell_id"], float(r["T"]), float(r["P"]), float(r["S"])) for r in rows]
    comps = efficiency_components(cohort)
    out = []
    for r in rows:
        c = comps[r["cell_id"]]
        out.append({"cell_id": r["cell_id"], "mode": r["mode"], "tier": r.get("tier", ""), "T": r["T"], "P": r["P"], "S": r["S"], **{k: float(v) for k, v in c.items()}, "performance": r["peak_metric"]})
    return out


EFFICIENCY_COLUMNS = ["cell_id", "tier", "mode", "T", "P", "S", "T_norm", "P_norm", "S_norm", "raw", "efficiency", "performance"]


def rebuild_reports(bundle):
    """Regenerate matrix.csv, efficiency.* and failures.json from the cell traces."""
    bundle = Path(bundle)
    rows = [t["row"] for t in load_traces(bundle)]
    write_csv(bundle / "matrix.csv", rows, MATRIX_COLUMNS)
    try:
        eff = efficiency_rows(rows)
    except CohortError as exc:
        _atomic_write(bundle / "efficiency.json", json.dumps({"error": str(exc)}, indent=2))
        write_csv(bundle / "efficiency.csv", [], EFFICIENCY_COLUMNS)
    else:
        note = "T, P, S min-max scaled over the cohort, averaged, rescaled and inverted: 1 = most efficient"
        _atomic_write(bundle / "efficiency.json", json.dumps({"normalization": note, "runs": eff}, indent=2, default=float))
        write_csv(bundle / "efficiency.csv", eff, EFFICIENCY_COLUMNS)
    manifest = json.loads((bundle / "bundle.json").read_text())
    done = {r["cell_id"] for r in rows}
    missing = [c for c in manifest["cells"] if c not in done]
    _atomic_write(bundle / "failures.json", json.dumps({"incomplete_cells": missing}, indent=2))


def merge_bundles(a, b, out):
    """Union of two bundles' completed cells; both must come from the same spec."""
    a, b, out = Path(a), Path(b), Path(out)
    ma = json.loads((a / "bundle.json").read_text())
    mb = json.loads((b / "bundle.json").read_text())
    if ma["spec_hash"] != mb["spec_hash"]:
        raise ReportError("refusing to merge bundles produced from different specs")
    (out / "cells").mkdir(parents=True, exist_ok=True)
    _atomic_write(out / "bundle.json", json.dumps(ma, indent=2, sort_keys=True))
    for src in (a, b):
        for t in load_traces(src):
            cid = t["cell_id"]
            _atomic_write(out / "cells" / f"{cid}.json", json.dumps(t, sort_keys=True, default=float))
            _atomic_write(out / "cells" / f"{cid}.done", "")
    rebuild_reports(out)
    return out


# -- figures ---------------------------------------------------------------------

_FIGURE_NEEDS = {
    "params_vs_performance": ("matrix.csv", ["cell_id", "mode", "P", "peak_metric"]),
    "budget_curves": ("matrix.csv", ["mode", "budget_kind", "budget", "peak_metric"]),
    "efficiency_scatter": ("matrix.csv", ["cell_id", "mode", "T", "P", "S", "peak_metric"]),
    "rank_deltas": ("rank_deltas.csv", ["rank", "delta"]),
}


def _figure_rows(bundle: Path, kind: str):
    fname, cols = _FIGURE_NEEDS[kind]
    path = bundle / fname
    if not path.exists():
        raise ReportError(f"{kind} needs {fname} with columns {cols}; {path} not found")
    rows = read_csv(path)
    if not rows:
        raise ReportError(f"{kind}: {path} has no rows")
    missing = [c for c in cols if c not in rows[0]]
    if missing:
        raise ReportError(f"{kind} needs columns {cols}; {fname} lacks {missing}")
    return rows


def cmd_plot(bundle, kind: str, out_dir=None) -> tuple[str, str]:
    """Write ``<kind>.svg`` plus ``<kind>.csv`` (the plotted points). Returns both paths."""
    if kind not in FIGURES:
        raise ReportError(f"unknown figure {kind!r}; choose from {FIGURES}")
    bundle = Path(bundle)
    rows = _figure_rows(bundle, kind)
    out = Path(out_dir) if out_dir else bundle / "figures"
    metric = rows[0].get("metric") or "metric"
    out.mkdir(parents=True, exist_ok=True)
    svg = str(out / f"{kind}.svg")
    if kind == "params_vs_performance":
        return plotting.params_vs_performance(rows, metric, svg)
    if kind == "budget_curves":
        return plotting.budget_curves(rows, metric, svg)
    if kind == "efficiency_scatter":
        eff = efficiency_rows(rows)
        return plotting.efficiency_scatter(
            [e["cell_id"] for e in eff],
            [e["efficiency"] for e in eff],
            [float(e["performance"]) for e in eff],
            [e["mode"] for e in eff],
            metric,
            svg,
        )
    rows = sorted(rows, key=lambda r: int(r["rank"]))
    return plotting.rank_deltas([int(r["rank"]) for r in rows], [float(r["delta"]) for r in rows], metric, svg)


# -- accounting ------------------------------------------------------------------

ACCOUNTING_COLUMNS = ["tier", "params", "params_millions", "precision", "vram_gib", "flops", "num_tokens", "train_hours", "infer_hours", "cost", "currency"]


def cmd_accounting(tiers, precision: str = "fp32", rates: CostRates = DEFAULT_RATES, train_hours: float = 0.0, infer_hours: float = 0.0, num_tokens: int = 10, num_labels: int = 2) -> list[dict]:
    rows = []
    for name in tiers:
        tier = get_tier(name)
        cfg = tier.config(tier.vocab_size or 30522, tier.max_positions or 512, num_labels)
        total = count_params(cfg)["total"]
        rows.append(
            {
                "tier": name,
                "params": total,
                "params_millions": total / 1e6,
                "precision": precision,
                "vram_gib": estimate_vram(total, precision),
                "flops": estimate_flops(cfg, num_tokens),
                "num_tokens": num_tokens,
                "train_hours": train_hours,
                "infer_hours": infer_hours,
                "cost": estimate_cost(train_hours, infer_hours, rates),
                "currency": rates.currency,
            }
        )
    return rows
