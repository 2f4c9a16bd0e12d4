"""``peftlab`` command line.

Exit codes: 0 success, 1 usage error, 2 data/config/report error, 3 numeric failure.
``PEFTLAB_OUTPUT_DIR`` and ``PEFTLAB_WORKERS`` set the defaults for ``--out`` and ``--workers``.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys
from pathlib import Path

from . import report
from .data import FEW_SHOT_LADDER, min_class_count
from .efficiency import DEFAULT_RATES, rate_profile
from .errors import PeftLabError
from .harness import METRICS, Budget, TrainConfig, sweep_lora_rank
from .model import TIERS, get_tier
from .peft import LoraConfig

log = logging.getLogger("peftlab")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: error: {message}")


def _env_out(default: str) -> str:
    return os.environ.get("PEFTLAB_OUTPUT_DIR", default)


def _env_workers() -> int:
    raw = os.environ.get("PEFTLAB_WORKERS", "1")
    try:
        return max(1, int(raw))
    except ValueError:
        raise UsageError(f"PEFTLAB_WORKERS must be an integer, got {raw!r}") from None


def _add_task(p):
    g = p.add_argument_group("task")
    g.add_argument("--task", choices=["sequence", "ner", "jsonl"], default="sequence")
    g.add_argument("--n-train", type=int, default=2000)
    g.add_argument("--n-eval", type=int, default=500)
    g.add_argument("--num-classes", type=int, default=2)
    g.add_argument("--seq-len", type=int, default=12)
    g.add_argument("--noise", type=float, default=0.1)
    g.add_argument("--task-seed", type=int, default=0)
    g.add_argument("--train-file", help="JSONL training file (--task jsonl)")
    g.add_argument("--eval-file", help="JSONL evaluation file (--task jsonl)")
    g.add_argument("--task-kind", choices=["sequence", "token"], default="sequence", help="label kind of the JSONL files")


def _task_spec(a) -> dict:
    if a.task == "jsonl":
        if not (a.train_file and a.eval_file):
            raise UsageError("--task jsonl needs --train-file and --eval-file")
        return {"kind": "jsonl", "train": str(Path(a.train_file).resolve()), "eval": str(Path(a.eval_file).resolve()), "task_kind": a.task_kind}
    spec = {"kind": a.task, "n_train": a.n_train, "n_eval": a.n_eval, "seq_len": a.seq_len, "seed": a.task_seed}
    if a.task == "sequence":
        spec.update(num_classes=a.num_classes, noise=a.noise)
    return spec


def _add_train(p, metric="f1_macro", epochs=5):
    g = p.add_argument_group("training")
    g.add_argument("--lr", type=float, default=3e-4, help="learning rate (default 3e-4)")
    g.add_argument("--batch-size", type=int, default=32)
    g.add_argument("--epochs", type=int, default=epochs, help="max epochs (default %(default)s)")
    g.add_argument("--eval-every", type=int, default=50)
    g.add_argument("--metric", choices=METRICS, default=metric)


def _add_adapter(p):
    g = p.add_argument_group("adapters")
    g.add_argument("--rank", type=int, default=8, help="LoRA rank r (default 8)")
    g.add_argument("--alpha", type=float, default=8.0, help="LoRA alpha (default 8)")
    g.add_argument("--dropout", type=float, default=0.1, help="adapter dropout (default 0.1)")
    g.add_argument("--targets", nargs="+", default=["key", "value"], choices=["query", "key", "value", "ffn"], help="LoRA target modules (default key value)")


def _add_matrix(p, modes=("full", "lora")):
    p.add_argument("--tiers", nargs="+", default=["desk-base"], choices=sorted(TIERS))
    p.add_argument("--modes", nargs="+", default=list(modes), choices=["full", "lora", "ia3"])
    p.add_argument("--seeds", nargs="+", type=int, default=[0, 1, 2])


def _add_out(p, default):
    p.add_argument("--out", default=None, help=f"output directory (default $PEFTLAB_OUTPUT_DIR or {default})")
    p.add_argument("--workers", type=int, default=None, help="concurrent cells (default $PEFTLAB_WORKERS or 1)")


def build_parser() -> argparse.ArgumentParser:
    ap = _Parser(prog="peftlab", description="Parameter-efficient fine-tuning experiments at desk scale.")
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("run", help="execute an experiment spec (resumable)")
    p.add_argument("spec", help="experiment spec JSON")
    _add_out(p, "bundle")

    p = sub.add_parser("plot", help="render a figure from a bundle")
    p.add_argument("bundle")
    p.add_argument("--figure", required=True, choices=report.FIGURES)
    p.add_argument("--out", default=None, help="figure directory (default <bundle>/figures)")

    p = sub.add_parser("accounting", help="params, VRAM, FLOPs and cost per tier")
    p.add_argument("--tiers", nargs="*", default=["tinybert", "mobilebert", "distilbert", "bert-base"], choices=sorted(TIERS))
    p.add_argument("--precision", choices=["fp32", "bf16", "fp16"], default="fp32")
    p.add_argument("--rates", default=None, help=f"rate profile JSON (default {DEFAULT_RATES.name})")
    p.add_argument("--train-hours", type=float, default=0.0)
    p.add_argument("--infer-hours", type=float, default=0.0)
    p.add_argument("--num-tokens", type=int, default=10)
    p.add_argument("--num-labels", type=int, default=2)
    p.add_argument("--format", choices=["csv", "json"], default="csv")
    p.add_argument("--output", default=None, help="write the table here instead of stdout")

    p = sub.add_parser("sweep-rank", help="LoRA rank sweep with seeded random search")
    p.add_argument("--tier", default="desk-wide", choices=sorted(TIERS))
    p.add_argument("--ranks", nargs="+", type=int, default=[8, 16, 32, 64, 128])
    p.add_argument("--trials", type=int, default=20)
    p.add_argument("--sweep-seed", type=int, default=0)
    _add_task(p)
    _add_train(p, metric="auroc_macro", epochs=2)
    _add_adapter(p)
    _add_out(p, "rank-sweep")

    p = sub.add_parser("budget-sweep", help="peak metric against a time or epoch budget")
    p.add_argument("--budget-kind", choices=["time_seconds", "epochs"], default="time_seconds")
    p.add_argument("--budgets", nargs="+", type=float, required=True)
    _add_matrix(p)
    _add_task(p)
    _add_train(p)
    _add_adapter(p)
    _add_out(p, "budget-sweep")

    p = sub.add_parser("few-shot-sweep", help="peak metric against examples per class")
    p.add_argument("--max-k", type=int, default=None, help="cap the ladder (default: smallest class size)")
    _add_matrix(p)
    _add_task(p)
    _add_train(p)
    _add_adapter(p)
    _add_out(p, "few-shot-sweep")
    return ap


def _adapter_spec(a) -> dict:
    return {
        "lora": {"rank": a.rank, "alpha": a.alpha, "dropout": a.dropout, "target_modules": list(a.targets)},
        "ia3": {"dropout": a.dropout},
    }


def _train_spec(a) -> dict:
    return {"learning_rate": a.lr, "batch_size": a.batch_size, "max_epochs": a.epochs, "eval_every": a.eval_every}


def _run_generated(spec: dict, out: Path, workers: int):
    out.mkdir(parents=True, exist_ok=True)
    path = out / "spec.json"
    if not path.exists() or json.loads(path.read_text()) != spec:
        path.write_text(json.dumps(spec, indent=2, sort_keys=True) + "\n")
    return report.cmd_run(path, out, workers)


def _summarise(outcome) -> int:
    print(f"bundle: {outcome.bundle}")
    print(f"executed {len(outcome.executed)}, skipped {len(outcome.skipped)}, failed {len(outcome.failed)}")
    for cid, err in outcome.failed.items():
        print(f"FAILED {cid}: {err}", file=sys.stderr)
    if not outcome.failed:
        return 0
    numeric = all(err.startswith("NumericError") for err in outcome.failed.values())
    return 3 if numeric else 2


def _write_table(rows, columns, fmt, output):
    if fmt == "json":
        text = json.dumps(rows, indent=2) + "\n"
    else:
        import io

        buf = io.StringIO()
        w = csv.DictWriter(buf, fieldnames=columns, lineterminator="\n")
        w.writeheader()
        w.writerows(rows)
        text = buf.getvalue()
    if output:
        Path(output).write_text(text)
    else:
        sys.stdout.write(text)


def dispatch(a) -> int:
    workers = a.workers if getattr(a, "workers", None) is not None else _env_workers()
    if a.command == "run":
        return _summarise(report.cmd_run(a.spec, Path(a.out or _env_out("bundle")), workers))

    if a.command == "plot":
        svg, csv_path = report.cmd_plot(a.bundle, a.figure, a.out)
        print(svg)
        print(csv_path)
        return 0

    if a.command == "accounting":
        rows = report.cmd_accounting(a.tiers, a.precision, rate_profile(a.rates), a.train_hours, a.infer_hours, a.num_tokens, a.num_labels)
        _write_table(rows, report.ACCOUNTING_COLUMNS, a.format, a.output)
        return 0

    spec = {"task": _task_spec(a), "metric": a.metric, "train": _train_spec(a), **_adapter_spec(a)}

    if a.command == "sweep-rank":
        out = Path(a.out or _env_out("rank-sweep"))
        train_ds, eval_ds = report.build_task(spec["task"])
        width = max(train_ds.max_len, eval_ds.max_len)
        mcfg = get_tier(a.tier).config(len(train_ds.vocab), width, train_ds.num_labels, train_ds.kind)
        cfg = TrainConfig(mode="lora", learning_rate=a.lr, batch_size=a.batch_size, eval_every=a.eval_every, metric=a.metric, seed=a.sweep_seed)
        lora = LoraConfig(a.rank, a.alpha, a.dropout, tuple(a.targets))
        sweep = sweep_lora_rank(train_ds, eval_ds, mcfg, a.ranks, a.trials, cfg=cfg, budget=Budget("epochs", a.epochs), lora=lora, seed=a.sweep_seed, workers=workers)
        rows = sweep.rows()
        out.mkdir(parents=True, exist_ok=True)
        cols = list(dict.fromkeys(k for r in rows for k in r))
        report.write_csv(out / "rank_deltas.csv", rows, cols)
        trials = [{"rank": r, "trial": i, "score": s, **sweep.trials[i]} for r in sweep.ranks for i, s in enumerate(sweep.scores[r])]
        report.write_csv(out / "rank_trials.csv", trials, list(dict.fromkeys(k for t in trials for k in t)))
        (out / "rank_sweep.json").write_text(json.dumps({"spec": spec, "tier": a.tier, "ranks": a.ranks, "trials": a.trials, "best_config_hash": sweep.best_config_hash()}, indent=2) + "\n")
        for r in rows:
            print(f"r={r['rank']:<4d} best={r['best_score']:.4f} delta={r['delta']:+.4f}")
        return 0

    spec.update(tiers=a.tiers, modes=a.modes, seeds=a.seeds)
    if a.command == "budget-sweep":
        spec["budgets"] = [{"kind": a.budget_kind, "value": v} for v in sorted(a.budgets)]
        out = Path(a.out or _env_out("budget-sweep"))
    else:
        train_ds, _ = report.build_task(spec["task"])
        cap = min_class_count(train_ds)
        if a.max_k is not None:
            cap = min(cap, a.max_k)
        ladder = [k for k in FEW_SHOT_LADDER if k <= cap]
        if not ladder:
            raise UsageError(f"smallest class has {cap} examples; the ladder starts at {FEW_SHOT_LADDER[0]}")
        spec["budgets"] = [{"kind": "samples_per_class", "value": k} for k in ladder]
        out = Path(a.out or _env_out("few-shot-sweep"))
    return _summarise(_run_generated(spec, out, workers))


def main(argv=None) -> int:
    try:
        a = build_parser().parse_args(argv)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return 1
    except SystemExit as exc:  # --help
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if a.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        return dispatch(a)
    except UsageError as exc:
        print(f"peftlab: error: {exc}", file=sys.stderr)
        return 1
    except PeftLabError as exc:
        print(f"peftlab: {type(exc).__name__}: {exc}", file=sys.stderr)
        return exc.exit_code
    except OSError as exc:
        print(f"peftlab: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
