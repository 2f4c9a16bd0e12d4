import json
import shutil

import pytest

from peftlab import report
from peftlab.efficiency import RunStats, efficiency_index
from peftlab.errors import ReportError, SchemaError
from peftlab.report import METRIC_COLUMNS, cmd_accounting, cmd_plot, cmd_run, read_csv

SPEC = {
    "tiers": ["desk-tiny", "desk-distil"],
    "modes": ["full", "lora"],
    "task": {"kind": "sequence", "n_train": 120, "n_eval": 60, "seq_len": 8, "vocab_size": 30},
    "budgets": [{"kind": "epochs", "value": 1}],
    "seeds": [0, 1, 2],
    "train": {"batch_size": 32, "eval_every": 2},
}


def _write_spec(path, spec=SPEC):
    path.write_text(json.dumps(spec))
    return path


@pytest.fixture(scope="module")
def bundle(tmp_path_factory):
    root = tmp_path_factory.mktemp("bundle")
    spec = _write_spec(root / "spec.json")
    outcome = cmd_run(spec, root / "out")
    return spec, root / "out", outcome


def test_matrix_has_one_row_per_cell(bundle):
    _, out, outcome = bundle
    rows = read_csv(out / "matrix.csv")
    assert len(rows) == 12 == len(outcome.executed)
    assert len({r["cell_id"] for r in rows}) == 12
    assert json.loads((out / "failures.json").read_text()) == {"incomplete_cells": []}
    assert len(json.loads((out / "efficiency.json").read_text())["runs"]) == 12


def test_cell_ids_are_deterministic():
    ids = [c.cell_id for c in report.cells(SPEC)]
    assert ids == [c.cell_id for c in report.cells(json.loads(json.dumps(SPEC)))]
    assert ids[0] == "desk-tiny__full__epochs-1__seed0"


def test_rerun_is_idempotent_and_resumes_one_cell(bundle, tmp_path):
    spec, out, _ = bundle
    work = tmp_path / "copy"
    shutil.copytree(out, work)
    before = (work / "matrix.csv").read_text()
    again = cmd_run(spec, work)
    assert again.executed == [] and len(again.skipped) == 12
    assert (work / "matrix.csv").read_text() == before
    victim = "desk-distil__lora__epochs-1__seed1"
    (work / "cells" / f"{victim}.done").unlink()
    resumed = cmd_run(spec, work)
    assert resumed.executed == [victim]
    old = {r["cell_id"]: r for r in read_csv(out / "matrix.csv")}
    new = {r["cell_id"]: r for r in read_csv(work / "matrix.csv")}
    assert [new[victim][c] for c in METRIC_COLUMNS] == [old[victim][c] for c in METRIC_COLUMNS]


def test_reports_rebuild_from_traces_alone(bundle, tmp_path):
    _, out, _ = bundle
    work = tmp_path / "copy"
    shutil.copytree(out, work)
    for name in ("matrix.csv", "efficiency.csv", "efficiency.json"):
        (work / name).unlink()
    report.rebuild_reports(work)
    for name in ("matrix.csv", "efficiency.csv"):
        assert (work / name).read_text() == (out / name).read_text()


def test_different_spec_is_refused(bundle, tmp_path):
    _, out, _ = bundle
    work = tmp_path / "copy"
    shutil.copytree(out, work)
    other = _write_spec(tmp_path / "other.json", {**SPEC, "seeds": [0]})
    with pytest.raises(ReportError, match="different spec"):
        cmd_run(other, work)


def test_merge_bundles(bundle, tmp_path):
    spec, out, _ = bundle
    half = tmp_path / "half"
    shutil.copytree(out, half)
    for p in (half / "cells").glob("desk-tiny*.done"):
        p.unlink()
    report.rebuild_reports(half)
    assert len(read_csv(half / "matrix.csv")) == 6
    merged = report.merge_bundles(half, out, tmp_path / "merged")
    assert (merged / "matrix.csv").read_text() == (out / "matrix.csv").read_text()
    alien = tmp_path / "alien"
    alien.mkdir()
    (alien / "bundle.json").write_text(json.dumps({"spec_hash": "0" * 64, "cells": []}))
    with pytest.raises(ReportError, match="different specs"):
        report.merge_bundles(out, alien, tmp_path / "nope")


def test_failed_cells_are_listed_and_others_kept(tmp_path):
    spec = {**SPEC, "tiers": ["desk-tiny"], "modes": ["full"], "seeds": [0], "budgets": [{"kind": "samples_per_class", "value": 8}, {"kind": "samples_per_class", "value": 4096}]}
    outcome = cmd_run(_write_spec(tmp_path / "s.json", spec), tmp_path / "out")
    assert len(outcome.executed) == 1
    (bad,) = outcome.failed
    assert "4096" in bad and "BudgetError" in outcome.failed[bad]
    assert json.loads((tmp_path / "out" / "failures.json").read_text()) == {"incomplete_cells": [bad]}


@pytest.mark.parametrize(
    "mutate,path",
    [
        (lambda s: s.pop("seeds"), []),
        (lambda s: s.update(modes=["prefix"]), ["modes", 0]),
        (lambda s: s["budgets"][0].update(kind="minutes"), ["budgets", 0, "kind"]),
        (lambda s: s.update(tiers=["gpt"]), ["tiers", 0]),
        (lambda s: s["train"].update(learning_rate=-1), ["train", "learning_rate"]),
    ],
)
def test_schema_errors_carry_a_path(mutate, path):
    spec = json.loads(json.dumps(SPEC))
    mutate(spec)
    with pytest.raises(SchemaError) as info:
        report.validate_spec(spec)
    assert list(info.value.path) == path


def test_invalid_json_spec(tmp_path):
    (tmp_path / "s.json").write_text("{tiers: ")
    with pytest.raises(SchemaError, match="invalid JSON"):
        report.load_spec(tmp_path / "s.json")


# -- figures ---------------------------------------------------------------------


@pytest.mark.parametrize("kind", ["params_vs_performance", "budget_curves", "efficiency_scatter"])
def test_every_plotted_number_comes_from_the_csvs(bundle, tmp_path, kind):
    _, out, _ = bundle
    svg, csv_path = cmd_plot(out, kind, tmp_path)
    assert open(svg).read().lstrip().startswith("<?xml")
    points = read_csv(csv_path)
    matrix = read_csv(out / "matrix.csv")
    if kind == "params_vs_performance":
        by_id = {r["cell_id"]: r for r in matrix}
        assert len(points) == 12
        for p in points:
            assert float(p["x"]) == float(by_id[p["label"]]["P"])
            assert float(p["y"]) == float(by_id[p["label"]]["peak_metric"])
    elif kind == "budget_curves":
        assert len(points) == 4
        for p in points:
            ys = sorted(float(r["peak_metric"]) for r in matrix if r["tier"] == p["tier"] and r["mode"] == p["mode"])
            assert float(p["y"]) == ys[1]
    else:
        eff = {e["cell_id"]: e for e in json.loads((out / "efficiency.json").read_text())["runs"]}
        for p in points:
            assert float(p["x"]) == pytest.approx(eff[p["label"]]["efficiency"], abs=1e-12)


def test_plots_are_deterministic(bundle, tmp_path):
    _, out, _ = bundle
    a, _ = cmd_plot(out, "params_vs_performance", tmp_path / "a")
    b, _ = cmd_plot(out, "params_vs_performance", tmp_path / "b")
    assert open(a).read() == open(b).read()


def _hand_bundle(tmp_path, triples):
    tmp_path.mkdir(exist_ok=True)
    rows = [{"cell_id": f"run{i}", "mode": "lora", "T": t, "P": p, "S": s, "peak_metric": 0.5 + i / 10, "metric": "f1_macro"} for i, (t, p, s) in enumerate(triples)]
    report.write_csv(tmp_path / "matrix.csv", rows, list(rows[0]))
    return tmp_path


def test_efficiency_scatter_matches_efficiency_index(tmp_path):
    triples = [(3.0, 100, 1000), (1.0, 5000, 9000), (7.5, 40, 50000)]
    bundle = _hand_bundle(tmp_path / "b", triples)
    _, csv_path = cmd_plot(bundle, "efficiency_scatter")
    expected = efficiency_index([RunStats(f"run{i}", *t) for i, t in enumerate(triples)])
    points = read_csv(csv_path)
    assert len(points) == 3
    for p in points:
        assert float(p["x"]) == pytest.approx(expected[p["label"]], abs=1e-12)


def test_rank_deltas_single_reference_point(tmp_path):
    report.write_csv(tmp_path / "rank_deltas.csv", [{"rank": 8, "delta": 0.0, "metric": "auroc_macro"}], ["rank", "delta", "metric"])
    _, csv_path = cmd_plot(tmp_path, "rank_deltas")
    assert [(int(p["x"]), float(p["y"])) for p in read_csv(csv_path)] == [(8, 0.0)]


def test_empty_or_incomplete_bundle_writes_nothing(tmp_path):
    report.write_csv(tmp_path / "matrix.csv", [], report.MATRIX_COLUMNS)
    for kind in ("params_vs_performance", "budget_curves", "efficiency_scatter", "rank_deltas"):
        with pytest.raises(ReportError, match=kind):
            cmd_plot(tmp_path, kind)
    assert not (tmp_path / "figures").exists()
    report.write_csv(tmp_path / "matrix.csv", [{"cell_id": "a", "mode": "full"}], ["cell_id", "mode"])
    with pytest.raises(ReportError, match="lacks"):
        cmd_plot(tmp_path, "params_vs_performance")
    with pytest.raises(ReportError):
        cmd_plot(tmp_path, "pie_chart")


# -- accounting ------------------------------------------------------------------


def test_accounting_bert_like_row():
    (row,) = cmd_accounting(["bert-base"])
    assert abs(row["params"] - 108.31e6) / 108.31e6 <= 0.02
    assert abs(row["vram_gib"] - 0.403) / 0.403 <= 0.02
    assert row["num_tokens"] == 10


def test_accounting_flops_ratio_and_empty():
    rows = {r["tier"]: r for r in cmd_accounting(["bert-base", "distilbert"])}
    assert abs(rows["bert-base"]["flops"] / rows["distilbert"]["flops"] - 2.0) <= 0.1
    assert cmd_accounting([]) == []


def test_accounting_cost_column():
    (row,) = cmd_accounting(["tinybert"], train_hours=2.51, infer_hours=0.22)
    assert abs(row["cost"] - 5.56) <= 0.05 and row["currency"] == "GBP"
