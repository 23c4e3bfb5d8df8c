import csv
import json

import pytest

from conftest import tiny_course
from fedtune.errors import UsageError
from fedtune.hpo import Trial
from fedtune.report import ROUND_COLUMNS, emit_report, trials_from_json, trials_to_json
from fedtune.runtime import CourseHistory, prepare, run_simulated


@pytest.fixture(scope="module")
def history():
    cfg = tiny_course(rounds=2)
    return cfg, prepare(cfg), run_simulated(cfg)


def test_round_report_is_deterministic(history, tmp_path):
    cfg, inputs, h = history
    emit_report(h, tmp_path / "a")
    emit_report(run_simulated(cfg, inputs), tmp_path / "b")
    for name in ("rounds.csv", "summary.json"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()
    rows = list(csv.reader((tmp_path / "a" / "rounds.csv").open()))
    assert tuple(rows[0]) == ROUND_COLUMNS and len(rows) == 3


def test_summary_ledger_equals_last_round(history, tmp_path):
    _, _, h = history
    emit_report(h, tmp_path)
    summary = json.loads((tmp_path / "summary.json").read_text())
    last = list(csv.DictReader((tmp_path / "rounds.csv").open()))[-1]
    for k in ("bytes_up", "bytes_down", "flops"):
        assert summary["ledger"][k] == int(last[k])
    assert summary["ledger"]["seconds"] == float(last["seconds"])
    assert summary["config"]["rounds"] == 2
    assert summary["final"]["eval_score"] == h.final.eval_score


def test_empty_inputs_are_usage_errors(tmp_path):
    with pytest.raises(UsageError):
        emit_report(CourseHistory(config={}), tmp_path)
    with pytest.raises(UsageError):
        emit_report([], tmp_path)


def test_trials_report_and_roundtrip(tmp_path):
    trials = [Trial({"lr": 1e-3, "scaling": 16}, 2, val_loss=0.5, eval_score=-0.4),
              Trial({"lr": 3e-4, "scaling": 16}, 2, failed=True, error="boom")]
    emit_report(trials, tmp_path, {"method": "grid"})
    rows = list(csv.reader((tmp_path / "trials.csv").open()))
    assert rows[0] == ["lr", "scaling", "fidelity", "val_loss", "eval_score", "bytes_up", "flops", "seconds"]
    assert rows[1][:4] == ["0.001", "16", "2", "0.5"] and rows[2][3] == ""
    summary = json.loads((tmp_path / "summary.json").read_text())
    assert summary["n_failed"] == 1 and summary["best"]["point"] == {"lr": 1e-3, "scaling": 16}
    back = trials_from_json(json.loads(json.dumps(trials_to_json(trials))))
    assert [(t.point, t.val_loss, t.failed) for t in back] == [(t.point, t.val_loss, t.failed) for t in trials]


def test_unwritable_path(history, tmp_path):
    blocker = tmp_path / "file"
    blocker.write_text("x")
    with pytest.raises(OSError):
        emit_report(history[2], blocker / "sub")
