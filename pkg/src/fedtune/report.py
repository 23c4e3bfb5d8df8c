"""CSV and JSON report emission for course histories and HPO trials."""

from __future__ import annotations

import csv
import io
import json
from pathlib import Path

from fedtune.errors import UsageError
from fedtune.hpo import Trial
from fedtune.runtime import CourseHistory

ROUND_COLUMNS = ("round", "train_loss", "val_loss", "eval_score", "test_ppl", "complete",
                 "bytes_up", "bytes_down", "flops", "seconds", "param_bytes_resident")
TRIAL_TAIL = ("fidelity", "val_loss", "eval_score", "bytes_up", "flops", "seconds")


def _cell(v) -> str:
    if v is None:
        return ""
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, float):
        return repr(v)
    return str(v)


def _csv(header, rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for row in rows:
        w.writerow([_cell(v) for v in row])
    return buf.getvalue()


def _dump(obj) -> str:
    return json.dumps(obj, sort_keys=True, indent=2) + "\n"


def history_csv(history: CourseHistory) -> str:
    rows = []
    for r in history.rounds:
        d = r.as_dict()
        rows.append([d[c] for c in ROUND_COLUMNS])
    return _csv(ROUND_COLUMNS, rows)


def trials_csv(trials: list[Trial]) -> str:
    axes = sorted({k for t in trials for k in t.point})
    rows = []
    for t in trials:
        led = t.ledger
        rows.append([t.point.get(a) for a in axes]
                    + [t.fidelity, t.val_loss, t.eval_score, led.bytes_up, led.flops, led.wall_seconds])
    return _csv([*axes, *TRIAL_TAIL], rows)


def trials_summary(trials: list[Trial], extra: dict | None = None) -> dict:
    done = [t for t in trials if t.completed]
    best = min(done, key=lambda t: t.val_loss) if done else None
    return {
        "n_trials": len(trials),
        "n_failed": sum(t.failed for t in trials),
        "best": None if best is None else {"point": best.point, "fidelity": best.fidelity,
                                           "val_loss": best.val_loss, "eval_score": best.eval_score},
        "ledger": {
            "bytes_up": sum(t.ledger.bytes_up for t in trials),
            "flops": sum(t.ledger.flops for t in trials),
            "seconds": sum(t.ledger.wall_seconds for t in trials),
        },
        **(extra or {}),
    }


def emit_report(source, out_dir, extra: dict | None = None) -> list[Path]:
    """Write ``rounds.csv``/``trials.csv`` plus ``summary.json`` into ``out_dir``.

    ``source`` is a :class:`CourseHistory` or a list of :class:`Trial`.
    Output bytes depend only on the input.
    """
    out = Path(out_dir)
    if isinstance(source, CourseHistory):
        if not source.rounds:
            raise UsageError("empty history: nothing to report")
        files = {"rounds.csv": history_csv(source), "summary.json": _dump({**source.summary(), **(extra or {})})}
    else:
        trials = list(source or ())
        if not trials:
            raise UsageError("no trials: nothing to report")
        files = {"trials.csv": trials_csv(trials), "summary.json": _dump(trials_summary(trials, extra))}
    out.mkdir(parents=True, exist_ok=True)
    paths = []
    for name, text in files.items():
        p = out / name
        p.write_text(text, encoding="utf-8")
        paths.append(p)
    return paths


def trials_to_json(trials: list[Trial]) -> list[dict]:
    return [{"point": t.point, "fidelity": t.fidelity, "val_loss": t.val_loss, "eval_score": t.eval_score,
             "failed": t.failed, "error": t.error, "ledger": t.ledger.as_dict()} for t in trials]


def trials_from_json(data: list[dict]) -> list[Trial]:
    from fedtune.comm import CostLedger

    out = []
    for d in data:
        led = d.get("ledger") or {}
        out.append(Trial(point=d["point"], fidelity=d["fidelity"], val_loss=d.get("val_loss"),
                         eval_score=d.get("eval_score"), failed=d.get("failed", False), error=d.get("error"),
                         ledger=CostLedger(bytes_up=led.get("bytes_up", 0), bytes_down=led.get("bytes_down", 0),
                                           flops=led.get("flops", 0), wall_seconds=led.get("seconds", 0.0),
                                           param_bytes_resident=led.get("param_bytes_resident", 0))))
    return out
