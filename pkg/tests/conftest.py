import numpy as np
import pytest

from fedtune.config import from_dict
from fedtune.data import gen_corpus
from fedtune.model import ModelConfig, init_model

TINY = ModelConfig(vocab_size=16, dim=8, n_blocks=4, n_heads=2, seq_len=8, seed=3)


@pytest.fixture
def tiny_model():
    return init_model(TINY).frozen()


@pytest.fixture
def tiny_batch():
    return np.random.default_rng(0).integers(0, TINY.vocab_size, size=(2, 6))


@pytest.fixture
def tiny_corpus():
    return gen_corpus(0, 3, 20, TINY.seq_len, TINY.vocab_size)


def tiny_course(**over):
    """Small, fast course config: 3 domains x 20 samples, meta split, 2 local steps."""
    base = {
        "seed": 0,
        "rounds": 2,
        "eval_every": 1,
        "model": {"vocab_size": 16, "dim": 8, "n_blocks": 4, "n_heads": 2, "seq_len": 8, "seed": 3},
        "data": {"n_domains": 3, "samples_per_domain": 20, "test_per_domain": 4},
        "trainer": {"local_steps": 2, "lr": 0.1},
        "adapter": {"kind": "lora", "rank": 2, "alpha": 4.0},
    }
    for path, value in over.items():
        node = base
        *head, last = path.split("__")
        for p in head:
            node = node.setdefault(p, {})
        node[last] = value
    return from_dict(base)


# one verdict line per acceptance criterion, printed in the terminal summary
_VERDICTS: dict[str, tuple[str, str]] = {}


def pytest_runtest_logreport(report):
    if "test_acceptance.py" not in report.nodeid:
        return
    name = report.nodeid.rsplit("::", 1)[-1]
    if not name.startswith("test_A"):
        return
    crit = name[len("test_"):].split("_", 1)[0]
    detail = dict(report.user_properties).get("detail", "")
    if report.when == "call" or report.outcome != "passed":
        # parametrized criteria: any non-pass wins, details accumulate
        verdict = "PASS" if report.outcome == "passed" else report.outcome.upper()
        old_verdict, old_detail = _VERDICTS.get(crit, ("PASS", ""))
        if old_verdict != "PASS":
            verdict = old_verdict
        _VERDICTS[crit] = (verdict, "; ".join(d for d in (old_detail, detail) if d))


def pytest_terminal_summary(terminalreporter):
    if not _VERDICTS:
        return
    terminalreporter.section("acceptance criteria")
    for crit in sorted(_VERDICTS, key=lambda c: int(c[1:])):
        verdict, detail = _VERDICTS[crit]
        terminalreporter.write_line(f"{crit:<4} {verdict:<7} {detail}")
