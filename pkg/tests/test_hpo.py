import itertools
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from fedtune.errors import AnalysisError, ConfigError
from fedtune.hpo import (
    SearchSpace,
    Trial,
    grid_search,
    normalize_scores,
    random_points,
    random_search,
    rank_landscape,
    select_subtask_subset,
    sha_budget,
    sha_schedule,
    spearman,
    successive_halving,
)

LRS = (1e-4, 3e-4, 5e-4, 1e-3, 3e-3, 5e-3)


def analytic_runner(calls=None):
    def run(point, fidelity, resume=None):
        if calls is not None:
            calls.append((dict(point), fidelity, resume))
        loss = (math.log(point["lr"]) - math.log(1e-3)) ** 2 + 0.01 * point.get("scaling", 16) / 16
        # fidelity-dependent noise that never changes the ordering
        return Trial(point=dict(point), fidelity=fidelity, val_loss=loss + 1.0 / fidelity, eval_score=-loss,
                     checkpoint=("ck", tuple(sorted(point.items())), fidelity))

    return run


def test_sha_schedule_and_budget():
    assert sha_schedule(8, 1, 2) == [(8, 1), (4, 2), (2, 4), (1, 8)]
    assert sha_schedule(9, 1, 3) == [(9, 1), (3, 3), (1, 9)]
    assert sha_schedule(5, 2, 2) == [(5, 2), (3, 4), (2, 8), (1, 16)]
    assert sha_schedule(8, 1, 2, max_fidelity=3)[-1] == (1, 3)
    assert sha_budget(8, 1, 2) == (8 + 8 + 8 + 8, 8 + 4 + 4 + 4)
    with pytest.raises(ConfigError):
        sha_schedule(1, 1, 2)


def test_sha_returns_grid_argmin_and_resumes():
    space = SearchSpace.from_dict({"lr": LRS, "scaling": (16, 32)})
    calls = []
    res = successive_halving(space, 12, 1, 2, analytic_runner(calls))
    grid_best = min(space.grid(), key=lambda p: analytic_runner()(p, 1).val_loss)
    assert res.best.point == grid_best == {"lr": 1e-3, "scaling": 16}
    granted, consumed = sha_budget(12, 1, 2)
    assert (res.granted, res.consumed) == (granted, consumed)
    # every later-rung trial resumes from that point's previous checkpoint
    for fid_prev, rung in zip((1, 2, 4), res.rungs[1:]):
        for t in rung:
            call = next(c for c in calls if c[0] == t.point and c[1] == t.fidelity)
            assert call[2] == ("ck", tuple(sorted(t.point.items())), fid_prev)


def test_sha_subsamples_when_n0_small():
    space = SearchSpace.from_dict({"lr": LRS, "scaling": (16, 32)})
    a = successive_halving(space, 4, 1, 2, analytic_runner(), seed=3)
    b = successive_halving(space, 4, 1, 2, analytic_runner(), seed=3)
    assert [t.point for t in a.rungs[0]] == [t.point for t in b.rungs[0]]
    assert len(a.rungs[0]) == 4
    with pytest.raises(ConfigError):
        successive_halving(space, 13, 1, 2, analytic_runner())


def test_failed_trials_are_recorded_not_raised():
    space = SearchSpace.from_dict({"lr": LRS})

    def flaky(point, fidelity, resume=None):
        if point["lr"] == 3e-4:
            raise RuntimeError("diverged")
        return analytic_runner()(point, fidelity)

    trials = grid_search(space, flaky, 2)
    bad = [t for t in trials if t.failed]
    assert len(bad) == 1 and "diverged" in bad[0].error and not bad[0].completed
    res = successive_halving(space, 6, 1, 2, flaky)
    assert res.best.point == {"lr": 1e-3}


def test_grid_order_is_lexicographic():
    space = SearchSpace.from_dict({"scaling": (16, 32), "lr": (1e-3, 1e-4)})
    assert space.names == ("lr", "scaling")
    assert space.grid() == [{"lr": 1e-3, "scaling": 16}, {"lr": 1e-3, "scaling": 32},
                            {"lr": 1e-4, "scaling": 16}, {"lr": 1e-4, "scaling": 32}]


def test_random_search_marginals():
    space = SearchSpace.from_dict({"lr": (1e-4, 1e-2), "scaling": (16, 32, 64, 128)})
    pts = random_points(space, 20000, seed=0)
    assert pts == random_points(space, 20000, seed=0)
    logs = np.log10([p["lr"] for p in pts])
    # log-uniform on [-4, -2]: each half of the log range holds half the mass
    assert abs(np.mean(logs < -3) - 0.5) < 0.02
    for v in (16, 32, 64, 128):
        assert abs(np.mean([p["scaling"] == v for p in pts]) - 0.25) < 0.02
    assert len(random_search(space, 3, 1, analytic_runner(), 1)) == 3


def test_spearman_example():
    # five configs whose val-loss and eval-score ranks agree except for one swap
    trials = [Trial({"i": i}, 1, val_loss=v, eval_score=e)
              for i, (v, e) in enumerate([(1, 5), (2, 3), (3, 4), (4, 2), (5, 1)])]
    land = rank_landscape(trials)
    assert land.rank_by_val == {0: 1.0, 1: 2.0, 2: 3.0, 3: 4.0, 4: 5.0}
    assert land.rank_by_eval == {0: 1.0, 1: 3.0, 2: 2.0, 3: 4.0, 4: 5.0}
    assert land.spearman == pytest.approx(0.9, abs=1e-12)
    assert land.discrepancy == pytest.approx(0.1, abs=1e-12)


def test_spearman_ties_and_errors():
    assert spearman([1, 2, 3], [1, 2, 3]) == pytest.approx(1.0)
    with pytest.raises(AnalysisError):
        spearman([1, 1, 1], [1, 2, 3])
    with pytest.raises(AnalysisError):
        rank_landscape([Trial({}, 1, val_loss=1.0, eval_score=1.0), Trial({}, 1, failed=True)])
    trials = [Trial({"i": i}, 1, val_loss=v, eval_score=e) for i, (v, e) in enumerate([(1, 1), (1, 2), (2, 0)])]
    assert rank_landscape(trials).rank_by_val == {0: 1.5, 1: 1.5, 2: 3.0}


def brute_subset(m, k):
    n = m.shape[1]
    full = m.mean(1)
    best = None
    for s in itertools.combinations(range(n), k):
        d = float(((m[:, list(s)].mean(1) - full) ** 2).sum())
        if best is None or d < best[0] - 1e-15:
            best = (d, s)
    return best[1]


def test_subset_selection_matches_brute_force():
    rng = np.random.default_rng(0)
    for _ in range(50):
        n = int(rng.integers(1, 11))
        k = int(rng.integers(1, n + 1))
        m = rng.normal(size=(int(rng.integers(1, 6)), n))
        assert select_subtask_subset(m, k) == brute_subset(m, k)


def test_subset_selection_ties_and_validation():
    m = np.array([[1.0, 1.0, 1.0, 1.0]])
    assert select_subtask_subset(m, 2) == (0, 1)
    assert select_subtask_subset(m, 4) == (0, 1, 2, 3)
    with pytest.raises(ConfigError):
        select_subtask_subset(m, 0)
    with pytest.raises(ConfigError):
        select_subtask_subset(np.array([[1.0, np.nan]]), 1)


@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(-1e6, 1e6), min_size=2, max_size=20))
def test_normalize_scores(values):
    if min(values) == max(values):
        with pytest.raises(AnalysisError):
            normalize_scores(values)
        return
    out = normalize_scores(values)
    assert min(out) == 0.0 and max(out) == 1.0
    order = np.argsort(values, kind="stable")
    assert all(out[a] <= out[b] for a, b in zip(order, order[1:]))


def test_course_runner_smoke():
    from conftest import tiny_course
    from fedtune.hpo import course_runner

    runner = course_runner(tiny_course(rounds=1))
    t1 = runner({"lr": 0.1}, 1)
    t2 = runner({"lr": 0.1}, 2, t1.checkpoint)
    fresh = runner({"lr": 0.1}, 2)
    assert t1.completed and t2.completed
    assert t2.val_loss == fresh.val_loss and t2.eval_score == fresh.eval_score
    again = runner({"lr": 0.1}, 2, t2.checkpoint)
    assert (again.val_loss, again.eval_score) == (t2.val_loss, t2.eval_score)
    with pytest.raises(ConfigError):
        runner({"lr": 0.1}, 1, t2.checkpoint)
    with pytest.raises(ConfigError):
        runner({"bogus": 1}, 1)
