"""Federated hyperparameter search: each trial is a full FL course whose
fidelity is the number of communication rounds."""

from __future__ import annotations

import itertools
import logging
import math
from collections.abc import Callable
from dataclasses import dataclass, field
from fractions import Fraction

import numpy as np
from scipy.stats import rankdata

from fedtune.comm import CostLedger
from fedtune.errors import AnalysisError, ConfigError

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class Axis:
    name: str
    values: tuple
    log: bool = False  # random search draws log-uniformly between min and max

    def __post_init__(self):
        object.__setattr__(self, "values", tuple(self.values))
        if not self.values:
            raise ConfigError(f"search axis {self.name!r} is empty")
        if self.log and min(self.values) <= 0:
            raise ConfigError(f"log axis {self.name!r} needs positive bounds")


@dataclass(frozen=True)
class SearchSpace:
    axes: tuple[Axis, ...]

    def __post_init__(self):
        axes = tuple(sorted(self.axes, key=lambda a: a.name))
        names = [a.name for a in axes]
        if len(set(names)) != len(names):
            raise ConfigError("duplicate search axis")
        if not axes:
            raise ConfigError("search space has no axes")
        object.__setattr__(self, "axes", axes)

    @classmethod
    def from_dict(cls, d: dict, log_axes=("lr",)) -> SearchSpace:
        return cls(tuple(Axis(k, tuple(v), k in log_axes) for k, v in d.items()))

    @property
    def names(self) -> tuple[str, ...]:
        return tuple(a.name for a in self.axes)

    @property
    def size(self) -> int:
        return math.prod(len(a.values) for a in self.axes)

    def grid(self) -> list[dict]:
        """All points, lexicographic in (axis name, candidate position)."""
        return [dict(zip(self.names, combo)) for combo in itertools.product(*(a.values for a in self.axes))]

    def order_key(self, point: dict) -> tuple:
        key = []
        for a in self.axes:
            v = point[a.name]
            key.append(a.values.index(v) if v in a.values else math.inf)
        return (*key, tuple(repr(point[n]) for n in self.names))


DEFAULT_SPACE = {
    "lr": (1e-4, 3e-4, 5e-4, 1e-3, 3e-3, 5e-3),
    "scaling": (16, 32, 64, 128),
    "dropout": (0.0, 0.1),
    "v_tokens": (10, 20, 30),
}


@dataclass
class Trial:
    point: dict
    fidelity: int
    val_loss: float | None = None
    eval_score: float | None = None
    ledger: CostLedger = field(default_factory=CostLedger)
    failed: bool = False
    error: str | None = None
    checkpoint: object = field(default=None, repr=False, compare=False)

    @property
    def completed(self) -> bool:
        return not self.failed and self.val_loss is not None and self.eval_score is not None


# runner(point, fidelity, resume) -> Trial
Runner = Callable[[dict, int, object], Trial]


def _run(runner: Runner, point: dict, fidelity: int, resume=None) -> Trial:
    try:
        return runner(point, fidelity, resume)
    except Exception as exc:  # a failed trial must not stop the search
        log.warning("trial %s failed: %s", point, exc)
        return Trial(point=point, fidelity=fidelity, failed=True, error=f"{type(exc).__name__}: {exc}")


def grid_search(space: SearchSpace, runner: Runner, fidelity: int) -> list[Trial]:
    return [_run(runner, p, fidelity) for p in space.grid()]


def random_points(space: SearchSpace, n: int, seed: int) -> list[dict]:
    if n < 1:
        raise ConfigError("random search needs n >= 1")
    rng = np.random.default_rng([seed, 4242])
    points = []
    for _ in range(n):
        p = {}
        for a in space.axes:
            if a.log and len(a.values) > 1:
                lo, hi = math.log(min(a.values)), math.log(max(a.values))
                p[a.name] = float(math.exp(rng.uniform(lo, hi)))
            else:
                p[a.name] = a.values[int(rng.integers(len(a.values)))]
        points.append(p)
    return points


def random_search(space: SearchSpace, n: int, seed: int, runner: Runner, fidelity: int) -> list[Trial]:
    return [_run(runner, p, fidelity) for p in random_points(space, n, seed)]


# --------------------------------------------------------------------------
# successive halving


def sha_schedule(n0: int, r0: int, eta: int, max_fidelity: int | None = None) -> list[tuple[int, int]]:
    """``(survivors, fidelity)`` per rung: ``ceil(n0 / eta^i)`` at ``r0 * eta^i``."""
    if not (n0 >= eta >= 2) or r0 < 1:
        raise ConfigError("successive halving needs n0 >= eta >= 2 and r0 >= 1")
    rungs, i = [], 0
    while True:
        n = -(-n0 // eta**i)
        r = r0 * eta**i
        if max_fidelity is not None:
            r = min(r, max_fidelity)
        rungs.append((n, r))
        if n == 1:
            return rungs
        i += 1


@dataclass
class ShaResult:
    best: Trial
    rungs: list[list[Trial]]
    granted: int  # sum over rungs of survivors x fidelity
    consumed: int  # rounds actually run, given resumption from the previous rung

    @property
    def trials(self) -> list[Trial]:
        return [t for rung in self.rungs for t in rung]


def sha_budget(n0: int, r0: int, eta: int, max_fidelity: int | None = None) -> tuple[int, int]:
    """Closed-form ``(granted, consumed)`` for :func:`successive_halving`."""
    rungs = sha_schedule(n0, r0, eta, max_fidelity)
    granted = sum(n * r for n, r in rungs)
    consumed = sum(n * (r - (rungs[i - 1][1] if i else 0)) for i, (n, r) in enumerate(rungs))
    return granted, consumed


def successive_halving(space: SearchSpace, n0: int, r0: int, eta: int, runner: Runner, *, seed: int = 0,
                       max_fidelity: int | None = None) -> ShaResult:
    """Classic SHA; survivors resume from their previous rung's checkpoint.

    With ``n0`` equal to the grid size the whole grid enters rung 0; a
    smaller ``n0`` takes a seeded sample of grid points.
    """
    rungs_plan = sha_schedule(n0, r0, eta, max_fidelity)
    grid = space.grid()
    if n0 > len(grid):
        raise ConfigError(f"n0={n0} exceeds the {len(grid)}-point grid")
    if n0 < len(grid):
        rng = np.random.default_rng([seed, 5151])
        idx = sorted(rng.choice(len(grid), size=n0, replace=False).tolist())
        grid = [grid[i] for i in idx]
    alive = [(p, None) for p in grid]
    rungs: list[list[Trial]] = []
    granted = consumed = 0
    prev_r = 0
    for i, (n, r) in enumerate(rungs_plan):
        assert len(alive) == n
        trials = [_run(runner, p, r, ck) for p, ck in alive]
        rungs.append(trials)
        granted += n * r
        consumed += n * (r - prev_r)
        prev_r = r
        keep = rungs_plan[i + 1][0] if i + 1 < len(rungs_plan) else 1
        ranked = sorted(trials, key=lambda t: (t.val_loss if t.completed else math.inf, space.order_key(t.point)))
        alive = [(t.point, t.checkpoint) for t in ranked[:keep]]
    best = sorted(rungs[-1], key=lambda t: (t.val_loss if t.completed else math.inf, space.order_key(t.point)))[0]
    return ShaResult(best=best, rungs=rungs, granted=granted, consumed=consumed)


# --------------------------------------------------------------------------
# analysis


@dataclass(frozen=True)
class Landscape:
    rank_by_val: dict[int, float]
    rank_by_eval: dict[int, float]
    spearman: float
    discrepancy: float


def spearman(a, b) -> float:
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    if a.std() == 0 or b.std() == 0:
        raise AnalysisError("Spearman correlation is undefined for a constant ranking")
    return float(np.corrcoef(a, b)[0, 1])


def rank_landscape(trials: list[Trial]) -> Landscape:
    """Rank by val loss (ascending) and eval score (descending); ties share the average rank.

    Keys of the rank maps are positions in ``trials``.
    """
    idx = [i for i, t in enumerate(trials) if t.completed]
    if len(idx) < 2:
        raise AnalysisError(f"need at least 2 completed trials, have {len(idx)}")
    rv = rankdata([trials[i].val_loss for i in idx], method="average")
    re = rankdata([-trials[i].eval_score for i in idx], method="average")
    rho = spearman(rv, re)
    return Landscape(dict(zip(idx, rv.tolist())), dict(zip(idx, re.tolist())), rho, 1.0 - rho)


def select_subtask_subset(scores, k: int) -> tuple[int, ...]:
    """Subset of ``k`` subtask columns whose per-config mean is L2-closest to the full mean.

    Distances are compared exactly (rational arithmetic on the float inputs),
    so ties are genuine and resolve to the lexicographically smallest set.
    """
    m = np.asarray(scores, dtype=np.float64)
    if m.ndim != 2 or m.size == 0:
        raise ConfigError("score matrix must be a non-empty configs x subtasks matrix")
    if not np.isfinite(m).all():
        raise ConfigError("score matrix must be complete and finite")
    n = m.shape[1]
    if not 1 <= k <= n:
        raise ConfigError(f"k must be in [1, {n}], got {k}")
    fr = [[Fraction(float(x)) for x in row] for row in m]
    full = [sum(row, Fraction(0)) / n for row in fr]
    best, best_d = None, None
    for subset in itertools.combinations(range(n), k):
        d = sum(((sum((row[j] for j in subset), Fraction(0)) / k - f) ** 2 for row, f in zip(fr, full)), Fraction(0))
        if best_d is None or d < best_d:
            best, best_d = subset, d
    return best


def normalize_scores(values) -> list[float]:
    v = np.asarray(values, dtype=np.float64)
    if v.size < 2:
        raise AnalysisError("normalisation needs at least two values")
    lo, hi = v.min(), v.max()
    if lo == hi:
        raise AnalysisError("cannot normalise: all values are equal")
    return ((v - lo) / (hi - lo)).tolist()


# --------------------------------------------------------------------------
# course-backed runner

AXIS_PATHS = {
    "lr": "trainer.lr",
    "scaling": "adapter.alpha",
    "dropout": "adapter.dropout",
    "v_tokens": "adapter.v_tokens",
    "rank": "adapter.rank",
    "local_steps": "trainer.local_steps",
    "lam": "pfl.lam",
}


def course_runner(base_cfg, inputs=None) -> Runner:
    """Runner that maps a point onto ``base_cfg`` and runs a simulated course."""
    from fedtune.runtime import prepare, run_simulated

    inputs = inputs or prepare(base_cfg)

    def runner(point: dict, fidelity: int, resume=None) -> Trial:
        changes = {}
        for k, v in point.items():
            if k not in AXIS_PATHS:
                raise ConfigError(f"no config path for search axis {k!r}")
            changes[AXIS_PATHS[k]] = v
        changes["rounds"] = fidelity
        cfg = base_cfg.override(**changes)
        if resume is not None and resume.next_round > fidelity:
            raise ConfigError(f"checkpoint at round {resume.next_round} is past fidelity {fidelity}")
        if resume is not None and resume.next_round == fidelity:
            # capped fidelity: the previous rung already ran this course to the end
            hist = resume.history
            return Trial(point=dict(point), fidelity=fidelity, val_loss=hist.final.val_loss,
                         eval_score=hist.final.eval_score, ledger=hist.ledger, checkpoint=resume)
        hist = run_simulated(cfg, inputs, resume=resume)
        last = hist.final
        return Trial(point=dict(point), fidelity=fidelity, val_loss=last.val_loss, eval_score=last.eval_score,
                     ledger=hist.ledger, checkpoint=hist.checkpoint)

    return runner
