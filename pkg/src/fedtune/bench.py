"""Synthetic evaluation tasks and the Pass@k estimator."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from fedtune.data import Corpus
from fedtune.errors import AnalysisError, ConfigError, UsageError
from fedtune.model import logits, per_sequence_loss


def pass_at_k(m: int, c: int, k: int) -> float:
    """Unbiased Pass@k: ``1 - C(m-c, k) / C(m, k)`` for ``m`` samples with ``c`` correct."""
    if not (0 <= c <= m and 1 <= k <= m):
        raise UsageError(f"pass_at_k needs 0 <= c <= m and 1 <= k <= m (got m={m}, c={c}, k={k})")
    if m - c < k:
        return 1.0
    return 1.0 - math.comb(m - c, k) / math.comb(m, k)


def mean_pass_at_k(counts, m: int, k: int) -> float:
    counts = list(counts)
    if not counts:
        raise UsageError("no problems to score")
    return float(np.mean([pass_at_k(m, c, k) for c in counts]))


@dataclass(frozen=True)
class EvalTask:
    kind: str
    corpus: Corpus
    domains: tuple[int, ...] = ()
    # constrained-generation settings
    prompt_len: int = 8
    gen_len: int = 8
    samples: int = 5
    threshold: float = -2.0
    prompts_per_domain: int = 10

    def __post_init__(self):
        if self.kind not in ("perplexity", "generation"):
            raise ConfigError(f"unknown eval task kind {self.kind!r}")
        if not self.domains:
            object.__setattr__(self, "domains", tuple(sorted(set(self.corpus.domains.tolist()))))


@dataclass(frozen=True)
class EvalReportRecord:
    scores: dict[int, float]
    aggregate: float
    perplexity: dict[int, float] = field(default_factory=dict)
    mean_perplexity: float | None = None
    normalized: float | None = None

    def as_dict(self) -> dict:
        return {
            "scores": {str(k): v for k, v in self.scores.items()},
            "aggregate": self.aggregate,
            "perplexity": {str(k): v for k, v in self.perplexity.items()},
            "mean_perplexity": self.mean_perplexity,
        }


def aggregate_scores(scores: dict) -> float:
    """Unweighted mean over subtasks, summed in key order."""
    if not scores:
        raise AnalysisError("no subtask scores")
    return float(np.mean([scores[k] for k in sorted(scores)]))


def eval_perplexity(model, adapters, task: EvalTask) -> EvalReportRecord:
    """Per-domain ``exp(mean next-token CE)``; subtask score is ``-log`` perplexity."""
    ppl, scores = {}, {}
    for d in task.domains:
        seqs = task.corpus.tokens[task.corpus.domains == d]
        if len(seqs) == 0:
            raise ConfigError(f"domain {d} has no test sequences")
        ce = float(per_sequence_loss(model, adapters, seqs).mean())
        ppl[d] = math.exp(ce)
        scores[d] = -ce
    return EvalReportRecord(scores=scores, aggregate=aggregate_scores(scores), perplexity=ppl,
                            mean_perplexity=float(np.mean([ppl[d] for d in sorted(ppl)])))


def greedy_decode(model, adapters, prompts: np.ndarray, n_new: int, tie_seed) -> np.ndarray:
    """Append ``n_new`` argmax tokens; exact ties are broken by a seeded draw."""
    rng = np.random.default_rng(tie_seed)
    seqs = np.array(prompts, dtype=np.int64)
    for _ in range(n_new):
        last = logits(model, adapters, seqs)[:, -1, :]
        nxt = np.empty(len(seqs), dtype=np.int64)
        for i, row in enumerate(last):
            best = np.flatnonzero(row == row.max())
            nxt[i] = best[0] if len(best) == 1 else rng.choice(best)
        seqs = np.concatenate([seqs, nxt[:, None]], axis=1)
    return seqs


def continuation_loglik(transitions: np.ndarray, seq: np.ndarray, start: int) -> float:
    """Mean bigram log-likelihood of ``seq[start:]`` given its predecessors."""
    prev, nxt = seq[start - 1:-1], seq[start:]
    with np.errstate(divide="ignore"):
        return float(np.mean(np.log(transitions[prev, nxt])))


@dataclass(frozen=True)
class GenerationResult:
    counts: tuple[int, ...]
    pass_at_1: float
    per_domain: dict[int, float]
    record: EvalReportRecord


def eval_constrained_generation(model, adapters, task: EvalTask) -> GenerationResult:
    """Greedy continuations scored against the prompt's true domain chain.

    Each prompt gets ``task.samples`` decodes that differ only in tie-breaking;
    a decode passes when its mean bigram log-likelihood under the true
    transition matrix exceeds ``task.threshold``. Reports Pass@1.
    """
    corpus = task.corpus
    if corpus.transitions is None:
        raise ConfigError("constrained generation needs the corpus transition matrices")
    total = task.prompt_len + task.gen_len
    if task.prompt_len < 1 or total > model.config.seq_len:
        raise ConfigError("prompt_len + gen_len must fit in seq_len")
    idx, dom = [], []
    for d in task.domains:
        rows = np.flatnonzero(corpus.domains == d)[: task.prompts_per_domain]
        idx.extend(rows.tolist())
        dom.extend([d] * len(rows))
    prompts = corpus.tokens[idx, : task.prompt_len]
    counts = np.zeros(len(idx), dtype=np.int64)
    for v in range(task.samples):
        out = greedy_decode(model, adapters, prompts, task.gen_len, tie_seed=[v, 17])
        for i, d in enumerate(dom):
            if continuation_loglik(corpus.transitions[d], out[i], task.prompt_len) > task.threshold:
                counts[i] += 1
    per_domain = {}
    for d in task.domains:
        sel = [c for c, dd in zip(counts.tolist(), dom) if dd == d]
        per_domain[d] = mean_pass_at_k(sel, task.samples, 1)
    p1 = mean_pass_at_k(counts.tolist(), task.samples, 1)
    record = EvalReportRecord(scores=per_domain, aggregate=p1)
    return GenerationResult(tuple(counts.tolist()), p1, per_domain, record)


def evaluate(model, adapters, task: EvalTask) -> EvalReportRecord:
    if task.kind == "perplexity":
        return eval_perplexity(model, adapters, task)
    return eval_constrained_generation(model, adapters, task).record
