import itertools
import math

import numpy as np
import pytest

from fedtune.bench import (
    EvalTask,
    aggregate_scores,
    continuation_loglik,
    eval_constrained_generation,
    eval_perplexity,
    greedy_decode,
    mean_pass_at_k,
    pass_at_k,
)
from fedtune.errors import AnalysisError, ConfigError, UsageError


def brute_pass_at_k(m, c, k):
    # fraction of k-subsets of m samples (first c correct) that contain a correct one
    subsets = list(itertools.combinations(range(m), k))
    return sum(any(i < c for i in s) for s in subsets) / len(subsets)


def test_pass_at_k_examples():
    assert pass_at_k(5, 2, 1) == pytest.approx(0.4, abs=1e-12)
    assert pass_at_k(5, 0, 3) == 0.0
    assert pass_at_k(5, 5, 1) == 1.0
    assert pass_at_k(4, 2, 3) == 1.0


def test_pass_at_k_matches_enumeration():
    for m in range(1, 9):
        for c in range(m + 1):
            for k in range(1, m + 1):
                assert abs(pass_at_k(m, c, k) - brute_pass_at_k(m, c, k)) <= 1e-12


def test_pass_at_k_domain():
    for bad in [(5, 6, 1), (5, -1, 1), (5, 2, 0), (5, 2, 6)]:
        with pytest.raises(UsageError):
            pass_at_k(*bad)
    with pytest.raises(UsageError):
        mean_pass_at_k([], 5, 1)


def test_aggregate_scores():
    assert aggregate_scores({2: 1.0, 0: 3.0}) == 2.0
    with pytest.raises(AnalysisError):
        aggregate_scores({})


def test_uniform_model_has_vocab_perplexity(tiny_model, tiny_corpus):
    base = tiny_model.base.replace("head", np.zeros_like(tiny_model.base["head"]))
    model = tiny_model.with_base(base)
    rec = eval_perplexity(model, None, EvalTask("perplexity", tiny_corpus))
    assert set(rec.perplexity) == {0, 1, 2}
    for d, p in rec.perplexity.items():
        assert p == pytest.approx(16.0, rel=1e-12)
        assert rec.scores[d] == pytest.approx(-math.log(16.0), rel=1e-12)
    assert rec.mean_perplexity == pytest.approx(16.0, rel=1e-12)


def test_task_validation(tiny_corpus):
    with pytest.raises(ConfigError):
        EvalTask("bleu", tiny_corpus)
    with pytest.raises(ConfigError):
        eval_perplexity(None, None, EvalTask("perplexity", tiny_corpus, domains=(7,)))


def _gen_task(corpus, threshold):
    return EvalTask("generation", corpus, prompt_len=3, gen_len=4, samples=3, threshold=threshold,
                    prompts_per_domain=2)


def test_generation_counts_match_recount(tiny_model, tiny_corpus):
    task = _gen_task(tiny_corpus, -2.5)
    res = eval_constrained_generation(tiny_model, None, task)
    idx = [i for d in task.domains for i in np.flatnonzero(tiny_corpus.domains == d)[:2]]
    dom = tiny_corpus.domains[idx]
    prompts = tiny_corpus.tokens[idx, :3]
    counts = [0] * len(idx)
    for v in range(3):
        out = greedy_decode(tiny_model, None, prompts, 4, tie_seed=[v, 17])
        for i in range(len(idx)):
            seq = out[i]
            ll = np.mean([math.log(tiny_corpus.transitions[dom[i]][seq[t - 1], seq[t]]) for t in range(3, 7)])
            counts[i] += ll > -2.5
    assert list(res.counts) == counts
    assert res.pass_at_1 == pytest.approx(np.mean([c / 3 for c in counts]), abs=1e-12)


def test_generation_threshold_extremes(tiny_model, tiny_corpus):
    assert eval_constrained_generation(tiny_model, None, _gen_task(tiny_corpus, math.inf)).pass_at_1 == 0.0
    assert eval_constrained_generation(tiny_model, None, _gen_task(tiny_corpus, -1e9)).pass_at_1 == 1.0


def test_continuation_loglik():
    t = np.full((2, 2), 0.5)
    assert continuation_loglik(t, np.array([0, 1, 0, 1]), 1) == pytest.approx(math.log(0.5))


def test_generation_needs_room(tiny_model, tiny_corpus):
    with pytest.raises(ConfigError):
        eval_constrained_generation(tiny_model, None, EvalTask("generation", tiny_corpus, prompt_len=6, gen_len=6))


def test_pass_at_k_monotone():
    for m in range(1, 9):
        for c in range(m + 1):
            ks = [pass_at_k(m, c, k) for k in range(1, m + 1)]
            assert all(a <= b for a, b in zip(ks, ks[1:]))
        for k in range(1, m + 1):
            cs = [pass_at_k(m, c, k) for c in range(m + 1)]
            assert all(a <= b for a, b in zip(cs, cs[1:]))


def test_aggregate_permutation_invariant_and_single_domain(tiny_model, tiny_corpus):
    scores = {0: 0.1, 1: 0.7, 2: 0.3}
    assert aggregate_scores(scores) == aggregate_scores(dict(reversed(list(scores.items()))))
    rec = eval_perplexity(tiny_model, None, EvalTask("perplexity", tiny_corpus, domains=(1,)))
    assert rec.aggregate == rec.scores[1]
    again = eval_perplexity(tiny_model, None, EvalTask("perplexity", tiny_corpus, domains=(1,)))
    assert again == rec


def test_pretraining_domain_has_lower_perplexity():
    from conftest import TINY
    from fedtune.data import gen_corpus
    from fedtune.model import init_model
    from fedtune.trainer import pretrain

    seen = gen_corpus(11, 1, 60, TINY.seq_len, TINY.vocab_size)
    model = pretrain(init_model(TINY), seen, steps=150, lr=0.5, batch_size=8).frozen()
    on = eval_perplexity(model, None, EvalTask("perplexity", gen_corpus(11, 1, 20, 8, 16, sample_seed=5)))
    off = eval_perplexity(model, None, EvalTask("perplexity", gen_corpus(12, 1, 20, 8, 16, sample_seed=5)))
    assert on.mean_perplexity < off.mean_perplexity
