import numpy as np
import pytest

from fedtune import adapters as A
from fedtune import tree as T
from fedtune.data import ClientDataset
from fedtune.errors import ConfigError, UsageError
from fedtune.model import backward, forward_loss
from fedtune.trainer import (
    HOOK_POINTS,
    GradAccumulation,
    HalfPrecision,
    Recorder,
    Trainer,
    TrainerConfig,
    local_update,
    train_adapter,
)
from fedtune.tree import ParamTree


@pytest.fixture
def setup(tiny_model, tiny_corpus):
    ad = A.build_lora(tiny_model, r=2, alpha=4.0)
    shard = ClientDataset(1, tiny_corpus.tokens[:10], tiny_corpus.tokens[10:12])
    return tiny_model, ad, shard


def test_lr_zero_keeps_adapter(setup):
    m, ad, shard = setup
    res = train_adapter(m, ad, shard, TrainerConfig(local_steps=3, lr=0.0), (0, 1, 0))
    assert res.adapter.params == ad.params and np.isfinite(res.train_loss)


def test_one_step_unrolls_to_sgd(setup):
    m, ad, shard = setup
    fixed = shard.train[:1]
    one = ClientDataset(1, fixed, fixed)
    res = train_adapter(m, ad, one, TrainerConfig(local_steps=1, lr=0.3), (0, 1, 0))
    _, cache = forward_loss(m, ad, fixed, train=True, dropout_key=[0, 1, 0, 0])
    expect = T.sgd_step(ad.params, backward(m, ad, cache), 0.3)
    assert res.adapter.params == expect


def test_deterministic_and_frozen(setup):
    m, ad, shard = setup
    cfg = TrainerConfig(local_steps=4, lr=0.5)
    d0 = m.frozen_digest()
    a = train_adapter(m, ad, shard, cfg, (0, 1, 2))
    b = train_adapter(m, ad, shard, cfg, (0, 1, 2))
    assert a.adapter.params == b.adapter.params
    assert m.frozen_digest() == d0
    assert a.ledger.flops > 0 and a.ledger.wall_seconds > 0


def test_empty_shard(setup):
    m, ad, shard = setup
    empty = ClientDataset(1, shard.train[:0], shard.val)
    with pytest.raises(ConfigError):
        train_adapter(m, ad, empty, TrainerConfig(), (0,))


def test_skeleton_order():
    rec = Recorder()
    tr = Trainer(TrainerConfig(local_steps=2), lambda p, b, k: (0.0, T.zeros_like(p)), lambda s: None, hooks=(rec,))
    tr.fit(ParamTree({"w": [1.0]}), (0,))
    expected = [("on_fit_start", 0)]
    for s in range(2):
        expected += [("on_batch_start", s), ("on_backward_end", s), ("on_step_end", s)]
    expected += [("on_fit_end", 1)]
    assert rec.events == expected
    assert set(p for p, _ in rec.events) == set(HOOK_POINTS)


def test_hooks_run_in_registration_order():
    seen = []

    class H:
        def __init__(self, tag):
            self.tag = tag

        def on_step_end(self, st):
            seen.append(self.tag)

    tr = Trainer(TrainerConfig(local_steps=1), lambda p, b, k: (0.0, T.zeros_like(p)), lambda s: None,
                 hooks=(H("a"), H("b")))
    tr.fit(ParamTree({"w": [1.0]}), (0,))
    assert seen == ["a", "b"]
    with pytest.raises(UsageError):
        tr.register(object())


def quad_objective(target):
    # f(w) = 0.5 * mean over batch rows of ||w - x||^2
    def obj(p, batch, key):
        diff = p["w"][None, :] - batch
        return float(0.5 * (diff**2).sum(1).mean()), ParamTree({"w": diff.mean(0)})

    return obj


def test_grad_accum_equivalence():
    rng = np.random.default_rng(0)
    batches = rng.normal(size=(4, 1, 3))
    w0 = ParamTree({"w": [0.5, -1.0, 2.0]})
    acc = Trainer(TrainerConfig(local_steps=4, lr=0.1, grad_accum=4), quad_objective(None), lambda s: batches[s])
    st = acc.fit(w0, (0,))
    assert st.optimizer_steps == 1
    big = Trainer(TrainerConfig(local_steps=1, lr=0.1), quad_objective(None), lambda s: batches.reshape(4, 3))
    ref = big.fit(w0, (0,))
    assert np.abs(st.params["w"] - ref.params["w"]).max() <= 1e-12


def test_grad_accum_k1_identity_and_bounds(setup):
    m, ad, shard = setup
    a = train_adapter(m, ad, shard, TrainerConfig(local_steps=3, lr=0.2, grad_accum=1), (0, 1, 0))
    b = train_adapter(m, ad, shard, TrainerConfig(local_steps=3, lr=0.2), (0, 1, 0), hooks=(GradAccumulation(1),))
    assert a.adapter.params == b.adapter.params
    with pytest.raises(ConfigError):
        TrainerConfig(local_steps=3, grad_accum=4).validate()


def test_half_precision_freezes_subulp_update():
    step = 2.0**-13
    tr = Trainer(TrainerConfig(local_steps=1, lr=1.0, half_precision=True),
                 lambda p, b, k: (0.0, ParamTree({"w": [step]})), lambda s: None)
    assert tr.fit(ParamTree({"w": [1.0]}), (0,)).params["w"][0] == 1.0
    off = Trainer(TrainerConfig(local_steps=1, lr=1.0), lambda p, b, k: (0.0, ParamTree({"w": [step]})),
                  lambda s: None)
    assert off.fit(ParamTree({"w": [1.0]}), (0,)).params["w"][0] == 1.0 - step


def test_half_precision_twice_is_idempotent(setup):
    m, ad, shard = setup
    cfg = TrainerConfig(local_steps=3, lr=0.5, half_precision=True)
    a = train_adapter(m, ad, shard, cfg, (0, 1, 0))
    b = train_adapter(m, ad, shard, cfg, (0, 1, 0), hooks=(HalfPrecision(),))
    assert a.adapter.params == b.adapter.params


def test_noop_hook_changes_nothing(setup):
    m, ad, shard = setup
    cfg = TrainerConfig(local_steps=3, lr=0.5)
    a = train_adapter(m, ad, shard, cfg, (0, 1, 0))
    b = train_adapter(m, ad, shard, cfg, (0, 1, 0), hooks=(Recorder(),))
    assert a.adapter.params == b.adapter.params


def test_local_update_keys_by_client(setup):
    m, ad, shard = setup

    class C:
        model, adapter, id = m, ad, 7

    C.shard = shard
    res = local_update(C, TrainerConfig(local_steps=2, lr=0.5), (0, 3))
    assert res.adapter.params == train_adapter(m, ad, shard, TrainerConfig(local_steps=2, lr=0.5), (0, 7, 3)).adapter.params
