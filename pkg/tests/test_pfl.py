import numpy as np
import pytest

from fedtune import adapters as A
from fedtune import tree as T
from fedtune.data import ClientDataset
from fedtune.model import backward, forward_loss
from fedtune.pfl import PFedMeHook, PflConfig, eval_personalized, outer_update, pfedme_local, prox_grad
from fedtune.trainer import Trainer, TrainerConfig
from fedtune.tree import ParamTree


def zero_objective(p, batch, key):
    return 0.0, T.zeros_like(p)


def test_prox_grad_tiny_lambda():
    g = ParamTree({"w": [1.0, -2.0]})
    th = ParamTree({"w": [3.0, 4.0]})
    w = ParamTree({"w": [0.0, 1.0]})
    out = prox_grad(g, th, w, 1e-12)
    assert np.allclose(out["w"], g["w"], rtol=1e-9, atol=0)


def test_zero_loss_geometric_contraction():
    lam, lr, K = 2.0, 0.1, 5
    w = ParamTree({"w": [1.0, -1.0]})
    theta0 = ParamTree({"w": [3.0, 2.0]})
    hook = PFedMeHook(w, lam, K, eta=0.0)
    tr = Trainer(TrainerConfig(local_steps=K, lr=lr), zero_objective, lambda s: None, hooks=(hook,))
    out = tr.fit(theta0, (0,))
    expect = w["w"] + (theta0["w"] - w["w"]) * (1 - lr * lam) ** K
    # same recurrence evaluated step by step
    th = theta0["w"].copy()
    for _ in range(K):
        th = th - lr * lam * (th - w["w"])
    assert np.array_equal(out.params["w"], th)
    assert np.allclose(th, expect, rtol=1e-14)


def test_outer_update_frozen_below_half_ulp():
    w = ParamTree({"w": [1.0]})
    theta = ParamTree({"w": [1.0 - 2.0**-11]})
    eta, lam = 2.0**-4, 1.0  # eta * lam * |w - theta| = 2^-15, far below half an ulp at 1.0
    hook = PFedMeHook(w, lam, 1, eta, half=True)
    control = PFedMeHook(w, lam, 1, eta, half=False)

    class St:
        step = 0
        params = theta
        warnings = []

    hook.on_step_end(St)
    control.on_step_end(St)
    assert hook.w["w"][0] == 1.0
    assert control.w["w"][0] == outer_update(w, theta, eta, lam)["w"][0] != 1.0


def test_prox_gradient_finite_difference(tiny_model, tiny_batch):
    ad = A.build_lora(tiny_model, r=2, alpha=4.0)
    rng = np.random.default_rng(0)
    ad = ad.with_params(ad.params.map(lambda v: v + 0.1 * rng.normal(size=v.shape)))
    w = ad.params.map(lambda v: v + 0.05 * rng.normal(size=v.shape))
    lam = 3.0
    _, cache = forward_loss(tiny_model, ad, tiny_batch)
    g = prox_grad(backward(tiny_model, ad, cache), ad.params, w, lam)
    for name in list(g)[:4]:
        for idx in range(3):
            def h(v, name=name):
                p = ad.params.replace(name, v)
                f = forward_loss(tiny_model, ad.with_params(p), tiny_batch)[0]
                return f + lam / 2 * sum(((p[k] - w[k]) ** 2).sum() for k in p)

            th = ad.params[name].copy()
            up, dn = th.copy(), th.copy()
            up.flat[idx] += 1e-5
            dn.flat[idx] -= 1e-5
            fd = (h(up) - h(dn)) / 2e-5
            assert abs(g[name].flat[idx] - fd) / max(1, abs(fd)) < 1e-4


def test_inner_loop_decreases_h_on_convex_quadratic():
    target = np.array([2.0, -1.0])
    lam = 5.0

    def f(p, batch, key):
        d = p["w"] - target
        return float(0.5 * d @ d), ParamTree({"w": d})

    w = ParamTree({"w": [0.0, 0.0]})
    hs = []

    class Track:
        def on_step_end(self, st):
            d = st.params["w"] - target
            hs.append(0.5 * d @ d + lam / 2 * ((st.params["w"] - w["w"]) ** 2).sum())

    tr = Trainer(TrainerConfig(local_steps=20, lr=0.05), f, lambda s: None, hooks=(PFedMeHook(w, lam, 20, 0.0), Track()))
    tr.fit(ParamTree({"w": [3.0, 3.0]}), (0,))
    assert all(b <= a for a, b in zip(hs, hs[1:]))


def test_pfedme_local_runs(tiny_model, tiny_corpus):
    ad = A.build_lora(tiny_model, r=2, alpha=4.0)
    shard = ClientDataset(1, tiny_corpus.tokens[:10], tiny_corpus.tokens[10:12])
    res = pfedme_local(tiny_model, ad, shard, ad.params, TrainerConfig(local_steps=2, lr=0.1),
                       PflConfig(lam=2.0, inner_steps=3), (0, 1, 0))
    assert res.local.ledger.flops > 0
    assert res.w.congruent(ad.params) and res.personal.params.congruent(ad.params)
    assert res.w != ad.params


def test_eval_personalized():
    assert eval_personalized([0.2, 0.4]) == pytest.approx(0.3)
    assert eval_personalized([0.4, 0.2, 0.9]) == eval_personalized([0.9, 0.4, 0.2])
    assert eval_personalized([0.7, 0.7]) == 0.7
