import math

import numpy as np
import pytest

from fedtune.errors import ConfigError, DataError, UsageError
from fedtune.model import (
    ModelConfig,
    backward,
    central_difference,
    count_flops,
    finite_diff_grad,
    forward_loss,
    init_model,
    matmul_flops,
    next_token_probs,
    param_shapes,
)

from conftest import TINY


def test_init_deterministic():
    a, b = init_model(TINY), init_model(TINY)
    assert a.base.digest() == b.base.digest()
    assert init_model(ModelConfig(seed=1)).base.digest() != init_model(ModelConfig(seed=2)).base.digest()


def test_init_shapes_and_heads():
    cfg = ModelConfig(vocab_size=16, dim=16, n_heads=2, n_blocks=4, seq_len=8)
    m = init_model(cfg)
    assert cfg.head_dim == 8
    assert {k: v.shape for k, v in m.base.items()} == param_shapes(cfg)
    loss, _ = forward_loss(m, None, np.arange(8)[None, :])
    assert math.isfinite(loss)


@pytest.mark.parametrize("bad", [dict(n_blocks=3), dict(dim=10, n_heads=3), dict(seq_len=1)])
def test_invalid_config(bad):
    with pytest.raises(ConfigError):
        init_model(ModelConfig(**bad))


def test_init_loss_near_log_vocab_seed_sweep():
    cfg = ModelConfig()
    toks = np.random.default_rng(0).integers(0, cfg.vocab_size, size=(8, cfg.seq_len))
    for seed in range(10):
        m = init_model(ModelConfig(seed=seed))
        loss, _ = forward_loss(m, None, toks)
        assert abs(loss / math.log(cfg.vocab_size) - 1) < 0.15, (seed, loss)


def test_single_prediction_loss_is_neg_log_prob(tiny_model):
    tok = np.array([[3, 7]])
    loss, _ = forward_loss(tiny_model, None, tok)
    p = next_token_probs(tiny_model, None, tok)[0, 0, 7]
    assert loss == pytest.approx(-math.log(p), rel=1e-12)


def test_softmax_rows_sum_to_one(tiny_model, tiny_batch):
    p = next_token_probs(tiny_model, None, tiny_batch)
    assert np.abs(p.sum(-1) - 1).max() < 1e-9


def test_repeat_forward_bit_identical(tiny_model, tiny_batch):
    assert forward_loss(tiny_model, None, tiny_batch)[0] == forward_loss(tiny_model, None, tiny_batch)[0]


def test_data_errors(tiny_model):
    with pytest.raises(DataError):
        forward_loss(tiny_model, None, np.array([[0, 16]]))
    with pytest.raises(DataError):
        forward_loss(tiny_model, None, np.zeros((1, 9), dtype=int))


def test_full_gradient_check(tiny_batch):
    m = init_model(TINY)
    loss, cache = forward_loss(m, None, tiny_batch)
    g = backward(m, None, cache)
    assert set(g) == set(m.base)
    rng = np.random.default_rng(5)
    for name in ["emb", "head", "blk0.q", "blk1.fc1", "blk3.ln2.g", "ln_f.b", "blk2.o"]:
        for idx in rng.choice(m.base[name].size, size=3, replace=False):
            fd = finite_diff_grad(m, None, tiny_batch, name, int(idx))
            an = g[name].flat[idx]
            assert abs(an - fd) / max(1.0, abs(fd)) < 1e-6, (name, idx)


def test_all_frozen_gives_empty_grads(tiny_model, tiny_batch):
    _, cache = forward_loss(tiny_model, None, tiny_batch)
    assert len(backward(tiny_model, None, cache)) == 0


def test_loss_scale_linear(tiny_batch):
    m = init_model(TINY)
    _, c1 = forward_loss(m, None, tiny_batch)
    _, c2 = forward_loss(m, None, tiny_batch)
    g1, g2 = backward(m, None, c1), backward(m, None, c2, loss_scale=2.0)
    for k in g1:
        np.testing.assert_allclose(g2[k], 2 * g1[k], rtol=1e-12, atol=1e-15)


def test_stale_cache(tiny_batch):
    m = init_model(TINY)
    _, cache = forward_loss(m, None, tiny_batch)
    other = m.with_base(m.base.replace("emb", m.base["emb"] + 1))
    with pytest.raises(UsageError):
        backward(other, None, cache)
    backward(m, None, cache)
    with pytest.raises(UsageError):
        backward(m, None, cache)


def test_central_difference_quadratic_exact():
    fn = lambda th: 3.0 * th[0] ** 2 + 2.0 * th[1]
    assert central_difference(fn, np.array([1.5, 0.0]), 0, 1e-3) == pytest.approx(9.0, abs=1e-9)
    with pytest.raises(UsageError):
        central_difference(fn, np.array([1.5, 0.0]), 0, 0.0)


def test_fd_rejects_frozen_and_h0(tiny_model, tiny_batch):
    with pytest.raises(UsageError):
        finite_diff_grad(tiny_model, None, tiny_batch, "emb", 0)
    with pytest.raises(UsageError):
        finite_diff_grad(init_model(TINY), None, tiny_batch, "emb", 0, h=0)


def test_matmul_flops():
    assert matmul_flops(2, 2, 2) == 16


def test_count_flops_hand_summed():
    cfg = ModelConfig()  # V=32, D=32, L=6, T=32
    B, T, D, F, V = 1, 32, 32, 128, 32
    proj = 4 * (2 * B * T * D * D)
    attn = 2 * (2 * B * T * T * D)
    mlp = 2 * B * T * D * F + 2 * B * T * F * D
    fwd = 6 * (proj + attn + mlp) + 2 * B * T * D * V
    assert count_flops(cfg, None, (1, 32), backward=False) == fwd == 5570560
    assert count_flops(cfg, None, (1, 32)) == 3 * fwd
    assert count_flops(cfg, None, (2, 32)) == 2 * count_flops(cfg, None, (1, 32))
