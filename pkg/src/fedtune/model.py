"""A from-scratch micro transformer language model with hand-written gradients.

Layout: token embedding -> pre-LN transformer blocks (causal multi-head
attention + GELU MLP) -> final layer norm -> output head. There is no
positional embedding; the causal mask is the only order signal, which is
enough for the Markov-chain tasks this package trains on.

Linear weights are stored ``(out, in)`` and applied as ``x @ W.T``.

Adapters are consumed by duck typing (``spec.kind``, ``params``) so this
module does not depend on :mod:`fedtune.adapters`.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np

from fedtune.errors import ConfigError, DataError, UsageError
from fedtune.tree import ParamTree

LN_EPS = 1e-5
MLP_RATIO = 4
_GELU_C = math.sqrt(2.0 / math.pi)

LINEAR_SUFFIXES = ("q", "k", "v", "o", "fc1", "fc2")


@dataclass(frozen=True)
class ModelConfig:
    vocab_size: int = 32
    dim: int = 32
    n_blocks: int = 6
    n_heads: int = 2
    seq_len: int = 32
    seed: int = 0

    def validate(self) -> ModelConfig:
        if self.vocab_size < 2:
            raise ConfigError("vocab_size must be >= 2")
        if self.dim < 1 or self.n_heads < 1 or self.dim % self.n_heads:
            raise ConfigError(f"dim={self.dim} must be a positive multiple of n_heads={self.n_heads}")
        if self.n_blocks < 4:
            raise ConfigError(f"n_blocks={self.n_blocks}: need >= 4 (front + middle + back)")
        if self.seq_len < 2:
            raise ConfigError("seq_len must be >= 2")
        if not 0 <= self.seed < 2**64:
            raise ConfigError("seed must be an unsigned 64-bit integer")
        return self

    @property
    def head_dim(self) -> int:
        return self.dim // self.n_heads

    @property
    def hidden(self) -> int:
        return MLP_RATIO * self.dim


@dataclass(frozen=True)
class MicroLM:
    config: ModelConfig
    base: ParamTree
    frozen_mask: frozenset[str] = frozenset()
    # Blocks executed in order; the FedOT emulator runs a subset of them.
    block_order: tuple[int, ...] = ()

    def __post_init__(self):
        if not self.block_order:
            object.__setattr__(self, "block_order", tuple(range(self.config.n_blocks)))

    def frozen(self) -> MicroLM:
        return replace(self, frozen_mask=frozenset(self.base))

    def unfrozen(self) -> MicroLM:
        return replace(self, frozen_mask=frozenset())

    def with_base(self, base: ParamTree) -> MicroLM:
        return replace(self, base=base)

    @property
    def trainable_names(self) -> list[str]:
        return [n for n in self.base if n not in self.frozen_mask]

    def frozen_digest(self) -> str:
        return self.base.subset(n for n in self.base if n in self.frozen_mask).digest()


def block_param_names(i: int) -> list[str]:
    p = f"blk{i}."
    return [p + s for s in ("ln1.g", "ln1.b", "q", "k", "v", "o", "ln2.g", "ln2.b", "fc1", "fc2")]


HEAD_NAMES = ("emb", "head", "ln_f.b", "ln_f.g")


def param_shapes(config: ModelConfig) -> dict[str, tuple[int, ...]]:
    d, f, v = config.dim, config.hidden, config.vocab_size
    shapes: dict[str, tuple[int, ...]] = {"emb": (v, d), "head": (v, d), "ln_f.g": (d,), "ln_f.b": (d,)}
    for i in range(config.n_blocks):
        p = f"blk{i}."
        shapes.update({p + "ln1.g": (d,), p + "ln1.b": (d,), p + "ln2.g": (d,), p + "ln2.b": (d,)})
        shapes.update({p + s: (d, d) for s in ("q", "k", "v", "o")})
        shapes[p + "fc1"] = (f, d)
        shapes[p + "fc2"] = (d, f)
    return shapes


def init_model(config: ModelConfig) -> MicroLM:
    """Seeded initialisation; weight matrices ~ N(0, 1/dim), layer norms at identity.

    The output head is the exception: its std is ``1/dim`` (a fan-in scaled
    readout), which keeps initial logits near zero so the untrained loss sits
    at ``ln(vocab_size)``. Draws are rounded to float32 so that checkpoints
    and f32 broadcasts of a fresh model are lossless.
    """
    config.validate()
    rng = np.random.default_rng(config.seed)
    std = 1.0 / math.sqrt(config.dim)
    entries = {}
    for name, shape in sorted(param_shapes(config).items()):
        if name.endswith(".g"):
            entries[name] = np.ones(shape)
        elif name.endswith(".b"):
            entries[name] = np.zeros(shape)
        else:
            s = std * std if name == "head" else std
            entries[name] = rng.normal(0.0, s, size=shape).astype(np.float32).astype(np.float64)
    return MicroLM(config=config, base=ParamTree(entries))


# --------------------------------------------------------------------------
# primitive layers


def _ln_fwd(x, g, b):
    mu = x.mean(-1, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + LN_EPS)
    xhat = xc * inv
    return xhat * g + b, (xhat, inv)


def _ln_bwd(dy, g, cache):
    xhat, inv = cache
    dxhat = dy * g
    d = xhat.shape[-1]
    dx = inv / d * (d * dxhat - dxhat.sum(-1, keepdims=True) - xhat * (dxhat * xhat).sum(-1, keepdims=True))
    dg = (dy * xhat).reshape(-1, d).sum(0)
    db = dy.reshape(-1, d).sum(0)
    return dx, dg, db


def _gelu_fwd(x):
    t = np.tanh(_GELU_C * (x + 0.044715 * x**3))
    return 0.5 * x * (1.0 + t), t


def _gelu_bwd(dy, x, t):
    dt = (1.0 - t * t) * _GELU_C * (1.0 + 3 * 0.044715 * x * x)
    return dy * (0.5 * (1.0 + t) + 0.5 * x * dt)


def softmax(z: np.ndarray, axis: int = -1) -> np.ndarray:
    z = z - z.max(axis=axis, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=axis, keepdims=True)


def _flat(a: np.ndarray) -> np.ndarray:
    return a.reshape(-1, a.shape[-1])


# --------------------------------------------------------------------------
# forward / backward


@dataclass
class _Ctx:
    """Resolved view of (model, adapters) for one forward pass."""

    params: dict[str, np.ndarray]
    trainable: frozenset[str]
    kind: str | None
    lora_targets: frozenset[str] = frozenset()
    lora_scale: float = 0.0
    dropout: float = 0.0
    n_virtual: int = 0
    rng: np.random.Generator | None = None


def _context(model: MicroLM, adapters, train: bool, dropout_key) -> _Ctx:
    params = dict(model.base.items())
    trainable = set(model.trainable_names)
    if adapters is None:
        return _Ctx(params=params, trainable=frozenset(trainable), kind=None)
    spec = adapters.spec
    params.update(adapters.params.items())
    trainable.update(adapters.params)
    ctx = _Ctx(params=params, trainable=frozenset(trainable), kind=spec.kind)
    if spec.kind == "lora":
        ctx.lora_targets = frozenset(spec.targets)
        ctx.lora_scale = spec.alpha / spec.rank
        ctx.dropout = spec.dropout if train else 0.0
        if ctx.dropout > 0:
            ctx.rng = np.random.default_rng(dropout_key if dropout_key is not None else 0)
    elif spec.kind in ("prompt", "ptuning"):
        ctx.n_virtual = spec.v_tokens
    return ctx


def _lin_fwd(ctx: _Ctx, name: str, x: np.ndarray):
    y = x @ ctx.params[name].T
    cache = {"x": x}
    if name in ctx.lora_targets:
        a, b = ctx.params[name + ".A"], ctx.params[name + ".B"]
        xa = x
        if ctx.dropout > 0:
            mask = (ctx.rng.random(x.shape) >= ctx.dropout) / (1.0 - ctx.dropout)
            xa = x * mask
            cache["mask"] = mask
        u = xa @ a.T
        y = y + ctx.lora_scale * (u @ b.T)
        cache["xa"], cache["u"] = xa, u
    return y, cache


def _lin_bwd(ctx: _Ctx, name: str, dy: np.ndarray, cache, grads) -> np.ndarray:
    dx = dy @ ctx.params[name]
    if name in ctx.trainable:
        grads[name] = _flat(dy).T @ _flat(cache["x"])
    if name in ctx.lora_targets:
        a, b = ctx.params[name + ".A"], ctx.params[name + ".B"]
        s = ctx.lora_scale
        dyb = dy @ b
        grads[name + ".B"] = s * (_flat(dy).T @ _flat(cache["u"]))
        grads[name + ".A"] = s * (_flat(dyb).T @ _flat(cache["xa"]))
        dxa = s * (dyb @ a)
        if "mask" in cache:
            dxa = dxa * cache["mask"]
        dx = dx + dxa
    return dx


def _attn_fwd(ctx: _Ctx, cfg: ModelConfig, p: str, a: np.ndarray):
    bsz, t, d = a.shape
    h, dh = cfg.n_heads, cfg.head_dim
    q, cq = _lin_fwd(ctx, p + "q", a)
    k, ck = _lin_fwd(ctx, p + "k", a)
    v, cv = _lin_fwd(ctx, p + "v", a)
    split = lambda z: z.reshape(bsz, t, h, dh).transpose(0, 2, 1, 3)
    qh, kh, vh = split(q), split(k), split(v)
    s = (qh @ kh.transpose(0, 1, 3, 2)) / math.sqrt(dh)
    causal = np.tril(np.ones((t, t), dtype=bool))
    s = np.where(causal, s, -np.inf)
    prob = softmax(s)
    oh = prob @ vh
    o = oh.transpose(0, 2, 1, 3).reshape(bsz, t, d)
    y, co = _lin_fwd(ctx, p + "o", o)
    return y, (cq, ck, cv, co, qh, kh, vh, prob)


def _attn_bwd(ctx: _Ctx, cfg: ModelConfig, p: str, dy, cache, grads):
    cq, ck, cv, co, qh, kh, vh, prob = cache
    bsz, h, t, dh = qh.shape
    do = _lin_bwd(ctx, p + "o", dy, co, grads)
    doh = do.reshape(bsz, t, h, dh).transpose(0, 2, 1, 3)
    dprob = doh @ vh.transpose(0, 1, 3, 2)
    dvh = prob.transpose(0, 1, 3, 2) @ doh
    ds = prob * (dprob - (dprob * prob).sum(-1, keepdims=True)) / math.sqrt(dh)
    dqh = ds @ kh
    dkh = ds.transpose(0, 1, 3, 2) @ qh
    merge = lambda z: z.transpose(0, 2, 1, 3).reshape(bsz, t, h * dh)
    da = _lin_bwd(ctx, p + "q", merge(dqh), cq, grads)
    da = da + _lin_bwd(ctx, p + "k", merge(dkh), ck, grads)
    da = da + _lin_bwd(ctx, p + "v", merge(dvh), cv, grads)
    return da


def _block_fwd(ctx: _Ctx, cfg: ModelConfig, i: int, x: np.ndarray):
    p = f"blk{i}."
    P = ctx.params
    a1, cln1 = _ln_fwd(x, P[p + "ln1.g"], P[p + "ln1.b"])
    att, catt = _attn_fwd(ctx, cfg, p, a1)
    x1 = x + att
    a2, cln2 = _ln_fwd(x1, P[p + "ln2.g"], P[p + "ln2.b"])
    hpre, c1 = _lin_fwd(ctx, p + "fc1", a2)
    g, tg = _gelu_fwd(hpre)
    m, c2 = _lin_fwd(ctx, p + "fc2", g)
    return x1 + m, (cln1, catt, cln2, c1, hpre, tg, c2)


def _block_bwd(ctx: _Ctx, cfg: ModelConfig, i: int, dx2, cache, grads):
    p = f"blk{i}."
    P = ctx.params
    cln1, catt, cln2, c1, hpre, tg, c2 = cache
    dg = _lin_bwd(ctx, p + "fc2", dx2, c2, grads)
    dh = _gelu_bwd(dg, hpre, tg)
    da2 = _lin_bwd(ctx, p + "fc1", dh, c1, grads)
    dx1_ln, dg2, db2 = _ln_bwd(da2, P[p + "ln2.g"], cln2)
    _put(ctx, grads, p + "ln2.g", dg2)
    _put(ctx, grads, p + "ln2.b", db2)
    dx1 = dx2 + dx1_ln
    da1 = _attn_bwd(ctx, cfg, p, dx1, catt, grads)
    dx_ln, dg1, db1 = _ln_bwd(da1, P[p + "ln1.g"], cln1)
    _put(ctx, grads, p + "ln1.g", dg1)
    _put(ctx, grads, p + "ln1.b", db1)
    return dx1 + dx_ln


def _put(ctx: _Ctx, grads, name, value):
    if name in ctx.trainable:
        grads[name] = value


def _virtual_fwd(ctx: _Ctx):
    P = ctx.params
    if ctx.kind == "prompt":
        return P["prompt.emb"], None
    seed = P["ptuning.seed"]
    z = seed @ P["ptuning.mlp1.w"].T + P["ptuning.mlp1.b"]
    hid = np.tanh(z)
    out = hid @ P["ptuning.mlp2.w"].T + P["ptuning.mlp2.b"]
    return out, hid


def _virtual_bwd(ctx: _Ctx, dv, hid, grads):
    P = ctx.params
    if ctx.kind == "prompt":
        grads["prompt.emb"] = dv
        return
    grads["ptuning.mlp2.w"] = dv.T @ hid
    grads["ptuning.mlp2.b"] = dv.sum(0)
    dz = (dv @ P["ptuning.mlp2.w"]) * (1.0 - hid * hid)
    grads["ptuning.mlp1.w"] = dz.T @ P["ptuning.seed"]
    grads["ptuning.mlp1.b"] = dz.sum(0)
    grads["ptuning.seed"] = dz @ P["ptuning.mlp1.w"]


@dataclass
class ForwardCache:
    model_base: ParamTree
    adapter_params: ParamTree | None
    tokens: np.ndarray
    ctx: _Ctx
    logits: np.ndarray
    probs: np.ndarray
    emb_lora: tuple | None
    virtual_hidden: np.ndarray | None
    blocks: list = field(default_factory=list)
    ln_f: tuple | None = None
    head_cache: dict | None = None
    consumed: bool = False


def _check_tokens(model: MicroLM, tokens) -> np.ndarray:
    tokens = np.asarray(tokens)
    if tokens.ndim == 1:
        tokens = tokens[None, :]
    if tokens.ndim != 2 or tokens.shape[1] < 1:
        raise DataError(f"token batch must be a (batch, length) matrix, got shape {tokens.shape}")
    if not np.issubdtype(tokens.dtype, np.integer):
        raise DataError("token ids must be integers")
    if tokens.shape[1] > model.config.seq_len:
        raise DataError(f"sequence length {tokens.shape[1]} exceeds seq_len={model.config.seq_len}")
    if tokens.min() < 0 or tokens.max() >= model.config.vocab_size:
        raise DataError("token id out of range")
    return tokens


def _forward(model: MicroLM, adapters, tokens, *, train: bool, dropout_key):
    tokens = _check_tokens(model, tokens)
    cfg = model.config
    ctx = _context(model, adapters, train, dropout_key)
    P = ctx.params
    x = P["emb"][tokens]
    emb_lora = None
    if "emb" in ctx.lora_targets:
        a, b = P["emb.A"], P["emb.B"]
        brow = b[tokens]
        x = x + ctx.lora_scale * (brow @ a)
        emb_lora = (brow,)
    hid = None
    nv = ctx.n_virtual
    if nv:
        virt, hid = _virtual_fwd(ctx)
        x = np.concatenate([np.broadcast_to(virt, (tokens.shape[0],) + virt.shape), x], axis=1)
    caches = []
    for i in model.block_order:
        x, c = _block_fwd(ctx, cfg, i, x)
        caches.append(c)
    hf, cln = _ln_fwd(x[:, nv:, :], P["ln_f.g"], P["ln_f.b"])
    logits, chead = _lin_fwd(ctx, "head", hf)
    probs = softmax(logits)
    cache = ForwardCache(
        model_base=model.base,
        adapter_params=None if adapters is None else adapters.params,
        tokens=tokens,
        ctx=ctx,
        logits=logits,
        probs=probs,
        emb_lora=emb_lora,
        virtual_hidden=hid,
        blocks=caches,
        ln_f=cln,
        head_cache=chead,
    )
    return cache


def logits(model: MicroLM, adapters, tokens) -> np.ndarray:
    """Next-token logits for every real position, shape (batch, length, vocab)."""
    return _forward(model, adapters, tokens, train=False, dropout_key=None).logits


def next_token_probs(model: MicroLM, adapters, tokens) -> np.ndarray:
    return _forward(model, adapters, tokens, train=False, dropout_key=None).probs


def per_sequence_loss(model: MicroLM, adapters, tokens) -> np.ndarray:
    """Mean next-token cross-entropy of each row of ``tokens`` (eval mode)."""
    cache = _forward(model, adapters, tokens, train=False, dropout_key=None)
    return _token_nll(cache).mean(axis=1)


def _token_nll(cache: ForwardCache) -> np.ndarray:
    tok = cache.tokens
    if tok.shape[1] < 2:
        raise DataError("sequences need >= 2 tokens to predict anything")
    lp = cache.logits[:, :-1, :]
    lp = lp - lp.max(-1, keepdims=True)
    lse = np.log(np.exp(lp).sum(-1))
    tgt = np.take_along_axis(lp, tok[:, 1:, None], axis=-1)[..., 0]
    return lse - tgt


def forward_loss(model: MicroLM, adapters, batch, *, train: bool = False, dropout_key=None):
    """Mean next-token cross-entropy over every predicted position of ``batch``.

    Returns ``(loss, cache)``; the cache feeds :func:`backward`. LoRA dropout
    is active only when ``train`` is set and is driven by ``dropout_key``.
    """
    cache = _forward(model, adapters, batch, train=train, dropout_key=dropout_key)
    loss = float(_token_nll(cache).mean())
    if not math.isfinite(loss):
        raise FloatingPointError("non-finite loss")
    return loss, cache


def backward(model: MicroLM, adapters, cache: ForwardCache, loss_scale: float = 1.0) -> ParamTree:
    """Gradients of ``loss_scale * loss`` w.r.t. every trainable name."""
    if cache.model_base is not model.base or cache.adapter_params is not (
        None if adapters is None else adapters.params
    ):
        raise UsageError("stale cache: produced by a different model/adapter state")
    if cache.consumed:
        raise UsageError("stale cache: already consumed by backward")
    cache.consumed = True
    ctx = cache.ctx
    grads: dict[str, np.ndarray] = {}
    if not ctx.trainable:
        return ParamTree()
    tok = cache.tokens
    bsz, t = tok.shape
    n_pred = bsz * (t - 1)
    dlogits = cache.probs.copy()
    dlogits[:, -1, :] = 0.0
    rows = np.arange(bsz)[:, None]
    cols = np.arange(t - 1)[None, :]
    dlogits[rows, cols, tok[:, 1:]] -= 1.0
    dlogits *= loss_scale / n_pred

    dhf = _lin_bwd(ctx, "head", dlogits, cache.head_cache, grads)
    dxr, dgf, dbf = _ln_bwd(dhf, ctx.params["ln_f.g"], cache.ln_f)
    _put(ctx, grads, "ln_f.g", dgf)
    _put(ctx, grads, "ln_f.b", dbf)
    nv = ctx.n_virtual
    if nv:
        dx = np.zeros((bsz, nv + t, dxr.shape[-1]))
        dx[:, nv:, :] = dxr
    else:
        dx = dxr
    for i, c in zip(reversed(model.block_order), reversed(cache.blocks)):
        dx = _block_bwd(ctx, model.config, i, dx, c, grads)
    if nv:
        _virtual_bwd(ctx, dx[:, :nv, :].sum(0), cache.virtual_hidden, grads)
        dx = dx[:, nv:, :]
    if "emb" in ctx.trainable:
        g = np.zeros_like(ctx.params["emb"])
        np.add.at(g, tok, dx)
        grads["emb"] = g
    if cache.emb_lora is not None:
        (brow,) = cache.emb_lora
        s = ctx.lora_scale
        a = ctx.params["emb.A"]
        grads["emb.A"] = s * (_flat(brow).T @ _flat(dx))
        gb = np.zeros_like(ctx.params["emb.B"])
        np.add.at(gb, tok, s * (dx @ a.T))
        grads["emb.B"] = gb
    return ParamTree({k: v for k, v in grads.items() if k in ctx.trainable})


def loss_and_grads(model: MicroLM, adapters, batch, *, train: bool = False, dropout_key=None):
    loss, cache = forward_loss(model, adapters, batch, train=train, dropout_key=dropout_key)
    return loss, backward(model, adapters, cache)


# --------------------------------------------------------------------------
# finite differences


def central_difference(fn, theta: np.ndarray, index: int, h: float) -> float:
    """``(fn(theta + h e_i) - fn(theta - h e_i)) / 2h`` for a flat index."""
    if h == 0:
        raise UsageError("finite-difference step h must be non-zero")
    up = np.array(theta, dtype=np.float64, copy=True)
    dn = up.copy()
    up.flat[index] += h
    dn.flat[index] -= h
    return (fn(up) - fn(dn)) / (2.0 * h)


def finite_diff_grad(model: MicroLM, adapters, batch, name: str, index: int, h: float = 1e-5,
                     *, train: bool = False, dropout_key=None) -> float:
    """Central-difference derivative of the loss w.r.t. one scalar, via the public forward only."""
    if h == 0:
        raise UsageError("finite-difference step h must be non-zero")
    in_adapter = adapters is not None and name in adapters.params
    if not in_adapter and name not in model.trainable_names:
        raise UsageError(f"{name!r} is not trainable")

    def loss_at(value: np.ndarray) -> float:
        if in_adapter:
            ad = replace(adapters, params=adapters.params.replace(name, value))
            return forward_loss(model, ad, batch, train=train, dropout_key=dropout_key)[0]
        m = model.with_base(model.base.replace(name, value))
        return forward_loss(m, adapters, batch, train=train, dropout_key=dropout_key)[0]

    theta = adapters.params[name] if in_adapter else model.base[name]
    return central_difference(loss_at, theta, index, h)


# --------------------------------------------------------------------------
# FLOP accounting


def matmul_flops(m: int, k: int, n: int) -> int:
    """Multiply-adds of an (m x k)(k x n) product, counted as 2mkn."""
    return 2 * m * k * n


def count_flops(config: ModelConfig, adapters, batch_shape: tuple[int, int], *,
                n_blocks: int | None = None, backward: bool = True) -> int:
    """Analytic matmul FLOPs for one forward (and by default backward) pass.

    Per block with ``N = batch * (length + virtual)`` rows and width ``D``:
    four ``D x D`` projections, ``QK^T`` and ``PV`` (``2 * batch * T^2 * D``
    each), two MLP products with hidden width ``4D``, plus ``2N(in*r + r*out)``
    for every LoRA target. The head runs on real positions only. Elementwise
    work (norms, softmax, GELU) is not counted. Backward counts as twice
    forward, so the total is ``3x`` forward.
    """
    bsz, length = batch_shape
    d, f, v = config.dim, config.hidden, config.vocab_size
    kind = None if adapters is None else adapters.spec.kind
    nv = adapters.spec.v_tokens if kind in ("prompt", "ptuning") else 0
    if n_blocks is None:
        n_blocks = len(adapters.block_order) if kind == "fedot" else config.n_blocks
    t = length + nv
    rows = bsz * t
    per_block = 4 * matmul_flops(rows, d, d) + 2 * bsz * matmul_flops(t, d, t)
    per_block += matmul_flops(rows, d, f) + matmul_flops(rows, f, d)
    total = n_blocks * per_block + matmul_flops(bsz * length, d, v)
    if kind == "lora":
        r = adapters.spec.rank
        shapes = param_shapes(config)
        for target in adapters.spec.targets:
            out_dim, in_dim = shapes[target]
            if target == "emb":
                total += matmul_flops(bsz * length, r, d)
            elif target == "head":
                total += matmul_flops(bsz * length, in_dim, r) + matmul_flops(bsz * length, r, out_dim)
            else:
                total += matmul_flops(rows, in_dim, r) + matmul_flops(rows, r, out_dim)
    elif kind == "ptuning":
        hdim = adapters.spec.hidden
        total += matmul_flops(nv, d, hdim) + matmul_flops(nv, hdim, d)
    return 3 * total if backward else total
