"""Trainable adapter parameterisations attached to a frozen MicroLM.

Four kinds are supported:

* ``lora`` - low-rank deltas ``W + (alpha/r) B A`` on chosen weight matrices;
* ``prompt`` - learnable virtual-token embeddings prepended to the input;
* ``ptuning`` - virtual tokens produced by a small tanh MLP from seed rows;
* ``fedot`` - offsite tuning: embedding, head and the first/last blocks are
  trainable while a layer-dropped copy of the middle (the emulator) stays
  frozen on the client.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np

from fedtune.errors import ConfigError, DataError, UsageError
from fedtune.model import HEAD_NAMES, MicroLM, block_param_names
from fedtune.tree import ParamTree

KINDS = ("lora", "prompt", "ptuning", "fedot")

# Message sizes reported for LLaMA-7B adapters; reference only, never recomputed.
LLAMA7B_MESSAGE_MB = {"lora": 21.40, "ptuning": 256.48, "prompt": 0.17}


@dataclass(frozen=True)
class AdapterSpec:
    kind: str
    rank: int = 8
    alpha: float = 16.0
    dropout: float = 0.0
    targets: tuple[str, ...] = ()
    v_tokens: int = 10
    init_tokens: tuple[int, ...] | None = None
    hidden: int = 32
    front: int = 2
    back: int = 2
    drop_rate: float = 0.2
    seed: int = 0

    def validate(self, model: MicroLM | None = None) -> AdapterSpec:
        if self.kind not in KINDS:
            raise ConfigError(f"unknown adapter kind {self.kind!r}")
        cfg = None if model is None else model.config
        if self.kind == "lora":
            if self.rank < 1:
                raise ConfigError("LoRA rank must be >= 1")
            if not self.alpha > 0:
                raise ConfigError("LoRA scaling alpha must be > 0")
            if not 0 <= self.dropout < 1:
                raise ConfigError("LoRA dropout must lie in [0, 1)")
            if model is not None:
                for t in self.targets:
                    if t not in model.base or model.base[t].ndim != 2:
                        raise ConfigError(f"LoRA target {t!r} is not a rank-2 base weight")
        elif self.kind in ("prompt", "ptuning"):
            if self.v_tokens < 1 or (cfg is not None and self.v_tokens >= cfg.seq_len):
                raise ConfigError(f"v_tokens={self.v_tokens} must satisfy 1 <= v_tokens < seq_len")
            if self.kind == "ptuning" and self.hidden < 1:
                raise ConfigError("P-tuning hidden width must be >= 1")
        else:
            if self.front < 0 or self.back < 0:
                raise ConfigError("front/back block counts must be non-negative")
            if not 0 < self.drop_rate < 1:
                raise ConfigError("FedOT drop rate must lie in (0, 1)")
            if cfg is not None:
                if self.front + self.back >= cfg.n_blocks:
                    raise ConfigError("front + back must leave at least one middle block")
                kept_middle(cfg.n_blocks - self.front - self.back, self.drop_rate)
        return self


@dataclass(frozen=True)
class AdapterState:
    spec: AdapterSpec
    params: ParamTree
    emulator: ParamTree | None = None
    block_order: tuple[int, ...] = field(default=())

    def with_params(self, params: ParamTree) -> AdapterState:
        if not params.congruent(self.params):
            raise UsageError("replacement adapter params are not congruent")
        return replace(self, params=params)

    def num_params(self) -> int:
        return self.params.num_params()


def _f32(a: np.ndarray) -> np.ndarray:
    return np.asarray(a, dtype=np.float32).astype(np.float64)


def default_lora_targets(model: MicroLM) -> tuple[str, ...]:
    return tuple(f"blk{i}.{s}" for i in range(model.config.n_blocks) for s in ("q", "v"))


def build_lora(model: MicroLM, r: int = 8, alpha: float = 16.0, p: float = 0.0,
               targets=None, seed: int = 0) -> AdapterState:
    """Per target ``W (m x n)``: ``A (r x n) ~ N(0, 1/r)`` and ``B (m x r) = 0``."""
    targets = tuple(sorted(targets)) if targets else default_lora_targets(model)
    spec = AdapterSpec(kind="lora", rank=r, alpha=alpha, dropout=p, targets=targets, seed=seed)
    spec.validate(model)
    rng = np.random.default_rng(seed)
    entries = {}
    for t in targets:
        m, n = model.base[t].shape
        entries[t + ".A"] = _f32(rng.normal(0.0, 1.0 / math.sqrt(r), size=(r, n)))
        entries[t + ".B"] = np.zeros((m, r))
    return AdapterState(spec=spec, params=ParamTree(entries))


def lora_delta(state: AdapterState, target: str) -> np.ndarray:
    s = state.spec.alpha / state.spec.rank
    return s * (state.params[target + ".B"] @ state.params[target + ".A"])


def build_prompt(model: MicroLM, v_tokens: int, init=0) -> AdapterState:
    """``init`` is either an int seed (random rows) or a sequence of token ids
    whose embedding rows are copied (text-style initialisation)."""
    if isinstance(init, (int, np.integer)):
        spec = AdapterSpec(kind="prompt", v_tokens=v_tokens, seed=int(init)).validate(model)
        rng = np.random.default_rng(int(init))
        rows = _f32(rng.normal(0.0, 1.0 / math.sqrt(model.config.dim), size=(v_tokens, model.config.dim)))
    else:
        ids = tuple(int(i) for i in init)
        spec = AdapterSpec(kind="prompt", v_tokens=v_tokens, init_tokens=ids).validate(model)
        if len(ids) != v_tokens:
            raise ConfigError(f"text init has {len(ids)} token ids but v_tokens={v_tokens}")
        if any(i < 0 or i >= model.config.vocab_size for i in ids):
            raise DataError("prompt init token id out of range")
        rows = model.base["emb"][list(ids)]
    return AdapterState(spec=spec, params=ParamTree({"prompt.emb": rows}))


def build_ptuning(model: MicroLM, v_tokens: int, hidden: int, seed: int = 0) -> AdapterState:
    """Virtual embeddings ``= W2 tanh(W1 seed + b1) + b2`` (MLP reparameterisation)."""
    spec = AdapterSpec(kind="ptuning", v_tokens=v_tokens, hidden=hidden, seed=seed).validate(model)
    d = model.config.dim
    rng = np.random.default_rng(seed)
    entries = {
        "ptuning.seed": _f32(rng.normal(0.0, 1.0 / math.sqrt(d), size=(v_tokens, d))),
        "ptuning.mlp1.w": _f32(rng.normal(0.0, 1.0 / math.sqrt(d), size=(hidden, d))),
        "ptuning.mlp1.b": np.zeros(hidden),
        "ptuning.mlp2.w": _f32(rng.normal(0.0, 1.0 / math.sqrt(hidden), size=(d, hidden))),
        "ptuning.mlp2.b": np.zeros(d),
    }
    return AdapterState(spec=spec, params=ParamTree(entries))


def kept_middle(m: int, rho: float) -> list[int]:
    """Middle-block indices kept after uniformly dropping a fraction ``rho``.

    ``K = round((1 - rho) * m)`` (halves round up) and index ``j`` keeps
    ``floor(j * m / K)``.
    """
    k = math.floor((1.0 - rho) * m + 0.5)
    if k <= 0:
        raise ConfigError(f"drop rate {rho} leaves no middle blocks out of {m}")
    k = min(k, m)
    return [j * m // k for j in range(k)]


def build_fedot(model: MicroLM, front: int = 2, back: int = 2, rho: float = 0.2, seed: int = 0) -> AdapterState:
    spec = AdapterSpec(kind="fedot", front=front, back=back, drop_rate=rho, seed=seed).validate(model)
    n = model.config.n_blocks
    m = n - front - back
    kept = [front + j for j in kept_middle(m, rho)]
    adapter_blocks = list(range(front)) + list(range(n - back, n))
    names = list(HEAD_NAMES) + [p for i in adapter_blocks for p in block_param_names(i)]
    emu_names = [p for i in kept for p in block_param_names(i)]
    order = tuple(range(front)) + tuple(kept) + tuple(range(n - back, n))
    return AdapterState(spec=spec, params=model.base.subset(names),
                        emulator=model.base.subset(emu_names), block_order=order)


def emulator_model(model: MicroLM, state: AdapterState) -> MicroLM:
    """The client-side view for FedOT: only the frozen, layer-dropped middle."""
    if state.spec.kind != "fedot":
        raise UsageError("emulator_model needs a fedot adapter state")
    return MicroLM(config=model.config, base=state.emulator, block_order=state.block_order).frozen()


def plug_in(model: MicroLM, state: AdapterState) -> MicroLM:
    """Write fine-tuned FedOT adapter blocks back into the full model."""
    if state.spec.kind != "fedot":
        raise UsageError("plug_in needs a fedot adapter state")
    for name, value in state.params.items():
        if name not in model.base or model.base[name].shape != value.shape:
            raise UsageError(f"adapter entry {name!r} does not fit this model")
    if len(model.block_order) != model.config.n_blocks:
        raise UsageError("plug_in expects the full model, not an emulator")
    return model.with_base(model.base.merged(state.params))


def adapter_bytes(state: AdapterState, dtype_bits: int) -> int:
    """Exact payload size of ``state.params`` in the streaming format."""
    from fedtune.comm import DTYPE_BY_BITS, serialize_params

    if dtype_bits not in DTYPE_BY_BITS:
        raise ConfigError(f"dtype_bits must be one of {sorted(DTYPE_BY_BITS)}")
    return len(serialize_params(state.params, DTYPE_BY_BITS[dtype_bits]))


def build_adapter(model: MicroLM, spec: AdapterSpec) -> AdapterState:
    """Construct an adapter from a declarative spec."""
    spec.validate(model)
    if spec.kind == "lora":
        return build_lora(model, spec.rank, spec.alpha, spec.dropout, spec.targets or None, spec.seed)
    if spec.kind == "prompt":
        init = spec.init_tokens if spec.init_tokens is not None else spec.seed
        return build_prompt(model, spec.v_tokens, init)
    if spec.kind == "ptuning":
        return build_ptuning(model, spec.v_tokens, spec.hidden, spec.seed)
    return build_fedot(model, spec.front, spec.back, spec.drop_rate, spec.seed)
