"""Hook-driven local trainer.

The skeleton is fixed::

    on_fit_start
    repeat local_steps times:
        on_batch_start -> forward/backward -> on_backward_end -> SGD -> on_step_end
    on_fit_end

Hooks are objects exposing any subset of those method names; at each point
they run in registration order and may rewrite the shared :class:`FitState`.
"""

from __future__ import annotations

import logging
from collections.abc import Callable
from dataclasses import dataclass, field

import numpy as np

from fedtune import tree as T
from fedtune.comm import CostLedger
from fedtune.data import ClientDataset, Corpus, sample_batch
from fedtune.errors import ConfigError, UsageError
from fedtune.model import MicroLM, backward, count_flops, forward_loss
from fedtune.tree import ParamTree

log = logging.getLogger(__name__)

HOOK_POINTS = ("on_fit_start", "on_batch_start", "on_backward_end", "on_step_end", "on_fit_end")
LR_GRID = (1e-4, 3e-4, 5e-4, 1e-3, 3e-3, 5e-3)
DEVICE_FLOPS = 1e10  # nominal FLOP/s used to model compute time


@dataclass(frozen=True)
class TrainerConfig:
    local_steps: int = 30
    batch_size: int = 1
    lr: float = 1e-3
    grad_accum: int = 1
    half_precision: bool = False

    def validate(self) -> TrainerConfig:
        if self.local_steps < 1 or self.batch_size < 1:
            raise ConfigError("local_steps and batch_size must be >= 1")
        if self.lr < 0:
            raise ConfigError("lr must be non-negative")
        if self.grad_accum < 1:
            raise ConfigError("grad_accum must be >= 1")
        if self.grad_accum > self.local_steps:
            raise ConfigError(f"grad_accum={self.grad_accum} exceeds local_steps={self.local_steps}")
        return self


@dataclass
class FitState:
    params: ParamTree
    total_steps: int
    step: int = 0
    batch: np.ndarray | None = None
    loss: float = float("nan")
    grads: ParamTree | None = None
    apply_step: bool = True
    stepped: bool = False
    optimizer_steps: int = 0
    losses: list[float] = field(default_factory=list)
    warnings: list[str] = field(default_factory=list)
    flops: int = 0


Objective = Callable[[ParamTree, np.ndarray, tuple], tuple[float, ParamTree]]


class Trainer:
    def __init__(self, config: TrainerConfig, objective: Objective,
                 sampler: Callable[[int], np.ndarray], flops_per_step: int = 0, hooks=()):
        self.config = config.validate()
        self.objective = objective
        self.sampler = sampler
        self.flops_per_step = flops_per_step
        self._hooks: dict[str, list] = {p: [] for p in HOOK_POINTS}
        if config.grad_accum > 1:
            self.register(GradAccumulation(config.grad_accum))
        if config.half_precision:
            self.register(HalfPrecision())
        for h in hooks:
            self.register(h)

    def register(self, hook) -> None:
        found = False
        for point in HOOK_POINTS:
            fn = getattr(hook, point, None)
            if fn is not None:
                self._hooks[point].append(fn)
                found = True
        if not found:
            raise UsageError(f"{hook!r} implements no hook point")

    def _fire(self, point: str, st: FitState) -> None:
        for fn in self._hooks[point]:
            fn(st)

    def fit(self, params: ParamTree, key: tuple, steps: int | None = None) -> FitState:
        steps = self.config.local_steps if steps is None else steps
        st = FitState(params=params, total_steps=steps)
        self._fire("on_fit_start", st)
        for step in range(steps):
            st.step = step
            st.batch = self.sampler(step)
            st.apply_step = True
            self._fire("on_batch_start", st)
            st.loss, st.grads = self.objective(st.params, st.batch, (*key, step))
            st.losses.append(st.loss)
            st.flops += self.flops_per_step
            self._fire("on_backward_end", st)
            st.stepped = False
            if st.apply_step:
                st.params = T.sgd_step(st.params, st.grads, self.config.lr)
                st.stepped = True
                st.optimizer_steps += 1
            self._fire("on_step_end", st)
        self._fire("on_fit_end", st)
        if not st.params.is_finite():
            raise FloatingPointError("non-finite parameters after local training")
        return st


class GradAccumulation:
    """Average gradients of ``k`` consecutive micro-batches before each step.

    A trailing partial group (when ``k`` does not divide the step count) is
    flushed on the last micro-batch.
    """

    def __init__(self, k: int):
        if k < 1:
            raise ConfigError("grad_accum must be >= 1")
        self.k = k
        self._buf: ParamTree | None = None
        self._n = 0

    def on_fit_start(self, st: FitState) -> None:
        if self.k > st.total_steps:
            raise ConfigError(f"grad_accum={self.k} exceeds local_steps={st.total_steps}")
        self._buf, self._n = None, 0

    def on_backward_end(self, st: FitState) -> None:
        self._buf = st.grads if self._buf is None else T.add(self._buf, st.grads)
        self._n += 1
        if self._n < self.k and st.step < st.total_steps - 1:
            st.apply_step = False
            return
        st.grads = self._buf if self._n == 1 else T.scale(self._buf, 1.0 / self._n)
        self._buf, self._n = None, 0


class HalfPrecision:
    """Round the trainable parameters to binary16 after every optimizer step."""

    def on_step_end(self, st: FitState) -> None:
        if st.stepped:
            st.params = T.round_half(st.params, st.warnings)


class Recorder:
    """Logs every hook point it sees; used to check the skeleton order."""

    def __init__(self):
        self.events: list[tuple[str, int]] = []

    def __getattr__(self, point):
        if point not in HOOK_POINTS:
            raise AttributeError(point)
        return lambda st: self.events.append((point, st.step))


# --------------------------------------------------------------------------
# model-backed objectives


def adapter_objective(model: MicroLM, adapter) -> Objective:
    def objective(params: ParamTree, batch: np.ndarray, key: tuple):
        ad = adapter.with_params(params)
        loss, cache = forward_loss(model, ad, batch, train=True, dropout_key=list(key))
        return loss, backward(model, ad, cache)

    return objective


def full_objective(model: MicroLM) -> Objective:
    trainable = model.trainable_names

    def objective(params: ParamTree, batch: np.ndarray, key: tuple):
        m = model.with_base(model.base.merged(params))
        loss, cache = forward_loss(m, None, batch, train=True, dropout_key=list(key))
        return loss, backward(m, None, cache).subset(trainable)

    return objective


@dataclass(frozen=True)
class LocalResult:
    adapter: object
    train_loss: float
    ledger: CostLedger
    warnings: tuple[str, ...] = ()


def train_adapter(model: MicroLM, adapter, shard: ClientDataset, config: TrainerConfig, key: tuple,
                  hooks=(), steps: int | None = None, objective: Objective | None = None) -> LocalResult:
    """Run the trainer skeleton on ``adapter`` over batches drawn from ``shard``.

    ``key`` (course seed, client id, round) seeds both batch sampling and
    dropout, so results do not depend on the order clients are visited.
    """
    config.validate()
    if shard.n_samples == 0:
        raise ConfigError(f"client {shard.client_id} has an empty training shard")
    frozen_before = model.frozen_digest()
    sampler = lambda step: sample_batch(shard, config.batch_size, [*key, step, 0])
    flops = count_flops(model.config, adapter, (config.batch_size, shard.train.shape[1]))
    trainer = Trainer(config, objective or adapter_objective(model, adapter), sampler, flops, hooks)
    st = trainer.fit(adapter.params, key, steps)
    if model.frozen_digest() != frozen_before:
        raise AssertionError("frozen parameters changed during local training")
    ledger = CostLedger(flops=st.flops, wall_seconds=st.flops / DEVICE_FLOPS, warnings=tuple(st.warnings))
    return LocalResult(adapter.with_params(st.params), float(np.mean(st.losses)), ledger, tuple(st.warnings))


def local_update(client, config: TrainerConfig, round_key: tuple, hooks=()) -> LocalResult:
    """One round of local training for a client holding ``model``, ``adapter`` and ``shard``."""
    return train_adapter(client.model, client.adapter, client.shard, config,
                         (*round_key[:1], client.id, *round_key[1:]), hooks)


def pretrain(model: MicroLM, corpus: Corpus, steps: int, lr: float, batch_size: int = 8,
             seed: int = 0) -> MicroLM:
    """Full-parameter SGD on ``corpus``; the result is rounded to float32 (checkpoint precision)."""
    model = model.unfrozen()
    cfg = TrainerConfig(local_steps=steps, batch_size=batch_size, lr=lr)
    shard = ClientDataset(0, corpus.tokens, corpus.tokens[:0])
    sampler = lambda step: sample_batch(shard, batch_size, [seed, 99, step])
    trainer = Trainer(cfg, full_objective(model), sampler)
    st = trainer.fit(model.base.subset(model.trainable_names), (seed,))
    log.info("pretrain: loss %.4f -> %.4f", np.mean(st.losses[:20]), np.mean(st.losses[-20:]))
    return model.with_base(T.round_single(model.base.merged(st.params)))
