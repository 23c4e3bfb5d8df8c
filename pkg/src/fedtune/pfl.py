"""pFedMe restricted to adapters.

Each client keeps a personal adapter ``theta`` and a local copy ``w`` of the
global adapter. Inner steps minimise ``f(theta) + lam/2 * ||theta - w||^2``;
after every ``inner_steps`` of them, ``w <- w - eta * lam * (w - theta)``.
The frozen base is shared, never copied.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from fedtune import tree as T
from fedtune.errors import ConfigError
from fedtune.trainer import LocalResult, TrainerConfig, train_adapter
from fedtune.tree import ParamTree


@dataclass(frozen=True)
class PflConfig:
    lam: float = 15.0
    inner_steps: int = 5
    inner_lr: float | None = None  # None -> course lr
    outer_lr: float | None = None  # None -> course lr

    def validate(self) -> PflConfig:
        if not self.lam > 0 or self.inner_steps < 1:
            raise ConfigError("pFedMe needs lam > 0 and inner_steps >= 1")
        for v in (self.inner_lr, self.outer_lr):
            if v is not None and not v > 0:
                raise ConfigError("pFedMe learning rates must be > 0")
        return self


@dataclass(frozen=True)
class PersonalState:
    theta: ParamTree
    w: ParamTree


def prox_grad(grads: ParamTree, theta: ParamTree, w: ParamTree, lam: float) -> ParamTree:
    """Gradient of ``f(theta) + lam/2 ||theta - w||^2`` given ``grads = grad f``."""
    return T.zip_map(lambda g, t, ww: g + lam * (t - ww), grads, theta, w)


def outer_update(w: ParamTree, theta: ParamTree, eta: float, lam: float) -> ParamTree:
    return T.zip_map(lambda ww, t: ww - eta * lam * (ww - t), w, theta)


class PFedMeHook:
    """Turns the plain trainer into pFedMe's bi-level local solver.

    Micro-step ``s`` reuses the batch drawn at the start of its inner group,
    adds the proximal gradient, and closes each group with the outer update
    of ``w`` (rounded to binary16 when ``half`` is set).
    """

    def __init__(self, w: ParamTree, lam: float, inner_steps: int, eta: float, half: bool = False):
        self.w = w
        self.lam = lam
        self.k = inner_steps
        self.eta = eta
        self.half = half
        self._batch = None
        self.warnings: list[str] = []

    def on_batch_start(self, st) -> None:
        if st.step % self.k == 0:
            self._batch = st.batch
        else:
            st.batch = self._batch

    def on_backward_end(self, st) -> None:
        st.grads = prox_grad(st.grads, st.params, self.w, self.lam)

    def on_step_end(self, st) -> None:
        if (st.step + 1) % self.k == 0:
            w = outer_update(self.w, st.params, self.eta, self.lam)
            self.w = T.round_half(w, st.warnings) if self.half else w


@dataclass(frozen=True)
class PFedMeResult:
    personal: object  # AdapterState carrying theta
    w: ParamTree
    train_loss: float
    local: LocalResult


def pfedme_local(model, adapter, shard, w_global: ParamTree, trainer_cfg: TrainerConfig, cfg: PflConfig,
                 key: tuple, objective=None) -> PFedMeResult:
    """One pFedMe round: ``local_steps`` outer iterations of ``inner_steps`` each.

    ``theta`` starts from the received global adapter; the returned ``w`` is
    what the client uploads.
    """
    cfg.validate()
    inner_lr = trainer_cfg.lr if cfg.inner_lr is None else cfg.inner_lr
    eta = trainer_cfg.lr if cfg.outer_lr is None else cfg.outer_lr
    steps = trainer_cfg.local_steps * cfg.inner_steps
    inner = TrainerConfig(local_steps=steps, batch_size=trainer_cfg.batch_size, lr=inner_lr,
                          grad_accum=1, half_precision=trainer_cfg.half_precision)
    hook = PFedMeHook(w_global, cfg.lam, cfg.inner_steps, eta, trainer_cfg.half_precision)
    start = adapter.with_params(w_global)
    res = train_adapter(model, start, shard, inner, key, hooks=(hook,), objective=objective)
    return PFedMeResult(personal=res.adapter, w=hook.w, train_loss=res.train_loss, local=res)


def eval_personalized(scores) -> float:
    """Unweighted mean of per-client scores, each from that client's personal adapter."""
    scores = [float(s) for s in scores]
    if not scores:
        raise ConfigError("no personalised clients to evaluate")
    return float(np.mean(sorted(scores)))
