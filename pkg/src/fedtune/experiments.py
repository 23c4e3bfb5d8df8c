"""Desk-scale experiment drivers: Fed vs Local vs Global, pFedMe under half
precision, FedOT drop rates, and the HPO rank landscape.

All drivers share :func:`desk_config`: MicroLM (vocab 32, dim 32, seq 32), 9
domains x 300 samples, 30 rounds of 30 local steps at batch 1, on a base
pretrained (full SGD) on an unrelated corpus.
"""

from __future__ import annotations

import dataclasses
import logging

import numpy as np

from fedtune import adapters as A
from fedtune.bench import eval_perplexity
from fedtune.config import CourseConfig, from_dict
from fedtune.data import ClientDataset
from fedtune.hpo import SearchSpace, course_runner, grid_search, rank_landscape
from fedtune.runtime import CourseInputs, eval_task_for, prepare, run_simulated, train_local
from fedtune.trainer import TrainerConfig

log = logging.getLogger(__name__)

DESK = {
    "rounds": 30,
    "eval_every": 30,
    "model": {"vocab_size": 32, "dim": 32, "n_blocks": 6, "n_heads": 2, "seq_len": 32},
    "pretrain": {"steps": 1500, "lr": 0.5, "batch_size": 8},
    "data": {"n_domains": 9, "samples_per_domain": 300},
    "splitter": {"method": "meta"},
    "trainer": {"local_steps": 30, "batch_size": 1, "lr": 0.5},
}


def _merge(a: dict, b: dict) -> dict:
    out = dict(a)
    for k, v in b.items():
        out[k] = _merge(out.get(k, {}), v) if isinstance(v, dict) else v
    return out


def desk_config(seed: int, overrides: dict | None = None) -> CourseConfig:
    """The desk fixture for one seed; the seed drives both the corpus and the course."""
    base = _merge(DESK, {"seed": seed, "data": {"seed": seed}})
    return from_dict(_merge(base, overrides or {}))


def test_ppl(model, adapter_state, inputs: CourseInputs, cfg: CourseConfig) -> float:
    return eval_perplexity(model, adapter_state, eval_task_for(cfg, inputs.test)).mean_perplexity


def fed_ppl(cfg: CourseConfig, inputs: CourseInputs) -> float:
    return run_simulated(cfg, inputs).final.test_ppl


def local_ppls(cfg: CourseConfig, inputs: CourseInputs) -> list[float]:
    """Each client trains alone for the same rounds and steps; scored on the global test set."""
    init = A.build_adapter(inputs.model, cfg.adapter)
    out = []
    for shard in inputs.shards:
        params = train_local(cfg, dataclasses.replace(inputs, shards=(shard,)))
        out.append(test_ppl(inputs.model, init.with_params(params), inputs, cfg))
    return out


def global_ppl(cfg: CourseConfig, inputs: CourseInputs) -> float:
    """Centralised baseline: pooled data, batch scaled by the client count (same samples per round)."""
    pooled = ClientDataset(1, np.concatenate([s.train for s in inputs.shards]),
                           np.concatenate([s.val for s in inputs.shards]))
    t = cfg.trainer
    cfg = dataclasses.replace(cfg, trainer=TrainerConfig(t.local_steps, t.batch_size * len(inputs.shards), t.lr,
                                                         t.grad_accum, t.half_precision))
    init = A.build_adapter(inputs.model, cfg.adapter)
    params = train_local(cfg, dataclasses.replace(inputs, shards=(pooled,)))
    return test_ppl(inputs.model, init.with_params(params), inputs, cfg)


def fed_vs_local(seeds=(0, 1, 2), overrides: dict | None = None) -> dict:
    rows = []
    for s in seeds:
        cfg = desk_config(s, overrides)
        inputs = prepare(cfg)
        fed = fed_ppl(cfg, inputs)
        loc = local_ppls(cfg, inputs)
        glob = global_ppl(cfg, inputs)
        log.info("seed %d: fed %.3f local %.3f global %.3f", s, fed, np.mean(loc), glob)
        rows.append({"seed": s, "fed": fed, "local": float(np.mean(loc)), "local_per_client": loc, "global": glob})
    fed = float(np.mean([r["fed"] for r in rows]))
    loc = float(np.mean([r["local"] for r in rows]))
    glob = float(np.mean([r["global"] for r in rows]))
    return {"rows": rows, "fed": fed, "local": loc, "global": glob, "fed_vs_global": abs(fed - glob) / glob}


# pFedMe with the half-precision hook; lr * lam must stay well below 1 for the prox steps
PFEDME_DESK = {"splitter": {"method": "dirichlet", "alpha": 0.5, "n_clients": 9},
               "trainer": {"half_precision": True},
               "pfl": {"lam": 15.0, "inner_steps": 5, "inner_lr": 0.05, "outer_lr": 0.005}}


def pfedme_vs_fedavg(seeds=(0, 1, 2), overrides: dict | None = None) -> dict:
    rows = []
    for s in seeds:
        over = _merge(PFEDME_DESK, overrides or {})
        avg_cfg = desk_config(s, over)
        inputs = prepare(avg_cfg)
        h_avg = run_simulated(avg_cfg, inputs)
        h_pfl = run_simulated(avg_cfg.override(algo="pfedme"), inputs)
        rows.append({"seed": s, "fedavg": h_avg.final.eval_score, "pfedme": h_pfl.personal_score,
                     "pfedme_global": h_pfl.final.eval_score})
        log.info("seed %d: %s", s, rows[-1])
    return {"rows": rows, "fedavg": float(np.mean([r["fedavg"] for r in rows])),
            "pfedme": float(np.mean([r["pfedme"] for r in rows]))}


FEDOT_DESK = {"model": {"n_blocks": 14}, "adapter": {"kind": "fedot", "front": 2, "back": 2},
              "trainer": {"lr": 0.05}}


def fedot_tradeoff(seeds=(0, 1, 2), rhos=(0.2, 0.5), overrides: dict | None = None) -> dict:
    rows = []
    for s in seeds:
        for rho in rhos:
            cfg = desk_config(s, _merge(_merge(FEDOT_DESK, {"adapter": {"drop_rate": rho}}), overrides or {}))
            inputs = prepare(cfg)
            fed = fed_ppl(cfg, inputs)
            loc = float(np.mean(local_ppls(cfg, inputs)))
            log.info("seed %d rho %.1f: fed %.3f local %.3f", s, rho, fed, loc)
            rows.append({"seed": s, "rho": rho, "fed": fed, "local": loc})
    summary = {}
    for rho in rhos:
        sel = [r for r in rows if r["rho"] == rho]
        summary[rho] = {"fed": float(np.mean([r["fed"] for r in sel])), "local": float(np.mean([r["local"] for r in sel]))}
    return {"rows": rows, "by_rho": summary}


LANDSCAPE_SPACE = {"lr": (1e-4, 3e-4, 5e-4, 1e-3, 3e-3, 5e-3), "scaling": (16, 32)}


def lr_landscape(seed: int = 0, fidelity: int = 10, overrides: dict | None = None):
    """Six-point LR grid x two LoRA scalings at low fidelity; returns ``(trials, landscape)``."""
    cfg = desk_config(seed, _merge({"eval_every": fidelity}, overrides or {}))
    space = SearchSpace.from_dict(LANDSCAPE_SPACE)
    trials = grid_search(space, course_runner(cfg), fidelity)
    return trials, rank_landscape(trials)
