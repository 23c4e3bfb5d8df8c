"""Course configuration: nested dataclasses loaded strictly from JSON."""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field
from pathlib import Path

from fedtune.adapters import AdapterSpec
from fedtune.comm import CODECS, DTYPES, CodecFlags
from fedtune.errors import ConfigError
from fedtune.model import ModelConfig
from fedtune.pfl import PflConfig
from fedtune.trainer import TrainerConfig


@dataclass(frozen=True)
class PretrainConfig:
    steps: int = 0
    lr: float = 0.05
    batch_size: int = 8
    seed: int = 7777
    n_domains: int = 9
    samples_per_domain: int = 200
    checkpoint: str | None = None  # load the base from this .fsp instead


@dataclass(frozen=True)
class DataConfig:
    seed: int = 0
    n_domains: int = 9
    samples_per_domain: int = 300
    test_seed: int = 100_003
    test_per_domain: int = 20
    corpus: str | None = None
    plan: str | None = None


@dataclass(frozen=True)
class SplitterConfig:
    method: str = "meta"
    alpha: float = 0.5
    seed: int = 0
    n_clients: int | None = None


@dataclass(frozen=True)
class CourseConfig:
    seed: int = 0
    rounds: int = 500
    mode: str = "simulated"
    algo: str = "fedavg"
    weighting: str = "samples"
    eval_every: int = 10
    eval_task: str = "perplexity"
    codec: str = "none"
    dtype: str = "f32"
    timeout: float = 60.0
    bandwidth_bps: float = 1e8
    model: ModelConfig = field(default_factory=ModelConfig)
    pretrain: PretrainConfig = field(default_factory=PretrainConfig)
    data: DataConfig = field(default_factory=DataConfig)
    splitter: SplitterConfig = field(default_factory=SplitterConfig)
    adapter: AdapterSpec = field(default_factory=lambda: AdapterSpec(kind="lora"))
    trainer: TrainerConfig = field(default_factory=TrainerConfig)
    pfl: PflConfig = field(default_factory=PflConfig)

    @property
    def flags(self) -> CodecFlags:
        return CodecFlags(self.codec, self.dtype)

    def validate(self) -> CourseConfig:
        if self.rounds < 1:
            raise ConfigError("rounds must be >= 1")
        if self.mode not in ("simulated", "distributed"):
            raise ConfigError(f"unknown mode {self.mode!r}")
        if self.algo not in ("fedavg", "pfedme"):
            raise ConfigError(f"unknown algo {self.algo!r}")
        if self.weighting not in ("samples", "uniform"):
            raise ConfigError(f"unknown weighting {self.weighting!r}")
        if self.eval_every < 1:
            raise ConfigError("eval_every must be >= 1")
        if self.eval_task not in ("perplexity", "generation"):
            raise ConfigError(f"unknown eval_task {self.eval_task!r}")
        if self.codec not in CODECS or self.dtype not in DTYPES:
            raise ConfigError(f"bad codec/dtype {self.codec}/{self.dtype}")
        if self.timeout <= 0 or self.bandwidth_bps <= 0:
            raise ConfigError("timeout and bandwidth must be positive")
        if self.splitter.method not in ("uniform", "dirichlet", "meta"):
            raise ConfigError(f"unknown splitter {self.splitter.method!r}")
        if self.algo == "pfedme" and self.adapter.kind == "fedot":
            raise ConfigError("pfedme is only wired for PEFT adapters")
        self.model.validate()
        self.adapter.validate()
        self.trainer.validate()
        self.pfl.validate()
        return self

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def override(self, **changes) -> CourseConfig:
        """Replace fields by dotted path, e.g. ``override(**{"trainer.lr": 0.1})``."""
        return from_dict(_set_paths(self.to_dict(), changes))


_NESTED = {
    "model": ModelConfig,
    "pretrain": PretrainConfig,
    "data": DataConfig,
    "splitter": SplitterConfig,
    "adapter": AdapterSpec,
    "trainer": TrainerConfig,
    "pfl": PflConfig,
}
_TUPLES = {("adapter", "targets"), ("adapter", "init_tokens")}


def _set_paths(d: dict, changes: dict) -> dict:
    for path, value in changes.items():
        node = d
        parts = path.split(".")
        for p in parts[:-1]:
            if p not in node or not isinstance(node[p], dict):
                raise ConfigError(f"unknown config path {path!r}")
            node = node[p]
        if parts[-1] not in node:
            raise ConfigError(f"unknown config path {path!r}")
        node[parts[-1]] = value
    return d


def _build(cls, data, where: str):
    if not isinstance(data, dict):
        raise ConfigError(f"{where or 'config'} must be a JSON object")
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = sorted(set(data) - names)
    if unknown:
        raise ConfigError(f"unknown key(s) in {where or 'config'}: {', '.join(unknown)}")
    kwargs = {}
    for k, v in data.items():
        sub = f"{where}.{k}" if where else k
        if not where and k in _NESTED:
            kwargs[k] = _build(_NESTED[k], v, sub)
        elif (where, k) in _TUPLES and v is not None:
            kwargs[k] = tuple(v)
        else:
            kwargs[k] = v
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"invalid {where or 'config'}: {exc}") from exc


def from_dict(data: dict) -> CourseConfig:
    if "adapter" in data and isinstance(data["adapter"], dict) and "kind" not in data["adapter"]:
        data = {**data, "adapter": {**data["adapter"], "kind": "lora"}}
    return _build(CourseConfig, data, "").validate()


def load_config(path) -> CourseConfig:
    try:
        data = json.loads(Path(path).read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON ({exc})") from exc
    except OSError as exc:
        raise ConfigError(f"{path}: {exc}") from exc
    return from_dict(data)
