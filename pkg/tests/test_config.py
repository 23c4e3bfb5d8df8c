import json

import pytest

from fedtune.config import from_dict, load_config
from fedtune.errors import ConfigError


def test_defaults_and_override():
    cfg = from_dict({})
    assert cfg.rounds == 500 and cfg.adapter.kind == "lora" and cfg.flags.dtype == "f32"
    o = cfg.override(**{"trainer.lr": 0.25, "adapter.alpha": 32})
    assert o.trainer.lr == 0.25 and o.adapter.alpha == 32 and cfg.trainer.lr != 0.25


@pytest.mark.parametrize("bad", [
    {"roundz": 3},
    {"trainer": {"lr": 0.1, "momentum": 0.9}},
    {"adapter": {"kind": "lora", "rnak": 4}},
    {"mode": "cluster"},
    {"codec": "zstd"},
    {"rounds": 0},
    {"algo": "pfedme", "adapter": {"kind": "fedot"}},
    {"model": []},
])
def test_strict_rejections(bad):
    with pytest.raises(ConfigError):
        from_dict(bad)


def test_unknown_override_path():
    with pytest.raises(ConfigError):
        from_dict({}).override(**{"trainer.nope": 1})


def test_load_config(tmp_path):
    p = tmp_path / "c.json"
    p.write_text(json.dumps({"rounds": 3, "adapter": {"rank": 4}}))
    cfg = load_config(p)
    assert cfg.rounds == 3 and cfg.adapter.rank == 4 and cfg.adapter.kind == "lora"
    p.write_text("{not json")
    with pytest.raises(ConfigError):
        load_config(p)
    with pytest.raises(ConfigError):
        load_config(tmp_path / "missing.json")


def test_roundtrip_through_dict():
    cfg = from_dict({"adapter": {"kind": "prompt", "v_tokens": 3}, "splitter": {"method": "dirichlet"}})
    assert from_dict(json.loads(json.dumps(cfg.to_dict()))) == cfg
