import dataclasses
import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mt3 import autodiff as ad
from mt3 import checkpoint, config, nn, trainers
from mt3.checkpoint import Checkpoint, CheckpointError
from mt3.config import ConfigError, RunConfig

MICRO = nn.ModelConfig.toy(resolution=8, widths=(4, 8), blocks_per_stage=1, hidden_dim=8,
                           proj_dim=4)


def _state(regime="jt", seed=0):
    mc = MICRO if regime != "baseline" else dataclasses.replace(MICRO, ssl_heads=False)
    st_ = trainers.init_state(regime, mc, seed)
    rng = np.random.default_rng(seed)
    st_.opt_state = {n: rng.normal(size=a.shape).astype(np.float32)
                     for n, a in st_.params.arrays().items()}
    st_.step = 17
    return mc, st_


@pytest.mark.parametrize("regime", ["mt3", "jt", "baseline"])
def test_checkpoint_roundtrip_bit_exact(tmp_path, regime):
    mc, st_ = _state(regime)
    path = tmp_path / "a.ckpt"
    checkpoint.save(path, Checkpoint(mc, st_, {"seed": 3, "config_hash": "abc"}))
    back = checkpoint.load(path)
    assert back.model_config == mc and back.metadata["config_hash"] == "abc"
    assert back.state.step == 17 and back.state.regime == regime
    assert back.state.params.groups == st_.params.groups
    for n in st_.params:
        assert back.state.params[n].data.tobytes() == st_.params[n].data.tobytes()
        assert back.state.opt_state[n].tobytes() == st_.opt_state[n].tobytes()
    assert (back.state.target is None) == (regime != "jt")
    # save(load(c)) reproduces the file byte for byte
    checkpoint.save(tmp_path / "b.ckpt", back)
    assert (tmp_path / "a.ckpt").read_bytes() == (tmp_path / "b.ckpt").read_bytes()


@settings(max_examples=25, deadline=None)
@given(st.dictionaries(st.from_regex(r"[a-z]{1,6}", fullmatch=True),
                       st.tuples(st.sampled_from("fhpq"),
                                 st.lists(st.integers(1, 4), min_size=0, max_size=3)),
                       min_size=1, max_size=5),
       st.sampled_from(["float32", "float64"]), st.integers(0, 2 ** 31))
def test_checkpoint_roundtrip_property(tmp_path_factory, spec, dtype, seed):
    rng = np.random.default_rng(seed)
    arrays = {n: rng.normal(size=shape).astype(dtype) for n, (_, shape) in spec.items()}
    groups = {n: g for n, (g, _) in spec.items()}
    path = tmp_path_factory.mktemp("ck") / "p.ckpt"
    with ad.precision(dtype):
        params = nn.ParameterSet.from_arrays(arrays, groups)
        checkpoint.save(path, Checkpoint(MICRO, trainers.TrainState("mt3", params, {}, None, 1)))
        back = checkpoint.load(path).state.params
    assert back.groups == groups
    for n, a in arrays.items():
        assert back[n].data.dtype == a.dtype and back[n].data.tobytes() == a.tobytes()


def test_checkpoint_rejects_bad_files(tmp_path):
    (tmp_path / "x.ckpt").write_bytes(b"NOTACKPT" + bytes(20))
    with pytest.raises(CheckpointError, match="magic"):
        checkpoint.load(tmp_path / "x.ckpt")
    mc, st_ = _state("mt3")
    checkpoint.save(tmp_path / "ok.ckpt", Checkpoint(mc, st_))
    raw = (tmp_path / "ok.ckpt").read_bytes()
    (tmp_path / "short.ckpt").write_bytes(raw[:-10])
    with pytest.raises(CheckpointError, match="past the file end"):
        checkpoint.load(tmp_path / "short.ckpt")


def test_checkpoint_summary(tmp_path):
    mc, st_ = _state("mt3")
    checkpoint.save(tmp_path / "s.ckpt", Checkpoint(mc, st_))
    s = checkpoint.summary(tmp_path / "s.ckpt")
    assert s["step"] == 17 and set(s["parameters_per_group"]) == {"f", "h", "p", "q"}
    assert sum(s["parameters_per_group"].values()) == st_.params.num_values()


def test_checkpoint_little_endian_f4(tmp_path):
    mc, st_ = _state("mt3")
    checkpoint.save(tmp_path / "e.ckpt", Checkpoint(mc, st_))
    manifest, payload = checkpoint.read_manifest(tmp_path / "e.ckpt")
    e = manifest["tensors"][0]
    assert e["dtype"] == "<f4"
    want = st_.params[e["name"]].data.astype("<f4").tobytes()
    assert payload[e["offset"]:e["offset"] + e["nbytes"]] == want


# config


def test_defaults_match_published_constants():
    cfg = config.resolve(RunConfig())
    assert (cfg.meta.inner_lr, cfg.meta.meta_lr, cfg.meta.momentum) == (0.1, 0.01, 0.9)
    assert (cfg.meta.meta_batch, cfg.meta.task_size, cfg.meta.gamma) == (4, 8, 0.1)
    assert (cfg.meta.weight_decay, cfg.meta.clip_norm, cfg.meta.inner_steps) == (1.5e-6, 10.0, 1)
    assert (cfg.joint.ema, cfg.joint.lr, cfg.joint.batch_size) == (0.996, 0.1, 128)
    assert (cfg.baseline.weight_decay, cfg.baseline.pad) == (5e-4, 4)
    assert (cfg.adapt.batch, cfg.adapt.lr, cfg.adapt.steps, cfg.ttt_lr) == (32, 0.1, 1, 0.01)
    assert (cfg.augment.sample.crop_min, cfg.augment.sample.drop_p) == (20 / 32, 0.2)


def test_resolve_pushes_seed_and_resolution():
    cfg = config.resolve(RunConfig(seed=7))
    assert cfg.meta.seed == cfg.joint.seed == cfg.baseline.seed == cfg.adapt.seed == 7
    assert cfg.model.resolution == cfg.data.synth_resolution


def test_unknown_keys_rejected(tmp_path):
    with pytest.raises(ConfigError, match="bogus"):
        config.from_dict(RunConfig, {"meta": {"bogus": 1}})
    with pytest.raises(ConfigError):
        config.apply_overrides(RunConfig(), ["meta.nope=1"])
    with pytest.raises(ConfigError):
        config.from_dict(RunConfig, {"seed": "zero"})
    (tmp_path / "c.json").write_text("{not json")
    with pytest.raises(ConfigError):
        config.load(tmp_path / "c.json")


def test_inconsistent_resolution_rejected():
    cfg = config.from_dict(RunConfig, {"model": {"resolution": 32}})
    with pytest.raises(ConfigError):
        config.resolve(cfg)


def test_config_roundtrip_and_hash(tmp_path):
    cfg = config.resolve(config.apply_overrides(RunConfig(), ["meta.max_steps=5", "seed=2",
                                                              "data.corruptions=[\"fog\"]"]))
    (tmp_path / "c.json").write_text(config.dumps(cfg))
    back = config.load(tmp_path / "c.json")
    assert back == cfg and config.config_hash(back) == config.config_hash(cfg)
    other = dataclasses.replace(cfg, seed=3)
    assert config.config_hash(other) != config.config_hash(cfg)
    assert config.config_hash(dataclasses.replace(cfg, output="elsewhere")) == config.config_hash(cfg)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 1000), st.floats(1e-4, 1.0), st.integers(1, 64), st.booleans())
def test_config_json_roundtrip_property(seed, lr, batch, second):
    cfg = config.resolve(config.apply_overrides(RunConfig(), [
        f"seed={seed}", f"meta.inner_lr={lr!r}", f"adapt.batch={batch}",
        f"meta.second_order={json.dumps(second)}"]))
    assert config.from_dict(RunConfig, json.loads(config.dumps(cfg))) == cfg
