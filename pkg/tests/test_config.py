import json
from pathlib import Path

import pytest

from priormap.config import ConfigError, RunConfig, config_from_dict, load_config

TINY = Path(__file__).parent / "fixtures" / "tiny_config.json"


def test_defaults_validate():
    cfg = config_from_dict({}, env={})
    assert cfg == RunConfig()
    assert cfg.grid.build().shape == (128, 256)
    assert cfg.mask.mask_proportion == 0.5
    assert cfg.fusion.attention.num_layers == 2


def test_tiny_fixture_loads():
    cfg = load_config(TINY)
    assert cfg.seed == 7 and cfg.dataset.train_scenes == 6
    assert cfg.mask.random_patch_candidates == ((4, 4), (4, 8))
    assert cfg.fusion.build(cfg.grid.build()).small_grid.shape == (8, 16)


def test_partial_sections_keep_run_defaults():
    cfg = config_from_dict({"world": {"seed": 5}, "pretrain": {"lr": 1e-3},
                            "fusion": {"attention": {"num_layers": 1}}}, env={})
    default = RunConfig()
    assert cfg.world.seed == 5
    assert cfg.world.range_decay_per_m == default.world.range_decay_per_m
    assert cfg.world.line_thickness_m == default.world.line_thickness_m
    assert (cfg.pretrain.epochs, cfg.pretrain.lr) == (default.pretrain.epochs, 1e-3)
    assert cfg.fusion.attention.num_layers == 1
    assert cfg.fusion.attention.model_dim == default.fusion.attention.model_dim


def test_roundtrip_through_json():
    cfg = load_config(TINY)
    assert config_from_dict(json.loads(cfg.to_json()), env={}) == cfg


@pytest.mark.parametrize("data,msg", [
    ({"bogus": 1}, "unknown key"),
    ({"train": {"epochs": "ten"}}, "train.epochs"),
    ({"train": {"epochs": 2.5}}, "integer"),
    ({"eval": {"figures": 1}}, "true/false"),
    ({"fusion": {"mode": "magic"}}, "fusion.mode"),
    ({"fusion": {"downsample_factor": 3}}, "power of two"),
    ({"mask": {"grid_patch": [4]}}, "expected 2 items"),
    ({"world": {"base_dropout": 2.0}}, "base_dropout"),
    ({"world": {"extent_m": 100.0}}, "extent_m"),
    ({"grid": []}, "expected an object"),
])
def test_invalid_configs(data, msg):
    with pytest.raises(ConfigError, match=msg):
        config_from_dict(data, env={})


def test_seed_environment_override():
    assert config_from_dict({"seed": 1}, env={"PMAP_SEED": "42"}).seed == 42
    assert config_from_dict({"seed": 1}, env={"PMAP_SEED": ""}).seed == 1
    with pytest.raises(ConfigError):
        config_from_dict({}, env={"PMAP_SEED": "x"})


def test_bad_json_reports_line(tmp_path):
    p = tmp_path / "c.json"
    p.write_text('{\n"seed": 1,\n}\n')
    with pytest.raises(ConfigError, match="line 3"):
        load_config(p)
