import pytest

from dynperceiver.config import PRESETS, ModelConfig, get_preset, load_config, save_config
from dynperceiver.errors import ConfigError
from dynperceiver.flops import flops_profile
from dynperceiver.model import build_model

from conftest import random_tiny_config

TABLE_ROWS = {
    # name: (SA blocks per stage, widening, L0)
    "resnet-model-1-style": ((3, 3, 9, 3), 4, 128),
    "resnet-model-2-style": ((3, 3, 9, 9), 4, 128),
    "resnet-model-3-style": ((3, 3, 9, 3), 4, 256),
    "resnet-model-4-style": ((3, 3, 9, 3), 4, 192),
    "resnet-model-5-style": ((3, 3, 9, 3), 2, 128),
    "regnet-model-1-style": ((6, 6, 9, 9), 4, 128),
    "regnet-model-2-style": ((3, 3, 9, 9), 4, 256),
    "regnet-model-3-style": ((3, 3, 9, 6), 4, 128),
    "regnet-model-4-style": ((3, 3, 9, 6), 4, 256),
    "regnet-model-5-style": ((6, 6, 9, 6), 2, 256),
    "regnet-model-6-style": ((6, 6, 9, 9), 4, 256),
    "mobilenet-model-1-style": ((3, 3, 9, 9), 4, 128),
    "mobilenet-model-2-style": ((3, 3, 9, 9), 4, 128),
    "mobilenet-model-3-style": ((6, 6, 9, 9), 4, 128),
    "mobilenet-model-4-style": ((6, 6, 9, 9), 4, 128),
    "mobilenet-model-5-style": ((3, 3, 9, 9), 4, 256),
}


@pytest.mark.parametrize("name", sorted(TABLE_ROWS))
def test_preset_rows(name):
    cfg = get_preset(name)
    sa, widening, L0 = TABLE_ROWS[name]
    assert tuple(s.sa_blocks for s in cfg.stages) == sa
    assert all(s.widening == widening for s in cfg.stages)
    assert cfg.latent_tokens == L0
    assert tuple(s.sa_heads for s in cfg.stages) == (1, 2, 4, 8)
    cfg.validate()


def test_every_preset_is_covered():
    assert set(PRESETS) == set(TABLE_ROWS) | {"tiny", "toy"}


@pytest.mark.parametrize("name", ["resnet-model-1-style", "regnet-model-1-style", "mobilenet-model-1-style"])
def test_presets_build_and_profile(name):
    cfg = get_preset(name)
    model = build_model(cfg, 0)
    assert model.num_parameters() > 0
    costs = flops_profile(cfg).costs()
    assert costs[0] < costs[1] < costs[2] <= costs[3]


def test_unknown_preset():
    with pytest.raises(ConfigError) as info:
        get_preset("resnet-model-9-style")
    assert info.value.field == "preset"


@pytest.mark.parametrize("seed", range(4))
def test_yaml_roundtrip(tmp_path, seed):
    cfg = random_tiny_config(seed)
    save_config(cfg, tmp_path / "c.yaml")
    back = load_config(tmp_path / "c.yaml")
    assert back == cfg and back.config_hash() == cfg.config_hash()
    assert ModelConfig.from_dict(cfg.to_dict()) == cfg


def test_hash_tracks_architecture(tiny_config):
    assert tiny_config.config_hash() != tiny_config.replace(num_classes=5).config_hash()
    assert tiny_config.config_hash() == get_preset("tiny").config_hash()


def test_bad_yaml_fields(tmp_path):
    path = tmp_path / "c.yaml"
    path.write_text("num_classes: 3\nstages: []\n")
    with pytest.raises(ConfigError):
        load_config(path)
