import json

import pytest

from cfmlab.config import (
    ConfigError,
    RunConfig,
    config_from_dict,
    config_hash,
    config_to_dict,
    load_config,
    validate_config,
)


def test_defaults_validate():
    cfg = config_from_dict({})
    assert cfg.seed == 0
    assert cfg.dataset.n_clips == 512
    assert cfg.codec.epochs == 200
    assert cfg.flow.epochs == 300
    validate_config(cfg)  # idempotent


def test_unknown_root_key_rejected():
    with pytest.raises(ConfigError, match="bogus: unknown config key"):
        config_from_dict({"bogus": 1})


def test_unknown_section_key_rejected_with_path():
    with pytest.raises(ConfigError, match=r"codec\.bogus: unknown config key"):
        config_from_dict({"codec": {"bogus": 1}})
    with pytest.raises(ConfigError, match=r"flow\.learning_rate"):
        config_from_dict({"flow": {"learning_rate": 0.1}})


def test_root_must_be_object():
    with pytest.raises(ConfigError, match="config root must be an object"):
        config_from_dict([1, 2, 3])


def test_section_must_be_object():
    with pytest.raises(ConfigError, match="codec: section must be an object"):
        config_from_dict({"codec": 3})


@pytest.mark.parametrize("seed", ["7", True, 1.5])
def test_seed_must_be_plain_int(seed):
    with pytest.raises(ConfigError, match="seed"):
        config_from_dict({"seed": seed})


@pytest.mark.parametrize("payload,path", [
    ({"seed": -1}, "seed"),
    ({"dataset": {"n_classes": 0}}, r"dataset\.n_classes"),
    ({"dataset": {"n_clips": 2, "n_classes": 3}}, r"dataset\.n_clips"),
    ({"dataset": {"n_frames": 4}}, r"dataset\.n_frames"),
    ({"dataset": {"n_frames": 30}}, r"dataset\.n_frames"),   # not divisible by 4
    ({"dataset": {"fps": 0}}, r"dataset\.fps"),
    ({"dataset": {"d_audio": 2}}, r"dataset\.d_audio"),      # < n_classes anchors
    ({"dataset": {"noise": -0.1}}, r"dataset\.noise"),
    ({"dataset": {"n_onsets": 0}}, r"dataset\.n_onsets"),
    ({"dataset": {"ratios": [0.5, 0.5, 0.5]}}, r"dataset\.ratios"),
    ({"codec": {"d_g": 0}}, r"codec\.d_g"),
    ({"codec": {"downsample": 8}}, r"codec\.downsample"),    # != dataset.downsample
    ({"codec": {"n_codes": 1}}, r"codec\.n_codes"),
    ({"codec": {"depth": 0}}, r"codec\.depth"),
    ({"codec": {"beta": -1.0}}, r"codec\.beta"),
    ({"codec": {"ema_decay": 1.5}}, r"codec\.ema_decay"),
    ({"codec": {"epochs": -1}}, r"codec\.epochs"),
    ({"codec": {"lr": 0.0}}, r"codec\.lr"),
    ({"sacm": {"alpha": 1.5}}, r"sacm\.alpha"),
    ({"sacm": {"tau": 0.0}}, r"sacm\.tau"),
    ({"sacm": {"lambda_cos": -1}}, r"sacm\.lambda_cos"),
    ({"sacm": {"scale": 0.0}}, r"sacm\.scale"),
    ({"flow": {"time_dim": 15}}, r"flow\.time_dim"),
    ({"flow": {"lam": 1.0}}, r"flow\.lam"),
    ({"flow": {"lam": -0.1}}, r"flow\.lam"),
    ({"flow": {"mode": "shuffle"}}, r"flow\.mode"),
    ({"flow": {"batch": 1}}, r"flow\.batch"),
    ({"flow": {"lambda_cfm": -1.0}}, r"flow\.lambda_cfm"),
    ({"flow": {"lambda_sem": -1.0}}, r"flow\.lambda_sem"),
    ({"sampler": {"scheme": "rk4"}}, r"sampler\.scheme"),
    ({"sampler": {"steps": 0}}, r"sampler\.steps"),
    ({"metrics": {"sigma": 0.0}}, r"metrics\.sigma"),
    ({"metrics": {"pooling": "max"}}, r"metrics\.pooling"),
])
def test_out_of_range_fields_name_their_path(payload, path):
    with pytest.raises(ConfigError, match=path):
        config_from_dict(payload)


def test_dataset_inherits_global_seed():
    cfg = config_from_dict({"seed": 5})
    assert cfg.dataset.seed == 5


def test_explicit_dataset_seed_wins():
    cfg = config_from_dict({"seed": 5, "dataset": {"seed": 11}})
    assert cfg.dataset.seed == 11


def test_hash_is_hex_and_stable():
    a = config_hash(config_from_dict({"seed": 3}))
    b = config_hash(config_from_dict({"seed": 3}))
    assert a == b
    assert len(a) == 64
    assert set(a) <= set("0123456789abcdef")


def test_hash_changes_with_any_field():
    base = config_hash(config_from_dict({}))
    assert config_hash(config_from_dict({"seed": 1})) != base
    assert config_hash(config_from_dict({"flow": {"lam": 0.1}})) != base
    assert config_hash(config_from_dict({"codec": {"n_codes": 32}})) != base


def test_hash_ignores_key_order():
    a = config_from_dict({"seed": 2, "flow": {"lam": 0.1, "epochs": 5}})
    b = config_from_dict({"flow": {"epochs": 5, "lam": 0.1}, "seed": 2})
    assert config_hash(a) == config_hash(b)


def test_to_dict_roundtrip_preserves_hash():
    cfg = config_from_dict({"seed": 9, "dataset": {"n_clips": 48},
                            "flow": {"lam": 0.2}})
    again = config_from_dict(config_to_dict(cfg))
    assert config_hash(cfg) == config_hash(again)
    assert again.flow.lam == 0.2
    assert again.dataset.n_clips == 48


def test_load_config_roundtrip(tmp_path):
    path = tmp_path / "run.json"
    path.write_text(json.dumps({"seed": 4, "sampler": {"scheme": "midpoint"}}))
    cfg = load_config(path)
    assert cfg.seed == 4
    assert cfg.sampler.scheme == "midpoint"


def test_load_config_missing_file(tmp_path):
    with pytest.raises(ConfigError, match="not found"):
        load_config(tmp_path / "absent.json")


def test_load_config_invalid_json(tmp_path):
    path = tmp_path / "bad.json"
    path.write_text("{not json")
    with pytest.raises(ConfigError, match="not valid JSON"):
        load_config(path)


def test_default_dataclass_is_valid():
    validate_config(RunConfig())
