import json

import pytest

from hydramix import config
from hydramix.data import DatasetSpec
from hydramix.errors import ConfigError, DataIOError
from hydramix.model import ModelConfig
from hydramix.training import Hyperparams


def test_defaults_materialised():
    doc = json.loads(config.load().dumps())
    assert doc["mode"] == "hydramix" and doc["budget"] == 100 and doc["seed"] == 0
    assert doc["hyperparams"]["epochs"] == 100 and doc["hyperparams"]["batch_size"] == 32
    assert doc["hyperparams"]["joint"]["sce_unlabelled"] == {"delta": 0.1, "rho": 1.0, "log_zero_clamp": -4.0}
    assert doc["model"]["depth"] == 10 and doc["dataset"]["n_train"] == 18000
    assert doc["sweep"]["budgets"] == [50, 100, 300, 500, 700, 1000, 3000]
    assert "mode" not in doc["hyperparams"] and "seed" not in doc["hyperparams"]


def test_round_trip_is_fixed_point():
    cfg = config.from_dict({"mode": "partial", "budget": "full", "hyperparams": {"epochs": 3, "joint": {"mu": 0.5}}})
    text = cfg.dumps()
    assert config.from_dict(json.loads(text)).dumps() == text
    assert cfg.hp().mode == "partial" and cfg.hp().epochs == 3 and cfg.hp().joint.mu == 0.5
    assert cfg.hp().joint.sce_labelled.rho == 0.1


def test_partial_sce_override_keeps_other_fields():
    cfg = config.from_dict({"hyperparams": {"joint": {"sce_labelled": {"rho": 0.0}}}})
    assert cfg.hyperparams.joint.sce_labelled.delta == 1.0 and cfg.hyperparams.joint.sce_labelled.rho == 0.0


@pytest.mark.parametrize(
    "doc,field",
    [
        ({"colour": "red"}, "colour"),
        ({"hyperparams": {"epoch": 3}}, "hyperparams.epoch"),
        ({"hyperparams": {"joint": {"sce_labelled": {"beta": 1}}}}, "hyperparams.joint.sce_labelled.beta"),
        ({"mode": "fancy"}, "mode"),
        ({"budget": 0}, "budget"),
        ({"budget": "most"}, "budget"),
        ({"sweep": {"modes": ["hydramix", "other"]}}, "sweep.modes.1"),
        ({"dataset": {"n_train": "many"}}, "dataset.n_train"),
    ],
)
def test_schema_rejections_name_the_field(doc, field):
    with pytest.raises(ConfigError) as info:
        config.from_dict(doc)
    assert info.value.field == field


@pytest.mark.parametrize(
    "doc,field",
    [
        ({"hyperparams": {"epochs": 0}}, "epochs"),
        ({"model": {"depth": 12}}, "depth"),
        ({"hyperparams": {"joint": {"mu": 1.5}}}, "mu"),
        ({"dataset": {"classes": []}}, "classes"),
    ],
)
def test_semantic_rejections(doc, field):
    with pytest.raises(ConfigError) as info:
        config.from_dict(doc)
    assert info.value.field == field


def test_load_from_file(tmp_path):
    path = tmp_path / "c.json"
    path.write_text(json.dumps({"seed": 7}))
    assert config.load(path).seed == 7
    path.write_text("{not json")
    with pytest.raises(ConfigError):
        config.load(path)
    with pytest.raises(DataIOError):
        config.load(tmp_path / "missing.json")


def test_dataset_spec_file(tmp_path):
    path = tmp_path / "spec.json"
    path.write_text(json.dumps({"n_train": 6, "n_test": 3}))
    assert config.load_dataset_spec(path) == DatasetSpec(n_train=6, n_test=3)
    path.write_text(json.dumps({"n_train": 6, "size": 3}))
    with pytest.raises(ConfigError) as info:
        config.load_dataset_spec(path)
    assert info.value.field == "size"


def test_model_config_takes_dataset_classes():
    cfg = config.load()
    assert cfg.model_config(4) == ModelConfig(num_classes=4)
    assert config.load().hyperparams == Hyperparams()
