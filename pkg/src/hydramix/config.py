"""Run configuration: one JSON document covering data, model, hyperparameters and paths.

Documents are schema-checked before any work starts. Unknown keys are
errors, and ``to_dict`` always writes every field, defaults included, so the
echoed ``config_resolved.json`` reproduces a run without the original file.
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

import jsonschema

from .data import DatasetSpec
from .errors import ConfigError, DataIOError
from .losses import JointLossConfig
from .model import ModelConfig
from .training import MODES, SWEEP_MODES, Hyperparams

DEFAULT_BUDGETS = (50, 100, 300, 500, 700, 1000, 3000)
DEFAULT_SWEEP_MODES = ("partial", "hydramix", "hydramix_nosce")

_NUM = {"type": "number"}
_INT = {"type": "integer"}
_POS_INT = {"type": "integer", "minimum": 1}


def _obj(props, required=()):
    return {"type": "object", "properties": props, "required": list(required), "additionalProperties": False}


_SCE = _obj({"delta": _NUM, "rho": _NUM, "log_zero_clamp": _NUM})
_BUDGET = {"anyOf": [{"type": "integer", "minimum": 1}, {"const": "full"}]}

SCHEMA = _obj(
    {
        "mode": {"enum": list(MODES)},
        "budget": _BUDGET,
        "seed": _INT,
        "dataset": _obj(
            {
                "n_train": _POS_INT,
                "n_test": _POS_INT,
                "classes": {"type": "array", "items": {"type": "string"}},
                "seed": _INT,
                "patch_size": _INT,
            }
        ),
        "model": _obj(
            {"depth": _INT, "width": _INT, "num_classes": _INT, "l2_coeff": _NUM, "input_size": _INT}
        ),
        "hyperparams": _obj(
            {
                "epochs": _INT,
                "batch_size": _INT,
                "lr_start": _NUM,
                "lr_end": _NUM,
                "k_augment": _INT,
                "temperature": _NUM,
                "mixup_alpha": _NUM,
                "mixup_beta": _NUM,
                "joint": _obj(
                    {
                        "mu": _NUM,
                        "sce_labelled": _SCE,
                        "sce_unlabelled": _SCE,
                        "background_index": {"type": ["integer", "null"]},
                    }
                ),
                "adam_beta1": _NUM,
                "adam_beta2": _NUM,
                "adam_eps": _NUM,
                "disable_sce": {"type": "boolean"},
                "eval_batch_size": _POS_INT,
                "rampup_epochs": _NUM,
            }
        ),
        "sweep": _obj(
            {
                "budgets": {"type": "array", "items": _BUDGET, "minItems": 1},
                "modes": {"type": "array", "items": {"enum": list(SWEEP_MODES)}, "minItems": 1},
                "seeds": _POS_INT,
            }
        ),
        "paths": _obj({"data": {"type": ["string", "null"]}, "out": {"type": ["string", "null"]}}),
    }
)

DATASET_SCHEMA = SCHEMA["properties"]["dataset"]


@dataclass
class SweepConfig:
    budgets: list = field(default_factory=lambda: list(DEFAULT_BUDGETS))
    modes: list = field(default_factory=lambda: list(DEFAULT_SWEEP_MODES))
    seeds: int = 3


@dataclass
class Paths:
    data: str | None = None
    out: str | None = None


@dataclass
class RunConfig:
    mode: str = "hydramix"
    budget: int | str = 100
    seed: int = 0
    dataset: DatasetSpec = field(default_factory=DatasetSpec)
    model: ModelConfig = field(default_factory=ModelConfig)
    hyperparams: Hyperparams = field(default_factory=Hyperparams)
    sweep: SweepConfig = field(default_factory=SweepConfig)
    paths: Paths = field(default_factory=Paths)

    def hp(self):
        """Hyperparams with the run-level mode and seed applied."""
        return replace(self.hyperparams, mode=self.mode, seed=self.seed).validate()

    def model_config(self, num_classes):
        return replace(self.model, num_classes=num_classes).validate()

    def to_dict(self):
        out = asdict(self)
        # mode and seed live at the top level only
        out["hyperparams"].pop("mode")
        out["hyperparams"].pop("seed")
        return out

    def dumps(self):
        return json.dumps(self.to_dict(), indent=1, sort_keys=True) + "\n"


def _field_path(error):
    path = ".".join(str(p) for p in error.absolute_path)
    if error.validator == "additionalProperties":
        extra = sorted(set(error.instance) - set(error.schema.get("properties", {})))
        return ".".join(filter(None, [path, extra[0] if extra else ""]))
    return path or "<root>"


def check_schema(doc, schema=SCHEMA):
    """Raise ConfigError naming the first offending field."""
    errors = sorted(jsonschema.Draft7Validator(schema).iter_errors(doc), key=lambda e: list(e.absolute_path))
    if errors:
        err = errors[0]
        where = _field_path(err)
        raise ConfigError(f"invalid config at {where}: {err.message}", where)


def _build(cls, values):
    known = {f.name for f in fields(cls)}
    return cls(**{k: v for k, v in values.items() if k in known})


def _sce(values, default):
    return replace(default, **values) if values else default


def from_dict(doc):
    """Validate a JSON document and materialise every default."""
    check_schema(doc)
    doc = dict(doc)
    hp_doc = dict(doc.get("hyperparams", {}))
    joint_doc = dict(hp_doc.pop("joint", {}))
    base_joint = JointLossConfig()
    joint = replace(
        base_joint,
        **{k: v for k, v in joint_doc.items() if k not in ("sce_labelled", "sce_unlabelled")},
        sce_labelled=_sce(joint_doc.get("sce_labelled"), base_joint.sce_labelled),
        sce_unlabelled=_sce(joint_doc.get("sce_unlabelled"), base_joint.sce_unlabelled),
    )
    cfg = RunConfig(
        mode=doc.get("mode", "hydramix"),
        budget=doc.get("budget", 100),
        seed=doc.get("seed", 0),
        dataset=_build(DatasetSpec, doc.get("dataset", {})),
        model=_build(ModelConfig, doc.get("model", {})),
        hyperparams=replace(Hyperparams(), **hp_doc, joint=joint),
        sweep=_build(SweepConfig, doc.get("sweep", {})),
        paths=_build(Paths, doc.get("paths", {})),
    )
    return validate(cfg)


def validate(cfg):
    cfg.dataset.validate()
    cfg.model.validate()
    cfg.hp()
    if cfg.mode not in MODES:
        raise ConfigError(f"mode must be one of {MODES}, got {cfg.mode!r}", "mode")
    return cfg


def _read_json(path):
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise DataIOError(f"cannot read config {path}: {exc.strerror or exc}") from exc
    try:
        return json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path} is not valid JSON: {exc}", "<root>") from exc


def load(path=None):
    """Read a RunConfig; ``None`` gives all defaults."""
    return from_dict({} if path is None else _read_json(path))


def load_dataset_spec(path):
    doc = _read_json(path)
    check_schema(doc, DATASET_SCHEMA)
    return _build(DatasetSpec, doc).validate()


__all__ = [
    "DEFAULT_BUDGETS",
    "DEFAULT_SWEEP_MODES",
    "Paths",
    "RunConfig",
    "SCHEMA",
    "SweepConfig",
    "check_schema",
    "from_dict",
    "load",
    "load_dataset_spec",
    "validate",
]
