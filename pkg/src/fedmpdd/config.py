"""Strict JSON experiment files.

Example::

    {
      "model": {"kind": "logistic", "classes": 10, "input_dim": 784},
      "data": {"source": "idx", "partition": "two_class",
               "train_images": "train-images-idx3-ubyte", ...},
      "federation": {"N": 100, "beta": 0.1, "K": 1000, "eta": 0.01,
                     "batch": 1, "eval_every": 50},
      "compressor": {"kind": "mpdd", "m": 200},
      "stop": {"byte_budget": 2000000, "target_accuracy": null},
      "seeds": {"master": 17, "data": 2024}
    }
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Optional

import jsonschema

from .compressors import CompressorConfig
from .data import Dataset, load_idx_dataset, partition, synth_logistic
from .federation import ExperimentConfig
from .models import MLP1, Logistic, ModelKind
from .privacy import AttackConfig

_INT = {"type": "integer"}
_POS_INT = {"type": "integer", "minimum": 1}
_SEED = {"type": "integer", "minimum": 0, "maximum": 2**64 - 1}


def _obj(props: dict, required=()) -> dict:
    return {
        "type": "object",
        "properties": props,
        "required": list(required),
        "additionalProperties": False,
    }


SCHEMA = _obj(
    {
        "model": _obj(
            {
                "kind": {"enum": ["logistic", "mlp1"]},
                "classes": {"type": "integer", "minimum": 2},
                "input_dim": _POS_INT,
                "hidden": _POS_INT,
                "init_scale": {"type": "number", "minimum": 0},
            },
            ["kind", "classes"],
        ),
        "data": _obj(
            {
                "source": {"enum": ["synth", "idx"]},
                "partition": {"enum": ["iid", "two_class"]},
                "n_train": _POS_INT,
                "n_test": _POS_INT,
                "separation": {"type": "number", "minimum": 0},
                "train_images": {"type": "string"},
                "train_labels": {"type": "string"},
                "test_images": {"type": "string"},
                "test_labels": {"type": "string"},
            },
            ["source", "partition"],
        ),
        "federation": _obj(
            {
                "N": _POS_INT,
                "beta": {"type": "number", "exclusiveMinimum": 0, "maximum": 1},
                "K": _POS_INT,
                "eta": {"type": "number", "exclusiveMinimum": 0},
                "batch": _POS_INT,
                "eval_every": _POS_INT,
            },
            ["N", "beta", "K", "eta", "batch"],
        ),
        "compressor": _obj(
            {
                "kind": {"enum": ["full", "mpdd", "qsgd", "topk", "ldp_full"]},
                "m": _POS_INT,
                "bits": {"type": "integer", "minimum": 1, "maximum": 16},
                "k": _POS_INT,
                "noise": {"enum": ["gaussian", "laplace"]},
                "scale": {"type": "number", "minimum": 0},
            },
            ["kind"],
        ),
        "stop": _obj(
            {
                "byte_budget": {"type": ["integer", "null"], "minimum": 0},
                "target_accuracy": {"type": ["number", "null"], "minimum": 0, "maximum": 1},
            }
        ),
        "seeds": _obj({"master": _SEED, "data": _SEED}, ["master", "data"]),
        "attack": _obj(
            {
                "iterations": _POS_INT,
                "lr": {"type": "number", "exclusiveMinimum": 0},
                "label_known": {"type": "boolean"},
                "init_seed": _SEED,
                "finite_diff_h": {"type": "number", "exclusiveMinimum": 0},
                "sample_index": {"type": "integer", "minimum": 0},
            }
        ),
    },
    ["model", "data", "federation", "compressor", "seeds"],
)

# compressor fields each kind requires
_KIND_FIELDS = {"full": (), "mpdd": ("m",), "qsgd": ("bits",), "topk": ("k",),
                "ldp_full": ("noise", "scale")}


class ConfigError(Exception):
    """A config violation; ``kind`` is parse|unknown_key|missing_key|type|range."""

    def __init__(self, kind: str, pointer: str, message: str):
        super().__init__(f"{kind} at {pointer or '/'}: {message}")
        self.kind = kind
        self.pointer = pointer
        self.message = message


def _pointer(path) -> str:
    return "".join("/" + str(p).replace("~", "~0").replace("/", "~1") for p in path)


def _no_duplicates(pairs):
    out = {}
    for key, value in pairs:
        if key in out:
            raise ConfigError("parse", "", f"duplicate key {key!r}")
        out[key] = value
    return out


def _classify(err: jsonschema.ValidationError) -> ConfigError:
    path = list(err.absolute_path)
    if err.validator == "additionalProperties":
        allowed = set(err.schema.get("properties", {}))
        extra = sorted(k for k in err.instance if k not in allowed)
        return ConfigError("unknown_key", _pointer(path + extra[:1]), f"unknown key {extra[0]!r}")
    if err.validator == "required":
        missing = err.message.split("'")[1]
        return ConfigError("missing_key", _pointer(path + [missing]), err.message)
    if err.validator in ("type", "enum"):
        return ConfigError("type", _pointer(path), err.message)
    return ConfigError("range", _pointer(path), err.message)


@dataclass
class ExperimentPlan:
    """A validated experiment: the round-engine config plus how to build its data."""

    config: ExperimentConfig
    raw: dict
    data: dict
    data_seed: int
    init_scale: float
    attack: AttackConfig
    sample_index: int
    base_dir: Path

    def load_data(self) -> tuple[Dataset, Optional[Dataset]]:
        d = self.data
        model = self.config.model
        if d["source"] == "synth":
            n_train = d.get("n_train", 2000)
            n_test = d.get("n_test", 0)
            full = synth_logistic(
                n_train + n_test, model.input_dim, model.classes,
                d.get("separation", 3.0), self.data_seed,
            )
            train, test = full.split(n_train)
            return train, (test if n_test else None)
        base = self.base_dir
        train = load_idx_dataset(base / d["train_images"], base / d["train_labels"], model.classes)
        test = None
        if "test_images" in d:
            test = load_idx_dataset(base / d["test_images"], base / d["test_labels"], model.classes)
        if train.inputs.shape[1] != model.input_dim:
            raise ConfigError(
                "range", "/model/input_dim",
                f"images have {train.inputs.shape[1]} pixels, model expects {model.input_dim}",
            )
        return train, test

    def shards(self, train: Dataset):
        return partition(train, self.config.clients, self.data["partition"], self.data_seed)


def parse_config(text: str, base_dir: Path = Path(".")) -> ExperimentPlan:
    try:
        raw = json.loads(text, object_pairs_hook=_no_duplicates)
    except json.JSONDecodeError as exc:
        raise ConfigError("parse", "", str(exc)) from None
    validator = jsonschema.Draft202012Validator(SCHEMA)
    errors = sorted(validator.iter_errors(raw), key=lambda e: (len(e.absolute_path), e.path))
    if errors:
        raise _classify(errors[0])
    return _build(raw, base_dir)


def load_config(path) -> ExperimentPlan:
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError("parse", "", f"cannot read {path}: {exc}") from None
    return parse_config(text, path.parent)


def _build(raw: dict, base_dir: Path) -> ExperimentPlan:
    m = raw["model"]
    data = raw["data"]
    if data["source"] == "idx":
        for key in ("train_images", "train_labels"):
            if key not in data:
                raise ConfigError("missing_key", f"/data/{key}", f"idx source needs {key}")
        if ("test_images" in data) != ("test_labels" in data):
            raise ConfigError("missing_key", "/data", "test_images and test_labels go together")
    input_dim = m.get("input_dim", 784 if data["source"] == "idx" else None)
    if input_dim is None:
        raise ConfigError("missing_key", "/model/input_dim", "synth data needs input_dim")
    model: ModelKind
    if m["kind"] == "logistic":
        model = Logistic(m["classes"], input_dim)
    else:
        if "hidden" not in m:
            raise ConfigError("missing_key", "/model/hidden", "mlp1 needs hidden")
        model = MLP1(m["hidden"], m["classes"], input_dim)

    c = raw["compressor"]
    for key in _KIND_FIELDS[c["kind"]]:
        if key not in c:
            raise ConfigError("missing_key", f"/compressor/{key}", f"{c['kind']} needs {key}")
    compressor = CompressorConfig(**c)
    if c["kind"] == "topk" and c["k"] > model.num_params:
        raise ConfigError("range", "/compressor/k", f"k exceeds model dimension {model.num_params}")

    f = raw["federation"]
    stop = raw.get("stop", {})
    cfg = ExperimentConfig(
        model=model,
        clients=f["N"],
        beta=f["beta"],
        rounds=f["K"],
        eta=f["eta"],
        batch_size=f["batch"],
        compressor=compressor,
        master_seed=raw["seeds"]["master"],
        byte_budget=stop.get("byte_budget"),
        target_accuracy=stop.get("target_accuracy"),
        eval_every=f.get("eval_every", 1),
    )
    if data["source"] == "synth" and data.get("n_train", 2000) < f["N"]:
        raise ConfigError("range", "/data/n_train", "fewer training samples than clients")
    a = dict(raw.get("attack", {}))
    sample_index = a.pop("sample_index", 0)
    return ExperimentPlan(
        config=cfg,
        raw=raw,
        data=data,
        data_seed=raw["seeds"]["data"],
        init_scale=m.get("init_scale", 0.0),
        attack=AttackConfig(**a),
        sample_index=sample_index,
        base_dir=base_dir,
    )


def resolved_config(plan: ExperimentPlan) -> dict[str, Any]:
    """The config echo written next to run outputs, with defaults filled in."""
    cfg = plan.config
    out = json.loads(json.dumps(plan.raw))
    out["federation"].setdefault("eval_every", cfg.eval_every)
    out.setdefault("stop", {})
    out["stop"].setdefault("byte_budget", cfg.byte_budget)
    out["stop"].setdefault("target_accuracy", cfg.target_accuracy)
    out["model"].setdefault("input_dim", cfg.model.input_dim)
    out["model"]["num_params"] = cfg.model.num_params
    out["federation"]["clients_per_round"] = cfg.clients_per_round
    out["federation"]["round_bytes"] = cfg.round_bytes
    return out
