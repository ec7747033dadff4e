"""Experiment configuration files: one JSON document, four sections.

Missing keys take the defaults below, unknown keys are rejected, and every
error names the offending key as a JSON pointer (``/train/lambda``).
"""

from __future__ import annotations

import copy
import json
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Optional

from .errors import ConfigError
from .transforms import TransformFamily

DEFAULTS: dict[str, dict[str, Any]] = {
    "data": {"classes": 12, "per_class": 60, "H": 32, "seed": 0, "splits": {"base": 7, "val": 0, "novel": 5}},
    "model": {"widths": [32, 64, 128, 128], "d": 128},
    "train": {
        "lambda": 1.0,
        "alpha": 0.5,
        "beta": 1.0,
        "lr": 0.05,
        "momentum": 0.9,
        "weight_decay": 5e-4,
        "epochs": 30,
        "B": 16,
        "m": None,
        "family": "VS16",
        "distill_generations": 1,
        "seed": 0,
    },
    "eval": {"N": 5, "K": 1, "Q": 15, "episodes": 600, "head": "logistic", "seed": 0},
}

_INT, _NUM = "int", "number"
_TYPES = {
    "/data/classes": _INT,
    "/data/per_class": _INT,
    "/data/H": _INT,
    "/data/seed": _INT,
    "/data/splits/base": _INT,
    "/data/splits/val": _INT,
    "/data/splits/novel": _INT,
    "/model/d": _INT,
    "/train/lambda": _NUM,
    "/train/alpha": _NUM,
    "/train/beta": _NUM,
    "/train/lr": _NUM,
    "/train/momentum": _NUM,
    "/train/weight_decay": _NUM,
    "/train/epochs": _INT,
    "/train/B": _INT,
    "/train/distill_generations": _INT,
    "/train/seed": _INT,
    "/eval/N": _INT,
    "/eval/K": _INT,
    "/eval/Q": _INT,
    "/eval/episodes": _INT,
    "/eval/seed": _INT,
}


def _merge(defaults: dict, given: Any, pointer: str) -> dict:
    if not isinstance(given, dict):
        raise ConfigError(pointer or "/", f"expected an object, got {type(given).__name__}")
    out = copy.deepcopy(defaults)
    for key, value in given.items():
        here = f"{pointer}/{key}"
        if key not in defaults:
            raise ConfigError(here, f"unknown key (allowed: {', '.join(defaults)})")
        if isinstance(defaults[key], dict):
            out[key] = _merge(defaults[key], value, here)
        else:
            out[key] = value
    return out


def _check_type(pointer: str, value: Any, kind: str) -> None:
    if isinstance(value, bool) or not isinstance(value, (int, float)):
        raise ConfigError(pointer, f"expected a {kind}, got {json.dumps(value)}")
    if kind == _INT and not float(value).is_integer():
        raise ConfigError(pointer, f"expected an integer, got {value}")


def _lookup(doc: dict, pointer: str):
    node = doc
    for part in pointer.strip("/").split("/"):
        node = node[part]
    return node


def _validate(doc: dict) -> None:
    for pointer, kind in _TYPES.items():
        _check_type(pointer, _lookup(doc, pointer), kind)
    for pointer in ("/train/lambda", "/train/alpha", "/train/beta", "/train/momentum", "/train/weight_decay", "/data/seed",
                    "/train/seed", "/eval/seed", "/data/splits/val"):
        if _lookup(doc, pointer) < 0:
            raise ConfigError(pointer, "must be non-negative")
    for pointer in ("/train/lr", "/train/epochs", "/train/B", "/train/distill_generations", "/data/per_class",
                    "/data/splits/base", "/eval/N", "/eval/K", "/eval/Q", "/eval/episodes"):
        if _lookup(doc, pointer) <= 0:
            raise ConfigError(pointer, "must be positive")

    d = doc["data"]
    if d["H"] < 16 or d["H"] % 2:
        raise ConfigError("/data/H", f"must be even and at least 16, got {d['H']}")
    if d["classes"] < 6:
        raise ConfigError("/data/classes", f"must be at least 6, got {d['classes']}")
    s = d["splits"]
    if s["base"] + s["val"] + s["novel"] != d["classes"]:
        raise ConfigError("/data/splits", f"base+val+novel = {s['base'] + s['val'] + s['novel']} but classes = {d['classes']}")

    widths = doc["model"]["widths"]
    if not isinstance(widths, list) or not widths or not all(isinstance(w, int) and not isinstance(w, bool) and w > 0 for w in widths):
        raise ConfigError("/model/widths", f"expected a non-empty list of positive integers, got {json.dumps(widths)}")
    if doc["model"]["d"] != widths[-1]:
        raise ConfigError("/model/d", f"embedding size {doc['model']['d']} must equal the last width {widths[-1]}")

    t = doc["train"]
    fam = t["family"]
    if fam is not None:
        if not isinstance(fam, str):
            raise ConfigError("/train/family", f"expected a family name or null, got {json.dumps(fam)}")
        if fam.lower() == "none":
            t["family"] = None
        else:
            try:
                t["family"] = TransformFamily.parse(fam).tag
            except ValueError as exc:
                raise ConfigError("/train/family", str(exc)) from None
    if t["m"] is not None:
        _check_type("/train/m", t["m"], _INT)
        limit = 1 if t["family"] is None else TransformFamily.parse(t["family"]).cardinality
        if not 1 <= t["m"] <= limit:
            raise ConfigError("/train/m", f"must lie in [1, {limit}] for family {t['family']}")

    e = doc["eval"]
    if e["head"] not in ("logistic", "cosine"):
        raise ConfigError("/eval/head", f"expected 'logistic' or 'cosine', got {json.dumps(e['head'])}")
    if e["N"] > s["novel"]:
        raise ConfigError("/eval/N", f"{e['N']}-way episodes need {e['N']} novel classes, the split has {s['novel']}")


@dataclass
class ExperimentConfig:
    """A resolved configuration; ``doc`` is the full JSON-ready dictionary."""

    doc: dict

    @classmethod
    def from_dict(cls, given: Optional[dict] = None) -> "ExperimentConfig":
        doc = _merge(DEFAULTS, given if given is not None else {}, "")
        _validate(doc)
        return cls(doc)

    @classmethod
    def load(cls, path) -> "ExperimentConfig":
        try:
            given = json.loads(Path(path).read_text())
        except json.JSONDecodeError as exc:
            raise ConfigError("/", f"invalid JSON at line {exc.lineno} column {exc.colno}: {exc.msg}") from None
        return cls.from_dict(given)

    def override(self, seed: Optional[int] = None, family: Optional[str] = None, episodes: Optional[int] = None):
        doc = copy.deepcopy(self.doc)
        if seed is not None:
            for section in ("data", "train", "eval"):
                doc[section]["seed"] = seed
        if family is not None:
            doc["train"]["family"] = family
        if episodes is not None:
            doc["eval"]["episodes"] = episodes
        _validate(doc)
        return ExperimentConfig(doc)

    def to_json(self) -> str:
        return json.dumps(self.doc, sort_keys=True, indent=2) + "\n"

    @property
    def data(self) -> dict:
        return self.doc["data"]

    @property
    def eval(self) -> dict:
        return self.doc["eval"]

    @property
    def widths(self) -> tuple[int, ...]:
        return tuple(self.doc["model"]["widths"])

    def train_config(self):
        from .train import TrainConfig

        t = self.doc["train"]
        return TrainConfig(
            lam=float(t["lambda"]),
            alpha=float(t["alpha"]),
            beta=float(t["beta"]),
            lr=float(t["lr"]),
            momentum=float(t["momentum"]),
            weight_decay=float(t["weight_decay"]),
            epochs=int(t["epochs"]),
            batch_size=int(t["B"]),
            m=None if t["m"] is None else int(t["m"]),
            family=t["family"],
            distill_generations=int(t["distill_generations"]),
            seed=int(t["seed"]),
        )

    def split_map(self) -> dict[int, str]:
        from .data import split_map

        s = self.data["splits"]
        return split_map(int(self.data["classes"]), int(s["base"]), int(s["val"]))
