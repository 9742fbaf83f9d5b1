"""Packet feature manifest.

The raw feature space is a fixed list of 71 per-packet fields shipped as a data
file. Order matters: CSV columns, matrix columns, and serialized packet lines
all follow manifest order.
"""
from __future__ import annotations

import json
from dataclasses import dataclass
from importlib import resources

RAW_FEATURE_COUNT = 71


@dataclass(frozen=True)
class Field:
    name: str
    layer: str  # meta | l2 | l3 | l4 | derived
    kind: str   # numeric | categorical
    description: str


def _load() -> list[Field]:
    text = resources.files("flowcast.data").joinpath("feature_manifest.json").read_text()
    doc = json.loads(text)
    fields = [Field(x["name"], x["layer"], x["kind"], x["description"]) for x in doc["fields"]]
    if len(fields) != RAW_FEATURE_COUNT:
        raise RuntimeError(f"manifest has {len(fields)} fields, expected {RAW_FEATURE_COUNT}")
    return fields


FIELDS: list[Field] = _load()
FIELD_NAMES: list[str] = [f.name for f in FIELDS]
CATEGORICAL: tuple[str, ...] = tuple(f.name for f in FIELDS if f.kind == "categorical")

# label vocabulary: index order is the class-id order used by the classifier
LABELS: tuple[str, ...] = (
    "Normal",
    "DDoS",
    "BrowserHijacking",
    "CommandInjection",
    "XSS",
    "BackdoorMalware",
)
UNLABELED = "Unlabeled"
ATTACK_LABELS: tuple[str, ...] = LABELS[1:]
LABEL_TO_ID = {name: i for i, name in enumerate(LABELS)}

# binary view: everything that is not Normal is an attack
BINARY_LABELS: tuple[str, ...] = ("Normal", "Attack")


def to_binary(label: str) -> str:
    return "Normal" if label == "Normal" else "Attack"
