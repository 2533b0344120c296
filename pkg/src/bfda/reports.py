"""Deterministic JSON report writing with schema validation."""
from __future__ import annotations

import json
import math
import os
from functools import lru_cache
from importlib import resources

import jsonschema

SCHEMAS = ("eval_report", "region_table", "history", "sweep")


@lru_cache(maxsize=None)
def load_schema(kind: str) -> dict:
    if kind not in SCHEMAS:
        raise KeyError(f"unknown report kind {kind!r}")
    text = resources.files("bfda").joinpath("schemas", f"{kind}.schema.json").read_text()
    return json.loads(text)


def validate(doc: dict, kind: str) -> None:
    jsonschema.validate(doc, load_schema(kind))


def _clean(obj):
    if isinstance(obj, float):
        return None if not math.isfinite(obj) else obj
    if isinstance(obj, dict):
        return {str(k): _clean(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_clean(v) for v in obj]
    if hasattr(obj, "item"):  # numpy / torch scalars
        return _clean(obj.item())
    return obj


def dumps(doc) -> str:
    return json.dumps(_clean(doc), indent=1, sort_keys=True) + "\n"


def write_report(path: str, doc: dict, kind: str | None = None) -> dict:
    """Validate (when ``kind`` is given) and write ``doc`` with sorted keys and no timestamps."""
    doc = _clean(doc)
    if kind is not None:
        validate(doc, kind)
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    with open(path, "w") as f:
        f.write(dumps(doc))
    return doc
