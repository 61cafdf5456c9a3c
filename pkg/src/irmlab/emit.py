"""Artifact writers (CSV, PGM, JSON) and the JSON schemas they validate against."""

from __future__ import annotations

import csv
import io
import json
from pathlib import Path

import jsonschema
import numpy as np

from .analysis import HeatmapMatrix


def write_json(path, obj) -> None:
    Path(path).write_text(json.dumps(obj, sort_keys=True, indent=2) + "\n", encoding="utf-8")


def read_json(path):
    return json.loads(Path(path).read_text(encoding="utf-8"))


# ---------------------------------------------------------------- heatmap CSV


def heatmap_to_csv(H: HeatmapMatrix) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["block", *range(H.values.shape[1])])
    for block, row in zip(H.blocks, H.values):
        w.writerow([block, *(repr(float(v)) for v in row)])
    return buf.getvalue()


def write_heatmap_csv(path, H: HeatmapMatrix) -> None:
    Path(path).write_text(heatmap_to_csv(H), encoding="utf-8", newline="")


def read_heatmap_csv(path) -> HeatmapMatrix:
    rows = list(csv.reader(Path(path).read_text(encoding="utf-8").splitlines()))
    if not rows or rows[0][0] != "block":
        raise ValueError(f"{path}: not a heatmap CSV (missing 'block' header)")
    width = len(rows[0]) - 1
    blocks, values = [], []
    for r in rows[1:]:
        if len(r) != width + 1:
            raise ValueError(f"{path}: ragged row for block {r[0]}")
        blocks.append(int(r[0]))
        values.append([float(v) for v in r[1:]])
    return HeatmapMatrix(np.array(values).reshape(len(blocks), width), blocks, {"source": str(path)})


# ---------------------------------------------------------------- heatmap PGM


def heatmap_to_pgm(H: HeatmapMatrix) -> tuple[bytes, dict]:
    """8-bit P5 image (width d_model, height |plan|) on a symmetric scale.

    Value v maps to round(255 * (v + vmax) / (2 vmax)), so 0 sits at mid-grey
    (127.5 rounds to 128). vmax = max |H|; an all-zero map is uniformly 128.
    """
    V = H.values
    vmax = float(np.abs(V).max()) if V.size else 0.0
    if vmax == 0.0:
        pix = np.full(V.shape, 128, dtype=np.uint8)
    else:
        pix = np.rint(255.0 * (V + vmax) / (2.0 * vmax)).clip(0, 255).astype(np.uint8)
    height, width = V.shape
    data = f"P5\n{width} {height}\n255\n".encode("ascii") + pix.tobytes()
    sidecar = {"format": "P5", "width": width, "height": height, "maxval": 255,
               "vmax": vmax, "vmin": -vmax, "zero_level": 128 if vmax == 0.0 else 127.5,
               "mapping": "pixel = round(255 * (value + vmax) / (2 * vmax))",
               "rows": [int(b) for b in H.blocks]}
    return data, sidecar


def write_heatmap_pgm(path, H: HeatmapMatrix) -> dict:
    data, sidecar = heatmap_to_pgm(H)
    path = Path(path)
    path.write_bytes(data)
    write_json(path.with_suffix(".json"), sidecar)
    return sidecar


def read_pgm(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    parts = raw.split(b"\n", 3)
    if parts[0] != b"P5":
        raise ValueError(f"{path}: not a binary PGM")
    width, height = map(int, parts[1].split())
    return np.frombuffer(parts[3], dtype=np.uint8).reshape(height, width)


# ---------------------------------------------------------------- schemas

_num = {"type": "number"}
_int = {"type": "integer"}
_hash = {"type": ["string", "null"], "pattern": "^[0-9a-f]{64}$"}

SCHEMAS: dict[str, dict] = {
    "striation": {
        "type": "object",
        "required": ["ss_index", "ss_layer", "ratio", "grand_mean"],
        "properties": {
            "ss_index": {"type": "number", "minimum": 0},
            "ss_layer": {"type": "number", "minimum": 0},
            "ratio": {"oneOf": [{"type": "number", "minimum": 0}, {"const": "inf"}]},
            "grand_mean": _num,
        },
    },
    "dominance": {
        "type": "object",
        "required": ["scores", "top_index", "z_score"],
        "properties": {
            "scores": {"type": "array", "items": {"type": "number", "minimum": 0}, "minItems": 1},
            "top_index": {"type": "integer", "minimum": 0},
            "z_score": _num,
        },
    },
    "histogram": {
        "type": "object",
        "required": ["k", "counts", "labels"],
        "properties": {
            "k": {"type": "integer", "minimum": 1},
            "counts": {"type": "array", "items": {"type": "integer", "minimum": 0}},
            "labels": {"type": "array", "items": {"type": "string", "pattern": "^[pg][0-9]+$"}},
        },
    },
    "lmhead": {
        "type": "object",
        "required": ["factor", "max_abs", "median", "outliers", "top_tokens"],
        "properties": {
            "factor": {"type": "number", "exclusiveMinimum": 0},
            "max_abs": {"type": "array", "items": {"type": "number", "minimum": 0}},
            "median": {"type": "number", "minimum": 0},
            "outliers": {"type": "array", "items": {"type": "integer", "minimum": 0}},
            "top_tokens": {"type": "object",
                           "additionalProperties": {"type": "array", "items": _int, "maxItems": 5}},
        },
    },
    "contrast": {
        "type": "object",
        "required": ["diff", "argmin", "argmax", "min", "max"],
        "properties": {"diff": {"type": "array", "items": _num}, "argmin": _int,
                       "argmax": _int, "min": _num, "max": _num},
    },
    "continuity": {
        "type": "object",
        "required": ["index", "delta", "mode", "on_index", "off_index_rms"],
        "properties": {"index": {"type": "integer", "minimum": 0}, "delta": _num,
                       "mode": {"enum": ["zeroed", "trained"]}, "on_index": _num,
                       "off_index_rms": {"type": "number", "minimum": 0}},
    },
    "fluency": {
        "type": "object",
        "required": ["base_ce", "injected_ce", "style", "base_marker_rate", "injected_marker_rate"],
        "properties": {"base_ce": {"type": "number", "minimum": 0},
                       "injected_ce": {"type": "number", "minimum": 0},
                       "style": {"enum": ["NEUTRAL", "ANGER", "SADNESS"]},
                       "base_marker_rate": {"type": "number", "minimum": 0, "maximum": 1},
                       "injected_marker_rate": {"type": "number", "minimum": 0, "maximum": 1}},
    },
    "pgm_sidecar": {
        "type": "object",
        "required": ["format", "width", "height", "maxval", "vmax", "vmin", "mapping", "rows"],
        "properties": {"format": {"const": "P5"}, "width": {"type": "integer", "minimum": 1},
                       "height": {"type": "integer", "minimum": 1}, "maxval": {"const": 255},
                       "vmax": {"type": "number", "minimum": 0}, "vmin": {"type": "number", "maximum": 0},
                       "rows": {"type": "array", "items": _int}},
    },
    "train_epoch": {
        "type": "object",
        "required": ["record", "epoch", "lr", "train_ce", "val_ce"],
        "properties": {"record": {"const": "epoch"}, "epoch": {"type": "integer", "minimum": 0},
                       "lr": {"type": "number", "exclusiveMinimum": 0},
                       "train_ce": {"type": "number", "minimum": 0},
                       "val_ce": {"type": "number", "minimum": 0}},
    },
    "train_summary": {
        "type": "object",
        "required": ["record", "kind", "initial_val_ce", "best_epoch", "best_val_ce",
                     "stopped_epoch", "stop_reason", "host_hash_before", "host_hash_after"],
        "properties": {"record": {"const": "summary"}, "kind": {"enum": ["irm", "host"]},
                       "initial_val_ce": {"type": ["number", "null"]},
                       "best_epoch": {"type": ["integer", "null"]},
                       "best_val_ce": {"type": ["number", "null"]},
                       "stopped_epoch": {"type": ["integer", "null"]},
                       "stop_reason": {"type": "string"},
                       "host_hash_before": _hash, "host_hash_after": _hash},
    },
}


def validate(kind: str, obj) -> None:
    """Raise ``jsonschema.ValidationError`` when ``obj`` does not match schema ``kind``."""
    jsonschema.validate(obj, SCHEMAS[kind])


def validate_train_report(path) -> list[dict]:
    records = [json.loads(line) for line in Path(path).read_text(encoding="utf-8").splitlines() if line]
    if not records or records[-1].get("record") != "summary":
        raise jsonschema.ValidationError(f"{path}: last record must be the summary")
    for rec in records[:-1]:
        validate("train_epoch", rec)
    validate("train_summary", records[-1])
    return records


def validate_heatmap_csv(path, n_rows: int | None = None, n_cols: int | None = None) -> None:
    H = read_heatmap_csv(path)
    if n_rows is not None and H.values.shape[0] != n_rows:
        raise jsonschema.ValidationError(f"{path}: {H.values.shape[0]} rows, expected {n_rows}")
    if n_cols is not None and H.values.shape[1] != n_cols:
        raise jsonschema.ValidationError(f"{path}: {H.values.shape[1]} columns, expected {n_cols}")


def validate_pgm(path) -> None:
    path = Path(path)
    sidecar = read_json(path.with_suffix(".json"))
    validate("pgm_sidecar", sidecar)
    pix = read_pgm(path)
    if pix.shape != (sidecar["height"], sidecar["width"]):
        raise jsonschema.ValidationError(f"{path}: image {pix.shape} disagrees with sidecar")
