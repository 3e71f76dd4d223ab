"""JSON Schemas for the dataset manifest, sample labels and evaluation reports."""
from __future__ import annotations

import jsonschema

_VEC3 = {"type": "array", "items": {"type": "number"}, "minItems": 3, "maxItems": 3}
_NUM_OR_NULL = {"type": ["number", "null"]}
_LIST_OR_NULL = {"type": ["array", "null"], "items": {"type": "number"}}

CAMERA_SCHEMA = {
    "type": "object",
    "required": ["fx", "fy", "cx", "cy", "width", "height", "rotation", "translation"],
    "properties": {
        "fx": {"type": "number", "exclusiveMinimum": 0},
        "fy": {"type": "number", "exclusiveMinimum": 0},
        "cx": {"type": "number"},
        "cy": {"type": "number"},
        "width": {"type": "integer", "minimum": 1},
        "height": {"type": "integer", "minimum": 1},
        "rotation": {"type": "array", "items": _VEC3, "minItems": 3, "maxItems": 3},
        "translation": _VEC3,
    },
}

CHAIN_SCHEMA = {
    "type": "object",
    "required": ["name", "joints", "link_radius"],
    "properties": {
        "name": {"type": "string"},
        "link_radius": {"type": "number", "exclusiveMinimum": 0},
        "scale": {"type": "number"},
        "joints": {
            "type": "array",
            "minItems": 2,
            "items": {
                "type": "object",
                "required": ["axis", "offset", "limit_lo", "limit_hi"],
                "properties": {
                    "axis": _VEC3,
                    "offset": _VEC3,
                    "limit_lo": {"type": "number"},
                    "limit_hi": {"type": "number"},
                },
            },
        },
    },
}

MANIFEST_SCHEMA = {
    "$schema": "https://json-schema.org/draft/2020-12/schema",
    "title": "robocascade dataset manifest",
    "type": "object",
    "required": ["format", "seed", "generator", "chain", "records", "splits"],
    "properties": {
        "format": {"const": "robocascade-dataset/1"},
        "seed": {"type": "integer"},
        "generator": {"type": "object"},
        "chain": CHAIN_SCHEMA,
        "records": {
            "type": "array",
            "items": {
                "type": "object",
                "required": ["id", "color", "mask", "label", "robot", "recording"],
                "properties": {
                    "id": {"type": "string", "pattern": "^[0-9]{6,}$"},
                    "color": {"type": "string"},
                    "mask": {"type": "string"},
                    "label": {"type": "string"},
                    "robot": {"type": "string"},
                    "recording": {"type": "string"},
                },
            },
        },
        "splits": {
            "type": "object",
            "required": ["train", "test"],
            "properties": {
                "train": {"type": "array", "items": {"type": "string"}},
                "test": {"type": "array", "items": {"type": "string"}},
            },
        },
    },
}

LABEL_SCHEMA = {
    "$schema": "https://json-schema.org/draft/2020-12/schema",
    "title": "robocascade sample label",
    "type": "object",
    "required": ["id", "robot", "recording", "angles", "joints_cam", "camera", "fg_fraction"],
    "properties": {
        "id": {"type": "string"},
        "robot": {"type": "string"},
        "recording": {"type": "string"},
        "angles": {"type": "array", "items": {"type": "number"}},
        "joints_cam": {"type": "array", "items": _VEC3, "minItems": 2},
        "camera": CAMERA_SCHEMA,
        "fg_fraction": {"type": "number", "minimum": 0, "maximum": 1},
    },
}

EVAL_REPORT_SCHEMA = {
    "type": "object",
    "required": ["robot", "sample_count", "mask_accuracy", "joint_error_separate_m", "joint_error_full_m",
                 "per_point_separate_m", "per_point_full_m", "baseline_centroid_m", "all_background_accuracy",
                 "per_recording", "test_ids"],
    "properties": {
        "robot": {"type": "string"},
        "sample_count": {"type": "integer", "minimum": 1},
        "mask_accuracy": {"type": ["number", "null"], "minimum": 0, "maximum": 100},
        "joint_error_separate_m": _NUM_OR_NULL,
        "joint_error_full_m": _NUM_OR_NULL,
        "per_point_separate_m": _LIST_OR_NULL,
        "per_point_full_m": _LIST_OR_NULL,
        "baseline_centroid_m": _NUM_OR_NULL,
        "all_background_accuracy": _NUM_OR_NULL,
        "per_recording": {
            "type": "object",
            "additionalProperties": {"type": "object", "additionalProperties": {"type": "number"}},
        },
        "test_ids": {"type": "array", "items": {"type": "string"}},
    },
}

EVAL_FILE_SCHEMA = {
    "$schema": "https://json-schema.org/draft/2020-12/schema",
    "title": "robocascade evaluation report",
    "type": "object",
    "required": ["format", "reports"],
    "properties": {
        "format": {"const": "robocascade-eval/1"},
        "reports": {"type": "array", "minItems": 1, "items": EVAL_REPORT_SCHEMA},
    },
}


def validate_manifest(doc: dict) -> None:
    jsonschema.validate(doc, MANIFEST_SCHEMA)


def validate_label(doc: dict) -> None:
    jsonschema.validate(doc, LABEL_SCHEMA)


def validate_eval(doc: dict) -> None:
    jsonschema.validate(doc, EVAL_FILE_SCHEMA)
