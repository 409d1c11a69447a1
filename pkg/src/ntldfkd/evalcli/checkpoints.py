"""Bit-exact JSON checkpoints for MLP models.

Parameters and batchnorm running statistics are stored as base64-encoded
little-endian float64 blobs next to a plain-text shape manifest, so files
are human-inspectable and reload to bit-identical logits.
"""

from __future__ import annotations

import base64
import json

import numpy as np

from .. import numerics as nm

__all__ = ["CheckpointError", "checkpoint_save", "checkpoint_load", "FORMAT_VERSION"]

FORMAT_VERSION = 1


class CheckpointError(ValueError):
    """Corrupt, truncated, or incompatible checkpoint file."""


def _encode(arr: np.ndarray) -> str:
    return base64.b64encode(
        np.ascontiguousarray(arr, dtype="<f8").tobytes()
    ).decode("ascii")


def _decode(blob: str, shape) -> np.ndarray:
    try:
        raw = base64.b64decode(blob.encode("ascii"), validate=True)
    except Exception as exc:
        raise CheckpointError(f"undecodable parameter blob: {exc}") from exc
    expected = int(np.prod(shape)) * 8
    if len(raw) != expected:
        raise CheckpointError(
            f"parameter blob holds {len(raw)} bytes, manifest says {expected}"
        )
    return np.frombuffer(raw, dtype="<f8").astype(np.float64).reshape(shape)


def _layer_arrays(model: nm.MlpModel):
    for i, layer in enumerate(model.layers):
        yield f"layers.{i}.weight", layer.weight
        yield f"layers.{i}.bias", layer.bias
        if layer.has_bn:
            bn = layer.bn
            yield f"layers.{i}.bn.gamma", bn.gamma
            yield f"layers.{i}.bn.beta", bn.beta
            yield f"layers.{i}.bn.running_mean", bn.running_mean
            yield f"layers.{i}.bn.running_var", bn.running_var


def checkpoint_save(path, model: nm.MlpModel, seed_provenance=None, config_snapshot=None):
    """Serialize a model (architecture, parameters, BN state) to ``path``."""
    arch = {
        "input_width": model.input_width,
        "feature_tap_index": model.feature_tap_index,
        "layers": [
            {
                "out": layer.weight.shape[0],
                "activation": layer.activation,
                "bn": (
                    {"momentum": layer.bn.momentum, "epsilon": layer.bn.epsilon}
                    if layer.has_bn
                    else None
                ),
            }
            for layer in model.layers
        ],
    }
    params = {
        name: {"shape": list(arr.shape), "data": _encode(arr)}
        for name, arr in _layer_arrays(model)
    }
    doc = {
        "format_version": FORMAT_VERSION,
        "architecture": arch,
        "params": params,
        "seed_provenance": seed_provenance,
        "config_snapshot": config_snapshot,
    }
    with open(path, "w") as fh:
        json.dump(doc, fh, indent=1, sort_keys=True)


def checkpoint_load(path) -> tuple[nm.MlpModel, dict]:
    """Rebuild a model from ``path``; returns (model, metadata)."""
    try:
        with open(path) as fh:
            doc = json.load(fh)
    except (OSError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from exc
    if not isinstance(doc, dict) or "format_version" not in doc:
        raise CheckpointError("not a checkpoint file")
    if doc["format_version"] != FORMAT_VERSION:
        raise CheckpointError(
            f"unsupported checkpoint version {doc['format_version']}"
        )
    try:
        arch = doc["architecture"]
        params = doc["params"]
        widths = [arch["input_width"]] + [l["out"] for l in arch["layers"]]
    except (KeyError, TypeError) as exc:
        raise CheckpointError(f"malformed checkpoint: missing {exc}") from exc

    layers = []
    for i, spec in enumerate(arch["layers"]):
        def grab(name, shape):
            key = f"layers.{i}.{name}"
            if key not in params:
                raise CheckpointError(f"missing parameter {key}")
            entry = params[key]
            if list(entry["shape"]) != list(shape):
                raise CheckpointError(
                    f"{key}: manifest shape {entry['shape']} != expected {list(shape)}"
                )
            return _decode(entry["data"], shape)

        out, fan_in = widths[i + 1], widths[i]
        weight = grab("weight", (out, fan_in))
        bias = grab("bias", (out,))
        bn_state = None
        if spec["bn"] is not None:
            bn_state = nm.BnState(
                gamma=grab("bn.gamma", (out,)),
                beta=grab("bn.beta", (out,)),
                running_mean=grab("bn.running_mean", (out,)),
                running_var=grab("bn.running_var", (out,)),
                momentum=float(spec["bn"]["momentum"]),
                epsilon=float(spec["bn"]["epsilon"]),
            )
        layers.append(
            nm.LinearLayer(
                weight=weight,
                bias=bias,
                has_bn=bn_state is not None,
                bn=bn_state,
                activation=spec["activation"],
            )
        )
    model = nm.MlpModel(layers, arch["feature_tap_index"])
    meta = {
        "seed_provenance": doc.get("seed_provenance"),
        "config_snapshot": doc.get("config_snapshot"),
    }
    return model, meta
