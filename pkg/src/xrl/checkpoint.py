"""JSON checkpoints holding a ModelSpec, the training config digest and base64 float64 weights."""
from __future__ import annotations

import base64
import binascii
import json
from pathlib import Path

import numpy as np

from .nn import ModelSpec, ParamSet, _param_shapes, check_params
from .train import TrainConfig

FORMAT_VERSION = 1


class CheckpointError(ValueError):
    def __init__(self, message: str, field: str | None = None):
        self.field = field
        super().__init__(f"{message} (field {field})" if field else message)


def encode_array(a: np.ndarray) -> dict:
    return {"shape": list(a.shape),
            "data": base64.b64encode(np.ascontiguousarray(a, dtype="<f8").tobytes()).decode("ascii")}


def decode_array(d: dict, name: str) -> np.ndarray:
    try:
        raw = base64.b64decode(d["data"], validate=True)
        shape = tuple(int(s) for s in d["shape"])
    except (KeyError, TypeError, ValueError, binascii.Error) as e:
        raise CheckpointError(f"cannot decode weights: {e}", f"arrays.{name}") from e
    n = int(np.prod(shape)) if shape else 1
    if len(raw) != 8 * n:
        raise CheckpointError(f"payload holds {len(raw)} bytes, shape {shape} needs {8 * n}", f"arrays.{name}")
    return np.frombuffer(raw, dtype="<f8").astype(np.float64).reshape(shape)


def dumps_checkpoint(params: ParamSet, spec: ModelSpec, cfg: TrainConfig | None) -> str:
    check_params(spec, params)
    doc = {
        "format_version": FORMAT_VERSION,
        "spec": spec.to_dict(),
        "spec_digest": spec.digest,
        "train_config": cfg.to_dict() if cfg is not None else None,
        "train_config_digest": cfg.digest if cfg is not None else None,
        "seed": params.seed,
        "arrays": {k: encode_array(v) for k, v in params.arrays.items()},
    }
    return json.dumps(doc, indent=1, sort_keys=True) + "\n"


def save_checkpoint(params: ParamSet, spec: ModelSpec, cfg: TrainConfig | None, path) -> None:
    Path(path).write_text(dumps_checkpoint(params, spec, cfg))


def loads_checkpoint(text: str, expected_spec: ModelSpec | None = None):
    """Returns (ParamSet, ModelSpec, TrainConfig | None)."""
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as e:
        raise CheckpointError(f"checkpoint is not valid JSON: {e}") from e
    if doc.get("format_version") != FORMAT_VERSION:
        raise CheckpointError(f"format version {doc.get('format_version')!r} is not {FORMAT_VERSION}",
                              "format_version")
    try:
        spec = ModelSpec.from_dict(doc["spec"])
    except Exception as e:
        raise CheckpointError(f"cannot parse model spec: {e}", "spec") from e
    if spec.digest != doc.get("spec_digest"):
        raise CheckpointError(f"stored spec digest {doc.get('spec_digest')} does not match spec {spec.digest}",
                              "spec_digest")
    if expected_spec is not None and expected_spec.digest != spec.digest:
        raise CheckpointError(f"checkpoint spec {spec.digest} does not match configured spec "
                              f"{expected_spec.digest}", "spec_digest")
    cfg = None
    if doc.get("train_config") is not None:
        try:
            cfg = TrainConfig.from_dict(doc["train_config"])
        except Exception as e:
            raise CheckpointError(f"cannot parse training config: {e}", "train_config") from e
        if cfg.digest != doc.get("train_config_digest"):
            raise CheckpointError("training config digest mismatch", "train_config_digest")
    arrays_doc = doc.get("arrays")
    if not isinstance(arrays_doc, dict):
        raise CheckpointError("missing weight arrays", "arrays")
    # restore the model's declared parameter order; the document stores keys sorted
    order = {name: i for i, (name, _, _) in enumerate(_param_shapes(spec))}
    names = sorted(arrays_doc, key=lambda k: (order.get(k, len(order)), k))
    arrays = {k: decode_array(arrays_doc[k], k) for k in names}
    params = ParamSet(arrays, int(doc.get("seed", 0)), spec.digest)
    try:
        check_params(spec, params)
    except ValueError as e:
        raise CheckpointError(str(e), "arrays") from e
    return params, spec, cfg


def load_checkpoint(path, expected_spec: ModelSpec | None = None):
    return loads_checkpoint(Path(path).read_text(), expected_spec)
