import json

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from xrl import nn
from xrl.checkpoint import (CheckpointError, decode_array, dumps_checkpoint, encode_array, load_checkpoint,
                            loads_checkpoint, save_checkpoint)
from xrl.train import TrainConfig


def model(seed=0):
    spec = nn.convnet_spec((1, 8, 8), 3, beta=2.0, channels=(3, 4))
    return spec, nn.build_model(spec, seed)


def test_round_trip_is_bit_identical(tmp_path):
    spec, p = model()
    cfg = TrainConfig(regime="SEP", lam=5e4)
    path = tmp_path / "ck.json"
    save_checkpoint(p, spec, cfg, path)
    q, spec2, cfg2 = load_checkpoint(path, spec)
    assert spec2.digest == spec.digest and cfg2 == cfg
    assert list(q) == list(p)
    for k in p:
        assert q[k].tobytes() == p[k].tobytes() and q[k].shape == p[k].shape
    assert dumps_checkpoint(q, spec2, cfg2) == path.read_text()


@settings(max_examples=50)
@given(st.lists(st.floats(allow_nan=False, width=64), min_size=0, max_size=12))
def test_array_codec_is_exact(values):
    a = np.array(values, dtype=np.float64)
    b = decode_array(json.loads(json.dumps(encode_array(a))), "w")
    assert b.tobytes() == a.tobytes()


def test_special_values_survive():
    a = np.array([np.inf, -np.inf, -0.0, 5e-324, np.nan])
    b = decode_array(encode_array(a), "w")
    assert b.tobytes() == a.tobytes()


def test_corrupt_base64_names_field():
    spec, p = model()
    doc = json.loads(dumps_checkpoint(p, spec, None))
    doc["arrays"]["l0.weight"]["data"] = "!!not base64!!"
    with pytest.raises(CheckpointError) as e:
        loads_checkpoint(json.dumps(doc))
    assert e.value.field == "arrays.l0.weight"


def test_truncated_payload_names_field():
    spec, p = model()
    doc = json.loads(dumps_checkpoint(p, spec, None))
    doc["arrays"]["l0.bias"]["data"] = doc["arrays"]["l0.bias"]["data"][:8]
    with pytest.raises(CheckpointError) as e:
        loads_checkpoint(json.dumps(doc))
    assert e.value.field == "arrays.l0.bias"


def test_version_mismatch_refused():
    spec, p = model()
    doc = json.loads(dumps_checkpoint(p, spec, None))
    doc["format_version"] = 2
    with pytest.raises(CheckpointError, match="format version"):
        loads_checkpoint(json.dumps(doc))


def test_spec_mismatch_refused():
    spec, p = model()
    text = dumps_checkpoint(p, spec, None)
    other = nn.convnet_spec((1, 8, 8), 3, beta=5.0, channels=(3, 4))
    with pytest.raises(CheckpointError) as e:
        loads_checkpoint(text, other)
    assert e.value.field == "spec_digest"


def test_tampered_spec_refused():
    spec, p = model()
    doc = json.loads(dumps_checkpoint(p, spec, None))
    doc["spec"]["num_classes"] = 4
    with pytest.raises(CheckpointError):
        loads_checkpoint(json.dumps(doc))


def test_missing_weight_refused():
    spec, p = model()
    doc = json.loads(dumps_checkpoint(p, spec, None))
    del doc["arrays"]["l0.bias"]
    with pytest.raises(CheckpointError) as e:
        loads_checkpoint(json.dumps(doc))
    assert e.value.field == "arrays"


def test_not_json_refused():
    with pytest.raises(CheckpointError, match="JSON"):
        loads_checkpoint("{oops")
