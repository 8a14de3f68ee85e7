import struct

import numpy as np
import pytest

from disaster_stack.checkpoint import (
    decode_checkpoint,
    encode_checkpoint,
    load_checkpoint,
    save_checkpoint,
)
from disaster_stack.errors import CheckpointError
from disaster_stack.models import Model, baseline_cnn_spec
from disaster_stack.optim import AdamState, adam_step


@pytest.fixture
def trained():
    """A small CNN with non-trivial weights and an optimizer that has stepped."""
    model = Model.build("cnn", (16, 16, 3), seed=11)
    rng = np.random.default_rng(11)
    state = AdamState()
    params = {k: t.data for k, t in model.weights.trainable().items()}
    grads = {k: rng.standard_normal(v.shape).astype(np.float32) for k, v in params.items()}
    adam_step(params, grads, state, 0.01)
    model.weights.tensors["bn1.running_mean"].data[...] = rng.standard_normal(32)
    model.weights.epoch = 35
    model.weights.val_accuracy = 0.8125
    return model, state


def expected_size(spec, weights, state):
    """Byte accounting recomputed from the file layout."""
    spec_len = len(spec.to_text().encode("utf-8"))
    header = 4 + 2 + 4 + spec_len + 4 + 4 + 32 + 1 + (8 + 8 * 3 if state else 0) + 4

    def record(name, shape):
        return 2 + len(name.encode("utf-8")) + 1 + 4 * len(shape) + 4 * int(np.prod(shape))

    body = sum(record(n, t.shape) for n, t in weights.tensors.items())
    if state:
        body += sum(record(f"adam.m/{n}", a.shape) + record(f"adam.v/{n}", a.shape)
                    for n, a in state.m.items())
    return header + body


def test_roundtrip_is_bit_exact(trained, tmp_path):
    model, state = trained
    path = save_checkpoint(model.spec, model.weights, state, tmp_path / "ck.bin")
    spec, weights, loaded_state, meta = load_checkpoint(path)
    assert spec == model.spec
    assert set(weights.tensors) == set(model.weights.tensors)
    for name, t in model.weights.tensors.items():
        assert weights.tensors[name].data.tobytes() == t.data.tobytes()
        assert weights.tensors[name].requires_grad == t.requires_grad
    assert loaded_state.t == state.t == 1
    for name in state.m:
        assert loaded_state.m[name].tobytes() == state.m[name].tobytes()
        assert loaded_state.v[name].tobytes() == state.v[name].tobytes()
    assert meta["epoch"] == 35
    assert meta["val_accuracy"] == float(np.float32(0.8125))


def test_roundtrip_predictions_identical(trained, tmp_path):
    model, state = trained
    save_checkpoint(model.spec, model.weights, state, tmp_path / "ck.bin")
    spec, weights, _, _ = load_checkpoint(tmp_path / "ck.bin")
    x = np.random.default_rng(0).uniform(0, 1, (6, 16, 16, 3)).astype(np.float32)
    assert Model(spec, weights).predict_proba(x).tobytes() == model.predict_proba(x).tobytes()


@pytest.mark.parametrize("with_state", [True, False])
def test_file_size_matches_byte_accounting(trained, tmp_path, with_state):
    model, state = trained
    state = state if with_state else None
    path = save_checkpoint(model.spec, model.weights, state, tmp_path / "ck.bin")
    assert path.stat().st_size == expected_size(model.spec, model.weights, state)


def test_header_layout(trained):
    model, state = trained
    blob = encode_checkpoint(model.spec, model.weights, state)
    assert blob[:4] == b"DSTK"
    assert struct.unpack_from("<H", blob, 4)[0] == 1
    (spec_len,) = struct.unpack_from("<I", blob, 6)
    assert blob[10 : 10 + spec_len].decode() == model.spec.to_text()
    epoch, acc = struct.unpack_from("<If", blob, 10 + spec_len)
    assert (epoch, acc) == (35, np.float32(0.8125))
    assert blob[18 + spec_len : 50 + spec_len] == model.spec.digest()


def test_bad_magic(trained):
    model, state = trained
    blob = bytearray(encode_checkpoint(model.spec, model.weights, state))
    blob[:4] = b"\x00\x01\x02\x03"
    with pytest.raises(CheckpointError, match="not a checkpoint"):
        decode_checkpoint(bytes(blob))


def test_unsupported_version(trained):
    model, state = trained
    blob = bytearray(encode_checkpoint(model.spec, model.weights, state))
    blob[4:6] = struct.pack("<H", 2)
    with pytest.raises(CheckpointError, match="unsupported version"):
        decode_checkpoint(bytes(blob))


@pytest.mark.parametrize("cut", [10, 200, -1, -5000])
def test_truncated(trained, cut):
    model, state = trained
    blob = encode_checkpoint(model.spec, model.weights, state)
    with pytest.raises(CheckpointError, match="corrupt checkpoint"):
        decode_checkpoint(blob[:cut])


def test_trailing_bytes(trained):
    model, state = trained
    with pytest.raises(CheckpointError, match="corrupt checkpoint"):
        decode_checkpoint(encode_checkpoint(model.spec, model.weights, state) + b"\x00")


def test_spec_hash_mismatch(trained, tmp_path):
    model, state = trained
    save_checkpoint(model.spec, model.weights, state, tmp_path / "ck.bin")
    other = baseline_cnn_spec((32, 32, 3))
    with pytest.raises(CheckpointError, match="different hash"):
        load_checkpoint(tmp_path / "ck.bin", expected_spec=other)
    load_checkpoint(tmp_path / "ck.bin", expected_spec=model.spec)


def test_tampered_spec_detected(trained):
    model, state = trained
    blob = bytearray(encode_checkpoint(model.spec, model.weights, state))
    i = blob.index(b'"baseline_cnn"')
    blob[i + 1] = ord("B")
    with pytest.raises(CheckpointError, match="spec hash"):
        decode_checkpoint(bytes(blob))


def test_unwritable_path_names_it(trained, tmp_path):
    model, state = trained
    target = tmp_path / "missing" / "ck.bin"
    with pytest.raises(OSError, match="missing"):
        save_checkpoint(model.spec, model.weights, state, target)
