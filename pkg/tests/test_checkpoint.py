"""EFSN container round trips and error classes."""

import json
import struct
import zlib

import numpy as np
import pytest

from efficientsign.checkpoint import (MAGIC, load_checkpoint, load_features, read_container, save_checkpoint,
                                      save_features, write_container)
from efficientsign.classical import KNearestNeighborsClassifier, LBFGSLogisticRegression, SMOSupportVectorClassifier
from efficientsign.errors import CheckpointCorruptionError, CheckpointFormatError, IncompatibleCheckpointError
from efficientsign.models import ModelSpec, build_model, forward, state_arrays


@pytest.fixture
def tiny(rng):
    model = build_model(ModelSpec.efficientsign("tiny", num_classes=6), 3)
    # non-default running stats so buffers are exercised too
    model.train()
    forward(model, rng.normal(size=(4, 3, 32, 32)).astype(np.float32), "train", np.random.default_rng(0))
    model.eval()
    return model


def test_model_round_trip_bit_identical(tiny, tmp_path, rng):
    path = save_checkpoint(tiny, tmp_path / "m.efsn", train_config={"epochs": 12}, meta={"fold": 1})
    loaded = load_checkpoint(path)
    assert loaded.spec == tiny.spec
    for k, v in state_arrays(tiny).items():
        np.testing.assert_array_equal(state_arrays(loaded)[k], v)
    x = rng.normal(size=(3, 3, 32, 32)).astype(np.float32)
    np.testing.assert_array_equal(forward(loaded, x).data, forward(tiny, x).data)


def test_layout(tiny, tmp_path):
    path = save_checkpoint(tiny, tmp_path / "m.efsn")
    raw = path.read_bytes()
    assert raw[:4] == MAGIC
    version, head_len = struct.unpack_from("<II", raw, 4)
    header = json.loads(raw[12:12 + head_len])
    assert version == 1
    assert header["bn"] == {"momentum": 0.1, "eps": 1e-5}
    payload = raw[12 + head_len:-4]
    sizes = sum(int(np.prod(a["shape"])) * {"f32": 4, "f64": 8, "i64": 8}[a["dtype"]] for a in header["arrays"])
    assert len(payload) == sizes
    assert struct.unpack("<I", raw[-4:])[0] == zlib.crc32(payload)


def test_float64_model_round_trip(tmp_path):
    model = build_model(ModelSpec.efficientsign("tiny"), 1, dtype=np.float64)
    loaded = load_checkpoint(save_checkpoint(model, tmp_path / "m.efsn"))
    assert loaded.dtype == np.float64


def test_truncated_payload(tiny, tmp_path):
    path = save_checkpoint(tiny, tmp_path / "m.efsn")
    raw = path.read_bytes()
    path.write_bytes(raw[:len(raw) // 2])
    with pytest.raises(CheckpointCorruptionError):
        load_checkpoint(path)


def test_bit_flip_fails_crc(tiny, tmp_path):
    path = save_checkpoint(tiny, tmp_path / "m.efsn")
    raw = bytearray(path.read_bytes())
    raw[-100] ^= 0x01
    path.write_bytes(bytes(raw))
    with pytest.raises(CheckpointCorruptionError, match="CRC"):
        load_checkpoint(path)


def test_bad_magic(tmp_path):
    p = tmp_path / "x.efsn"
    p.write_bytes(b"NOPE" + bytes(20))
    with pytest.raises(CheckpointFormatError, match="magic") as info:
        load_checkpoint(p)
    assert type(info.value) is CheckpointFormatError


def test_bad_version(tmp_path):
    p = write_container(tmp_path / "x.efsn", {"kind": "features"}, {"a": np.zeros(2)})
    raw = bytearray(p.read_bytes())
    raw[4:8] = struct.pack("<I", 9)
    p.write_bytes(bytes(raw))
    with pytest.raises(CheckpointFormatError, match="version"):
        read_container(p)


def test_kind_mismatch(tmp_path):
    path = save_checkpoint(build_model(ModelSpec.baseline("resnet18"), 0), tmp_path / "r.efsn")
    with pytest.raises(IncompatibleCheckpointError, match="resnet18"):
        load_checkpoint(path, expect_kind="efficientsign")


def test_shape_mismatch_names_first_array(tiny, tmp_path):
    arrays = state_arrays(tiny)
    arrays["head.weight"] = np.zeros((7, 64), np.float32)
    header = {"kind": "model", "spec": tiny.spec.to_dict(), "meta": {}}
    path = write_container(tmp_path / "bad.efsn", header, arrays)
    with pytest.raises(IncompatibleCheckpointError, match="head.weight"):
        load_checkpoint(path)


@pytest.mark.parametrize("make", [lambda: SMOSupportVectorClassifier(C=10, gamma=0.5),
                                  lambda: KNearestNeighborsClassifier(3), lambda: LBFGSLogisticRegression()])
def test_classical_round_trip(make, tmp_path, rng):
    X = rng.normal(size=(30, 4)) + np.repeat(np.eye(3, 4) * 3, 10, axis=0)
    y = np.repeat([0, 1, 2], 10)
    clf = make().fit(X, y)
    loaded = load_checkpoint(save_checkpoint(clf, tmp_path / "c.efsn"))
    q = rng.normal(size=(20, 4))
    np.testing.assert_array_equal(loaded.predict(q), clf.predict(q))
    assert loaded.get_params() == clf.get_params()


def test_classical_kind_guard(tmp_path, rng):
    clf = KNearestNeighborsClassifier(1).fit(rng.normal(size=(3, 2)), [0, 1, 1])
    path = save_checkpoint(clf, tmp_path / "k.efsn")
    with pytest.raises(IncompatibleCheckpointError):
        load_checkpoint(path, expect_kind="svm")


def test_features_round_trip(tmp_path, rng):
    f = rng.normal(size=(5, 8)).astype(np.float32)
    path = save_features(tmp_path / "f.efsn", f, [0, 1, 2, 1, 0], meta={"extractor": "x"})
    got, labels = load_features(path)
    np.testing.assert_array_equal(got, f)
    assert labels.tolist() == [0, 1, 2, 1, 0]


def test_unsupported_object(tmp_path):
    with pytest.raises(CheckpointFormatError):
        save_checkpoint(object(), tmp_path / "o.efsn")
