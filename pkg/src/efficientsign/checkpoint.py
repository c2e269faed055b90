"""EFSN binary container for models, classical classifiers and feature matrices.

Layout (little-endian)::

    b"EFSN" | u32 version | u32 header_len | header JSON (utf-8) | payload | u32 crc32(payload)

The header lists every array as ``{"name", "dtype": "f32"|"f64"|"i64", "shape"}``
and the payload is their raw bytes concatenated in that order.
"""

from __future__ import annotations

import json
import struct
import zlib
from pathlib import Path

import numpy as np

from .classical import KNearestNeighborsClassifier, LBFGSLogisticRegression, SMOSupportVectorClassifier
from .errors import CheckpointCorruptionError, CheckpointFormatError, IncompatibleCheckpointError
from .models import ModelSpec, ModelState, build_model, state_arrays

MAGIC = b"EFSN"
VERSION = 1
DTYPES = {"f32": np.dtype("<f4"), "f64": np.dtype("<f8"), "i64": np.dtype("<i8")}
_CODES = {v: k for k, v in DTYPES.items()}


def _code(arr):
    dt = arr.dtype.newbyteorder("<") if arr.dtype.byteorder == ">" else arr.dtype
    if dt.kind in "iu":
        return "i64"
    if dt == np.float32:
        return "f32"
    if dt.kind == "f":
        return "f64"
    raise CheckpointFormatError(f"unsupported array dtype {arr.dtype}")


def write_container(path, header, arrays):
    """Write ``arrays`` (name -> ndarray, order preserved) with a JSON header."""
    manifest = []
    chunks = []
    for name, arr in arrays.items():
        arr = np.asarray(arr)
        code = _code(arr)
        manifest.append({"name": name, "dtype": code, "shape": list(arr.shape)})
        chunks.append(np.ascontiguousarray(arr, dtype=DTYPES[code]).tobytes())
    payload = b"".join(chunks)
    head = json.dumps({**header, "arrays": manifest}, sort_keys=True).encode("utf-8")
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<II", VERSION, len(head)))
        fh.write(head)
        fh.write(payload)
        fh.write(struct.pack("<I", zlib.crc32(payload) & 0xFFFFFFFF))
    return path


def read_container(path):
    """Parse and verify a container; returns ``(header, arrays)``."""
    raw = Path(path).read_bytes()
    if len(raw) < 12 or raw[:4] != MAGIC:
        raise CheckpointFormatError(f"{path}: not an EFSN file (bad magic)")
    version, head_len = struct.unpack_from("<II", raw, 4)
    if version != VERSION:
        raise CheckpointFormatError(f"{path}: unsupported format version {version}")
    if 12 + head_len > len(raw):
        raise CheckpointCorruptionError(f"{path}: truncated header")
    try:
        header = json.loads(raw[12:12 + head_len].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointCorruptionError(f"{path}: unreadable header ({exc})") from None
    manifest = header.get("arrays", [])
    sizes = []
    for entry in manifest:
        if entry.get("dtype") not in DTYPES:
            raise CheckpointFormatError(f"{path}: array {entry.get('name')} has unknown dtype {entry.get('dtype')}")
        sizes.append(int(np.prod(entry["shape"], dtype=np.int64)) * DTYPES[entry["dtype"]].itemsize)
    start = 12 + head_len
    expected = start + sum(sizes) + 4
    if len(raw) != expected:
        raise CheckpointCorruptionError(
            f"{path}: payload length mismatch (file has {len(raw)} bytes, manifest implies {expected})")
    payload = raw[start:start + sum(sizes)]
    (crc,) = struct.unpack_from("<I", raw, expected - 4)
    if zlib.crc32(payload) & 0xFFFFFFFF != crc:
        raise CheckpointCorruptionError(f"{path}: CRC mismatch, file is corrupted")
    arrays = {}
    off = 0
    for entry, size in zip(manifest, sizes):
        dt = DTYPES[entry["dtype"]]
        arrays[entry["name"]] = np.frombuffer(payload, dtype=dt, count=size // dt.itemsize,
                                              offset=off).reshape(entry["shape"]).copy()
        off += size
    return header, arrays


def save_checkpoint(obj, path, train_config=None, meta=None):
    """Save a :class:`ModelState` or a fitted classical classifier."""
    header = {"meta": meta or {}}
    if isinstance(obj, ModelState):
        header.update(kind="model", spec=obj.spec.to_dict(),
                      bn={"momentum": obj.spec.bn_momentum, "eps": obj.spec.bn_eps},
                      train_config=train_config)
        arrays = state_arrays(obj)
    elif isinstance(obj, SMOSupportVectorClassifier):
        header.update(kind="svm", params=obj.get_params(), gamma=obj.gamma_)
        arrays = {"classes": obj.classes_, "support_vectors": obj.support_vectors_,
                  "dual_coef": obj.dual_coef_, "intercept": obj.intercept_, "pairs": obj.pairs_}
    elif isinstance(obj, KNearestNeighborsClassifier):
        header.update(kind="knn", params=obj.get_params())
        arrays = {"classes": obj.classes_, "features": obj.X_, "labels": obj.y_idx_}
    elif isinstance(obj, LBFGSLogisticRegression):
        header.update(kind="logreg", params=obj.get_params(), n_iter=obj.n_iter_, converged=obj.converged_)
        arrays = {"classes": obj.classes_, "weights": obj.coef_, "biases": obj.intercept_}
    else:
        raise CheckpointFormatError(f"cannot serialize object of type {type(obj).__name__}")
    return write_container(path, header, arrays)


def save_features(path, features, labels, meta=None):
    return write_container(path, {"kind": "features", "meta": meta or {}},
                           {"features": np.asarray(features), "labels": np.asarray(labels, dtype=np.int64)})


def load_features(path):
    header, arrays = read_container(path)
    if header.get("kind") != "features":
        raise IncompatibleCheckpointError(f"{path}: holds {header.get('kind')!r}, expected a feature matrix")
    return arrays["features"], arrays["labels"]


def _load_model(header, arrays, path, expect_kind=None):
    spec = ModelSpec.from_dict(header["spec"])
    if expect_kind is not None and spec.kind != expect_kind:
        raise IncompatibleCheckpointError(
            f"{path}: checkpoint holds a {spec.kind} model, run expects {expect_kind}")
    dtype = np.float64 if any(e["dtype"] == "f64" for e in header["arrays"]) else np.float32
    model = build_model(spec, 0, dtype)
    expected = {k: v.shape for k, v in state_arrays(model).items()}
    for name, shape in expected.items():
        if name not in arrays:
            raise IncompatibleCheckpointError(f"{path}: missing array {name}")
        if arrays[name].shape != shape:
            raise IncompatibleCheckpointError(
                f"{path}: array {name} has shape {arrays[name].shape}, spec implies {shape}")
    extra = sorted(set(arrays) - set(expected))
    if extra:
        raise IncompatibleCheckpointError(f"{path}: unexpected array {extra[0]}")
    params = dict(model.named_parameters())
    mods = dict(model.named_modules())
    for name, value in arrays.items():
        if name in params:
            params[name].data = value
        else:
            mod_name, _, buf = name.rpartition(".")
            mods[mod_name].set_buffer(buf, value)
    return model


def load_checkpoint(path, expect_kind=None):
    """Load whatever the container holds; ``expect_kind`` guards model kinds and classifier types."""
    header, arrays = read_container(path)
    kind = header.get("kind")
    if kind == "model":
        return _load_model(header, arrays, path, expect_kind)
    if expect_kind is not None and kind != expect_kind:
        raise IncompatibleCheckpointError(f"{path}: checkpoint holds {kind!r}, expected {expect_kind!r}")
    if kind == "svm":
        m = SMOSupportVectorClassifier(**header["params"])
        m.classes_, m.support_vectors_ = arrays["classes"], arrays["support_vectors"]
        m.dual_coef_, m.intercept_, m.pairs_ = arrays["dual_coef"], arrays["intercept"], arrays["pairs"]
        m.gamma_ = header["gamma"]
        m.n_features_in_ = m.support_vectors_.shape[1]
        return m
    if kind == "knn":
        m = KNearestNeighborsClassifier(**header["params"])
        m.classes_, m.X_, m.y_idx_ = arrays["classes"], arrays["features"], arrays["labels"]
        m.n_features_in_ = m.X_.shape[1]
        return m
    if kind == "logreg":
        m = LBFGSLogisticRegression(**header["params"])
        m.classes_, m.coef_, m.intercept_ = arrays["classes"], arrays["weights"], arrays["biases"]
        m.n_iter_, m.converged_ = header["n_iter"], header["converged"]
        m.n_features_in_ = m.coef_.shape[1]
        return m
    if kind == "features":
        return arrays
    raise CheckpointFormatError(f"{path}: unknown checkpoint kind {kind!r}")
