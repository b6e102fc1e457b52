"""Binary model files.

Layout (all integers little-endian)::

    b"FNFMMODL" | u32 version
    schema      u32 length + UTF-8 JSON
    spec        u32 length + UTF-8 JSON
    pair order  u32 P, then P x (u32 i, u32 j)
    blocks      u32 count, then per block:
                    u32 length + UTF-8 tag, u32 ndim, ndim x u64 dims,
                    prod(dims) float64 values (row-major)
    sha256 of everything above (32 bytes)

Blocks are the trainable parameters followed by the BN running statistics,
in the model's canonical order.
"""

from pathlib import Path

import numpy as np

from . import _binary
from .data import FieldSchema
from .errors import FormatError, ShapeMismatchError
from .interactions import pair_order
from .models import Model, ModelSpec, build_model, param_shapes

MODEL_MAGIC = b"FNFMMODL"
MODEL_VERSION = 1


def _expected_shapes(spec, schema) -> dict:
    shapes, buffers = param_shapes(spec, schema)
    return {**shapes, **buffers}


def encode(params: dict, spec: ModelSpec, schema: FieldSchema) -> bytes:
    expected = _expected_shapes(spec, schema)
    if set(params) != set(expected):
        raise ShapeMismatchError(f"blocks {sorted(params)} do not match {spec.kind} blocks {sorted(expected)}")
    w = _binary.Writer()
    w.json(schema.to_dict())
    w.json(spec.to_dict())
    left, right = pair_order(schema.num_fields)
    w.pack("I", left.size)
    for i, j in zip(left, right):
        w.pack("II", int(i), int(j))
    w.pack("I", len(expected))
    for name, shape in expected.items():
        arr = np.asarray(params[name])
        if arr.shape != tuple(shape):
            raise ShapeMismatchError(f"{name}: shape {arr.shape} != expected {tuple(shape)}")
        w.text(name)
        w.pack("I", arr.ndim)
        w.pack(f"{arr.ndim}Q", *arr.shape)
        w.raw(np.ascontiguousarray(arr, dtype="<f8").tobytes())
    return _binary.frame(MODEL_MAGIC, MODEL_VERSION, w.getvalue())


def decode(data: bytes, path=None):
    """Parse model-file bytes into ``(params, spec, schema)``."""
    body = _binary.unframe(data, MODEL_MAGIC, MODEL_VERSION, path)
    r = _binary.Reader(body, path)
    schema = FieldSchema.from_dict(r.json())
    spec = ModelSpec.from_dict(r.json())
    (n_pairs,) = r.unpack("I")
    stored = np.array([r.unpack("II") for _ in range(n_pairs)], dtype=np.int64).reshape(-1, 2)
    left, right = pair_order(schema.num_fields)
    if not (np.array_equal(stored[:, 0], left) and np.array_equal(stored[:, 1], right)):
        raise FormatError(f"{path}: stored pair order does not match the canonical order for f={schema.num_fields}")
    expected = _expected_shapes(spec, schema)
    (count,) = r.unpack("I")
    params = {}
    for _ in range(count):
        name = r.text()
        (ndim,) = r.unpack("I")
        shape = r.unpack(f"{ndim}Q")
        if name not in expected:
            raise ShapeMismatchError(f"{path}: unexpected block {name!r} for a {spec.kind} model")
        if shape != tuple(expected[name]):
            raise ShapeMismatchError(f"{path}: block {name!r} has shape {shape}, expected {tuple(expected[name])}")
        size = int(np.prod(shape))
        params[name] = np.frombuffer(r.raw(8 * size), dtype="<f8").astype(np.float64).reshape(shape)
    if set(params) != set(expected):
        raise ShapeMismatchError(f"{path}: missing blocks {sorted(set(expected) - set(params))}")
    if not r.at_end():
        raise FormatError(f"{path}: trailing bytes after the last parameter block")
    return params, spec, schema


def save(model: Model, path):
    """Write ``model`` atomically; the destination is locked while writing."""
    save_params(model.state_dict(), model.spec, model.schema, path)


def save_params(params: dict, spec: ModelSpec, schema: FieldSchema, path):
    data = encode(params, spec, schema)
    try:
        _binary.atomic_write(path, data)
    except OSError as exc:
        raise OSError(f"could not write model file {path}: {exc}") from exc


def load_params(path):
    return decode(Path(path).read_bytes(), path)


def load(path) -> Model:
    """Read a model file into a frozen, inference-mode model."""
    params, spec, schema = load_params(path)
    model = build_model(spec, schema)
    model.load_state_dict(params)
    return model.freeze()
