import hashlib
import json
import os
import struct
import sys
from pathlib import Path

import numpy as np
import pytest

from conftest import random_batch
from fnfm import store
from fnfm.data import infer_schema, read_csv, read_header, encode_rows
from fnfm.errors import ChecksumError, FormatError, ShapeMismatchError, StateError, VersionError
from fnfm.harness import predict
from fnfm.models import KINDS, ModelSpec, build_model

FIXTURES = Path(__file__).parent / "fixtures"


def reference_bytes(params, spec, schema, pairs=None, version=1, trailing=b""):
    """Independent encoder of the model file layout."""
    def text(s):
        b = s.encode()
        return struct.pack("<I", len(b)) + b

    def js(obj):
        return text(json.dumps(obj, sort_keys=True, separators=(",", ":")))

    f = schema.num_fields
    if pairs is None:
        pairs = [(i, j) for i in range(f) for j in range(i + 1, f)]
    body = js(schema.to_dict()) + js(spec.to_dict()) + struct.pack("<I", len(pairs))
    body += b"".join(struct.pack("<II", i, j) for i, j in pairs)
    body += struct.pack("<I", len(params))
    for name, arr in params.items():
        body += text(name) + struct.pack("<I", arr.ndim) + struct.pack(f"<{arr.ndim}Q", *arr.shape)
        body += arr.astype("<f8").tobytes()
    head = b"FNFMMODL" + struct.pack("<I", version)
    payload = head + body + trailing
    return payload + hashlib.sha256(payload).digest()


def trained_like(kind, schema, seed=0):
    model = build_model(ModelSpec(kind, 3, (5, 4)), schema, seed=seed)
    rng = np.random.default_rng(seed + 100)
    for p in model.params.values():
        p[...] = rng.normal(size=p.shape)
    if model.bn is not None:
        model.bn.running_var[:] = rng.uniform(0.5, 2.0, model.bn.width)
    return model


class TestRoundTrip:
    @pytest.mark.parametrize("kind", KINDS)
    def test_bit_identical(self, kind, mixed_schema, tmp_path):
        model = trained_like(kind, mixed_schema)
        path = tmp_path / "m.fnfm"
        store.save(model, path)
        params, spec, schema = store.load_params(path)
        assert spec == model.spec and schema == mixed_schema
        state = model.state_dict()
        assert list(params) == list(state)
        for k in state:
            assert params[k].tobytes() == state[k].tobytes()

    @pytest.mark.parametrize("kind", ["FM", "FNFM"])
    def test_matches_reference_layout(self, kind, mixed_schema):
        model = trained_like(kind, mixed_schema)
        assert store.encode(model.state_dict(), model.spec, mixed_schema) == \
            reference_bytes(model.state_dict(), model.spec, mixed_schema)

    def test_scores_identical_after_reload(self, tmp_path):
        schema = infer_schema(["click"] + [f"c{i}" for i in range(5)], hash_buckets=20)
        model = trained_like("FNFM", schema, seed=3)
        rng = np.random.default_rng(0)
        idx, val = random_batch(schema, rng, 1000)
        store.save(model, tmp_path / "m.fnfm")
        back = store.load(tmp_path / "m.fnfm")
        np.testing.assert_array_equal(back.predict_proba(idx, val), model.predict_proba(idx, val))

    def test_loaded_model_is_frozen(self, mixed_schema, tmp_path, rng):
        store.save(trained_like("FNFM", mixed_schema), tmp_path / "m.fnfm")
        model = store.load(tmp_path / "m.fnfm")
        with pytest.raises(ValueError):
            model.field_embedding[0, 0, 0] = 1.0
        idx, val = random_batch(mixed_schema, rng, 4)
        with pytest.raises(StateError):
            model.forward(idx, val, training=True)

    @pytest.mark.skipif(sys.platform == "win32", reason="POSIX permissions")
    def test_file_mode_follows_umask(self, mixed_schema, tmp_path):
        old = os.umask(0o022)
        try:
            store.save(trained_like("LR", mixed_schema), tmp_path / "m.fnfm")
        finally:
            os.umask(old)
        assert (tmp_path / "m.fnfm").stat().st_mode & 0o777 == 0o644
        assert not list(tmp_path.glob("*.tmp"))


class TestCorruption:
    @pytest.fixture
    def saved(self, mixed_schema, tmp_path):
        path = tmp_path / "m.fnfm"
        store.save(trained_like("FNFM", mixed_schema), path)
        return path

    @pytest.mark.parametrize("keep", [0, 10, 100, -1])
    def test_truncated(self, saved, keep):
        data = saved.read_bytes()
        saved.write_bytes(data[:keep])
        with pytest.raises(ChecksumError):
            store.load(saved)

    def test_flipped_payload_byte(self, saved):
        data = bytearray(saved.read_bytes())
        data[len(data) // 2] ^= 0x01
        saved.write_bytes(bytes(data))
        with pytest.raises(ChecksumError):
            store.load(saved)

    def test_future_version(self, saved):
        data = bytearray(saved.read_bytes())
        data[8:12] = struct.pack("<I", 2)
        saved.write_bytes(bytes(data))
        with pytest.raises(VersionError, match="version 2"):
            store.load(saved)

    def test_bad_magic(self, saved):
        saved.write_bytes(b"FNFMDATA" + saved.read_bytes()[8:])
        with pytest.raises(FormatError):
            store.load(saved)

    def test_shape_mismatch(self, mixed_schema, tmp_path):
        model = trained_like("FNFM", mixed_schema)
        wrong_spec = ModelSpec("FNFM", 4, (5, 4))
        path = tmp_path / "bad.fnfm"
        path.write_bytes(reference_bytes(model.state_dict(), wrong_spec, mixed_schema))
        with pytest.raises(ShapeMismatchError, match="field_embedding"):
            store.load(path)
        with pytest.raises(ShapeMismatchError):
            store.save_params(model.state_dict(), wrong_spec, mixed_schema, path)

    def test_missing_block(self, mixed_schema, tmp_path):
        state = trained_like("FM", mixed_schema).state_dict()
        del state["embedding"]
        path = tmp_path / "bad.fnfm"
        path.write_bytes(reference_bytes(state, ModelSpec("FM", 3), mixed_schema))
        with pytest.raises(ShapeMismatchError, match="missing"):
            store.load(path)

    def test_pair_order(self, mixed_schema, tmp_path):
        model = trained_like("FFM", mixed_schema)
        pairs = [(0, 1), (0, 2), (1, 2), (0, 3), (1, 3), (2, 3)]     # column-major, not canonical
        path = tmp_path / "bad.fnfm"
        path.write_bytes(reference_bytes(model.state_dict(), model.spec, mixed_schema, pairs))
        with pytest.raises(FormatError, match="pair order"):
            store.load(path)

    def test_trailing_bytes(self, mixed_schema, tmp_path):
        model = trained_like("LR", mixed_schema)
        path = tmp_path / "bad.fnfm"
        path.write_bytes(reference_bytes(model.state_dict(), model.spec, mixed_schema, trailing=b"\0" * 8))
        with pytest.raises(FormatError, match="trailing"):
            store.load(path)

    def test_unwritable_destination(self, mixed_schema, tmp_path):
        blocker = tmp_path / "file"
        blocker.write_text("x")
        with pytest.raises(OSError, match="could not write"):
            store.save(trained_like("LR", mixed_schema), blocker / "m.fnfm")


class TestGolden:
    def test_pinned_predictions(self):
        model = store.load(FIXTURES / "golden_model.fnfm")
        schema = infer_schema(read_header(FIXTURES / "golden_rows.csv"), {"hour_of_day": "numeric"},
                              hash_buckets=7)
        assert model.schema == schema
        ds = encode_rows(schema, read_csv(FIXTURES / "golden_rows.csv"))
        pinned = [float(s) for s in json.loads((FIXTURES / "golden_predictions.json").read_text())["probabilities"]]
        np.testing.assert_allclose(predict(model, ds), pinned, rtol=1e-12)
