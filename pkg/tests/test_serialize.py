import numpy as np
import pytest

from vistok.serialize import (
    FormatError,
    load_checkpoint,
    load_tensor,
    save_checkpoint,
    save_pgm,
    save_tensor,
    tensor_bytes,
    tensor_from_bytes,
)


class TestTensorFormat:
    @pytest.mark.parametrize(
        "arr",
        [
            np.arange(12, dtype=np.float32).reshape(3, 4),
            np.linspace(-1, 1, 8, dtype=np.float64).reshape(2, 2, 2),
            np.array([[1, -2], [3, 4]], dtype=np.int32),
            np.array([0, 127, 255], dtype=np.uint8),
            np.float32(3.5).reshape(()),
        ],
    )
    def test_roundtrip_bytes(self, arr):
        buf = tensor_bytes(arr)
        out, offset = tensor_from_bytes(buf, 0)
        assert offset == len(buf)
        assert out.dtype == arr.dtype
        assert out.shape == arr.shape
        assert np.array_equal(out, arr)

    def test_roundtrip_file(self, tmp_path):
        arr = np.random.default_rng(0).standard_normal((5, 7)).astype(np.float32)
        path = tmp_path / "t.bin"
        save_tensor(path, arr)
        out = load_tensor(path)
        assert np.array_equal(out, arr)

    def test_bad_magic_raises(self, tmp_path):
        path = tmp_path / "bad.bin"
        path.write_bytes(b"NOPE" + b"\x00" * 16)
        with pytest.raises(FormatError, match="magic"):
            load_tensor(path)

    def test_unsupported_dtype_raises(self):
        with pytest.raises(FormatError, match="dtype"):
            tensor_bytes(np.array([1 + 2j], dtype=np.complex64))

    def test_truncated_payload_raises(self, tmp_path):
        arr = np.ones((4, 4), dtype=np.float32)
        buf = tensor_bytes(arr)
        path = tmp_path / "trunc.bin"
        path.write_bytes(buf[:-8])
        with pytest.raises(FormatError, match="truncated"):
            load_tensor(path)

    def test_serialized_form_is_stable(self):
        # byte-identical encoding for identical input, no timestamps or randomness
        arr = np.arange(6, dtype=np.float32).reshape(2, 3)
        assert tensor_bytes(arr) == tensor_bytes(arr.copy())


class TestCheckpoint:
    def test_roundtrip(self, tmp_path):
        rng = np.random.default_rng(1)
        tensors = [
            ("encoder.w", rng.standard_normal((3, 3)).astype(np.float32)),
            ("encoder.b", rng.standard_normal(3).astype(np.float32)),
            ("codebook.ema_counts", rng.random(8).astype(np.float64)),
        ]
        manifest = {"kind": "test", "seed": 7, "config": {"lr": 0.001}}
        path = tmp_path / "ck.bin"
        save_checkpoint(path, manifest, tensors)
        got_manifest, got = load_checkpoint(path)
        assert got_manifest == manifest
        assert list(got.keys()) == [n for n, _ in tensors]
        for name, arr in tensors:
            assert np.array_equal(got[name], arr)

    def test_empty_tensor_list(self, tmp_path):
        path = tmp_path / "empty.bin"
        save_checkpoint(path, {"kind": "none"}, [])
        manifest, tensors = load_checkpoint(path)
        assert manifest == {"kind": "none"}
        assert tensors == {}

    def test_corrupt_checkpoint_raises(self, tmp_path):
        path = tmp_path / "corrupt.bin"
        path.write_bytes(b"AITC" + b"\xff" * 10)
        with pytest.raises(FormatError):
            load_checkpoint(path)

    def test_atomic_write_leaves_no_temp(self, tmp_path):
        path = tmp_path / "ck.bin"
        save_checkpoint(path, {"kind": "t"}, [("a", np.zeros(2, dtype=np.float32))])
        names = {p.name for p in tmp_path.iterdir()}
        assert names == {"ck.bin"}


class TestPgm:
    def test_header_and_payload(self, tmp_path):
        img = np.linspace(0, 1, 16).reshape(4, 4)
        path = tmp_path / "img.pgm"
        save_pgm(path, img)
        raw = path.read_bytes()
        assert raw.startswith(b"P5")
        header, payload = raw.rsplit(b"\n", 1)
        assert b"4 4" in header
        assert b"255" in header
        assert len(payload) == 16
        assert payload[0] == 0
        assert payload[-1] == 255

    def test_constant_image(self, tmp_path):
        path = tmp_path / "c.pgm"
        save_pgm(path, np.full((2, 2), 0.5))
        payload = path.read_bytes().rsplit(b"\n", 1)[1]
        assert len(set(payload)) == 1
