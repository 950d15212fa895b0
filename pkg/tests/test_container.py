import numpy as np
import pytest

from acmfd.container import MAGIC, ContainerError, read_container, write_container


@pytest.fixture
def sample_payload():
    rng = np.random.default_rng(0)
    arrays = {
        "train/a": rng.normal(size=(2, 4, 4)),
        "mesh/axis0": np.linspace(0, 1, 4),
        "scalars": np.array(3.5),
    }
    meta = {"kind": "dataset", "system": "darcy", "seed": 7}
    return arrays, meta


class TestRoundTrip:
    def test_lossless(self, tmp_path, sample_payload):
        arrays, meta = sample_payload
        path = tmp_path / "data.acmfd"
        write_container(path, arrays, meta)
        back, meta_back = read_container(path)
        assert meta_back == meta
        assert set(back) == set(arrays)
        for name in arrays:
            np.testing.assert_array_equal(back[name], arrays[name])

    def test_write_read_write_is_byte_identical(self, tmp_path, sample_payload):
        arrays, meta = sample_payload
        first = tmp_path / "first.acmfd"
        second = tmp_path / "second.acmfd"
        write_container(first, arrays, meta)
        back, meta_back = read_container(first)
        write_container(second, back, meta_back)
        assert first.read_bytes() == second.read_bytes()

    def test_magic_prefix(self, tmp_path, sample_payload):
        arrays, meta = sample_payload
        path = tmp_path / "data.acmfd"
        write_container(path, arrays, meta)
        assert path.read_bytes()[:8] == MAGIC == b"ACMFD1\x00\x00"


class TestValidation:
    def test_rejects_wrong_magic(self, tmp_path):
        path = tmp_path / "bogus"
        path.write_bytes(b"NOTMINE!" + b"\x00" * 32)
        with pytest.raises(ContainerError, match="magic"):
            read_container(path)

    def test_rejects_truncated_payload(self, tmp_path, sample_payload):
        arrays, meta = sample_payload
        path = tmp_path / "data.acmfd"
        write_container(path, arrays, meta)
        blob = path.read_bytes()
        path.write_bytes(blob[:-16])
        with pytest.raises(ContainerError, match="truncated"):
            read_container(path)

    def test_rejects_unknown_version(self, tmp_path, sample_payload):
        arrays, meta = sample_payload
        path = tmp_path / "data.acmfd"
        write_container(path, arrays, meta)
        blob = bytearray(path.read_bytes())
        blob[8] = 99
        path.write_bytes(bytes(blob))
        with pytest.raises(ContainerError, match="version"):
            read_container(path)
