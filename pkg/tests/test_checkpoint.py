import struct

import numpy as np
import pytest

from src.models.checkpoint import MAGIC, load_checkpoint, save_checkpoint
from src.models.components import init_bundle
from src.utils.exceptions import FormatError

from tests.conftest import TINY_ARCH


@pytest.fixture
def saved(tmp_path):
    bundle = init_bundle(11, TINY_ARCH)
    path = save_checkpoint(bundle, tmp_path / "model.bin", {"run_id": "full-s0-seed0", "subject": 0})
    return bundle, path


def test_round_trip_is_bit_exact(saved):
    bundle, path = saved
    loaded, metadata = load_checkpoint(path)
    assert loaded.arch == bundle.arch
    assert list(loaded.params) == list(bundle.params)
    for name, param in bundle.params.items():
        assert loaded.params[name].data.tobytes() == param.data.tobytes()
    assert metadata == {"run_id": "full-s0-seed0", "subject": 0}


def test_resave_is_byte_identical(saved, tmp_path):
    _, path = saved
    loaded, metadata = load_checkpoint(path)
    again = save_checkpoint(loaded, tmp_path / "again.bin", metadata)
    assert again.read_bytes() == path.read_bytes()


def test_layout_starts_with_magic_and_header_length(saved):
    _, path = saved
    raw = path.read_bytes()
    assert raw[:8] == MAGIC
    (header_len,) = struct.unpack("<Q", raw[8:16])
    assert raw[16 : 16 + header_len].startswith(b"{")


def test_bad_magic(saved):
    _, path = saved
    path.write_bytes(b"NOTMAGIC" + path.read_bytes()[8:])
    with pytest.raises(FormatError, match="magic"):
        load_checkpoint(path)


def test_truncated_blob(saved):
    _, path = saved
    path.write_bytes(path.read_bytes()[:-8])
    with pytest.raises(FormatError, match="offset"):
        load_checkpoint(path)


def test_missing_file(tmp_path):
    with pytest.raises(FileNotFoundError):
        load_checkpoint(tmp_path / "absent.bin")


def test_loaded_parameters_are_writable(saved):
    _, path = saved
    loaded, _ = load_checkpoint(path)
    param = next(iter(loaded.params.values()))
    param.data[...] = 0.0
    assert np.all(param.data == 0.0)
