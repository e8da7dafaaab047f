import struct

import numpy as np
import pytest

from wnll_lab import model as mdl
from wnll_lab.checkpoint import (
    CheckpointError,
    decode_checkpoint,
    encode_checkpoint,
    load_checkpoint,
    save_checkpoint,
)


@pytest.fixture
def trained():
    m = mdl.TwoBranchModel(mdl.get_spec("tiny_cnn", 2), seed=7)
    for _, p in m.named_parameters():
        p.data += np.random.default_rng(1).normal(size=p.data.shape)
    return m


def test_roundtrip_byte_identical(trained, tmp_path):
    a, b = tmp_path / "a.bin", tmp_path / "b.bin"
    save_checkpoint(trained, a, seed=3, epoch=12)
    loaded, meta = load_checkpoint(a)
    save_checkpoint(loaded, b, seed=meta.seed, epoch=meta.epoch)
    assert a.read_bytes() == b.read_bytes()
    assert (meta.spec_name, meta.seed, meta.epoch) == (trained.spec.name, 3, 12)
    assert loaded.checksum() == trained.checksum()
    x = np.random.default_rng(0).uniform(size=(2, 3, 32, 32))
    np.testing.assert_array_equal(mdl.forward_linear(loaded, x).logits.data,
                                  mdl.forward_linear(trained, x).logits.data)


def test_single_corrupt_byte_rejected(trained):
    blob = bytearray(encode_checkpoint(trained))
    for pos in (30, len(blob) // 2, len(blob) - 10):
        bad = bytearray(blob)
        bad[pos] ^= 0x01
        with pytest.raises(CheckpointError, match="checksum"):
            decode_checkpoint(bytes(bad))


def test_bad_magic_and_version(trained):
    blob = encode_checkpoint(trained)
    with pytest.raises(CheckpointError, match="magic"):
        decode_checkpoint(b"X" + blob[1:])
    with pytest.raises(CheckpointError, match="version 2"):
        decode_checkpoint(encode_checkpoint(trained, version=2))


def test_truncated_and_padded(trained):
    blob = encode_checkpoint(trained)
    with pytest.raises(CheckpointError, match="truncated"):
        decode_checkpoint(blob[:-1])
    with pytest.raises(CheckpointError, match="truncated"):
        decode_checkpoint(blob[:5])
    with pytest.raises(CheckpointError, match="padded"):
        decode_checkpoint(blob + b"\x00")


def test_spec_mismatch_names_both(trained):
    blob = encode_checkpoint(trained)
    with pytest.raises(CheckpointError) as err:
        decode_checkpoint(blob, expected_spec="mlp2d-c2")
    assert trained.spec.name in str(err.value) and "mlp2d-c2" in str(err.value)


def test_header_fields(trained):
    blob = encode_checkpoint(trained, seed=-1, epoch=5)
    magic, version, body_len = struct.unpack_from("<8sHQ", blob)
    assert magic == b"WNLLCKPT" and version == 1
    assert len(blob) == 18 + body_len + 4
    assert decode_checkpoint(blob)[1].seed == -1
