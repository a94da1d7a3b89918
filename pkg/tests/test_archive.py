import struct

import numpy as np
import pytest

from mumodig.archive import ARCHIVE_MAGIC, AdversarialArchive, ArchiveError


def _sample(n=3, shape=(3, 4, 5)):
    rng = np.random.default_rng(0)
    clean = rng.uniform(size=(n,) + shape)
    adv = np.clip(clean + rng.uniform(-0.05, 0.05, size=clean.shape), 0, 1)
    return AdversarialArchive(np.arange(10, 10 + n), rng.integers(0, 4, n), clean, adv, {"estimator": "mumodig"})


def test_round_trip_is_byte_exact():
    arc = _sample()
    raw = arc.to_bytes()
    back = AdversarialArchive.from_bytes(raw)
    assert back.to_bytes() == raw
    assert back.adversarial.tobytes() == arc.adversarial.tobytes()
    assert back.meta == {"estimator": "mumodig"}
    np.testing.assert_array_equal(back.indices, arc.indices)


def test_layout_header():
    raw = _sample(n=2).to_bytes()
    assert raw[:8] == ARCHIVE_MAGIC
    version, meta_len = struct.unpack_from("<II", raw, 8)
    assert version == 1
    (count,) = struct.unpack_from("<I", raw, 16 + meta_len)
    assert count == 2
    index, label, ndim, *dims = struct.unpack_from("<III3I", raw, 20 + meta_len)
    assert (index, ndim, tuple(dims)) == (10, 3, (3, 4, 5))
    # header + 2 records of (3 + 3 ints, 2 * 60 doubles)
    assert len(raw) == 20 + meta_len + 2 * (6 * 4 + 2 * 60 * 8)


def test_empty_archive():
    arc = AdversarialArchive(np.zeros(0), np.zeros(0), np.zeros((0, 1, 2, 2)), np.zeros((0, 1, 2, 2)))
    assert len(AdversarialArchive.from_bytes(arc.to_bytes())) == 0


def test_corruption_detected():
    raw = _sample().to_bytes()
    with pytest.raises(ArchiveError, match="magic"):
        AdversarialArchive.from_bytes(b"X" + raw[1:])
    with pytest.raises(ArchiveError, match="version"):
        AdversarialArchive.from_bytes(raw[:8] + struct.pack("<I", 7) + raw[12:])
    with pytest.raises(ArchiveError, match="truncated"):
        AdversarialArchive.from_bytes(raw[:-1])
    with pytest.raises(ArchiveError, match="trailing"):
        AdversarialArchive.from_bytes(raw + b"\x00\x00")


def test_inconsistent_arrays_rejected():
    with pytest.raises(ArchiveError):
        AdversarialArchive(np.arange(2), np.arange(3), np.zeros((2, 1, 2, 2)), np.zeros((2, 1, 2, 2)))
    with pytest.raises(ArchiveError):
        AdversarialArchive(np.arange(2), np.arange(2), np.zeros((2, 1, 2, 2)), np.zeros((2, 1, 2, 3)))


def test_file_round_trip(tmp_path):
    arc = _sample()
    arc.save(tmp_path / "a.bin")
    assert AdversarialArchive.load(tmp_path / "a.bin").to_bytes() == arc.to_bytes()
    np.testing.assert_allclose(arc.perturbation, arc.adversarial - arc.clean)
