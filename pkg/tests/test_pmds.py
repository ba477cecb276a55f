import numpy as np
import pytest

from bevmotion.exceptions import DataCorruptionError, DataFormatError
from bevmotion.grid import NUM_CLASSES, PointSequence, SceneLabels
from bevmotion.pmds import (
    dataset_checksum,
    read_dataset,
    read_predictions,
    write_dataset,
    write_predictions,
)


def _random_sequence(spec, rng):
    frames = [rng.uniform(-16, 16, size=(int(rng.integers(0, 40)), 3)).astype(np.float32)
              for _ in range(spec.input_frames)]
    T, H, W = spec.output_steps, spec.H, spec.W
    labels = SceneLabels(
        motion=rng.normal(size=(T, H, W, 2)).astype(np.float32),
        category=rng.integers(0, NUM_CLASSES, size=(H, W)).astype(np.int32),
        state=rng.integers(0, 2, size=(H, W)).astype(np.uint8),
        instance_id=rng.integers(0, 5, size=(H, W)).astype(np.int32),
        valid=rng.integers(0, 2, size=(H, W)).astype(np.uint8),
    )
    return PointSequence(frames=frames), labels


def test_round_trip_identity(tmp_path, small_spec):
    rng = np.random.default_rng(0)
    seq, labels = _random_sequence(small_spec, rng)
    path = tmp_path / "one.pmds"
    write_dataset(path, small_spec, [(seq, labels)])
    spec2, loaded = read_dataset(path)
    assert spec2 == small_spec
    assert len(loaded) == 1
    seq2, labels2 = loaded[0]
    for a, b in zip(seq.frames, seq2.frames):
        assert np.array_equal(a, b)
    assert np.array_equal(labels.motion, labels2.motion)
    assert np.array_equal(labels.category, labels2.category)
    assert np.array_equal(labels.state, labels2.state)
    assert np.array_equal(labels.instance_id, labels2.instance_id)
    assert np.array_equal(labels.valid, labels2.valid)


def test_wrong_magic_raises_format_error(tmp_path, small_spec):
    path = tmp_path / "bad.pmds"
    write_dataset(path, small_spec, [])
    raw = bytearray(path.read_bytes())
    raw[:4] = b"XXXX"
    path.write_bytes(bytes(raw))
    with pytest.raises(DataFormatError):
        read_dataset(path)


def test_unsupported_version_raises_format_error(tmp_path, small_spec):
    path = tmp_path / "bad.pmds"
    write_dataset(path, small_spec, [])
    raw = bytearray(path.read_bytes())
    raw[4:6] = (999).to_bytes(2, "little")
    path.write_bytes(bytes(raw))
    with pytest.raises(DataFormatError):
        read_dataset(path)


def test_truncated_file_raises_corruption_error(tmp_path, small_spec):
    rng = np.random.default_rng(1)
    path = tmp_path / "trunc.pmds"
    write_dataset(path, small_spec, [_random_sequence(small_spec, rng)])
    raw = path.read_bytes()
    path.write_bytes(raw[: len(raw) - 100])
    with pytest.raises(DataCorruptionError):
        read_dataset(path)


def test_trailing_bytes_raise_corruption_error(tmp_path, small_spec):
    path = tmp_path / "trail.pmds"
    write_dataset(path, small_spec, [])
    with open(path, "ab") as fh:
        fh.write(b"junk")
    with pytest.raises(DataCorruptionError):
        read_dataset(path)


def test_hundred_sequence_checksum_round_trip(tmp_path):
    # small grid keeps this fast while still covering 100 records
    from bevmotion.grid import GridSpec

    spec = GridSpec(x_range=(-4, 4), y_range=(-4, 4), z_range=(-1, 1),
                    xy_resolution=0.5, z_resolution=0.5)
    rng = np.random.default_rng(2)
    sequences = [_random_sequence(spec, rng) for _ in range(100)]
    checksums = [dataset_checksum(s, l) for s, l in sequences]
    path = tmp_path / "big.pmds"
    write_dataset(path, spec, sequences)
    _, loaded = read_dataset(path)
    assert [dataset_checksum(s, l) for s, l in loaded] == checksums


def test_predictions_round_trip(tmp_path, small_spec):
    rng = np.random.default_rng(3)
    T, H, W = small_spec.output_steps, small_spec.H, small_spec.W
    records = [
        (
            rng.normal(size=(T, H, W, 2)).astype(np.float32),
            rng.normal(size=(H, W, NUM_CLASSES)).astype(np.float32),
            rng.normal(size=(H, W)).astype(np.float32),
        )
        for _ in range(3)
    ]
    path = tmp_path / "pred.pmdsp"
    write_predictions(path, small_spec, records)
    spec2, loaded = read_predictions(path)
    assert spec2 == small_spec
    for (m, c, s), (m2, c2, s2) in zip(records, loaded):
        assert np.array_equal(m, m2)
        assert np.array_equal(c, c2)
        assert np.array_equal(s, s2)


def test_dataset_magic_rejected_by_prediction_reader(tmp_path, small_spec):
    path = tmp_path / "d.pmds"
    write_dataset(path, small_spec, [])
    with pytest.raises(DataFormatError):
        read_predictions(path)
