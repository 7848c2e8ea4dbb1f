import numpy as np
import pytest

from larloss import radar
from larloss.dataset import (
    DatasetConfig,
    dataset_checksum,
    load_dataset,
    read_rdi,
    scene_for_recording,
    synth_dataset,
    synth_recording,
    write_dataset,
    write_rdi,
)
from larloss.errors import DatasetError


@pytest.fixture(scope="module")
def ten_per_label():
    return synth_dataset(DatasetConfig(recordings_per_label=10, frames_per_recording=50))


def tiny(**kw):
    kw = {"recordings_per_label": 2, "frames_per_recording": 3, **kw}
    return DatasetConfig(**kw)


def test_counts_and_split(ten_per_label):
    ds = ten_per_label
    assert ds.num_frames == 3000
    test_inputs, test_labels, test_ids = ds.stacked("test")
    assert len(test_labels) == 600
    assert ds.frame_shape == (6, 32, 64)
    train_ids = set(ds.stacked("train")[2].tolist())
    assert not train_ids & set(test_ids.tolist())
    for split in ("train", "test"):
        counts = np.bincount(ds.stacked(split)[1], minlength=6)
        assert np.all(counts == counts[0])


def test_label_zero_is_noise_and_leakage_only():
    rng = np.random.default_rng(0)
    assert scene_for_recording(0, rng, radar.RadarConfig()).count_label == 0
    quiet = synth_recording(0, 0, "train", tiny(noise_sigma=0.0))
    np.testing.assert_allclose(quiet.frames, 0.0, atol=1e-9)  # leakage is removed by MTI


def test_scene_label_matches_target_count():
    rng = np.random.default_rng(1)
    for label in range(6):
        assert scene_for_recording(label, rng, radar.RadarConfig()).count_label == label


def test_same_seed_is_bitwise_identical(tmp_path):
    a, b = synth_dataset(tiny()), synth_dataset(tiny())
    for ra, rb in zip(a.recordings, b.recordings):
        np.testing.assert_array_equal(ra.frames, rb.frames)
    write_dataset(a, tmp_path / "a")
    write_dataset(b, tmp_path / "b")
    assert dataset_checksum(tmp_path / "a") == dataset_checksum(tmp_path / "b")
    write_dataset(synth_dataset(tiny(seed=1)), tmp_path / "c")
    assert dataset_checksum(tmp_path / "a") != dataset_checksum(tmp_path / "c")


def test_recordings_are_independent_of_generation_order():
    config = tiny()
    ds = synth_dataset(config)
    rec = ds.recordings[7]
    again = synth_recording(rec.recording_id, rec.label, rec.split, config)
    np.testing.assert_array_equal(rec.frames, again.frames)


def test_slow_time_channels_are_appended():
    rec = synth_recording(3, 2, "train", tiny(include_slow_time=True, frames_per_recording=1))
    plain = synth_recording(3, 2, "train", tiny(frames_per_recording=1))
    assert rec.frames.shape == (1, 12, 32, 64)
    np.testing.assert_array_equal(rec.frames[:, :6], plain.frames)


def test_round_trip_on_disk(tmp_path):
    ds = synth_dataset(tiny())
    write_dataset(ds, tmp_path)
    manifest = (tmp_path / "manifest.csv").read_text().splitlines()
    assert manifest[0] == "recording_id,label,split,n_frames"
    assert len(manifest) - 1 == len(ds.recordings)
    loaded = load_dataset(tmp_path)
    assert loaded.config == ds.config
    for a, b in zip(ds.recordings, loaded.recordings):
        assert (a.recording_id, a.label, a.split) == (b.recording_id, b.label, b.split)
        np.testing.assert_array_equal(a.frames, b.frames)


def test_rdi_header_layout(tmp_path):
    frames = np.arange(2 * 3 * 4 * 5, dtype=np.float32).reshape(2, 3, 4, 5)
    write_rdi(tmp_path / "x.rdi", frames)
    raw = (tmp_path / "x.rdi").read_bytes()
    assert raw[:4] == b"RDI1"
    assert np.frombuffer(raw[4:20], "<u4").tolist() == [3, 4, 5, 2]
    np.testing.assert_array_equal(read_rdi(tmp_path / "x.rdi"), frames)
    (tmp_path / "bad.rdi").write_bytes(raw[:-4])
    with pytest.raises(DatasetError):
        read_rdi(tmp_path / "bad.rdi")


def test_missing_manifest(tmp_path):
    with pytest.raises(DatasetError, match="manifest"):
        load_dataset(tmp_path)


def test_flat_config_round_trip():
    config = DatasetConfig(noise_sigma=0.3, include_slow_time=True)
    flat = {k: str(v).lower() if isinstance(v, bool) else str(v) for k, v in config.to_flat().items()}
    assert DatasetConfig.from_flat(flat) == config
    with pytest.raises(KeyError):
        DatasetConfig.from_flat({"radar.nope": "1"})
