"""Synthetic in-cabin people-counting dataset and its on-disk layout.

Directory layout::

    manifest.csv        recording_id,label,split,n_frames
    dataset.cfg         flat key=value generation parameters
    rec_00000.rdi       one tensor file per recording

Tensor files are little-endian: magic ``RDI1``, u32 channels, u32 height,
u32 width, u32 frames, then float32 frames in row-major order.  They hold
the un-standardised network input; standardisation statistics are fitted
on the training split at train time.
"""
from __future__ import annotations

import csv
import hashlib
import struct
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from . import radar
from .config import format_config, parse_config_file
from .errors import DatasetError

RDI_MAGIC = b"RDI1"
MANIFEST_NAME = "manifest.csv"
SIDECAR_NAME = "dataset.cfg"

# (range m, angle rad) of the five cabin seats, front row first
SEATS = ((0.55, -0.45), (0.55, 0.45), (1.30, -0.50), (1.25, 0.0), (1.30, 0.50))


@dataclass(frozen=True)
class DatasetConfig:
    num_labels: int = 6
    recordings_per_label: int = 20
    frames_per_recording: int = 50
    noise_sigma: float = 0.1
    test_fraction: float = 0.2
    include_slow_time: bool = False
    seed: int = 0
    radar: radar.RadarConfig = field(default_factory=radar.RadarConfig)

    def __post_init__(self):
        if self.num_labels < 2:
            raise ValueError("num_labels must be >= 2")
        if self.num_labels - 1 > len(SEATS):
            raise ValueError(f"at most {len(SEATS)} occupants fit the cabin model")
        if self.recordings_per_label < 1 or self.frames_per_recording < 1:
            raise ValueError("recording and frame counts must be positive")

    def to_flat(self) -> dict[str, object]:
        flat = {k: v for k, v in asdict(self).items() if k != "radar"}
        flat.update({f"radar.{k}": v for k, v in asdict(self.radar).items()})
        return flat

    @classmethod
    def from_flat(cls, values: dict[str, str]) -> "DatasetConfig":
        radar_kwargs, kwargs = {}, {}
        radar_types = {f.name: f.type for f in fields(radar.RadarConfig)}
        own_types = {f.name: f.type for f in fields(cls) if f.name != "radar"}
        for key, raw in values.items():
            if key.startswith("radar."):
                name = key[len("radar."):]
                if name not in radar_types:
                    raise KeyError(key)
                radar_kwargs[name] = _coerce(raw, radar_types[name])
            elif key in own_types:
                kwargs[key] = _coerce(raw, own_types[key])
            else:
                raise KeyError(key)
        return cls(radar=radar.RadarConfig(**radar_kwargs), **kwargs)


def _coerce(raw, type_name):
    if not isinstance(raw, str):
        return raw
    type_name = str(type_name)
    if "bool" in type_name:
        lowered = raw.strip().lower()
        if lowered not in ("true", "false", "1", "0", "yes", "no"):
            raise ValueError(f"not a boolean: {raw!r}")
        return lowered in ("true", "1", "yes")
    if "int" in type_name:
        return int(raw)
    if "float" in type_name:
        return float(raw)
    return raw


@dataclass
class Recording:
    recording_id: int
    label: int
    split: str
    frames: np.ndarray  # (n_frames, channels, height, width) float32


@dataclass
class Dataset:
    config: DatasetConfig
    recordings: list[Recording]

    def split(self, name: str) -> list[Recording]:
        return [r for r in self.recordings if r.split == name]

    def stacked(self, name: str):
        """(inputs, labels, recording ids) for one split, recordings in id order."""
        recs = self.split(name)
        if not recs:
            return (np.zeros((0,) + self.frame_shape, np.float32),
                    np.zeros(0, np.int64), np.zeros(0, np.int64))
        inputs = np.concatenate([r.frames for r in recs])
        labels = np.concatenate([np.full(len(r.frames), r.label) for r in recs])
        rec_ids = np.concatenate([np.full(len(r.frames), r.recording_id) for r in recs])
        return inputs, labels.astype(np.int64), rec_ids.astype(np.int64)

    @property
    def frame_shape(self) -> tuple[int, ...]:
        return tuple(self.recordings[0].frames.shape[1:])

    @property
    def num_frames(self) -> int:
        return sum(len(r.frames) for r in self.recordings)


def scene_for_recording(label: int, rng: np.random.Generator,
                        config: radar.RadarConfig) -> radar.TargetScene:
    """Occupy ``label`` random seats with jittered, breathing, fidgeting people."""
    seats = rng.permutation(len(SEATS))[:label]
    targets = []
    for seat in sorted(seats.tolist()):
        base_range, base_angle = SEATS[seat]
        rng_m = base_range + rng.uniform(-0.08, 0.08)
        targets.append(radar.Target(
            range=rng_m,
            radial_velocity=rng.uniform(-0.01, 0.01),
            amplitude=rng.uniform(0.7, 1.3) * 0.55 / rng_m,
            angle=base_angle + rng.uniform(-0.1, 0.1),
            micro_motion_amplitude=rng.uniform(0.004, 0.015),
            micro_motion_frequency=rng.uniform(0.5, 1.5),
            micro_motion_phase=rng.uniform(0.0, 2.0 * np.pi),
        ))
    return radar.TargetScene(tuple(targets))


def _network_frame(raw_frame: np.ndarray) -> np.ndarray:
    return radar.to_network_input(radar.preprocess(raw_frame), raw_frame.shape[0])


def synth_recording(recording_id: int, label: int, split: str, config: DatasetConfig) -> Recording:
    """Frames of one recording; depends only on (seed, recording id)."""
    rng = np.random.default_rng([config.seed, recording_id])
    scene = scene_for_recording(label, rng, config.radar)
    start = int(rng.integers(0, 100_000))
    n_c = config.radar.n_chirps

    def raw(frame_index):
        noise_seed = [config.seed, recording_id, 1, frame_index]
        return radar.synth_frame(scene, config.radar, frame_index, config.noise_sigma, noise_seed)

    frames = []
    for k in range(config.frames_per_recording):
        frame_index = start + k
        raw_frame = raw(frame_index)
        channels = radar.to_network_input(radar.preprocess(raw_frame), config.radar.n_antennas)
        if config.include_slow_time:
            history = [raw(i) for i in range(frame_index - n_c + 1, frame_index)] + [raw_frame]
            slow = radar.slow_time_dataframe(history, n_c)
            channels = np.concatenate([channels, _network_frame(slow)])
        frames.append(channels.astype(np.float32))
    return Recording(recording_id, label, split, np.stack(frames))


def split_assignment(config: DatasetConfig) -> dict[int, str]:
    """Whole recordings go to train or test, the same count per label."""
    n_rec = config.recordings_per_label
    n_test = int(round(n_rec * config.test_fraction))
    out = {}
    for label in range(config.num_labels):
        order = np.random.default_rng([config.seed, 1_000_000 + label]).permutation(n_rec)
        test = set(order[:n_test].tolist())
        for r in range(n_rec):
            out[label * n_rec + r] = "test" if r in test else "train"
    return out


def synth_dataset(config: DatasetConfig) -> Dataset:
    splits = split_assignment(config)
    recordings = []
    for label in range(config.num_labels):
        for r in range(config.recordings_per_label):
            rec_id = label * config.recordings_per_label + r
            recordings.append(synth_recording(rec_id, label, splits[rec_id], config))
    return Dataset(config, recordings)


def write_rdi(path: Path, frames: np.ndarray) -> None:
    frames = np.ascontiguousarray(frames, dtype="<f4")
    n, c, h, w = frames.shape
    with open(path, "wb") as fh:
        fh.write(RDI_MAGIC + struct.pack("<IIII", c, h, w, n))
        fh.write(frames.tobytes())


def read_rdi(path: Path) -> np.ndarray:
    data = Path(path).read_bytes()
    if data[:4] != RDI_MAGIC:
        raise DatasetError(f"{path}: bad magic {data[:4]!r}")
    c, h, w, n = struct.unpack_from("<IIII", data, 4)
    expected = 20 + 4 * c * h * w * n
    if len(data) != expected:
        raise DatasetError(f"{path}: expected {expected} bytes, found {len(data)}")
    return np.frombuffer(data, dtype="<f4", offset=20).reshape(n, c, h, w).astype(np.float32)


def recording_filename(recording_id: int) -> str:
    return f"rec_{recording_id:05d}.rdi"


def write_dataset(dataset: Dataset, out_dir: Path) -> None:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    with open(out_dir / MANIFEST_NAME, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["recording_id", "label", "split", "n_frames"])
        for rec in dataset.recordings:
            writer.writerow([rec.recording_id, rec.label, rec.split, len(rec.frames)])
            write_rdi(out_dir / recording_filename(rec.recording_id), rec.frames)
    (out_dir / SIDECAR_NAME).write_text(format_config(dataset.config.to_flat()))


def load_dataset(directory: Path) -> Dataset:
    directory = Path(directory)
    manifest = directory / MANIFEST_NAME
    if not manifest.is_file():
        raise DatasetError(f"{manifest}: dataset manifest not found")
    sidecar = directory / SIDECAR_NAME
    if not sidecar.is_file():
        raise DatasetError(f"{sidecar}: generation sidecar not found")
    config = DatasetConfig.from_flat(parse_config_file(sidecar))
    recordings = []
    with open(manifest, newline="") as fh:
        for row in csv.DictReader(fh):
            rec_id = int(row["recording_id"])
            frames = read_rdi(directory / recording_filename(rec_id))
            if len(frames) != int(row["n_frames"]):
                raise DatasetError(f"recording {rec_id}: manifest frame count disagrees with file")
            recordings.append(Recording(rec_id, int(row["label"]), row["split"], frames))
    if not recordings:
        raise DatasetError(f"{manifest}: no recordings listed")
    return Dataset(config, recordings)


def dataset_checksum(directory: Path) -> str:
    """SHA-256 over the manifest, sidecar and every tensor file."""
    directory = Path(directory)
    h = hashlib.sha256()
    names = [MANIFEST_NAME, SIDECAR_NAME] + sorted(p.name for p in directory.glob("rec_*.rdi"))
    for name in names:
        h.update(name.encode())
        h.update((directory / name).read_bytes())
    return h.hexdigest()


def dataset_fingerprint(dataset: Dataset) -> str:
    """Checksum of an in-memory dataset, matching nothing on disk; used in reports."""
    h = hashlib.sha256()
    for rec in dataset.recordings:
        h.update(f"{rec.recording_id},{rec.label},{rec.split};".encode())
        h.update(np.ascontiguousarray(rec.frames, dtype="<f4").tobytes())
    return h.hexdigest()
