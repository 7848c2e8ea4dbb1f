"""FMCW frame synthesis and the range-Doppler preprocessing chain.

Frames are laid out as (antenna, sample, chirp): fast time runs down the
sample axis, slow time across chirps.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import ChannelMismatchError, RangeAliasedError, WrongFrameCountError

SPEED_OF_LIGHT = 299_792_458.0


@dataclass(frozen=True)
class RadarConfig:
    n_samples: int = 64
    n_chirps: int = 64
    n_antennas: int = 3
    bandwidth: float = 2.0e9
    chirp_duration: float = 2.5e-4
    carrier_frequency: float = 60.0e9
    frame_rate: float = 10.0
    leakage: float = 0.5

    def __post_init__(self):
        for name in ("n_samples", "n_chirps"):
            n = getattr(self, name)
            if n < 2 or n & (n - 1):
                raise ValueError(f"{name} must be a power of two, got {n}")
        if self.n_antennas < 1:
            raise ValueError("n_antennas must be >= 1")
        for name in ("bandwidth", "chirp_duration", "carrier_frequency", "frame_rate"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive")

    @property
    def wavelength(self) -> float:
        return SPEED_OF_LIGHT / self.carrier_frequency

    @property
    def range_bin_width(self) -> float:
        return SPEED_OF_LIGHT / (2.0 * self.bandwidth)

    @property
    def max_range(self) -> float:
        return self.range_bin_width * self.n_samples / 2

    @property
    def velocity_bin_width(self) -> float:
        return self.wavelength / (2.0 * self.n_chirps * self.chirp_duration)

    @property
    def slow_velocity_bin_width(self) -> float:
        # slow-time columns are one frame period apart
        return self.wavelength * self.frame_rate / (2.0 * self.n_chirps)

    @property
    def image_shape(self) -> tuple[int, int]:
        return self.n_samples // 2, self.n_chirps


@dataclass(frozen=True)
class Target:
    range: float
    radial_velocity: float = 0.0
    amplitude: float = 1.0
    angle: float = 0.0
    micro_motion_amplitude: float = 0.0
    micro_motion_frequency: float = 1.0
    micro_motion_phase: float = 0.0


@dataclass(frozen=True)
class TargetScene:
    targets: tuple[Target, ...] = ()

    @property
    def count_label(self) -> int:
        return len(self.targets)


@dataclass(frozen=True)
class RangeDopplerTensor:
    fast_time_rdi: np.ndarray
    slow_time_rdi: np.ndarray | None = None
    network_input: np.ndarray | None = field(default=None)


def _check_ranges(scene: TargetScene, config: RadarConfig) -> None:
    for t in scene.targets:
        reach = abs(t.range) + abs(t.micro_motion_amplitude)
        if t.range <= 0 or reach >= config.max_range:
            raise RangeAliasedError(
                f"target at {t.range:.3f} m outside unambiguous range (0, {config.max_range:.3f}) m"
            )


def synth_frame(scene: TargetScene, config: RadarConfig, frame_index: int,
                noise_sigma: float = 0.0, seed: int = 0) -> np.ndarray:
    """Real IF samples for one frame, shape (antennas, samples, chirps)."""
    _check_ranges(scene, config)
    n_s, n_c = config.n_samples, config.n_chirps
    sample_time = np.arange(n_s) * (config.chirp_duration / n_s)
    chirp_time = frame_index / config.frame_rate + np.arange(n_c) * config.chirp_duration
    slope = config.bandwidth / config.chirp_duration
    antennas = np.arange(config.n_antennas)

    frame = np.full((config.n_antennas, n_s, n_c), config.leakage, dtype=np.float64)
    for t in scene.targets:
        r = (t.range + t.radial_velocity * chirp_time
             + t.micro_motion_amplitude * np.sin(
                 2.0 * np.pi * t.micro_motion_frequency * chirp_time + t.micro_motion_phase))
        beat = 2.0 * slope * r / SPEED_OF_LIGHT
        carrier_phase = 4.0 * np.pi * config.carrier_frequency * r / SPEED_OF_LIGHT
        antenna_phase = np.pi * antennas * math.sin(t.angle)  # half-wavelength spacing
        phase = (2.0 * np.pi * sample_time[:, None] * beat[None, :] + carrier_phase[None, :])
        frame += t.amplitude * np.cos(phase[None, :, :] + antenna_phase[:, None, None])
    if noise_sigma > 0:
        frame += np.random.default_rng(seed).normal(scale=noise_sigma, size=frame.shape)
    return frame


def mti_filter(frame: np.ndarray) -> np.ndarray:
    """Subtract the mean across chirps from every sample row."""
    return frame - frame.mean(axis=-1, keepdims=True)


def slow_time_dataframe(frames, n_chirps: int | None = None) -> np.ndarray:
    """Stack the chirp-integrated vectors of consecutive frames column-wise."""
    frames = [np.asarray(f) for f in frames]
    expected = n_chirps if n_chirps is not None else (frames[0].shape[-1] if frames else 0)
    if not frames or len(frames) != expected:
        raise WrongFrameCountError(f"need exactly {expected} frames, got {len(frames)}")
    return np.stack([f.sum(axis=-1) for f in frames], axis=-1)


def range_doppler(frame: np.ndarray) -> np.ndarray:
    """Windowed 2-D FFT, positive range half, Doppler axis centred.

    Uses orthonormal FFT scaling so spectrum energy equals windowed input energy.
    Output shape (antennas, samples/2, chirps); zero velocity sits at chirps/2.
    """
    n_s = frame.shape[-2]
    return np.fft.fftshift(windowed_spectrum(frame)[..., : n_s // 2, :], axes=-1)


def hamming_2d(n_samples: int, n_chirps: int) -> np.ndarray:
    return np.outer(np.hamming(n_samples), np.hamming(n_chirps))


def windowed_spectrum(frame: np.ndarray) -> np.ndarray:
    """Full orthonormal 2-D FFT of the Hamming-windowed frame, no cropping or shift."""
    n_s, n_c = frame.shape[-2:]
    return np.fft.fft2(frame * hamming_2d(n_s, n_c), norm="ortho")


def preprocess(frame: np.ndarray) -> np.ndarray:
    return range_doppler(mti_filter(frame))


def to_network_input(fast: np.ndarray, expected_antennas: int = 3) -> np.ndarray:
    """Interleave real and imaginary parts: [Re a0, Im a0, Re a1, Im a1, ...]."""
    fast = np.asarray(fast)
    if fast.shape[0] != expected_antennas:
        raise ChannelMismatchError(
            f"expected {expected_antennas} antennas, got {fast.shape[0]}"
        )
    out = np.empty((2 * fast.shape[0],) + fast.shape[1:], dtype=np.float64)
    out[0::2] = fast.real
    out[1::2] = fast.imag
    return out


def from_network_input(channels: np.ndarray) -> np.ndarray:
    return channels[0::2] + 1j * channels[1::2]


@dataclass(frozen=True)
class ChannelStats:
    mean: np.ndarray
    std: np.ndarray

    @classmethod
    def fit(cls, inputs: np.ndarray) -> "ChannelStats":
        """Per-channel statistics over a stack of shape (frames, channels, H, W)."""
        inputs = np.asarray(inputs)
        n_channels = inputs.shape[1]
        total = np.zeros(n_channels)
        total_sq = np.zeros(n_channels)
        for frame in inputs:
            f = frame.astype(np.float64).reshape(n_channels, -1)
            total += f.sum(axis=1)
            total_sq += np.square(f).sum(axis=1)
        count = inputs.shape[0] * inputs[0, 0].size
        mean = total / count
        var = np.maximum(total_sq / count - mean**2, 0.0)
        std = np.sqrt(var)
        return cls(mean, np.where(std > 0, std, 1.0))

    def apply(self, inputs: np.ndarray, dtype=np.float32) -> np.ndarray:
        shape = (-1, 1, 1)
        return ((inputs - self.mean.reshape(shape)) / self.std.reshape(shape)).astype(dtype)


def analytic_bins(target: Target, config: RadarConfig) -> tuple[float, float]:
    """Expected (range bin, Doppler bin) of a target in the centred image."""
    return (target.range / config.range_bin_width,
            config.n_chirps / 2 + target.radial_velocity / config.velocity_bin_width)


def noise_sigma_for_snr(amplitude: float, snr_db: float) -> float:
    """Per-sample noise standard deviation giving the requested sinusoid SNR."""
    signal_power = amplitude**2 / 2.0
    return math.sqrt(signal_power / 10.0 ** (snr_db / 10.0))
