"""Shoebox-room impulse responses and moving-source rendering.

RIRs are synthesized with the image source method: every mirror image of the
source deposits an attenuated, distance-delayed pulse shaped by an 81-tap
Hann-windowed sinc. Deposits run on a 16x oversampled time grid (so fractional
delays are quantized to 1/16 sample) and a single FFT convolution applies the
kernel, which keeps the cost linear in the image count.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass

import numpy as np
from scipy.io import wavfile
from scipy.signal import fftconvolve

from .errors import AllSilent, NonPhysicalT60Warning, OutOfRoom
from .geometry import SPEED_OF_SOUND, as_vec3

SINC_HALF_WIDTH = 40  # taps each side at the output rate (81-tap kernel)
OVERSAMPLE = 16

_MAX_BETA = 1.0 - 1e-9


@dataclass(frozen=True, eq=False)
class Room:
    """Shoebox room with a uniform wall reflection magnitude."""

    dims: np.ndarray  # (3,) metres
    t60: float
    beta: float

    def __post_init__(self):
        dims = as_vec3(self.dims)
        if np.any(dims <= 0):
            raise ValueError("room dimensions must be positive")
        if self.t60 < 0:
            raise ValueError("t60 must be nonnegative")
        if not 0.0 <= self.beta < 1.0:
            raise ValueError("beta must lie in [0, 1)")
        object.__setattr__(self, "dims", dims)

    @classmethod
    def from_t60(cls, dims, t60: float) -> "Room":
        dims = as_vec3(dims)
        beta = 0.0 if t60 == 0.0 else beta_from_t60(dims, t60)
        return cls(dims=dims, t60=float(t60), beta=beta)

    def contains(self, point) -> bool:
        p = as_vec3(point)
        return bool(np.all(p > 0) and np.all(p < self.dims))


@dataclass(frozen=True, eq=False)
class Rir:
    taps: np.ndarray
    fs: float
    source_pos: np.ndarray
    mic_pos: np.ndarray


@dataclass(frozen=True, eq=False)
class MicSignals:
    """Multichannel time series, one row per microphone."""

    channels: np.ndarray  # (n_mics, n_samples)
    fs: int

    def __post_init__(self):
        ch = np.atleast_2d(np.asarray(self.channels))
        object.__setattr__(self, "channels", ch)

    @property
    def n_samples(self) -> int:
        return self.channels.shape[1]

    def to_wav(self, path) -> None:
        wavfile.write(path, int(self.fs), self.channels.T.astype(np.float32))

    @classmethod
    def from_wav(cls, path) -> "MicSignals":
        fs, data = wavfile.read(path)
        if data.ndim == 1:
            data = data[:, None]
        if data.dtype == np.int16:
            data = data.astype(np.float32) / 32768.0
        elif data.dtype == np.int32:
            data = data.astype(np.float32) / 2147483648.0
        return cls(channels=data.T.astype(np.float32), fs=int(fs))


def beta_from_t60(dims, t60: float) -> float:
    """Uniform wall reflection magnitude from a Sabine inversion."""
    dims = as_vec3(dims)
    if t60 <= 0:
        raise ValueError("t60 must be positive")
    volume = float(np.prod(dims))
    surface = 2.0 * (dims[0] * dims[1] + dims[0] * dims[2] + dims[1] * dims[2])
    alpha = 0.161 * volume / (surface * t60)
    if alpha >= 1.0:
        warnings.warn(
            f"t60={t60} s is not achievable in this room (alpha={alpha:.3f} clamped)",
            NonPhysicalT60Warning,
        )
    alpha = min(max(alpha, 0.0), 0.9999)
    return min(math.sqrt(1.0 - alpha), _MAX_BETA)


def image_counts(dims, t_max: float, c: float = SPEED_OF_SOUND) -> np.ndarray:
    """Mirrored-room repetitions per axis needed to cover ``t_max``."""
    dims = as_vec3(dims)
    return np.ceil(c * t_max / (2.0 * dims)).astype(int)


def _sinc_kernel_up() -> np.ndarray:
    """Hann-windowed sinc on the oversampled grid."""
    half = SINC_HALF_WIDTH * OVERSAMPLE
    i = np.arange(-half, half + 1)
    window = 0.5 * (1.0 + np.cos(np.pi * i / half))
    return window * np.sinc(i / OVERSAMPLE)


_KERNEL_UP = _sinc_kernel_up()


def _deposit_to_rirs(hist_up: np.ndarray, n_taps: int) -> np.ndarray:
    """Convolve oversampled impulse deposits with the sinc kernel and decimate."""
    half = SINC_HALF_WIDTH * OVERSAMPLE
    full = fftconvolve(hist_up, _KERNEL_UP[None, :], axes=1)
    idx = np.arange(n_taps) * OVERSAMPLE + half
    return full[:, idx]


def _rirs_for_point(
    room: Room, src: np.ndarray, mic_positions: np.ndarray, fs: float, t_max: float, c: float
) -> np.ndarray:
    """Image-source RIRs from one source point to every microphone."""
    n_mics = mic_positions.shape[0]
    n_taps = int(round(t_max * fs))
    n_up = n_taps * OVERSAMPLE + 1
    hist = np.zeros((n_mics, n_up))
    max_dist = c * t_max

    if room.beta == 0.0:
        # fully absorbing walls: only the direct path survives
        d = np.linalg.norm(mic_positions - src, axis=1)
        q = np.rint(d / c * fs * OVERSAMPLE).astype(int)
        keep = q < n_up
        np.add.at(hist, (np.arange(n_mics)[keep], q[keep]), 1.0 / (4.0 * np.pi * d[keep]))
        return _deposit_to_rirs(hist, n_taps)

    counts = image_counts(room.dims, t_max, c)
    grids = [np.arange(-n, n + 1) for n in counts]
    # per axis and wall-parity: image coordinate and reflection count
    coords = [[(1 - 2 * p) * src[a] + 2 * grids[a] * room.dims[a] for p in (0, 1)] for a in range(3)]
    expos = [[np.abs(grids[a] + p) + np.abs(grids[a]) for p in (0, 1)] for a in range(3)]
    log_beta = math.log(room.beta)

    for px in (0, 1):
        for py in (0, 1):
            for pz in (0, 1):
                expo = (
                    expos[0][px][:, None, None]
                    + expos[1][py][None, :, None]
                    + expos[2][pz][None, None, :]
                )
                gain = np.exp(log_beta * expo)
                for m in range(n_mics):
                    d2 = (
                        (coords[0][px] - mic_positions[m, 0])[:, None, None] ** 2
                        + (coords[1][py] - mic_positions[m, 1])[None, :, None] ** 2
                        + (coords[2][pz] - mic_positions[m, 2])[None, None, :] ** 2
                    )
                    d = np.sqrt(d2)
                    keep = d <= max_dist
                    dk = d[keep]
                    amp = gain[keep] / (4.0 * np.pi * np.maximum(dk, 1e-9))
                    q = np.rint(dk / c * fs * OVERSAMPLE).astype(int)
                    inside = q < n_up
                    hist[m] += np.bincount(q[inside], weights=amp[inside], minlength=n_up)
    return _deposit_to_rirs(hist, n_taps)


def simulate_rir(
    room: Room, src, mic, fs: float, t_max: float, c: float = SPEED_OF_SOUND
) -> Rir:
    """Image-source impulse response between one source and one microphone."""
    src = as_vec3(src)
    mic = as_vec3(mic)
    if not room.contains(src):
        raise OutOfRoom(f"source {src} outside room {room.dims}")
    if not room.contains(mic):
        raise OutOfRoom(f"microphone {mic} outside room {room.dims}")
    taps = _rirs_for_point(room, src, mic[None, :], fs, t_max, c)[0]
    return Rir(taps=taps, fs=fs, source_pos=src, mic_pos=mic)


def render_moving_source(
    dry: np.ndarray,
    traj_points: np.ndarray,
    mic_positions: np.ndarray,
    room: Room,
    fs: int,
    t_max: float | None = None,
    hop: int | None = None,
    c: float = SPEED_OF_SOUND,
    dtype=np.float32,
) -> MicSignals:
    """Propagate a dry signal along a trajectory to every microphone.

    The dry signal is split into one contiguous segment per trajectory point;
    each segment is convolved with that point's RIR set and the results are
    overlap-added at the segments' original offsets.
    """
    dry = np.asarray(dry, dtype=float)
    traj_points = np.atleast_2d(np.asarray(traj_points, dtype=float))
    mic_positions = np.atleast_2d(np.asarray(mic_positions, dtype=float))
    n_points = traj_points.shape[0]
    for p in traj_points:
        if not room.contains(p):
            raise OutOfRoom(f"trajectory point {p} outside room {room.dims}")
    for m in mic_positions:
        if not room.contains(m):
            raise OutOfRoom(f"microphone {m} outside room {room.dims}")
    if t_max is None:
        t_max = _default_t_max(room, fs, c)
    if hop is None:
        hop = int(math.ceil(len(dry) / n_points))
    if hop * (n_points - 1) >= len(dry):
        raise ValueError(f"dry signal too short for {n_points} segments of hop {hop}")

    n_mics = mic_positions.shape[0]
    out = np.zeros((n_mics, len(dry)), dtype=float)
    # group identical consecutive points (static sources collapse to one RIR set)
    start = 0
    while start < n_points:
        stop = start + 1
        while stop < n_points and np.array_equal(traj_points[stop], traj_points[start]):
            stop += 1
        seg_lo = start * hop
        seg_hi = stop * hop if stop < n_points else len(dry)
        segment = dry[seg_lo:seg_hi]
        if segment.size:
            rirs = _rirs_for_point(room, traj_points[start], mic_positions, fs, t_max, c)
            wet = fftconvolve(segment[None, :], rirs, axes=1)
            hi = min(seg_lo + wet.shape[1], len(dry))
            out[:, seg_lo:hi] += wet[:, : hi - seg_lo]
        start = stop
    return MicSignals(channels=out.astype(dtype), fs=fs)


def _default_t_max(room: Room, fs: float, c: float) -> float:
    if room.t60 > 0:
        return room.t60
    # anechoic: cover the longest direct path plus the kernel tail
    return float(np.linalg.norm(room.dims) / c + 2.0 * SINC_HALF_WIDTH / fs)


def add_noise(
    sig: MicSignals,
    snr_db: float,
    vad_mask: np.ndarray,
    rng: np.random.Generator,
    window_len: int = 4096,
    hop: int = 3072,
) -> MicSignals:
    """Add white Gaussian noise at an SNR measured over the non-silent frames."""
    if math.isinf(snr_db):
        return MicSignals(channels=sig.channels.copy(), fs=sig.fs)
    vad_mask = np.asarray(vad_mask, dtype=bool)
    if not vad_mask.any():
        raise AllSilent("cannot set an SNR with every frame silent")
    idx = np.arange(window_len)[None, :] + hop * np.arange(len(vad_mask))[:, None]
    frames = sig.channels[:, idx]  # (n_ch, T, K)
    p_sig = float(np.mean(frames[:, vad_mask] ** 2))
    sigma = math.sqrt(p_sig * 10.0 ** (-snr_db / 10.0))
    noise = rng.normal(0.0, sigma, size=sig.channels.shape)
    return MicSignals(channels=(sig.channels + noise).astype(sig.channels.dtype), fs=sig.fs)
