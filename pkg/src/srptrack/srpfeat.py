"""Framing, GCC-PHAT, SRP-PHAT power maps and network input assembly.

A power map is the steered response power evaluated on a spherical grid,
computed from the pairwise generalized cross-correlations with phase-transform
weighting. Fractional steering delays are approximated to the nearest sample;
no interpolation is performed.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import FormatError, LagRangeTooSmall, TooShort
from .geometry import DelayTable, MicArray, SphericalGrid, grid_argmax

_FEATURE_MAGIC = b"SRPM"
_FEATURE_VERSION = 1

# relative floor for the PHAT denominator, keeps silent frames finite
_PHAT_EPS_REL = 1e-12


@dataclass(frozen=True)
class FramingConfig:
    """Hann-windowed analysis frames: length ``K`` samples, hop ``hop``."""

    K: int = 4096
    hop: int = 3072
    fs: int = 16000
    window: str = "hann"

    def __post_init__(self):
        if not 0 < self.hop <= self.K:
            raise ValueError(f"hop must be in (0, K], got hop={self.hop} K={self.K}")
        if self.window != "hann":
            raise ValueError(f"only the hann window is supported, got {self.window!r}")

    @property
    def hop_seconds(self) -> float:
        return self.hop / self.fs

    def n_frames(self, n_samples: int) -> int:
        if n_samples < self.K:
            raise TooShort(f"signal of {n_samples} samples is shorter than one window (K={self.K})")
        return (n_samples - self.K) // self.hop + 1

    def frame_times(self, n_frames: int) -> np.ndarray:
        """Centre time in seconds of each frame."""
        return (np.arange(n_frames) * self.hop + self.K / 2) / self.fs


def frame_signal(channels: np.ndarray, cfg: FramingConfig) -> np.ndarray:
    """Split (n_ch, n_samples) into Hann-windowed frames (n_ch, T, K)."""
    channels = np.atleast_2d(np.asarray(channels))
    n = channels.shape[-1]
    t = cfg.n_frames(n)
    idx = np.arange(cfg.K)[None, :] + cfg.hop * np.arange(t)[:, None]
    return channels[:, idx] * np.hanning(cfg.K)


class EnergyVad:
    """Energy-threshold voice activity detector over analysis frames.

    A frame is speech when its Hann-windowed RMS (pooled over channels)
    exceeds both an absolute floor and a fraction of the running maximum
    frame RMS. Windowing matches what the spectral pipeline actually sees, so
    signal hugging a frame edge does not count as activity. The running
    maximum only looks backwards, so the mask is causal.
    """

    def __init__(self, abs_floor: float = 1e-6, rel_threshold: float = 0.05):
        self.abs_floor = abs_floor
        self.rel_threshold = rel_threshold

    def mask_from_rms(self, rms: np.ndarray) -> np.ndarray:
        running_max = np.maximum.accumulate(rms)
        return rms > np.maximum(self.abs_floor, self.rel_threshold * running_max)

    def mask(self, channels: np.ndarray, cfg: FramingConfig) -> np.ndarray:
        """Per-frame speech mask for a (n_ch, n_samples) signal."""
        channels = np.atleast_2d(np.asarray(channels))
        t = cfg.n_frames(channels.shape[-1])
        idx = np.arange(cfg.K)[None, :] + cfg.hop * np.arange(t)[:, None]
        frames = channels[:, idx] * np.hanning(cfg.K)
        rms = np.sqrt(np.mean(frames**2, axis=(0, 2)))
        return self.mask_from_rms(rms)


def gcc_phat(frame_n: np.ndarray, frame_m: np.ndarray, lag_range: int) -> np.ndarray:
    """PHAT-weighted cross-correlation of two equal-length frames.

    Returns values for integer lags ``-lag_range .. +lag_range``. With
    ``frame_n`` equal to ``frame_m`` delayed by d samples, the peak sits at
    lag +d.
    """
    frame_n = np.asarray(frame_n, dtype=float)
    frame_m = np.asarray(frame_m, dtype=float)
    if frame_n.shape != frame_m.shape:
        raise ValueError("frames must have equal length")
    k = frame_n.shape[-1]
    cross = np.fft.rfft(frame_n) * np.conj(np.fft.rfft(frame_m))
    mag = np.abs(cross)
    floor = max(float(mag.max()) * _PHAT_EPS_REL, np.finfo(float).tiny)
    r = np.fft.irfft(cross / np.maximum(mag, floor), n=k)
    return np.concatenate([r[-lag_range:], r[: lag_range + 1]])


@dataclass(frozen=True, eq=False)
class GccSet:
    """All-pairs GCC-PHAT of one frame: ``pair_lags[p]`` covers lags -L..+L for
    pair ``pairs[p] = (n, m)`` with n < m; ``R_mn(tau) = R_nm(-tau)``.
    ``auto_zero[n]`` is the n == m term at lag 0."""

    pair_lags: np.ndarray  # (n_pairs, 2 * lag_range + 1)
    auto_zero: np.ndarray  # (n_mics,)
    pairs: list[tuple[int, int]]
    lag_range: int

    @property
    def n_mics(self) -> int:
        return len(self.auto_zero)

    def r(self, n: int, m: int, lag: int) -> float:
        """Correlation of sensors (n, m) at an integer lag."""
        if abs(lag) > self.lag_range:
            raise LagRangeTooSmall(f"lag {lag} outside +-{self.lag_range}")
        if n == m:
            return float(self.auto_zero[n]) if lag == 0 else 0.0
        if n < m:
            return float(self.pair_lags[self.pairs.index((n, m)), self.lag_range + lag])
        return float(self.pair_lags[self.pairs.index((m, n)), self.lag_range - lag])


def default_lag_range(array: MicArray, fs: float, c: float = 343.0) -> int:
    """Lags needed to cover the array aperture at sample rate ``fs``."""
    return int(np.ceil(array.aperture * fs / c))


def gcc_set(frames: np.ndarray, lag_range: int) -> GccSet:
    """GCC-PHAT for all sensor pairs of one multichannel frame (n_mics, K)."""
    frames = np.asarray(frames, dtype=float)
    n_mics, k = frames.shape
    spectra = np.fft.rfft(frames, axis=-1)
    pairs = [(i, j) for i in range(n_mics) for j in range(i + 1, n_mics)]
    cross = np.stack([spectra[n] * np.conj(spectra[m]) for n, m in pairs])
    mag = np.abs(cross)
    floor = np.maximum(mag.max(axis=-1, keepdims=True) * _PHAT_EPS_REL, np.finfo(float).tiny)
    r = np.fft.irfft(cross / np.maximum(mag, floor), n=k, axis=-1)
    pair_lags = np.concatenate([r[:, -lag_range:], r[:, : lag_range + 1]], axis=-1)
    # autoterm: PHAT of |X_n|^2 is flat, so R_nn(0) is 1 unless the frame is silent
    auto_mag = np.abs(spectra) ** 2
    auto_floor = np.maximum(auto_mag.max(axis=-1, keepdims=True) * _PHAT_EPS_REL, np.finfo(float).tiny)
    auto_zero = np.mean(auto_mag / np.maximum(auto_mag, auto_floor), axis=-1)
    return GccSet(pair_lags=pair_lags, auto_zero=auto_zero, pairs=pairs, lag_range=lag_range)


@dataclass(frozen=True, eq=False)
class PowerMap:
    values: np.ndarray  # (n_theta, n_phi)
    normalized: bool = False


def srp_map(gcc: GccSet, delays: DelayTable, fs: float) -> PowerMap:
    """Steered response power over the grid from nearest-sample GCC values.

    Evaluates the double sum over all sensor pairs, autoterms included.
    """
    lag_idx = np.rint(delays.delays * fs).astype(int)  # (N, N, nt, np)
    max_lag = int(np.max(np.abs(lag_idx)))
    if max_lag > gcc.lag_range:
        raise LagRangeTooSmall(
            f"delay table needs lags up to {max_lag}, GCC set stores +-{gcc.lag_range}"
        )
    nt, npx = delays.grid.shape
    values = np.full((nt, npx), float(np.sum(gcc.auto_zero)))
    # R_mn(-l) == R_nm(l), so each unordered pair contributes twice its value
    for p, (n, m) in enumerate(gcc.pairs):
        values += 2.0 * gcc.pair_lags[p, gcc.lag_range + lag_idx[n, m]]
    return PowerMap(values=values, normalized=False)


def normalize_map(pmap: PowerMap) -> PowerMap:
    """Zero-mean the map and scale its largest magnitude to 1."""
    v = pmap.values - pmap.values.mean()
    peak = np.max(np.abs(v))
    if peak > 0.0:
        v = v / peak
    return PowerMap(values=v, normalized=True)


@dataclass(frozen=True, eq=False)
class InputTensor:
    """Network input: channel 0 holds the normalized maps, channels 1-2 the
    per-frame map-argmax elevation/azimuth scaled to [0, 1]. Silent frames are
    all-zero in every channel."""

    data: np.ndarray  # (3, T, n_theta, n_phi)
    vad: np.ndarray  # (T,) bool
    argmax_doa: np.ndarray  # (T, 2) theta, phi of each frame's map maximum

    @property
    def n_frames(self) -> int:
        return self.data.shape[1]


def assemble_input(maps: np.ndarray, vad: np.ndarray, grid: SphericalGrid) -> InputTensor:
    """Stack T normalized maps into the 3-channel network input tensor."""
    maps = np.asarray(maps, dtype=float)
    t = maps.shape[0]
    if maps.shape[1:] != grid.shape:
        raise ValueError(f"map shape {maps.shape[1:]} != grid shape {grid.shape}")
    vad = np.asarray(vad, dtype=bool)
    if vad.shape != (t,):
        raise ValueError("vad mask length must match the number of maps")
    data = np.zeros((3, t) + grid.shape)
    argmax = np.zeros((t, 2))
    for i in range(t):
        doa, _ = grid_argmax(maps[i], grid)
        argmax[i] = (doa.theta, doa.phi)
        if vad[i]:
            data[0, i] = maps[i]
            data[1, i] = doa.theta / np.pi
            data[2, i] = (doa.phi + np.pi) / (2.0 * np.pi)
    return InputTensor(data=data, vad=vad, argmax_doa=argmax)


def compute_power_maps(
    channels: np.ndarray,
    delays: DelayTable,
    cfg: FramingConfig,
    lag_range: int | None = None,
) -> list[PowerMap]:
    """Raw SRP-PHAT map of every analysis frame of a multichannel signal."""
    if lag_range is None:
        lag_range = max(default_lag_range(delays.array, cfg.fs, delays.c), delays.max_abs_lag(cfg.fs))
    frames = frame_signal(channels, cfg)  # (n_ch, T, K)
    return [srp_map(gcc_set(frames[:, i], lag_range), delays, cfg.fs) for i in range(frames.shape[1])]


def compute_input_tensor(
    channels: np.ndarray,
    delays: DelayTable,
    cfg: FramingConfig,
    vad_mask: np.ndarray | None = None,
    vad: EnergyVad | None = None,
) -> InputTensor:
    """Full feature pipeline: frames -> GCC -> maps -> normalize -> tensor.

    ``vad_mask`` takes priority (e.g. the oracle mask of a simulated scene);
    otherwise the energy detector runs on the signal itself.
    """
    raw = compute_power_maps(channels, delays, cfg)
    maps = np.stack([normalize_map(m).values for m in raw])
    if vad_mask is None:
        vad_mask = (vad or EnergyVad()).mask(channels, cfg)
    return assemble_input(maps, vad_mask, delays.grid)


def save_features(path, tensor: InputTensor, grid: SphericalGrid, cfg: FramingConfig) -> None:
    """Write the feature dump: SRPM header + row-major float32, JSON sidecar."""
    path = Path(path)
    c, t, nt, npx = tensor.data.shape
    with open(path, "wb") as f:
        f.write(_FEATURE_MAGIC)
        f.write(struct.pack("<5I", _FEATURE_VERSION, c, t, nt, npx))
        f.write(tensor.data.astype("<f4").tobytes())
    sidecar = {
        "grid": {"n_theta": grid.n_theta, "n_phi": grid.n_phi},
        "framing": {"K": cfg.K, "hop": cfg.hop, "fs": cfg.fs, "window": cfg.window},
        "vad": tensor.vad.astype(int).tolist(),
        "argmax_doa": tensor.argmax_doa.tolist(),
    }
    path.with_suffix(path.suffix + ".json").write_text(json.dumps(sidecar, indent=2) + "\n")


def load_features(path) -> tuple[InputTensor, SphericalGrid, FramingConfig]:
    path = Path(path)
    blob = path.read_bytes()
    if blob[:4] != _FEATURE_MAGIC:
        raise FormatError("not a feature dump (bad magic)")
    version, c, t, nt, npx = struct.unpack_from("<5I", blob, 4)
    if version != _FEATURE_VERSION:
        raise FormatError(f"unsupported feature dump version {version}")
    expected = 24 + 4 * c * t * nt * npx
    if len(blob) != expected:
        raise FormatError(f"feature dump truncated: {len(blob)} bytes, expected {expected}")
    data = np.frombuffer(blob, dtype="<f4", offset=24).reshape(c, t, nt, npx).astype(float)
    sidecar = json.loads(path.with_suffix(path.suffix + ".json").read_text())
    grid = SphericalGrid(**sidecar["grid"])
    cfg = FramingConfig(**sidecar["framing"])
    vad = np.array(sidecar["vad"], dtype=bool)
    argmax = np.array(sidecar["argmax_doa"], dtype=float)
    return InputTensor(data=data, vad=vad, argmax_doa=argmax), grid, cfg
