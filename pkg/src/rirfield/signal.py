"""Time/frequency primitives: STFT analysis, random-phase inversion, exponential
sweeps, sweep deconvolution, resampling and WAV I/O."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.io import wavfile
from scipy.signal import get_window, resample_poly


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class Waveform:
    samples: np.ndarray
    sample_rate: int

    def __post_init__(self):
        samples = np.asarray(self.samples)
        if samples.ndim != 1:
            raise ValueError(f"waveform must be 1-D, got shape {samples.shape}")
        if int(self.sample_rate) != self.sample_rate or self.sample_rate <= 0:
            raise ValueError(f"sample_rate must be a positive integer, got {self.sample_rate}")
        if not np.all(np.isfinite(samples)):
            raise ValueError("waveform contains NaN or Inf")
        object.__setattr__(self, "samples", samples)
        object.__setattr__(self, "sample_rate", int(self.sample_rate))

    def __len__(self):
        return len(self.samples)

    @property
    def duration(self) -> float:
        return len(self.samples) / self.sample_rate


@dataclass(frozen=True)
class StftConfig:
    fft_size: int
    window_length: int
    hop_length: int
    window: str = "hann"

    def __post_init__(self):
        if self.window_length > self.fft_size:
            raise ConfigError(
                f"window_length {self.window_length} exceeds fft_size {self.fft_size}")
        if not 0 < self.hop_length <= self.window_length:
            raise ConfigError(
                f"hop_length must be in (0, {self.window_length}], got {self.hop_length}")

    @property
    def n_bins(self) -> int:
        return self.fft_size // 2 + 1

    def n_frames(self, n_samples: int) -> int:
        return 1 + -(-max(n_samples - self.window_length, 0) // self.hop_length)

    def padded_length(self, n_frames: int) -> int:
        return (n_frames - 1) * self.hop_length + self.window_length

    def window_array(self) -> np.ndarray:
        return get_window(self.window, self.window_length)

    @classmethod
    def for_sample_rate(cls, sr: int) -> "StftConfig":
        """NAF analysis settings: 512/256/128 at 16 kHz, 1024/512/256 at 48 kHz."""
        if sr >= 48000:
            return cls(1024, 512, 256)
        return cls(512, 256, 128)


@dataclass(frozen=True)
class Spectrogram:
    magnitude: np.ndarray  # (F, K)
    config: StftConfig
    sample_rate: int
    n_samples: int | None = field(default=None, compare=False)

    def __post_init__(self):
        mag = np.asarray(self.magnitude, dtype=float)
        if mag.ndim != 2 or mag.shape[0] != self.config.n_bins:
            raise ValueError(
                f"magnitude must be ({self.config.n_bins}, K), got {mag.shape}")
        if np.any(mag < 0):
            raise ValueError("magnitude must be nonnegative")
        object.__setattr__(self, "magnitude", mag)

    @property
    def n_frames(self) -> int:
        return self.magnitude.shape[1]


def _frames(x: np.ndarray, cfg: StftConfig) -> np.ndarray:
    n_frames = cfg.n_frames(len(x))
    x = np.pad(x, (0, cfg.padded_length(n_frames) - len(x)))
    idx = np.arange(cfg.window_length)[:, None] + cfg.hop_length * np.arange(n_frames)[None, :]
    return x[idx] * cfg.window_array()[:, None]


def stft_complex(x: np.ndarray, cfg: StftConfig) -> np.ndarray:
    """Complex STFT, shape (F, K). Frames start at sample 0; the last frame is zero-padded."""
    x = np.asarray(x, dtype=float)
    if x.size == 0:
        raise ValueError("cannot analyse an empty signal")
    return np.fft.rfft(_frames(x, cfg), n=cfg.fft_size, axis=0)


def stft_magnitude(w: Waveform, cfg: StftConfig) -> Spectrogram:
    return Spectrogram(np.abs(stft_complex(w.samples, cfg)), cfg, w.sample_rate, len(w))


def _istft(spec: np.ndarray, cfg: StftConfig) -> np.ndarray:
    # least-squares overlap-add (Griffin & Lim)
    n_frames = spec.shape[1]
    win = cfg.window_array()
    frames = np.fft.irfft(spec, n=cfg.fft_size, axis=0)[: cfg.window_length] * win[:, None]
    length = cfg.padded_length(n_frames)
    out = np.zeros(length)
    norm = np.zeros(length)
    for k in range(n_frames):
        sl = slice(k * cfg.hop_length, k * cfg.hop_length + cfg.window_length)
        out[sl] += frames[:, k]
        norm[sl] += win ** 2
    return out / np.maximum(norm, 1e-8)


def istft_random_phase(mag: Spectrogram, seed: int, n_iter: int = 32) -> Waveform:
    """Invert a magnitude spectrogram starting from a seeded uniform random phase.

    ``n_iter`` Griffin-Lim refinements follow the random draw; ``n_iter=0`` is
    the plain random-phase inversion. Output length is ``(K-1)*hop + window``.
    """
    cfg = mag.config
    M = mag.magnitude
    rng = np.random.default_rng(seed)
    spec = M * np.exp(1j * rng.uniform(-np.pi, np.pi, size=M.shape))
    for _ in range(n_iter):
        rebuilt = stft_complex(_istft(spec, cfg), cfg)
        spec = M * np.exp(1j * np.angle(rebuilt))
    return Waveform(_istft(spec, cfg), mag.sample_rate)


def log_sweep_phase(t, f_start: float, f_end: float, duration: float):
    """Analytic phase (radians) of the exponential sweep at times ``t``."""
    rate = math.log(f_end / f_start)
    return 2 * np.pi * f_start * duration / rate * (np.exp(np.asarray(t) * rate / duration) - 1.0)


def generate_log_sweep(f_start: float = 20.0, f_end: float | None = None,
                       duration: float = 2.0, sr: int = 48000,
                       fade: float = 0.01) -> Waveform:
    """Exponential sine sweep with raised-cosine fades of ``fade`` seconds at both ends."""
    if f_end is None:
        f_end = 0.45 * sr
    if not 0 < f_start < f_end <= sr / 2:
        raise ValueError(f"need 0 < f_start < f_end <= sr/2, got {f_start}, {f_end}, sr={sr}")
    if duration <= 0:
        raise ValueError("duration must be positive")
    n = int(round(duration * sr))
    t = np.arange(n) / sr
    x = np.sin(log_sweep_phase(t, f_start, f_end, duration))
    n_fade = min(int(round(fade * sr)), n // 2)
    if n_fade > 0:
        ramp = 0.5 - 0.5 * np.cos(np.pi * np.arange(n_fade) / n_fade)
        x[:n_fade] *= ramp
        x[n - n_fade:] *= ramp[::-1]
    return Waveform(x, sr)


def deconvolve_sweep(recording: Waveform, sweep: Waveform, eps: float = 1e-10) -> Waveform:
    """Estimate the impulse response from a sweep recording.

    Regularized spectral division by the sweep; the causal part (length of the
    recording) is kept, so distortion products landing at negative time are
    dropped and the direct-path delay is preserved.
    """
    if recording.sample_rate != sweep.sample_rate:
        raise ValueError(
            f"sample rate mismatch: {recording.sample_rate} vs {sweep.sample_rate}")
    if len(recording) < len(sweep):
        raise ValueError("recording is shorter than the sweep")
    n = len(recording) + len(sweep) - 1
    nfft = 1 << (n - 1).bit_length()
    R = np.fft.rfft(recording.samples, nfft)
    S = np.fft.rfft(sweep.samples, nfft)
    power = np.abs(S) ** 2
    inv = np.conj(S) / (power + eps * power.max())
    h = np.fft.irfft(R * inv, nfft)[: len(recording)]
    return Waveform(h, recording.sample_rate)


def resample(w: Waveform, target_sr: int) -> Waveform:
    """Polyphase windowed-sinc resampling (Kaiser, beta=8)."""
    if target_sr <= 0:
        raise ValueError("target_sr must be positive")
    if target_sr == w.sample_rate:
        return Waveform(w.samples.copy(), w.sample_rate)
    g = math.gcd(int(target_sr), w.sample_rate)
    up, down = int(target_sr) // g, w.sample_rate // g
    y = resample_poly(w.samples, up, down, window=("kaiser", 8.0))
    n_out = int(round(len(w) * target_sr / w.sample_rate))
    y = y[:n_out] if len(y) >= n_out else np.pad(y, (0, n_out - len(y)))
    return Waveform(y, int(target_sr))


def trim_or_pad(w: Waveform, length_s: float) -> Waveform:
    if length_s <= 0:
        raise ValueError("length_s must be positive")
    n = int(round(length_s * w.sample_rate))
    x = w.samples[:n]
    if len(x) < n:
        x = np.pad(x, (0, n - len(x)))
    return Waveform(x.copy(), w.sample_rate)


def write_wav(path, w: Waveform) -> None:
    """Mono 32-bit IEEE float WAV."""
    wavfile.write(Path(path), w.sample_rate, np.asarray(w.samples, dtype=np.float32))


def read_wav(path) -> Waveform:
    sr, data = wavfile.read(Path(path))
    if data.ndim != 1:
        raise ValueError(f"{path}: expected mono, got {data.shape[1]} channels")
    if data.dtype != np.float32:
        raise ValueError(f"{path}: expected 32-bit float samples, got {data.dtype}")
    return Waveform(data, sr)
