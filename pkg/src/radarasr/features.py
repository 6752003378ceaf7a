"""Waveform resampling, log-Mel spectrograms and Mel-domain mixing."""
from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache

import numpy as np
from scipy.interpolate import CubicSpline
from scipy.signal import get_window

from .errors import ShapeMismatch, TooShort, WrongSampleRate

SAMPLE_RATE = 16000
WIN_LENGTH = 400  # 25 ms
HOP_LENGTH = 160  # 10 ms
N_FFT = 512
N_MELS = 80
LOG_FLOOR = 1e-10


@dataclass
class Waveform:
    sample_rate: float
    samples: np.ndarray

    def __post_init__(self):
        if self.sample_rate <= 0:
            raise ValueError("sample rate must be positive")
        self.samples = np.asarray(self.samples, dtype=np.float64)

    @property
    def duration(self) -> float:
        return len(self.samples) / self.sample_rate


@dataclass
class MelSpectrogram:
    values: np.ndarray  # frames x N_MELS, natural-log energies
    sample_rate: float = SAMPLE_RATE
    hop: float = HOP_LENGTH / SAMPLE_RATE

    @property
    def frames(self) -> int:
        return self.values.shape[0]


def resample_cubic(w: Waveform, target_rate: float) -> Waveform:
    """Cubic-spline resampling onto ``k / target_rate``, k < duration * target_rate."""
    if len(w.samples) < 4:
        raise TooShort("cubic resampling needs at least 4 samples")
    if target_rate <= 0:
        raise ValueError("target rate must be positive")
    t_src = np.arange(len(w.samples)) / w.sample_rate
    n_out = int(np.floor(len(w.samples) * target_rate / w.sample_rate + 1e-9))
    spline = CubicSpline(t_src, w.samples, bc_type="not-a-knot")
    return Waveform(target_rate, spline(np.arange(n_out) / target_rate))


def hz_to_mel(f):
    return 2595.0 * np.log10(1.0 + np.asarray(f, dtype=np.float64) / 700.0)


def mel_to_hz(m):
    return 700.0 * (10.0 ** (np.asarray(m, dtype=np.float64) / 2595.0) - 1.0)


@lru_cache(maxsize=None)
def mel_filterbank(n_mels: int = N_MELS, n_fft: int = N_FFT, sample_rate: int = SAMPLE_RATE,
                   fmin: float = 0.0, fmax: float = SAMPLE_RATE / 2) -> np.ndarray:
    """Triangular filters with unit peak, shape (n_mels, n_fft // 2 + 1)."""
    edges = mel_to_hz(np.linspace(hz_to_mel(fmin), hz_to_mel(fmax), n_mels + 2))
    freqs = np.arange(n_fft // 2 + 1) * sample_rate / n_fft
    lower, center, upper = edges[:-2, None], edges[1:-1, None], edges[2:, None]
    rising = (freqs - lower) / (center - lower)
    falling = (upper - freqs) / (upper - center)
    bank = np.maximum(0.0, np.minimum(rising, falling))
    bank.flags.writeable = False
    return bank


def mel_centers(n_mels: int = N_MELS) -> np.ndarray:
    return mel_to_hz(np.linspace(hz_to_mel(0.0), hz_to_mel(SAMPLE_RATE / 2), n_mels + 2))[1:-1]


def mel_power(w: Waveform) -> np.ndarray:
    """Linear Mel energies (frames x N_MELS) before log compression."""
    if w.sample_rate != SAMPLE_RATE:
        raise WrongSampleRate(f"expected {SAMPLE_RATE} Hz, got {w.sample_rate}")
    x = w.samples
    n_frames = 0 if len(x) < WIN_LENGTH else (len(x) - WIN_LENGTH) // HOP_LENGTH + 1
    if n_frames == 0:
        return np.zeros((0, N_MELS))
    frames = np.lib.stride_tricks.sliding_window_view(x, WIN_LENGTH)[::HOP_LENGTH][:n_frames]
    spec = np.fft.rfft(frames * get_window("hann", WIN_LENGTH), n=N_FFT, axis=1)
    return (np.abs(spec) ** 2) @ mel_filterbank().T


def mel_spectrogram(w: Waveform) -> MelSpectrogram:
    return MelSpectrogram(np.log(np.maximum(mel_power(w), LOG_FLOOR)))


def augment_mix(m_radio: MelSpectrogram, m_bg: MelSpectrogram, beta_radio: float) -> MelSpectrogram:
    """Convex combination of two log-Mel spectrograms."""
    if m_radio.values.shape != m_bg.values.shape:
        raise ShapeMismatch(f"{m_radio.values.shape} vs {m_bg.values.shape}")
    if not 0.0 <= beta_radio <= 1.0:
        raise ValueError("beta_radio must lie in [0, 1]")
    if beta_radio == 1.0:
        return MelSpectrogram(m_radio.values.copy(), m_radio.sample_rate, m_radio.hop)
    if beta_radio == 0.0:
        return MelSpectrogram(m_bg.values.copy(), m_radio.sample_rate, m_radio.hop)
    mixed = beta_radio * m_radio.values + (1.0 - beta_radio) * m_bg.values
    return MelSpectrogram(mixed, m_radio.sample_rate, m_radio.hop)


def draw_beta(rng: np.random.Generator, low: float = 0.2, high: float = 0.6) -> float:
    return float(rng.uniform(low, high))
