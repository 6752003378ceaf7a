"""FMCW radar vibrometry: IF synthesis and phase demodulation.

A single point reflector at ``R0 + x(t)`` is simulated chirp by chirp. The
range FFT picks the reflector's bin, a circle fit removes static clutter in
the I/Q plane, and the unwrapped phase is scaled back to displacement.
"""
from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np
from scipy import signal

from .errors import NyquistViolation, ZeroEnergyInput, ZeroMagnitudeSample

SPEED_OF_LIGHT = 299_792_458.0


class DegenerateFitWarning(UserWarning):
    """Circle fit was singular; the mean was subtracted instead."""


@dataclass(frozen=True)
class RadarConfig:
    carrier_frequency: float = 77e9
    chirp_slope: float = 4e9 / 180e-6
    chirp_duration: float = 180e-6
    samples_per_chirp: int = 256
    chirps_per_second: float = 5100.0
    fixed_range: float = 0.5
    speed_of_light: float = SPEED_OF_LIGHT
    rx_noise_std: float = 0.0
    usable_bandwidth: float = 4e9

    def __post_init__(self):
        if self.carrier_frequency <= 0 or self.chirp_slope <= 0:
            raise ValueError("carrier frequency and chirp slope must be positive")
        if self.chirp_duration * self.chirp_slope > self.usable_bandwidth * (1 + 1e-9):
            raise ValueError("chirp sweeps more than the usable bandwidth")
        if self.samples_per_chirp < 2:
            raise ValueError("need at least two samples per chirp")

    @property
    def bandwidth(self) -> float:
        return self.chirp_slope * self.chirp_duration

    @property
    def range_resolution(self) -> float:
        return self.speed_of_light / (2 * self.bandwidth)

    @property
    def max_range(self) -> float:
        return self.samples_per_chirp * self.range_resolution


@dataclass
class VibrationSignal:
    sample_rate: float
    displacement: np.ndarray


@dataclass
class SlowTimeSignal:
    samples: np.ndarray
    bin_index: int = -1
    snr_db: float = float("nan")
    low_confidence: bool = False
    center: complex = 0j
    degenerate: bool = False


def synthesize_if(cfg: RadarConfig, vib: VibrationSignal, amplitude: float = 1.0,
                  seed: int | None = 0, clutter: complex = 0j) -> np.ndarray:
    """IF samples (chirps x samples_per_chirp) for a reflector moving as ``vib``.

    Fast time is measured from the chirp centre, so the phase read at the
    target bin is ``2*pi*f_c*t_d`` without a beat-frequency term. ``clutter``
    adds a static reflector at ``R0`` with that complex amplitude.
    """
    if vib.sample_rate > cfg.chirps_per_second:
        raise NyquistViolation(
            f"vibration bandwidth {vib.sample_rate / 2:g} Hz exceeds chirp Nyquist {cfg.chirps_per_second / 2:g} Hz")
    if vib.sample_rate != cfg.chirps_per_second:
        raise ValueError("vibration must be sampled at the chirp rate")
    if not 0 < cfg.fixed_range < cfg.max_range:
        raise ValueError("fixed range outside the unambiguous range")
    x = np.asarray(vib.displacement, dtype=np.float64)
    S = cfg.samples_per_chirp
    t = (np.arange(S) - (S - 1) / 2) * (cfg.chirp_duration / S)
    td = 2 * (cfg.fixed_range + x) / cfg.speed_of_light
    phase = 2 * np.pi * (cfg.chirp_slope * np.outer(td, t) + cfg.carrier_frequency * td[:, None])
    iq = amplitude * np.exp(1j * phase)
    if clutter:
        td0 = 2 * cfg.fixed_range / cfg.speed_of_light
        iq = iq + clutter * np.exp(2j * np.pi * (cfg.chirp_slope * td0 * t + cfg.carrier_frequency * td0))
    if cfg.rx_noise_std > 0:
        rng = np.random.default_rng(seed)
        noise = rng.standard_normal(iq.shape) + 1j * rng.standard_normal(iq.shape)
        iq = iq + noise * (cfg.rx_noise_std / np.sqrt(2))
    return iq


def range_select(iq: np.ndarray, cfg: RadarConfig, snr_threshold_db: float = 10.0) -> SlowTimeSignal:
    """Range FFT per chirp; keep the bin with the largest mean power."""
    iq = np.asarray(iq)
    n_fft = 1 << int(np.ceil(np.log2(max(iq.shape[1], 2))))
    spectrum = np.fft.fft(iq, n=n_fft, axis=1)
    power = np.mean(np.abs(spectrum) ** 2, axis=0)
    b = int(np.argmax(power))
    floor = np.median(power)
    snr_db = float(10 * np.log10(power[b] / floor)) if floor > 0 else float("inf")
    return SlowTimeSignal(spectrum[:, b], bin_index=b, snr_db=snr_db,
                          low_confidence=snr_db < snr_threshold_db)


def fit_circle(points: np.ndarray, tol: float = 1e-12) -> tuple[complex, float] | None:
    """Kasa algebraic circle fit to complex points; None when degenerate."""
    z = np.asarray(points, dtype=np.complex128)
    offset = z.mean()
    scale = np.sqrt(np.mean(np.abs(z - offset) ** 2))
    if scale == 0 or not np.isfinite(scale):
        return None
    u = (z - offset) / scale
    x, y = u.real, u.imag
    design = np.column_stack([x, y, np.ones_like(x)])
    sv = np.linalg.svd(design, compute_uv=False)
    if sv[-1] <= tol * sv[0]:
        return None
    (D, E, F), *_ = np.linalg.lstsq(design, -(x * x + y * y), rcond=None)
    cu = complex(-D / 2, -E / 2)
    r2 = (D * D + E * E) / 4 - F
    if r2 <= 0:
        return None
    return offset + scale * cu, float(scale * np.sqrt(r2))


def remove_clutter(s: SlowTimeSignal) -> SlowTimeSignal:
    """Translate the fitted I/Q circle centre to the origin."""
    z = np.asarray(s.samples, dtype=np.complex128)
    if z.size < 8:
        raise ValueError("circle fit needs at least 8 samples")
    fit = fit_circle(z)
    if fit is None:
        warnings.warn("degenerate circle fit, subtracting the mean", DegenerateFitWarning, stacklevel=2)
        center, degenerate = complex(z.mean()), True
    else:
        center, degenerate = fit[0], False
    return SlowTimeSignal(z - center, bin_index=s.bin_index, snr_db=s.snr_db,
                          low_confidence=s.low_confidence, center=center, degenerate=degenerate)


def extract_displacement(s: SlowTimeSignal, cfg: RadarConfig) -> VibrationSignal:
    z = np.asarray(s.samples)
    if np.any(z == 0):
        raise ZeroMagnitudeSample("slow-time sample with zero magnitude")
    phase = np.unwrap(np.angle(z))
    x = phase * cfg.speed_of_light / (4 * np.pi * cfg.carrier_frequency)
    return VibrationSignal(cfg.chirps_per_second, x - x.mean())


def demodulate(iq: np.ndarray, cfg: RadarConfig) -> tuple[VibrationSignal, SlowTimeSignal]:
    """range_select -> remove_clutter -> extract_displacement."""
    cleaned = remove_clutter(range_select(iq, cfg))
    return extract_displacement(cleaned, cfg), cleaned


def _normalise(v) -> np.ndarray:
    v = np.asarray(v, dtype=np.float64)
    v = v - v.mean()
    norm = np.sqrt(np.sum(v * v))
    if norm == 0:
        raise ZeroEnergyInput("sequence has zero energy after mean removal")
    return v / norm


def cross_correlation(a, b) -> tuple[np.ndarray, np.ndarray]:
    """Normalised cross-correlation; positive lag means ``b`` lags ``a``."""
    a, b = np.asarray(a), np.asarray(b)
    if a.shape != b.shape:
        raise ValueError("sequences must have equal length")
    corr = signal.correlate(_normalise(b), _normalise(a), mode="full", method="direct")
    lags = signal.correlation_lags(len(b), len(a), mode="full")
    return lags, corr


def cross_correlation_peak(a, b) -> int:
    lags, corr = cross_correlation(a, b)
    best = corr.max()
    tied = lags[corr >= best - 1e-12]
    return int(tied[np.lexsort((tied, np.abs(tied)))][0])
