"""Paired audio/radio toy corpus.

Every token is a 60 ms two-tone burst: one tone below the radio cutoff and
one above it. The audio modality keeps both tones; the radio modality is
the audio low-passed, turned into a sub-millimetre vibration, sensed by the
simulated radar with receiver noise, and demodulated back to 16 kHz.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import signal

from . import container
from .errors import UnknownToken
from .features import SAMPLE_RATE, Waveform, resample_cubic
from .radarsim import RadarConfig, VibrationSignal, demodulate, synthesize_if

BLANK = 0


@dataclass(frozen=True)
class ToyVocabulary:
    symbols: tuple[str, ...] = tuple("abcdefghijklmnop") + (" ",)

    def __post_init__(self):
        if len(set(self.symbols)) != len(self.symbols):
            raise ValueError("vocabulary symbols must be unique")

    @property
    def size(self) -> int:
        """Number of real tokens (blank and sos/eos excluded)."""
        return len(self.symbols)

    @property
    def blank(self) -> int:
        return BLANK

    @property
    def sos(self) -> int:
        return self.size + 1

    eos = sos

    @property
    def token_id(self) -> dict[str, int]:
        return {s: i + 1 for i, s in enumerate(self.symbols)}

    def encode(self, text: str) -> list[int]:
        table = self.token_id
        try:
            return [table[ch] for ch in text]
        except KeyError as exc:
            raise UnknownToken(f"symbol {exc.args[0]!r} not in vocabulary") from None

    def decode(self, ids) -> str:
        return "".join(self.symbols[i - 1] for i in ids if 1 <= i <= self.size)


@dataclass(frozen=True)
class CorpusSpec:
    vocabulary: ToyVocabulary = field(default_factory=ToyVocabulary)
    utterance_count: int = 300
    min_tokens: int = 2
    max_tokens: int = 5
    token_duration: float = 0.060
    silence_gap: float = 0.020
    radio_cutoff: float = 1500.0
    radio_snr_db: float = 5.0
    master_seed: int = 0
    low_band: tuple[float, float] = (250.0, 1350.0)
    high_band: tuple[float, float] = (2500.0, 3900.0)
    displacement_peak: float = 3e-4
    clutter: complex = 0.3 + 0.2j
    radar: RadarConfig = field(default_factory=RadarConfig)

    def __post_init__(self):
        if self.radio_cutoff >= SAMPLE_RATE / 2:
            raise ValueError("radio cutoff must lie below the audio Nyquist frequency")
        if not (200.0 <= self.low_band[0] and self.low_band[1] < self.radio_cutoff < self.high_band[0]
                and self.high_band[1] <= 4000.0):
            raise ValueError("signature bands must straddle the cutoff inside 200-4000 Hz")

    @property
    def token_signatures(self) -> np.ndarray:
        """(vocab_size, 2) tone frequencies in Hz; row i belongs to token id i + 1."""
        rng = np.random.default_rng([self.master_seed, 0x5167])
        n = self.vocabulary.size
        low = rng.permutation(np.linspace(*self.low_band, n))
        high = rng.permutation(np.linspace(*self.high_band, n))
        return np.column_stack([low, high])

    @property
    def rx_noise_std(self) -> float:
        if np.isinf(self.radio_snr_db):
            return 0.0
        return float(10 ** (-self.radio_snr_db / 20))


@dataclass
class Utterance:
    token_ids: list[int]
    audio: Waveform
    radio: Waveform
    seed: int
    uid: str = ""


@dataclass
class Corpus:
    spec: CorpusSpec
    train: list[Utterance]
    test: list[Utterance]


def _tone_burst(freqs, n: int) -> np.ndarray:
    t = np.arange(n) / SAMPLE_RATE
    burst = sum(0.5 * np.sin(2 * np.pi * f * t) for f in freqs)
    ramp = int(0.005 * SAMPLE_RATE)
    fade = 0.5 - 0.5 * np.cos(np.pi * np.arange(ramp) / ramp)
    burst[:ramp] *= fade
    burst[-ramp:] *= fade[::-1]
    return burst


def synthesize_audio(spec: CorpusSpec, token_ids) -> np.ndarray:
    sig = spec.token_signatures
    n_tok = int(round(spec.token_duration * SAMPLE_RATE))
    n_gap = int(round(spec.silence_gap * SAMPLE_RATE))
    pieces = [np.zeros(n_gap)]
    for tid in token_ids:
        pieces += [_tone_burst(sig[tid - 1], n_tok), np.zeros(n_gap)]
    return np.concatenate(pieces)


def lowpass(spec: CorpusSpec, x: np.ndarray) -> np.ndarray:
    sos = signal.butter(6, spec.radio_cutoff, btype="low", fs=SAMPLE_RATE, output="sos")
    return signal.sosfiltfilt(sos, x)


def radar_channel(spec: CorpusSpec, x: np.ndarray, seed: int, snr_db: float | None = None) -> np.ndarray:
    """Sense a 16 kHz waveform through the simulated radar; returns 16 kHz samples."""
    snr = spec.radio_snr_db if snr_db is None else snr_db
    noise = 0.0 if np.isinf(snr) else float(10 ** (-snr / 20))
    cfg = RadarConfig(**{**spec.radar.__dict__, "rx_noise_std": noise})
    rate = cfg.chirps_per_second
    up, down = _rational(rate / SAMPLE_RATE)
    slow = signal.resample_poly(x, up, down)
    displacement = slow * spec.displacement_peak
    iq = synthesize_if(cfg, VibrationSignal(rate, displacement), seed=seed, clutter=spec.clutter)
    vib, _ = demodulate(iq, cfg)
    back = resample_cubic(Waveform(rate, vib.displacement / spec.displacement_peak), SAMPLE_RATE).samples
    if len(back) >= len(x):
        return back[:len(x)]
    return np.concatenate([back, np.full(len(x) - len(back), back[-1])])


def _rational(ratio: float) -> tuple[int, int]:
    from fractions import Fraction
    frac = Fraction(ratio).limit_denominator(10000)
    return frac.numerator, frac.denominator


def generate_utterance(spec: CorpusSpec, token_ids, seed: int, snr_db: float | None = None) -> Utterance:
    token_ids = list(token_ids)
    if not token_ids:
        raise ValueError("utterance needs at least one token")
    for tid in token_ids:
        if not 1 <= tid <= spec.vocabulary.size:
            raise UnknownToken(f"token id {tid} outside vocabulary")
    audio = synthesize_audio(spec, token_ids)
    peak = np.max(np.abs(audio))
    radio = radar_channel(spec, lowpass(spec, audio) / peak, seed, snr_db) * peak
    return Utterance(token_ids, Waveform(SAMPLE_RATE, audio), Waveform(SAMPLE_RATE, radio), seed)


def background_waveform(spec: CorpusSpec, n_samples: int, seed: int) -> Waveform:
    """Radio capture of a silent target: receiver noise through the radar chain."""
    return Waveform(SAMPLE_RATE, radar_channel(spec, np.zeros(n_samples), seed))


def utterance_seed(spec: CorpusSpec, index: int) -> int:
    return int(np.random.SeedSequence([spec.master_seed, index]).generate_state(1)[0])


def sample_transcripts(spec: CorpusSpec, count: int | None = None) -> list[list[int]]:
    rng = np.random.default_rng(spec.master_seed)
    out = []
    for _ in range(spec.utterance_count if count is None else count):
        n = int(rng.integers(spec.min_tokens, spec.max_tokens + 1))
        out.append([int(t) for t in rng.integers(1, spec.vocabulary.size + 1, size=n)])
    return out


def build_corpus(spec: CorpusSpec) -> Corpus:
    if spec.utterance_count < 10:
        raise ValueError("corpus needs at least 10 utterances")
    utts = []
    for i, ids in enumerate(sample_transcripts(spec)):
        utt = generate_utterance(spec, ids, utterance_seed(spec, i))
        utt.uid = f"utt{i:05d}"
        utts.append(utt)
    n_train = int(round(0.9 * len(utts)))
    return Corpus(spec, utts[:n_train], utts[n_train:])


# manifest ------------------------------------------------------------------

def write_corpus(corpus: Corpus, directory) -> Path:
    """One manifest line per utterance: id, split, transcript, audio, radio, seed."""
    directory = Path(directory)
    (directory / "wav").mkdir(parents=True, exist_ok=True)
    vocab = corpus.spec.vocabulary
    lines = []
    for split, utts in (("train", corpus.train), ("test", corpus.test)):
        for u in utts:
            audio_rel, radio_rel = f"wav/{u.uid}.audio.bin", f"wav/{u.uid}.radio.bin"
            container.save(directory / audio_rel, u.audio.samples)
            container.save(directory / radio_rel, u.radio.samples)
            lines.append("\t".join([u.uid, split, vocab.decode(u.token_ids), audio_rel, radio_rel, str(u.seed)]))
    manifest = directory / "manifest.tsv"
    manifest.write_text("\n".join(lines) + "\n")
    return manifest


def read_corpus(directory, spec: CorpusSpec) -> Corpus:
    directory = Path(directory)
    splits: dict[str, list[Utterance]] = {"train": [], "test": []}
    for line in (directory / "manifest.tsv").read_text().splitlines():
        if not line:
            continue
        uid, split, text, audio_rel, radio_rel, seed = line.split("\t")
        splits[split].append(Utterance(
            spec.vocabulary.encode(text),
            Waveform(SAMPLE_RATE, container.load(directory / audio_rel)),
            Waveform(SAMPLE_RATE, container.load(directory / radio_rel)),
            int(seed), uid))
    return Corpus(spec, splits["train"], splits["test"])
