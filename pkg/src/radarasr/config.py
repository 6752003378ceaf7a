"""Flat ``key=value`` run configuration shared by every CLI subcommand."""
from __future__ import annotations

from dataclasses import dataclass, fields, replace
from pathlib import Path

from .corpus import CorpusSpec
from .decoding import DecodeConfig
from .errors import ConfigError
from .model import ModelConfig
from .training import LossWeights, TrainSettings


class UnknownConfigKey(ConfigError, KeyError):
    pass


class BadConfigValue(ConfigError, ValueError):
    pass


@dataclass(frozen=True)
class RunConfig:
    # corpus
    utterance_count: int = 900
    min_tokens: int = 2
    max_tokens: int = 5
    radio_snr_db: float = 5.0
    displacement_peak: float = 3e-4
    master_seed: int = 0
    # model
    encoder_layers: int = 2
    decoder_layers: int = 2
    heads: int = 4
    model_dim: int = 64
    ffn_dim: int = 128
    chunk_size: int = 4
    frontend_channels: str = "8,16"
    dropout: float = 0.0
    # losses
    lam: float = 0.3
    alpha_hybrid: float = 1.0
    alpha_att: float = 3.0
    alpha_hid: float = 1.0
    alpha_logits: float = 1.0
    temperature: float = 2.0
    # decoding
    beam_size: int = 4
    ctc_weight: float = 0.3
    att_weight: float = 0.7
    # training
    seed: int = 0
    epochs_radio_nonstreaming: int = 15
    epochs_audio_nonstreaming: int = 10
    epochs_teacher: int = 10
    epochs_student: int = 5
    lr_nonstreaming: float = 1e-3
    lr_streaming: float = 3e-3
    lr_student: float = 7e-3
    batch_size: int = 8
    clip_norm: float = 5.0
    augment_prob: float = 0.0
    use_gi: bool = True
    probe_size: int = 10
    # layout
    output_dir: str = "run"
    corpus_dir: str = ""

    @property
    def corpus_path(self) -> Path:
        return Path(self.corpus_dir) if self.corpus_dir else Path(self.output_dir) / "corpus"

    @property
    def train_path(self) -> Path:
        return Path(self.output_dir) / "train"

    def corpus_spec(self) -> CorpusSpec:
        return CorpusSpec(utterance_count=self.utterance_count, min_tokens=self.min_tokens,
                          max_tokens=self.max_tokens, radio_snr_db=self.radio_snr_db,
                          displacement_peak=self.displacement_peak, master_seed=self.master_seed)

    def model_config(self) -> ModelConfig:
        return ModelConfig(encoder_layers=self.encoder_layers, decoder_layers=self.decoder_layers,
                           heads=self.heads, model_dim=self.model_dim, ffn_dim=self.ffn_dim,
                           chunk_size=self.chunk_size,
                           frontend_channels=tuple(int(c) for c in self.frontend_channels.split(",")),
                           dropout=self.dropout)

    def loss_weights(self) -> LossWeights:
        return LossWeights(self.lam, self.alpha_hybrid, self.alpha_att, self.alpha_hid,
                           self.alpha_logits, self.temperature)

    def decode_config(self) -> DecodeConfig:
        return DecodeConfig(self.beam_size, self.ctc_weight, self.att_weight)

    def train_settings(self, stage: int) -> TrainSettings:
        epochs = {1: self.epochs_radio_nonstreaming, 2: self.epochs_audio_nonstreaming,
                  3: self.epochs_teacher, 4: self.epochs_student}[stage]
        lr = {1: self.lr_nonstreaming, 2: self.lr_nonstreaming, 3: self.lr_streaming, 4: self.lr_student}[stage]
        return TrainSettings(epochs=epochs, lr=lr, batch_size=self.batch_size, seed=self.seed,
                             clip_norm=self.clip_norm if self.clip_norm > 0 else None,
                             probe_size=self.probe_size, augment_prob=self.augment_prob, use_gi=self.use_gi)

    def with_overrides(self, items: dict[str, str]) -> "RunConfig":
        return replace(self, **_parse_items(items))

    def to_text(self) -> str:
        return "".join(f"{f.name}={_format(getattr(self, f.name))}\n" for f in fields(self))

    def write(self, directory) -> Path:
        path = Path(directory) / "run.conf"
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(self.to_text())
        return path


def _format(value) -> str:
    return str(value).lower() if isinstance(value, bool) else str(value)


def _convert(name: str, kind: str, raw: str):
    try:
        if kind == "bool":
            if raw.lower() not in ("true", "false", "1", "0", "yes", "no"):
                raise ValueError(raw)
            return raw.lower() in ("true", "1", "yes")
        if kind == "int":
            return int(raw)
        if kind == "float":
            return float(raw)
        return raw
    except ValueError:
        raise BadConfigValue(f"{name}: cannot parse {raw!r} as {kind}") from None


def _parse_items(items: dict[str, str]) -> dict:
    kinds = {f.name: f.type for f in fields(RunConfig)}
    out = {}
    for key, raw in items.items():
        if key not in kinds:
            raise UnknownConfigKey(f"unknown config key {key!r}")
        out[key] = _convert(key, kinds[key], raw.strip())
    return out


def parse_lines(text: str) -> dict[str, str]:
    items = {}
    for n, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        if not sep:
            raise BadConfigValue(f"line {n}: expected key=value")
        items[key.strip()] = value.strip()
    return items


def load_config(path=None, overrides: list[str] | tuple = ()) -> RunConfig:
    items = parse_lines(Path(path).read_text()) if path else {}
    items.update(parse_lines("\n".join(overrides)))
    cfg = RunConfig().with_overrides(items)
    try:
        cfg.model_config(), cfg.loss_weights(), cfg.decode_config(), cfg.corpus_spec()
    except ConfigError:
        raise
    except ValueError as exc:
        raise BadConfigValue(str(exc)) from None
    return cfg
