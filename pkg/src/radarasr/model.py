"""Streaming encoder-decoder Transformer with triggered attention.

The encoder is a VGG-style convolution front end followed by self-attention
layers restricted by a chunk mask. The decoder attends to encoder frames only
up to the end of the chunk holding each label's trigger frame. With
``chunk_size=None`` the same code is the non-streaming model.

Weights are a flat ``dict`` of named tensors. Layer numbers in names are
1-based (``enc.1.att.wq``), matching the layer matching used for guidance
initialisation.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field, fields, replace

import numpy as np

from . import numcore as nc
from .errors import ConfigMismatch, LimitOutOfRange, PathLabelMismatch
from .numcore import Tensor


@dataclass(frozen=True)
class ModelConfig:
    encoder_layers: int = 2
    decoder_layers: int = 2
    heads: int = 4
    model_dim: int = 64
    ffn_dim: int = 128
    chunk_size: int | None = 4  # None: full context
    vocab_size: int = 17
    n_mels: int = 80
    frontend_channels: tuple[int, int] = (8, 16)
    decoder_conv_layers: int = 3
    dropout: float = 0.0
    frontend_downsample: int = field(default=4, init=False)

    def __post_init__(self):
        if self.model_dim % self.heads:
            raise ConfigMismatch("model_dim must be divisible by heads")
        if self.chunk_size is not None and self.chunk_size < 1:
            raise ConfigMismatch("chunk_size must be >= 1 or None")
        if self.n_mels % 4:
            raise ConfigMismatch("n_mels must be divisible by the front-end downsampling")

    @property
    def streaming(self) -> bool:
        return self.chunk_size is not None

    @property
    def ctc_dim(self) -> int:
        return self.vocab_size + 1  # blank + tokens

    @property
    def out_dim(self) -> int:
        return self.vocab_size + 1  # tokens + eos

    @property
    def sos(self) -> int:
        return self.vocab_size + 1

    eos = sos

    def non_streaming(self) -> "ModelConfig":
        return replace(self, chunk_size=None)

    def to_items(self) -> dict[str, str]:
        out = {}
        for f in fields(self):
            v = getattr(self, f.name)
            if f.name == "chunk_size":
                out[f.name] = "inf" if v is None else str(v)
            elif isinstance(v, tuple):
                out[f.name] = ",".join(map(str, v))
            else:
                out[f.name] = str(v)
        return out

    @classmethod
    def from_items(cls, items: dict[str, str]) -> "ModelConfig":
        kwargs = {}
        for f in fields(cls):
            if not f.init or f.name not in items:
                continue
            raw = items[f.name]
            if f.name == "chunk_size":
                kwargs[f.name] = None if raw in ("inf", "none", "None") else int(raw)
            elif f.name == "frontend_channels":
                kwargs[f.name] = tuple(int(x) for x in raw.split(","))
            elif f.name == "dropout":
                kwargs[f.name] = float(raw)
            else:
                kwargs[f.name] = int(raw)
        return cls(**kwargs)


Weights = dict  # name -> Tensor


# initialisation ------------------------------------------------------------

def weight_shapes(cfg: ModelConfig) -> dict[str, tuple[int, ...]]:
    d, ff = cfg.model_dim, cfg.ffn_dim
    c1, c2 = cfg.frontend_channels
    shapes: dict[str, tuple[int, ...]] = {}
    chans = [(1, c1), (c1, c1), (c1, c2), (c2, c2)]
    freq = [cfg.n_mels, cfg.n_mels, cfg.n_mels // 2, cfg.n_mels // 2]
    for i, ((cin, cout), f) in enumerate(zip(chans, freq), start=1):
        shapes[f"frontend.conv{i}.weight"] = (3, 3, cin, cout)
        shapes[f"frontend.conv{i}.bias"] = (cout,)
        shapes[f"frontend.norm{i}.gain"] = (f * cout,)
        shapes[f"frontend.norm{i}.bias"] = (f * cout,)
    shapes["frontend.proj.weight"] = (cfg.n_mels // 4 * c2, d)
    shapes["frontend.proj.bias"] = (d,)

    def attention(prefix):
        for m in ("wq", "wk", "wv", "wo"):
            shapes[f"{prefix}.{m}"] = (d, d)
        shapes[f"{prefix}.bo"] = (d,)

    def norm(prefix):
        shapes[f"{prefix}.gain"] = (d,)
        shapes[f"{prefix}.bias"] = (d,)

    def ffn(prefix):
        shapes[f"{prefix}.w1"] = (d, ff)
        shapes[f"{prefix}.b1"] = (ff,)
        shapes[f"{prefix}.w2"] = (ff, d)
        shapes[f"{prefix}.b2"] = (d,)

    for j in range(1, cfg.encoder_layers + 1):
        norm(f"enc.{j}.norm1")
        attention(f"enc.{j}.att")
        norm(f"enc.{j}.norm2")
        ffn(f"enc.{j}.ffn")
    norm("enc.after_norm")
    shapes["ctc.weight"] = (d, cfg.ctc_dim)
    shapes["ctc.bias"] = (cfg.ctc_dim,)

    shapes["dec.embed"] = (cfg.out_dim, d)
    for i in range(1, cfg.decoder_conv_layers + 1):
        shapes[f"dec.conv{i}.weight"] = (3 * d, d)
        shapes[f"dec.conv{i}.bias"] = (d,)
        norm(f"dec.conv{i}.norm")
    for k in range(1, cfg.decoder_layers + 1):
        norm(f"dec.{k}.norm1")
        attention(f"dec.{k}.self")
        norm(f"dec.{k}.norm2")
        attention(f"dec.{k}.src")
        norm(f"dec.{k}.norm3")
        ffn(f"dec.{k}.ffn")
    norm("dec.after_norm")
    shapes["dec.out.weight"] = (d, cfg.out_dim)
    shapes["dec.out.bias"] = (cfg.out_dim,)
    return shapes


def _fans(name: str, shape) -> tuple[int, int]:
    if len(shape) == 4:
        return shape[0] * shape[1] * shape[2], shape[0] * shape[1] * shape[3]
    return shape[0], shape[1]


def init_weights(cfg: ModelConfig, seed: int = 0) -> Weights:
    """Glorot-uniform matrices, zero biases, unit norm gains."""
    rng = np.random.default_rng(seed)
    weights = {}
    for name, shape in weight_shapes(cfg).items():
        if name.endswith(".gain"):
            data = np.ones(shape)
        elif len(shape) == 1:
            data = np.zeros(shape)
        else:
            fan_in, fan_out = _fans(name, shape)
            limit = math.sqrt(6.0 / (fan_in + fan_out))
            data = rng.uniform(-limit, limit, size=shape)
        weights[name] = Tensor(data, requires_grad=True)
    return weights


def trainable_names(weights: Weights) -> list[str]:
    return [n for n in weights if not n.startswith("cmvn.")]


# building blocks -----------------------------------------------------------

def _norm(x: Tensor, w: Weights, prefix: str) -> Tensor:
    return nc.layer_norm(x, w[f"{prefix}.gain"], w[f"{prefix}.bias"])


def _dropout(x: Tensor, rate: float, rng) -> Tensor:
    if rate <= 0 or rng is None:
        return x
    keep = rng.random(x.shape) >= rate
    return x * (keep / (1.0 - rate))


def multihead_attention(query: Tensor, memory: Tensor, mask, w: Weights, prefix: str,
                        heads: int) -> tuple[Tensor, Tensor]:
    """Scaled dot-product attention; returns (output, heads x Tq x Tk weights)."""
    tq, d = query.shape
    tk = memory.shape[0]
    dk = d // heads
    q = (query @ w[f"{prefix}.wq"]).reshape(tq, heads, dk).transpose(1, 0, 2)
    k = (memory @ w[f"{prefix}.wk"]).reshape(tk, heads, dk).transpose(1, 2, 0)
    v = (memory @ w[f"{prefix}.wv"]).reshape(tk, heads, dk).transpose(1, 0, 2)
    scores = (q @ k) * (1.0 / math.sqrt(dk))
    attn = nc.masked_softmax(scores, None if mask is None else np.asarray(mask, bool)[None])
    ctx = (attn @ v).transpose(1, 0, 2).reshape(tq, d)
    return ctx @ w[f"{prefix}.wo"] + w[f"{prefix}.bo"], attn


def _ffn(x: Tensor, w: Weights, prefix: str) -> Tensor:
    h = nc.relu(x @ w[f"{prefix}.w1"] + w[f"{prefix}.b1"])
    return h @ w[f"{prefix}.w2"] + w[f"{prefix}.b2"]


# encoder -------------------------------------------------------------------

def output_length(frames: int) -> int:
    return -(-frames // 4)


def vgg_frontend(mel, w: Weights, cfg: ModelConfig) -> Tensor:
    """(T, n_mels) log-Mel -> (ceil(T/4), model_dim); no positional encoding."""
    x = mel.values if hasattr(mel, "values") else mel
    x = np.asarray(x)
    if x.shape[0] == 0:
        raise ValueError("empty spectrogram")
    if "cmvn.mean" in w:
        x = (x - w["cmvn.mean"].data) / w["cmvn.std"].data
    h = Tensor(x[:, :, None])
    for i in range(1, 5):
        h = nc.conv2d(h, w[f"frontend.conv{i}.weight"], w[f"frontend.conv{i}.bias"])
        t, f, c = h.shape
        h = _norm(h.reshape(t, f * c), w, f"frontend.norm{i}").reshape(t, f, c)
        h = nc.relu(h)
        if i % 2 == 0:
            h = nc.max_pool2x2(h)
    t, f, c = h.shape
    return h.reshape(t, f * c) @ w["frontend.proj.weight"] + w["frontend.proj.bias"]


def make_chunk_mask(T: int, chunk_size: int | None) -> np.ndarray:
    """mask[i, j] is True when frame i may attend to frame j."""
    if chunk_size is None or chunk_size >= T:
        return np.ones((T, T), dtype=bool)
    chunk = np.arange(T) // chunk_size
    return chunk[None, :] <= chunk[:, None]


@dataclass
class EncoderOutput:
    hidden: Tensor
    layer_hidden: list[Tensor]
    layer_attention: list[Tensor]
    mask: np.ndarray | None = None


def encode(features: Tensor, mask, w: Weights, cfg: ModelConfig, rng=None) -> EncoderOutput:
    x = features
    hiddens, attns = [], []
    for j in range(1, cfg.encoder_layers + 1):
        a, attn = multihead_attention(_norm(x, w, f"enc.{j}.norm1"), _norm(x, w, f"enc.{j}.norm1"),
                                      mask, w, f"enc.{j}.att", cfg.heads)
        x = x + _dropout(a, cfg.dropout, rng)
        x = x + _dropout(_ffn(_norm(x, w, f"enc.{j}.norm2"), w, f"enc.{j}.ffn"), cfg.dropout, rng)
        hiddens.append(x)
        attns.append(attn)
    return EncoderOutput(_norm(x, w, "enc.after_norm"), hiddens, attns, mask)


def encode_mel(mel, w: Weights, cfg: ModelConfig, rng=None) -> EncoderOutput:
    feats = vgg_frontend(mel, w, cfg)
    return encode(feats, make_chunk_mask(feats.shape[0], cfg.chunk_size), w, cfg, rng)


def ctc_head(hidden: Tensor, w: Weights) -> Tensor:
    """Per-frame log-probabilities over (blank, tokens)."""
    if hidden.shape[0] == 0:
        return Tensor(np.zeros((0, w["ctc.bias"].shape[0])))
    return nc.log_softmax(hidden @ w["ctc.weight"] + w["ctc.bias"])


# decoder -------------------------------------------------------------------

@dataclass
class DecoderOutput:
    logits: Tensor  # (L, out_dim) over tokens + eos
    layer_hidden: list[Tensor]
    self_attention: list[Tensor]
    cross_attention: list[Tensor]
    cross_mask: np.ndarray

    @property
    def logprobs(self) -> Tensor:
        return nc.log_softmax(self.logits)


def _embed(prefix_ids, w: Weights, cfg: ModelConfig) -> Tensor:
    ids = np.asarray(prefix_ids, dtype=np.int64) - 1
    y = nc.embedding(w["dec.embed"], ids)
    L, d = y.shape
    for i in range(1, cfg.decoder_conv_layers + 1):
        padded = nc.concat([Tensor(np.zeros((2, d), dtype=y.data.dtype)), y], axis=0)
        window = nc.concat([padded[0:L], padded[1:L + 1], padded[2:L + 2]], axis=1)
        y = window @ w[f"dec.conv{i}.weight"] + w[f"dec.conv{i}.bias"]
        y = nc.relu(_norm(y, w, f"dec.conv{i}.norm"))
    return y


def cross_mask(limits, n_frames: int) -> np.ndarray:
    limits = np.asarray(limits)
    return np.arange(n_frames)[None, :] <= limits[:, None]


def decoder_forward(prefix_ids, hidden: Tensor, limits, w: Weights, cfg: ModelConfig,
                    rng=None) -> DecoderOutput:
    """Teacher-forced decoder pass.

    ``prefix_ids`` starts with sos; row i attends to encoder frames
    ``0..limits[i]``.
    """
    y = _embed(prefix_ids, w, cfg)
    L = y.shape[0]
    causal = np.tril(np.ones((L, L), dtype=bool))
    xmask = cross_mask(limits, hidden.shape[0])
    hiddens, dsa, dca = [], [], []
    for k in range(1, cfg.decoder_layers + 1):
        q = _norm(y, w, f"dec.{k}.norm1")
        a, sa = multihead_attention(q, q, causal, w, f"dec.{k}.self", cfg.heads)
        y = y + _dropout(a, cfg.dropout, rng)
        a, ca = multihead_attention(_norm(y, w, f"dec.{k}.norm2"), hidden, xmask, w, f"dec.{k}.src", cfg.heads)
        y = y + _dropout(a, cfg.dropout, rng)
        y = y + _dropout(_ffn(_norm(y, w, f"dec.{k}.norm3"), w, f"dec.{k}.ffn"), cfg.dropout, rng)
        hiddens.append(y)
        dsa.append(sa)
        dca.append(ca)
    logits = _norm(y, w, "dec.after_norm") @ w["dec.out.weight"] + w["dec.out.bias"]
    return DecoderOutput(logits, hiddens, dsa, dca, xmask)


@dataclass
class StepOutput:
    logprobs: np.ndarray  # (out_dim,) over tokens + eos; index i is token id i + 1
    decoder: DecoderOutput


def decode_step(prefix_ids, hidden: Tensor, limit, w: Weights, cfg: ModelConfig) -> StepOutput:
    """Next-label distribution using encoder frames ``0..n'`` only.

    ``limit`` is either ``n'`` itself (every prefix row sees ``0..n'``) or
    one limit per prefix row ending in ``n'``, so earlier rows can keep the
    limits of their own trigger events as in training.
    """
    n = hidden.shape[0]
    prefix_ids = list(prefix_ids)
    if not prefix_ids or prefix_ids[0] != cfg.sos:
        raise ValueError("prefix must start with sos")
    limits = [limit] * len(prefix_ids) if np.isscalar(limit) else [int(x) for x in limit]
    if len(limits) != len(prefix_ids):
        raise ValueError(f"{len(limits)} limits for a prefix of {len(prefix_ids)}")
    last = limits[-1]
    if not 0 <= last < n:
        raise LimitOutOfRange(f"limit {last} outside 0..{n - 1}")
    if min(limits) < 0 or max(limits) > last:
        raise LimitOutOfRange(f"row limits {limits} must lie in 0..{last}")
    visible = hidden[0:last + 1] if last + 1 < n else hidden
    out = decoder_forward(prefix_ids, visible, limits, w, cfg)
    return StepOutput(out.logprobs.data[-1], out)


# trigger events ------------------------------------------------------------

def collapse(path, blank: int = 0) -> list[int]:
    out, prev = [], None
    for p in path:
        if p != prev and p != blank:
            out.append(int(p))
        prev = p
    return out


def chunk_limit(frame: int, chunk_size: int | None, n_frames: int) -> int:
    """Last frame of the chunk containing ``frame``, clipped to the sequence."""
    if chunk_size is None:
        return n_frames - 1
    return min((frame // chunk_size + 1) * chunk_size - 1, n_frames - 1)


@dataclass
class TriggerEvents:
    frames: list[int]
    limits: list[int]


def trigger_events_from_path(ctc_path, labels, chunk_size: int | None, blank: int = 0) -> TriggerEvents:
    """First-emission frame of each label on a CTC path, plus chunk-end limits."""
    path = [int(p) for p in ctc_path]
    if collapse(path, blank) != list(labels):
        raise PathLabelMismatch("CTC path does not collapse to the labels")
    frames, prev = [], None
    for t, p in enumerate(path):
        if p != blank and p != prev:
            frames.append(t)
        prev = p
    n = len(path)
    return TriggerEvents(frames, [chunk_limit(f, chunk_size, n) for f in frames])


def training_limits(events: TriggerEvents | None, n_labels: int, n_frames: int) -> list[int]:
    """Per-row limits for a teacher-forced pass: one per label, then eos sees everything."""
    if events is None:
        return [n_frames - 1] * (n_labels + 1)
    return list(events.limits) + [n_frames - 1]


# guidance initialisation ---------------------------------------------------

def gi_copied_names(cfg: ModelConfig) -> list[str]:
    copied = []
    for name in weight_shapes(cfg):
        parts = name.split(".")
        if parts[0] in ("frontend", "enc", "ctc"):
            copied.append(name)
        elif parts[0] == "dec":
            if parts[1].isdigit():
                if int(parts[1]) % 2 == 1:
                    copied.append(name)
            else:
                copied.append(name)  # embedding, conv embedding, final norm and output
    return copied


def guidance_init(student: Weights, teacher: Weights, student_cfg: ModelConfig,
                  teacher_cfg: ModelConfig) -> Weights:
    """Copy every encoder layer and the odd-numbered decoder layers from ``teacher``."""
    keys = ("encoder_layers", "decoder_layers", "model_dim", "heads", "ffn_dim", "vocab_size",
            "n_mels", "frontend_channels", "decoder_conv_layers")
    for key in keys:
        if getattr(student_cfg, key) != getattr(teacher_cfg, key):
            raise ConfigMismatch(f"{key}: student {getattr(student_cfg, key)} != teacher {getattr(teacher_cfg, key)}")
    out = {name: Tensor(t.data.copy(), requires_grad=t.requires_grad) for name, t in student.items()}
    for name in gi_copied_names(student_cfg):
        if teacher[name].shape != student[name].shape:
            raise ConfigMismatch(f"shape of {name} differs")
        out[name] = Tensor(teacher[name].data.copy(), requires_grad=True)
    return out
