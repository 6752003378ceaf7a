"""Losses, CTC alignment, the optimizer and the four-stage curriculum."""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from . import checkpoint
from . import numcore as nc
from .errors import (InfeasibleLength, MissingPrerequisite, NonFiniteComponent, ShapeMismatch)
from .model import (ModelConfig, Weights, ctc_head, decoder_forward, encode_mel, guidance_init,
                    init_weights, trainable_names, training_limits, trigger_events_from_path)
from .numcore import Tensor

NEG_INF = -np.inf


# CTC -----------------------------------------------------------------------

def min_frames(labels) -> int:
    """Shortest input that can carry ``labels``: one frame each plus a blank between repeats."""
    labels = list(labels)
    return len(labels) + sum(a == b for a, b in zip(labels, labels[1:]))


def _extended(labels, blank: int) -> np.ndarray:
    z = np.full(2 * len(labels) + 1, blank, dtype=np.int64)
    z[1::2] = labels
    return z


def _skip_allowed(z: np.ndarray, blank: int) -> np.ndarray:
    skip = np.zeros(len(z), dtype=bool)
    skip[2:] = (z[2:] != blank) & (z[2:] != z[:-2])
    return skip


def _ctc_alpha(lp: np.ndarray, z: np.ndarray, skip: np.ndarray) -> np.ndarray:
    N, S = lp.shape[0], len(z)
    alpha = np.full((N, S), NEG_INF)
    alpha[0, 0] = lp[0, z[0]]
    if S > 1:
        alpha[0, 1] = lp[0, z[1]]
    for t in range(1, N):
        prev = alpha[t - 1]
        acc = prev.copy()
        acc[1:] = np.logaddexp(acc[1:], prev[:-1])
        acc[2:] = np.where(skip[2:], np.logaddexp(acc[2:], prev[:-2]), acc[2:])
        alpha[t] = acc + lp[t, z]
    return alpha


def _ctc_beta(lp: np.ndarray, z: np.ndarray, skip: np.ndarray) -> np.ndarray:
    N, S = lp.shape[0], len(z)
    beta = np.full((N, S), NEG_INF)
    beta[N - 1, S - 1] = lp[N - 1, z[S - 1]]
    if S > 1:
        beta[N - 1, S - 2] = lp[N - 1, z[S - 2]]
    for t in range(N - 2, -1, -1):
        nxt = beta[t + 1]
        acc = nxt.copy()
        acc[:-1] = np.logaddexp(acc[:-1], nxt[1:])
        acc[:-2] = np.where(skip[2:], np.logaddexp(acc[:-2], nxt[2:]), acc[:-2])
        beta[t] = acc + lp[t, z]
    return beta


def ctc_loss(logprobs: Tensor, labels, blank: int = 0) -> Tensor:
    """Negative log-likelihood summed over every CTC alignment.

    Returns a +inf scalar (with zero gradient) when the input is too short
    for the labels; :func:`hybrid_loss` turns that into ``InfeasibleLength``.
    """
    lp = np.asarray(logprobs.data, dtype=np.float64)
    labels = [int(x) for x in labels]
    N = lp.shape[0]
    if N == 0 or N < min_frames(labels):
        return nc.primitive("ctc_loss", (logprobs,), np.array(np.inf, dtype=logprobs.data.dtype),
                            lambda g: (np.zeros_like(logprobs.data),), finite=False)
    z = _extended(labels, blank)
    skip = _skip_allowed(z, blank)
    alpha = _ctc_alpha(lp, z, skip)
    log_p = np.logaddexp(alpha[N - 1, -1], alpha[N - 1, -2]) if len(z) > 1 else alpha[N - 1, -1]

    def vjp(g):
        beta = _ctc_beta(lp, z, skip)
        occupancy = np.exp(alpha + beta - lp[:, z] - log_p)
        grad = np.zeros_like(lp)
        for s, k in enumerate(z):
            grad[:, k] -= occupancy[:, s]
        return ((g * grad).astype(logprobs.data.dtype),)

    return nc.primitive("ctc_loss", (logprobs,), np.array(-log_p, dtype=logprobs.data.dtype), vjp)


def ctc_viterbi_align(logprobs, labels, blank: int = 0, tol: float = 1e-9) -> list[int]:
    """Most probable frame-level path collapsing to ``labels``.

    Among paths whose score is within ``tol`` of the best, the one whose
    label emission frames are lexicographically smallest wins.
    """
    lp = np.asarray(getattr(logprobs, "data", logprobs), dtype=np.float64)
    labels = [int(x) for x in labels]
    N = lp.shape[0]
    if N == 0 or N < min_frames(labels):
        raise InfeasibleLength(f"{N} frames cannot carry {len(labels)} labels")
    z = _extended(labels, blank)
    S = len(z)
    skip = _skip_allowed(z, blank)
    score = np.full((N, S), NEG_INF)
    emit: list[list[tuple | None]] = [[None] * S for _ in range(N)]
    back = np.zeros((N, S), dtype=np.int64)
    score[0, 0], emit[0][0] = lp[0, z[0]], ()
    if S > 1:
        score[0, 1], emit[0][1] = lp[0, z[1]], (0,)
    for t in range(1, N):
        for s in range(S):
            preds = [s] + ([s - 1] if s >= 1 else []) + ([s - 2] if skip[s] else [])
            best, best_key, best_from = NEG_INF, None, -1
            for p in preds:
                if score[t - 1, p] == NEG_INF:
                    continue
                key = emit[t - 1][p] if p == s else emit[t - 1][p] + ((t,) if z[s] != blank else ())
                cand = score[t - 1, p]
                if best_from < 0 or cand > best + tol or (cand >= best - tol and key < best_key):
                    best, best_key, best_from = cand, key, p
            if best_from >= 0:
                score[t, s] = best + lp[t, z[s]]
                emit[t][s] = best_key
                back[t, s] = best_from
    finals = [S - 1] + ([S - 2] if S > 1 else [])
    finals = [s for s in finals if score[N - 1, s] > NEG_INF]
    s = finals[0]
    for f in finals[1:]:
        a, b = score[N - 1, f], score[N - 1, s]
        if a > b + tol or (a >= b - tol and emit[N - 1][f] < emit[N - 1][s]):
            s = f
    path = [0] * N
    for t in range(N - 1, -1, -1):
        path[t] = int(z[s])
        s = back[t, s]
    return path


def path_score(logprobs, path) -> float:
    lp = np.asarray(getattr(logprobs, "data", logprobs), dtype=np.float64)
    return float(lp[np.arange(len(path)), path].sum())


# hybrid and distillation losses -------------------------------------------

def attention_loss(dec_logprobs: Tensor, labels, eos_index: int) -> Tensor:
    """Summed cross-entropy of teacher-forced decoder rows against labels + eos."""
    targets = np.asarray([int(x) - 1 for x in labels] + [eos_index], dtype=np.int64)
    if dec_logprobs.shape[0] != len(targets):
        raise ShapeMismatch(f"{dec_logprobs.shape[0]} decoder rows for {len(targets)} targets")
    picked = dec_logprobs[np.arange(len(targets)), targets]
    return -picked.sum()


def hybrid_loss(ctc: Tensor, att: Tensor, lam: float = 0.3) -> Tensor:
    """lam * CTC + (1 - lam) * attention negative log-likelihood."""
    if not 0.0 <= lam <= 1.0:
        raise ValueError("lambda must lie in [0, 1]")
    if not np.isfinite(ctc.data):
        raise InfeasibleLength("CTC term is infinite: input too short for labels")
    if lam == 1.0:
        return ctc * 1.0
    if lam == 0.0:
        return att * 1.0
    return ctc * lam + att * (1.0 - lam)


def _detached(t) -> np.ndarray:
    return t.data if isinstance(t, Tensor) else np.asarray(t)


def _masked_mse(s: Tensor, t, mask) -> Tensor:
    target = _detached(t)
    if s.shape != target.shape:
        raise ShapeMismatch(f"student {s.shape} vs teacher {target.shape}")
    diff = s - Tensor(target, dtype=s.data.dtype)
    if mask is None:
        return nc.square(diff).mean()
    weight = np.broadcast_to(np.asarray(mask, dtype=bool), s.shape)
    count = int(weight.sum())
    if count == 0:
        return Tensor(np.zeros((), dtype=s.data.dtype))
    return (nc.square(diff) * weight.astype(s.data.dtype)).sum() * (1.0 / count)


def kd_attention_loss(student: Sequence[Tensor], teacher: Sequence, masks: Sequence | None = None) -> Tensor:
    """Sum over attention maps of the MSE on unmasked entries; teacher is constant."""
    if len(student) != len(teacher):
        raise ShapeMismatch(f"{len(student)} student maps vs {len(teacher)} teacher maps")
    masks = [None] * len(student) if masks is None else list(masks)
    if len(masks) != len(student):
        raise ShapeMismatch("one mask per attention map required")
    total = Tensor(np.zeros((), dtype=nc.get_dtype()))
    for s, t, m in zip(student, teacher, masks):
        total = total + _masked_mse(s, t, m)
    return total


def kd_hidden_loss(student: Sequence[Tensor], teacher: Sequence) -> Tensor:
    if len(student) != len(teacher):
        raise ShapeMismatch(f"{len(student)} student layers vs {len(teacher)} teacher layers")
    total = Tensor(np.zeros((), dtype=nc.get_dtype()))
    for s, t in zip(student, teacher):
        total = total + _masked_mse(s, t, None)
    return total


def kd_logits_loss(z_student: Tensor, z_teacher, t: float = 2.0) -> Tensor:
    """Mean over rows of KL(softmax(z_T / t) || softmax(z_S / t))."""
    if t <= 0:
        raise ValueError("temperature must be positive")
    zt = _detached(z_teacher).astype(np.float64)
    if z_student.shape != zt.shape:
        raise ShapeMismatch(f"student {z_student.shape} vs teacher {zt.shape}")
    shifted = zt / t
    shifted = shifted - shifted.max(axis=-1, keepdims=True)
    log_pt = shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))
    pt = np.exp(log_pt)
    dtype = z_student.data.dtype
    log_ps = nc.log_softmax(z_student * (1.0 / t))
    entropy_term = float((pt * log_pt).sum())
    cross = (log_ps * Tensor(pt, dtype=dtype)).sum()
    rows = max(1, int(np.prod(zt.shape[:-1])))
    return (Tensor(np.array(entropy_term, dtype=dtype)) - cross) * (1.0 / rows)


@dataclass(frozen=True)
class LossWeights:
    lam: float = 0.3
    alpha_hybrid: float = 1.0
    alpha_att: float = 3.0
    alpha_hid: float = 1.0
    alpha_logits: float = 1.0
    temperature: float = 2.0

    def __post_init__(self):
        if not 0.0 <= self.lam <= 1.0:
            raise ValueError("lam must lie in [0, 1]")
        if min(self.alpha_hybrid, self.alpha_att, self.alpha_hid, self.alpha_logits) < 0:
            raise ValueError("loss weights must be nonnegative")
        if self.temperature <= 0:
            raise ValueError("temperature must be positive")

    @property
    def uses_kd(self) -> bool:
        return (self.alpha_att, self.alpha_hid, self.alpha_logits) != (0.0, 0.0, 0.0)


COMPONENTS = ("hybrid", "att", "hid", "logits")


def total_loss(components: dict, weights: LossWeights = LossWeights()) -> tuple[Tensor, dict[str, float]]:
    """Weighted sum of the hybrid and distillation terms plus a per-addend report."""
    scale = {"hybrid": weights.alpha_hybrid, "att": weights.alpha_att,
             "hid": weights.alpha_hid, "logits": weights.alpha_logits}
    total, report = None, {}
    for name in COMPONENTS:
        if name not in components:
            continue
        term = components[name]
        term = term if isinstance(term, Tensor) else Tensor(np.asarray(term))
        value = float(term.data)
        if not np.isfinite(value):
            raise NonFiniteComponent(f"loss component {name} is {value}")
        report[name] = value
        if scale[name] == 0.0:
            continue
        part = term * scale[name]
        total = part if total is None else total + part
    if total is None:
        total = Tensor(np.zeros((), dtype=nc.get_dtype()))
    report["total"] = float(total.data)
    return total, report


# optimizer -----------------------------------------------------------------

class AdamW:
    """Adam with decoupled weight decay, applied to the named trainable tensors."""

    def __init__(self, params: dict[str, Tensor], lr: float = 1e-3, betas=(0.9, 0.98),
                 eps: float = 1e-8, weight_decay: float = 0.01, clip_norm: float | None = None):
        self.params = params
        self.lr, self.betas, self.eps = lr, betas, eps
        self.weight_decay, self.clip_norm = weight_decay, clip_norm
        self.step_count = 0
        self.m = {k: np.zeros_like(p.data) for k, p in params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in params.items()}

    def step(self, grads: dict[str, np.ndarray]) -> float:
        norm = float(np.sqrt(sum(float(np.sum(np.square(g, dtype=np.float64))) for g in grads.values())))
        scale = 1.0
        if self.clip_norm is not None and norm > self.clip_norm:
            scale = self.clip_norm / norm
        self.step_count += 1
        b1, b2 = self.betas
        c1, c2 = 1 - b1 ** self.step_count, 1 - b2 ** self.step_count
        for name, p in self.params.items():
            g = grads.get(name)
            if g is None:
                continue
            g = g * scale
            self.m[name] = b1 * self.m[name] + (1 - b1) * g
            self.v[name] = b2 * self.v[name] + (1 - b2) * g * g
            update = (self.m[name] / c1) / (np.sqrt(self.v[name] / c2) + self.eps)
            p.data = (p.data * (1 - self.lr * self.weight_decay) - self.lr * update).astype(p.data.dtype)
        return norm


# curriculum ----------------------------------------------------------------

STAGE_NAMES = {
    1: "radio-nonstreaming",
    2: "audio-nonstreaming",
    3: "audio-streaming-teacher",
    4: "radio-streaming-student",
}


@dataclass(frozen=True)
class TrainSettings:
    epochs: int = 20
    lr: float = 1e-3
    batch_size: int = 8
    seed: int = 0
    clip_norm: float | None = 5.0
    weight_decay: float = 0.01
    probe_size: int = 10
    augment_prob: float = 0.0
    use_gi: bool = True


@dataclass
class Example:
    uid: str
    labels: list[int]
    mel: np.ndarray  # input modality of the stage
    teacher_mel: np.ndarray | None = None  # paired audio for distillation
    limits: list[int] | None = None  # per-row decoder limits (None: full context)


@dataclass
class StageResult:
    stage: int
    weights: Weights
    config: ModelConfig
    log: list[dict] = field(default_factory=list)
    checkpoint: Path | None = None
    alignments: dict[str, list[int]] | None = None


def stage_paths(workdir, stage: int) -> dict[str, Path]:
    workdir = Path(workdir)
    return {"checkpoint": workdir / f"stage{stage}.ckpt",
            "log": workdir / f"stage{stage}.metrics.jsonl",
            "alignments": workdir / f"stage{stage}.alignments.tsv"}


def cmvn_stats(mels: Sequence[np.ndarray]) -> tuple[np.ndarray, np.ndarray]:
    stacked = np.concatenate(mels, axis=0)
    return stacked.mean(axis=0), np.maximum(stacked.std(axis=0), 1e-3)


def attach_cmvn(weights: Weights, mels) -> Weights:
    mean, std = cmvn_stats(mels)
    weights["cmvn.mean"] = Tensor(mean)
    weights["cmvn.std"] = Tensor(std)
    return weights


def forward_example(ex_mel, labels, limits, w: Weights, cfg: ModelConfig, lam: float, rng=None):
    """Encoder, CTC and teacher-forced decoder pass; returns (hybrid, parts, enc, dec).

    ``rng`` enables dropout at ``cfg.dropout``; without it the pass is deterministic.
    """
    enc = encode_mel(ex_mel, w, cfg, rng)
    lp = ctc_head(enc.hidden, w)
    N = enc.hidden.shape[0]
    rows = training_limits(None, len(labels), N) if limits is None else list(limits)
    dec = decoder_forward([cfg.sos] + list(labels), enc.hidden, rows, w, cfg, rng)
    ctc = ctc_loss(lp, labels)
    att = attention_loss(dec.logprobs, labels, cfg.out_dim - 1)
    return hybrid_loss(ctc, att, lam), (ctc, att), enc, dec


def distillation_terms(enc, dec, t_enc, t_dec, temperature: float) -> dict[str, Tensor]:
    enc_mask = enc.mask
    causal = np.tril(np.ones((dec.logits.shape[0],) * 2, dtype=bool))
    att = kd_attention_loss(
        enc.layer_attention + dec.self_attention + dec.cross_attention,
        t_enc.layer_attention + t_dec.self_attention + t_dec.cross_attention,
        [enc_mask] * len(enc.layer_attention) + [causal] * len(dec.self_attention)
        + [dec.cross_mask] * len(dec.cross_attention))
    hid = kd_hidden_loss(enc.layer_hidden + dec.layer_hidden, t_enc.layer_hidden + t_dec.layer_hidden)
    logits = kd_logits_loss(dec.logits, t_dec.logits, temperature)
    return {"att": att, "hid": hid, "logits": logits}


def greedy_cer(weights: Weights, cfg: ModelConfig, examples: Sequence[Example]) -> float:
    from .decoding import greedy_ctc
    from .evalmetrics import edit_alignment
    errors = total = 0
    with nc.no_grad():
        for ex in examples:
            hyp = greedy_ctc(ctc_head(encode_mel(ex.mel, weights, cfg).hidden, weights).data)
            stats = edit_alignment(ex.labels, hyp)
            errors += stats.errors
            total += stats.ref_len
    return errors / max(total, 1)


def train_model(weights: Weights, cfg: ModelConfig, train: Sequence[Example], settings: TrainSettings,
                loss_weights: LossWeights = LossWeights(), teacher: tuple[Weights, ModelConfig] | None = None,
                probe: Sequence[Example] = (), background: np.ndarray | None = None,
                log_path: Path | None = None) -> list[dict]:
    """Minibatch training with per-utterance gradient accumulation in a fixed order."""
    names = trainable_names(weights)
    params = {n: weights[n] for n in names}
    opt = AdamW(params, lr=settings.lr, weight_decay=settings.weight_decay, clip_norm=settings.clip_norm)
    rng = np.random.default_rng([settings.seed, 0x7A11])
    drop_rng = np.random.default_rng([settings.seed, 0xD80]) if cfg.dropout > 0 else None
    log = []
    sink = open(log_path, "w") if log_path is not None else None
    try:
        for epoch in range(settings.epochs):
            order = rng.permutation(len(train))
            sums = {k: 0.0 for k in COMPONENTS + ("total",)}
            used = 0
            for start in range(0, len(order), settings.batch_size):
                grads: dict[str, np.ndarray] = {}
                batch = [train[i] for i in order[start:start + settings.batch_size]]
                for ex in batch:
                    mel = ex.mel
                    if background is not None and rng.random() < settings.augment_prob:
                        from .features import MelSpectrogram, augment_mix, draw_beta
                        offset = int(rng.integers(0, background.shape[0] - mel.shape[0] + 1))
                        bg = background[offset:offset + mel.shape[0]]
                        mel = augment_mix(MelSpectrogram(mel), MelSpectrogram(bg), draw_beta(rng)).values
                    with nc.Tape() as tape:
                        hyb, _, enc, dec = forward_example(mel, ex.labels, ex.limits, weights, cfg, loss_weights.lam,
                                                          drop_rng)
                        parts = {"hybrid": hyb}
                        if teacher is not None and loss_weights.uses_kd:
                            t_w, t_cfg = teacher
                            with nc.no_grad():
                                _, _, t_enc, t_dec = forward_example(ex.teacher_mel, ex.labels, ex.limits,
                                                                     t_w, t_cfg, loss_weights.lam)
                            parts.update(distillation_terms(enc, dec, t_enc, t_dec, loss_weights.temperature))
                        loss, report = total_loss(parts, loss_weights)
                    g = nc.backward(loss, tape, wrt=[params[n] for n in names])
                    for n in names:
                        gn = g[params[n].id].data
                        grads[n] = grads[n] + gn if n in grads else gn.astype(np.float64)
                    for k, v in report.items():
                        sums[k] += v
                    used += 1
                opt.step({n: gr / len(batch) for n, gr in grads.items()})
            record = {"epoch": epoch + 1, **{k: sums[k] / max(used, 1) for k in sums if k == "total" or sums[k]}}
            if probe:
                record["probe_cer"] = greedy_cer(weights, cfg, probe)
            log.append(record)
            if sink:
                sink.write(json.dumps(record) + "\n")
                sink.flush()
    finally:
        if sink:
            sink.close()
    return log


def align_examples(weights: Weights, cfg: ModelConfig, examples: Sequence[Example]) -> dict[str, list[int]]:
    """Viterbi CTC path (one label per encoder frame) for every example."""
    out = {}
    with nc.no_grad():
        for ex in examples:
            lp = ctc_head(encode_mel(ex.mel, weights, cfg).hidden, weights)
            out[ex.uid] = ctc_viterbi_align(lp.data, ex.labels)
    return out


def write_alignments(path: Path, alignments: dict[str, list[int]]) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text("".join(f"{uid}\t{' '.join(map(str, p))}\n" for uid, p in alignments.items()))
    return path


def read_alignments(path: Path) -> dict[str, list[int]]:
    if not Path(path).exists():
        raise MissingPrerequisite(f"alignments {path} not found")
    out = {}
    for line in Path(path).read_text().splitlines():
        uid, _, body = line.partition("\t")
        out[uid] = [int(x) for x in body.split()]
    return out


def save_stage(path: Path, weights: Weights, cfg: ModelConfig, stage: int, seed: int) -> Path:
    meta = {**cfg.to_items(), "meta.stage": str(stage), "meta.seed": str(seed)}
    return checkpoint.save(path, weights, meta)


def load_stage(path: Path) -> tuple[Weights, ModelConfig]:
    weights, items = checkpoint.load(path)
    return weights, ModelConfig.from_items({k: v for k, v in items.items() if not k.startswith("meta.")})


def _with_limits(examples, alignments, chunk_size):
    out = []
    for ex in examples:
        path = alignments.get(ex.uid)
        if path is None:
            raise MissingPrerequisite(f"no alignment for {ex.uid}")
        events = trigger_events_from_path(path, ex.labels, chunk_size)
        out.append(Example(ex.uid, ex.labels, ex.mel, ex.teacher_mel,
                           training_limits(events, len(ex.labels), len(path))))
    return out


@dataclass
class StageData:
    """Log-Mel features for both modalities of each split."""
    train_audio: list[Example]
    train_radio: list[Example]
    test_audio: list[Example]
    test_radio: list[Example]
    background: np.ndarray | None = None


def prepare_data(corpus, with_background: bool = False) -> StageData:
    from .corpus import background_waveform
    from .features import mel_spectrogram

    def split(utts):
        audio, radio = [], []
        for u in utts:
            a = mel_spectrogram(u.audio).values
            r = mel_spectrogram(u.radio).values
            audio.append(Example(u.uid, list(u.token_ids), a))
            radio.append(Example(u.uid, list(u.token_ids), r, teacher_mel=a))
        return audio, radio

    ta, tr = split(corpus.train)
    ea, er = split(corpus.test)
    bg = None
    if with_background:
        longest = max(len(u.radio.samples) for u in corpus.train)
        bg = mel_spectrogram(background_waveform(corpus.spec, longest * 4, corpus.spec.master_seed + 1)).values
    return StageData(ta, tr, ea, er, bg)


def run_stage(stage: int, data: StageData, workdir, model_cfg: ModelConfig = ModelConfig(),
              settings: TrainSettings = TrainSettings(), loss_weights: LossWeights = LossWeights(),
              alignment_dir=None) -> StageResult:
    """Train one curriculum stage, reading earlier stages' artifacts from ``workdir``.

    1: radio non-streaming model, then Viterbi alignments of the radio train split.
    2: audio non-streaming model (guidance donor), then alignments of the audio train split.
    3: audio streaming teacher, triggered by the stage-2 alignments.
    4: radio streaming student, guidance-initialised from stage 2 and distilled from stage 3,
       triggered by the stage-1 alignments.
    """
    if stage not in STAGE_NAMES:
        raise ValueError(f"unknown stage {stage}")
    workdir = Path(workdir)
    workdir.mkdir(parents=True, exist_ok=True)
    paths = stage_paths(workdir, stage)
    align_dir = Path(alignment_dir) if alignment_dir is not None else workdir
    streaming_cfg = model_cfg if model_cfg.streaming else replace(model_cfg, chunk_size=4)
    cfg = streaming_cfg.non_streaming() if stage in (1, 2) else streaming_cfg
    radio = stage in (1, 4)
    train = data.train_radio if radio else data.train_audio
    probe = (data.test_radio if radio else data.test_audio)[:settings.probe_size]

    teacher = None
    weights = attach_cmvn(init_weights(cfg, settings.seed), [ex.mel for ex in train])
    ws = LossWeights(**{**asdict(loss_weights), "alpha_att": 0.0, "alpha_hid": 0.0, "alpha_logits": 0.0})
    if stage == 3:
        train = _with_limits(train, read_alignments(align_dir / "stage2.alignments.tsv"), cfg.chunk_size)
    elif stage == 4:
        prereq = {k: stage_paths(workdir, k)["checkpoint"] for k in (1, 2, 3)}
        for k, p in prereq.items():
            if not p.exists():
                raise MissingPrerequisite(f"stage {stage} needs the stage {k} checkpoint {p}")
        train = _with_limits(train, read_alignments(align_dir / "stage1.alignments.tsv"), cfg.chunk_size)
        if settings.use_gi:
            donor, donor_cfg = load_stage(prereq[2])
            weights = guidance_init(weights, donor, cfg, donor_cfg)
        teacher = load_stage(prereq[3])
        ws = loss_weights
    log = train_model(weights, cfg, train, settings, ws, teacher, probe,
                      data.background if radio else None, paths["log"])
    save_stage(paths["checkpoint"], weights, cfg, stage, settings.seed)
    result = StageResult(stage, weights, cfg, log, paths["checkpoint"])
    if stage in (1, 2):
        result.alignments = align_examples(weights, cfg, train)
        write_alignments(align_dir / f"stage{stage}.alignments.tsv", result.alignments)
    return result
