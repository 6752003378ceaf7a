"""Greedy and prefix-beam CTC decoding, with triggered attention rescoring."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import numcore as nc
from .errors import EmptyEncoderStream
from .model import ModelConfig, Weights, chunk_limit, ctc_head, decode_step
from .numcore import Tensor

NEG_INF = -np.inf


def greedy_ctc(logprobs, blank: int = 0) -> list[int]:
    lp = np.asarray(getattr(logprobs, "data", logprobs))
    out, prev = [], None
    for k in lp.argmax(axis=1) if len(lp) else []:
        k = int(k)
        if k != prev and k != blank:
            out.append(k)
        prev = k
    return out


@dataclass(frozen=True)
class DecodeConfig:
    beam_size: int = 4
    ctc_weight: float = 0.3
    att_weight: float = 0.7
    prune_threshold: float = np.inf  # drop hypotheses this far below the best

    def __post_init__(self):
        if self.beam_size < 1:
            raise ValueError("beam_size must be >= 1")
        if min(self.ctc_weight, self.att_weight) < 0 or abs(self.ctc_weight + self.att_weight - 1) > 1e-9:
            raise ValueError("ctc_weight and att_weight must be nonnegative and sum to 1")


@dataclass
class BeamHypothesis:
    prefix: tuple[int, ...]
    p_blank: float = NEG_INF
    p_nonblank: float = NEG_INF
    att_score: float = 0.0
    trigger_frames: tuple[int, ...] = ()

    @property
    def last_trigger_frame(self) -> int:
        return self.trigger_frames[-1] if self.trigger_frames else -1

    @property
    def ctc_score(self) -> float:
        return float(np.logaddexp(self.p_blank, self.p_nonblank))


def _rank_key(score: float, prefix: tuple) -> tuple:
    return (-score, prefix)


class PrefixBeamSearch:
    """Frame-synchronous CTC prefix beam search.

    ``scorer(prefix, token, frame, trigger_frames)`` returns the attention
    log-probability of ``token`` after ``prefix``, whose labels were first
    emitted at ``trigger_frames``; it is called once, when a prefix is first
    created by extension.
    """

    def __init__(self, cfg: DecodeConfig, blank: int = 0, scorer=None, max_len: int | None = None):
        self.cfg = cfg
        self.blank = blank
        self.scorer = scorer
        self.max_len = max_len
        self.frame = 0
        self.beam = {(): BeamHypothesis((), p_blank=0.0)}

    def combined(self, h: BeamHypothesis) -> float:
        if self.scorer is None:
            return h.ctc_score
        return self.cfg.ctc_weight * h.ctc_score + self.cfg.att_weight * h.att_score

    def step(self, lp_row: np.ndarray) -> None:
        t = self.frame
        lp_row = np.asarray(lp_row, dtype=np.float64)
        nxt: dict[tuple, BeamHypothesis] = {}

        def get(prefix, parent: BeamHypothesis | None, token=None):
            h = nxt.get(prefix)
            if h is None:
                old = self.beam.get(prefix)
                if old is not None:
                    h = BeamHypothesis(prefix, att_score=old.att_score, trigger_frames=old.trigger_frames)
                else:
                    att = parent.att_score
                    if self.scorer is not None:
                        att += self.scorer(parent.prefix, token, t, parent.trigger_frames)
                    h = BeamHypothesis(prefix, att_score=att, trigger_frames=parent.trigger_frames + (t,))
                nxt[prefix] = h
            return h

        for prefix in sorted(self.beam):
            h = self.beam[prefix]
            total = h.ctc_score
            stay = get(prefix, None)
            stay.p_blank = np.logaddexp(stay.p_blank, total + lp_row[self.blank])
            if prefix:
                stay.p_nonblank = np.logaddexp(stay.p_nonblank, h.p_nonblank + lp_row[prefix[-1]])
            if self.max_len is not None and len(prefix) >= self.max_len:
                continue
            for k in range(len(lp_row)):
                if k == self.blank:
                    continue
                ext = get(prefix + (k,), h, k)
                if prefix and k == prefix[-1]:
                    ext.p_nonblank = np.logaddexp(ext.p_nonblank, h.p_blank + lp_row[k])
                else:
                    ext.p_nonblank = np.logaddexp(ext.p_nonblank, total + lp_row[k])
        ranked = sorted(nxt.values(), key=lambda h: _rank_key(self.combined(h), h.prefix))
        best = self.combined(ranked[0])
        kept = [h for h in ranked[:self.cfg.beam_size] if self.combined(h) >= best - self.cfg.prune_threshold]
        self.beam = {h.prefix: h for h in kept}
        self.frame += 1

    def nbest(self, final_bonus=None) -> list[tuple[tuple[int, ...], float]]:
        scored = []
        for h in self.beam.values():
            s = self.combined(h)
            if final_bonus is not None:
                s += self.cfg.att_weight * final_bonus(h.prefix)
            scored.append((h.prefix, float(s)))
        return sorted(scored, key=lambda x: _rank_key(x[1], x[0]))


def ctc_prefix_beam_search(logprobs, cfg: DecodeConfig = DecodeConfig(), blank: int = 0):
    """n-best ``(prefix, log-probability)`` pairs, best first; ties go to the smaller prefix."""
    lp = np.asarray(getattr(logprobs, "data", logprobs), dtype=np.float64)
    search = PrefixBeamSearch(cfg, blank)
    for row in lp:
        search.step(row)
    return search.nbest()


class JointDecoder:
    """Streaming joint CTC/attention decoding session.

    Encoder frames are fed in any grouping; a chunk is only searched once it
    is complete (or at :meth:`finalize`), so the transcript never depends on
    how the stream was split. A token emitted at frame t is scored by the
    decoder using frames up to the end of t's chunk, while the prefix rows
    keep the chunk ends of their own emission frames.
    """

    def __init__(self, weights: Weights, cfg: ModelConfig, dcfg: DecodeConfig = DecodeConfig()):
        self.weights, self.cfg, self.dcfg = weights, cfg, dcfg
        self.frames: list[np.ndarray] = []
        self.done = 0
        self.limits_used: list[int] = []
        self._cache: dict[tuple, np.ndarray] = {}
        use_att = dcfg.att_weight > 0
        self.search = PrefixBeamSearch(dcfg, 0, self._score if use_att else None)
        self._limit_for = lambda t: len(self.frames) - 1

    def _distribution(self, prefix: tuple, limits: tuple) -> np.ndarray:
        key = (prefix, limits)
        if key not in self._cache:
            hidden = Tensor(np.stack(self.frames[:limits[-1] + 1]))
            self.limits_used.append(limits[-1])
            with nc.no_grad():
                self._cache[key] = decode_step([self.cfg.sos, *prefix], hidden, limits, self.weights,
                                               self.cfg).logprobs
        return self._cache[key]

    def _row_limits(self, trigger_frames, last: int) -> tuple:
        # rows already emitted keep their own trigger limits, as in training
        return tuple(self._limit_for(f) for f in trigger_frames) + (last,)

    def _score(self, prefix: tuple, token: int, frame: int, trigger_frames=()) -> float:
        limits = self._row_limits(trigger_frames, self._limit_for(frame))
        return float(self._distribution(prefix, limits)[token - 1])

    def _run(self, upto: int, n_total: int | None) -> None:
        if self.done >= upto:
            return
        with nc.no_grad():  # one frame at a time so results never depend on the grouping
            lp = [ctc_head(Tensor(f[None]), self.weights).data[0] for f in self.frames[self.done:upto]]
        known = len(self.frames) if n_total is None else n_total
        self._limit_for = lambda t: chunk_limit(t, self.cfg.chunk_size, known) if self.cfg.chunk_size else known - 1
        self.search.max_len = 2 * upto
        for row in lp:
            self.search.step(row)
        self.done = upto

    def feed(self, hidden) -> None:
        """Append encoder frames (rows of ``hidden``) and search every completed chunk."""
        arr = np.asarray(getattr(hidden, "data", hidden))
        self.frames.extend(list(arr))
        if self.cfg.chunk_size is None:
            return
        complete = len(self.frames) // self.cfg.chunk_size * self.cfg.chunk_size
        self._run(complete, None)

    def finalize(self) -> tuple[list[int], float]:
        if not self.frames:
            raise EmptyEncoderStream("no encoder frames were fed")
        n = len(self.frames)
        self._run(n, n)
        bonus = None
        if self.dcfg.att_weight > 0:
            eos = self.cfg.out_dim - 1
            beam = self.search.beam
            bonus = lambda prefix: float(
                self._distribution(prefix, self._row_limits(beam[prefix].trigger_frames, n - 1))[eos])
        prefix, score = self.search.nbest(bonus)[0]
        self.best = self.search.beam[prefix]
        return list(prefix), score


def joint_decode(hidden, weights: Weights, cfg: ModelConfig, dcfg: DecodeConfig = DecodeConfig(),
                 chunk_frames: int | None = None) -> tuple[list[int], float]:
    """Decode encoder states; ``chunk_frames`` feeds them in pieces of that size."""
    arr = np.asarray(getattr(hidden, "data", hidden))
    if arr.shape[0] == 0:
        raise EmptyEncoderStream("no encoder frames")
    session = JointDecoder(weights, cfg, dcfg)
    step = arr.shape[0] if chunk_frames is None else chunk_frames
    for start in range(0, arr.shape[0], step):
        session.feed(arr[start:start + step])
    return session.finalize()


def transcribe(mel, weights: Weights, cfg: ModelConfig, dcfg: DecodeConfig = DecodeConfig()) -> list[int]:
    from .model import encode_mel
    with nc.no_grad():
        enc = encode_mel(mel, weights, cfg)
    return joint_decode(enc.hidden, weights, cfg, dcfg)[0]


def format_transcripts(items) -> str:
    """``uid<TAB>text`` lines."""
    return "".join(f"{uid}\t{text}\n" for uid, text in items)
