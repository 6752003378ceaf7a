"""Error rates from Levenshtein alignments, and chunk latency arithmetic."""
from __future__ import annotations

import json
from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np

from .errors import EmptyReference


@dataclass(frozen=True)
class AlignmentStats:
    insertions: int = 0
    deletions: int = 0
    substitutions: int = 0
    ref_len: int = 0

    @property
    def errors(self) -> int:
        return self.insertions + self.deletions + self.substitutions

    def __add__(self, other: "AlignmentStats") -> "AlignmentStats":
        return AlignmentStats(self.insertions + other.insertions, self.deletions + other.deletions,
                              self.substitutions + other.substitutions, self.ref_len + other.ref_len)


def edit_alignment(ref: Sequence, hyp: Sequence) -> AlignmentStats:
    """Unit-cost Levenshtein alignment.

    When several operations reach the minimum, backtracking prefers a
    substitution (or match), then an insertion, then a deletion.
    """
    ref, hyp = list(ref), list(hyp)
    n, m = len(ref), len(hyp)
    dist = np.zeros((n + 1, m + 1), dtype=np.int64)
    dist[:, 0] = np.arange(n + 1)
    dist[0, :] = np.arange(m + 1)
    for i in range(1, n + 1):
        for j in range(1, m + 1):
            diag = dist[i - 1, j - 1] + (ref[i - 1] != hyp[j - 1])
            dist[i, j] = min(diag, dist[i, j - 1] + 1, dist[i - 1, j] + 1)
    i, j = n, m
    ins = dele = sub = 0
    while i > 0 or j > 0:
        if i > 0 and j > 0 and dist[i, j] == dist[i - 1, j - 1] + (ref[i - 1] != hyp[j - 1]):
            sub += ref[i - 1] != hyp[j - 1]
            i, j = i - 1, j - 1
        elif j > 0 and dist[i, j] == dist[i, j - 1] + 1:
            ins += 1
            j -= 1
        else:
            dele += 1
            i -= 1
    return AlignmentStats(ins, dele, int(sub), n)


def error_rate(stats: AlignmentStats) -> float:
    if stats.ref_len <= 0:
        raise EmptyReference("error rate needs a nonempty reference")
    return stats.errors / stats.ref_len


def word_tokens(text: str) -> list[str]:
    return text.lower().split()


def char_tokens(text: str) -> list[str]:
    return [c for c in text.lower() if not c.isspace()]


def frame_latency(chunk_size: int, frontend_downsample: int = 4, hop_ms: float = 10.0) -> tuple[float, float]:
    """(maximum, average) look-ahead in milliseconds for chunked encoding."""
    if chunk_size <= 0 or frontend_downsample <= 0 or hop_ms <= 0:
        raise ValueError("latency arguments must be positive")
    worst = chunk_size * frontend_downsample * hop_ms
    return worst, worst / 2


def score_report(refs: dict[str, str], hyps: dict[str, str]) -> tuple[list[dict], dict]:
    """Per-utterance and corpus-level CER/WER records; missing hypotheses count as empty."""
    rows = []
    cer_total, wer_total = AlignmentStats(), AlignmentStats()
    for uid, ref in refs.items():
        hyp = hyps.get(uid, "")
        c = edit_alignment(char_tokens(ref), char_tokens(hyp))
        w = edit_alignment(word_tokens(ref), word_tokens(hyp))
        cer_total, wer_total = cer_total + c, wer_total + w
        rows.append({"uid": uid, "ref": ref, "hyp": hyp,
                     "cer": error_rate(c) if c.ref_len else None,
                     "wer": error_rate(w) if w.ref_len else None})
    summary = {"utterances": len(rows),
               "cer": error_rate(cer_total) if cer_total.ref_len else None,
               "wer": error_rate(wer_total) if wer_total.ref_len else None,
               "char_errors": cer_total.errors, "chars": cer_total.ref_len,
               "word_errors": wer_total.errors, "words": wer_total.ref_len}
    return rows, summary


def format_report(rows: Iterable[dict], summary: dict) -> str:
    lines = [json.dumps(r) for r in rows]
    lines.append(json.dumps({"summary": summary}))
    return "\n".join(lines) + "\n"
