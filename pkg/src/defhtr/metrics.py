"""Character and word error rates.

Both are Levenshtein distances with unit costs divided by the reference
length (guarded to at least 1). CER counts charset symbols, or code points
when no charset is given; WER counts whitespace-separated tokens.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np


@dataclass(frozen=True)
class EditDistanceResult:
    distance: int
    ref_len: int
    hyp_len: int

    @property
    def rate(self) -> float:
        return self.distance / max(1, self.ref_len)

    @property
    def empty_reference(self) -> bool:
        """True when the reference was empty and the rate used the guard denominator."""
        return self.ref_len == 0 and self.hyp_len > 0


def levenshtein(ref: Sequence, hyp: Sequence) -> int:
    """Edit distance with one row of the DP table vectorised."""
    ref, hyp = list(ref), list(hyp)
    if not ref or not hyp:
        return len(ref) + len(hyp)
    # integer ids let numpy compare a whole row at once
    vocab = {}
    r = np.array([vocab.setdefault(t, len(vocab)) for t in ref])
    h = np.array([vocab.setdefault(t, len(vocab)) for t in hyp])
    prev = np.arange(len(h) + 1)
    for i, tok in enumerate(r, 1):
        sub = prev[:-1] + (h != tok)
        cur = np.empty_like(prev)
        cur[0] = i
        cur[1:] = np.minimum(sub, prev[1:] + 1)
        # insertions chain left to right: cur[j] = min_k(cur[k] + j - k)
        cur = np.minimum.accumulate(cur - np.arange(len(cur))) + np.arange(len(cur))
        prev = cur
    return int(prev[-1])


def _symbols(text, charset) -> list:
    if not isinstance(text, str):
        return list(text)
    return charset.tokenize(text) if charset is not None else list(text)


def cer(ref, hyp, charset=None) -> EditDistanceResult:
    r, h = _symbols(ref, charset), _symbols(hyp, charset)
    return EditDistanceResult(levenshtein(r, h), len(r), len(h))


def wer(ref, hyp) -> EditDistanceResult:
    r = ref.split() if isinstance(ref, str) else list(ref)
    h = hyp.split() if isinstance(hyp, str) else list(hyp)
    return EditDistanceResult(levenshtein(r, h), len(r), len(h))


def aggregate(results: Sequence[EditDistanceResult]) -> float:
    """Length-weighted rate: total distance over total reference length."""
    dist = sum(r.distance for r in results)
    return dist / max(1, sum(r.ref_len for r in results))


@dataclass
class EvalRow:
    sample_id: str
    ref: str
    hyp: str
    cer: EditDistanceResult
    wer: EditDistanceResult


def score(ids: Sequence[str], refs: Sequence[str], hyps: Sequence[str], charset=None) -> list:
    return [EvalRow(i, r, h, cer(r, h, charset), wer(r, h)) for i, r, h in zip(ids, refs, hyps)]


def summary(rows: Sequence[EvalRow]) -> dict:
    return {"samples": len(rows), "cer": aggregate([r.cer for r in rows]),
            "wer": aggregate([r.wer for r in rows])}


def _clean(text: str) -> str:
    return text.replace("\t", " ").replace("\n", " ")


def write_report(path, rows: Sequence[EvalRow]) -> None:
    """TSV with one row per sample: ``sample_id ref hyp cer wer``."""
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write("sample_id\tref\thyp\tcer\twer\n")
        for r in rows:
            fh.write(f"{_clean(r.sample_id)}\t{_clean(r.ref)}\t{_clean(r.hyp)}\t{r.cer.rate:.6f}\t{r.wer.rate:.6f}\n")
