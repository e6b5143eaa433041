"""Word error rate and the two-channel, permutation-minimal multi-talker WER."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np

from .labels import NUM_CHANNELS, ChannelTranscripts


@dataclass
class WerReport:
    substitutions: int = 0
    insertions: int = 0
    deletions: int = 0
    ref_words: int = 0

    @property
    def errors(self) -> int:
        return self.substitutions + self.insertions + self.deletions

    @property
    def defined(self) -> bool:
        return self.ref_words > 0

    @property
    def wer(self) -> float:
        if self.ref_words == 0:
            return 0.0 if self.errors == 0 else float("inf")
        return self.errors / self.ref_words

    def __add__(self, other: "WerReport") -> "WerReport":
        return WerReport(
            self.substitutions + other.substitutions,
            self.insertions + other.insertions,
            self.deletions + other.deletions,
            self.ref_words + other.ref_words,
        )

    def to_json(self) -> dict:
        return {
            "sub": self.substitutions, "ins": self.insertions, "del": self.deletions,
            "ref_words": self.ref_words, "errors": self.errors,
            "wer": self.wer if self.defined else None,
        }


def normalize(text: str | Sequence[str]) -> list[str]:
    if isinstance(text, str):
        return text.lower().split()
    return [w.lower() for w in text]


def wer(ref: str | Sequence[str], hyp: str | Sequence[str]) -> WerReport:
    """Levenshtein alignment with unit costs.

    Counts follow one optimal path; on ties the backtrace prefers a
    substitution (or match), then an insertion, then a deletion.
    """
    r, h = normalize(ref), normalize(hyp)
    n, m = len(r), len(h)
    d = np.zeros((n + 1, m + 1), dtype=np.int64)
    d[:, 0] = np.arange(n + 1)
    d[0, :] = np.arange(m + 1)
    for i in range(1, n + 1):
        ri = r[i - 1]
        for j in range(1, m + 1):
            d[i, j] = min(d[i - 1, j - 1] + (ri != h[j - 1]), d[i, j - 1] + 1, d[i - 1, j] + 1)
    i, j = n, m
    s = ins = dele = 0
    while i > 0 or j > 0:
        if i > 0 and j > 0 and d[i, j] == d[i - 1, j - 1] + (r[i - 1] != h[j - 1]):
            s += r[i - 1] != h[j - 1]
            i, j = i - 1, j - 1
        elif j > 0 and d[i, j] == d[i, j - 1] + 1:
            ins += 1
            j -= 1
        else:
            dele += 1
            i -= 1
    return WerReport(int(s), ins, dele, n)


def multitalker_wer(ref_speakers: Sequence[str | Sequence[str]], hyp: ChannelTranscripts) -> WerReport:
    """Score two hypothesis channels against up to two reference speakers
    under the better of the two speaker-to-channel assignments."""
    if len(ref_speakers) > NUM_CHANNELS:
        raise ValueError(f"{len(ref_speakers)} reference speakers; at most {NUM_CHANNELS} supported")
    refs = [normalize(r) for r in ref_speakers]
    refs += [[] for _ in range(NUM_CHANNELS - len(refs))]
    best = None
    for perm in ((0, 1), (1, 0)):
        rep = WerReport()
        for spk, ch in enumerate(perm):
            rep = rep + wer(refs[spk], hyp.channels[ch])
        if best is None or rep.errors < best.errors:
            best = rep
    return best


def corpus_report(reports: Iterable[WerReport]) -> WerReport:
    """Aggregate counts first, then divide."""
    total = WerReport()
    for r in reports:
        total = total + r
    return total


def overlap_ratio(words: Sequence, total_frames: int | None = None) -> float:
    """Fraction of frames where two speakers are active.  Each speaker is
    active from their first word start to their last word end."""
    T = max((w.end for w in words), default=0) if total_frames is None else total_frames
    counts = np.zeros(max(T, 0), dtype=np.int64)
    spans: dict[str, tuple[int, int]] = {}
    for w in words:
        lo, hi = spans.get(w.speaker, (w.start, w.end))
        spans[w.speaker] = (min(lo, w.start), max(hi, w.end))
    for lo, hi in spans.values():
        counts[lo:hi] += 1
    return float((counts >= 2).sum()) / max(T, 1)


OVERLAP_BINS = ((0.0, 0.0, "0S"), (0.0, 0.2, "OV0-20"), (0.2, 0.4, "OV20-40"), (0.4, 1.01, "OV40+"))


def overlap_condition(ratio: float, n_speakers: int) -> str:
    if n_speakers < 2 or ratio <= 0.0:
        return "0S" if n_speakers < 2 else "0L"
    for lo, hi, name in OVERLAP_BINS[1:]:
        if lo < ratio <= hi:
            return name
    return OVERLAP_BINS[-1][2]
