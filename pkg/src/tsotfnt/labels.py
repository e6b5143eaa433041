"""Vocabulary handling and token-level serialization of multi-speaker transcripts.

A t-SOT label is a single chronologically ordered token stream covering every
speaker in a recording.  Whenever two adjacent tokens come from different
speakers a channel-change token ``<cc>`` is placed between them; reading the
stream back and toggling between two virtual channels at every ``<cc>``
recovers the per-channel transcripts.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Iterable, Iterator, Sequence

CC_STRING = "<cc>"
BLANK_STRING = "<blank>"
WORD_BOUNDARY = "▁"

NUM_CHANNELS = 2


class LabelError(ValueError):
    """Raised for malformed transcripts, OOV words or excess concurrency."""


@dataclass(frozen=True)
class TimedWord:
    speaker: str
    word: str
    start: int
    end: int

    def check(self) -> None:
        if self.start < 0 or self.end <= self.start:
            raise LabelError(
                f"malformed interval for word {self.word!r} of speaker {self.speaker!r}: "
                f"[{self.start}, {self.end})"
            )


class Vocabulary:
    """Closed token inventory with the two implicit special ids.

    ``blank_id == len(tokens)`` and ``cc_id == len(tokens) + 1``.  Blank doubles
    as the start symbol fed to the prediction networks.

    With ``mode="char"`` every word is split into characters and the first
    character carries a word-boundary prefix, so ``"ba"`` becomes
    ``["▁b", "a"]``.
    """

    def __init__(self, tokens: Sequence[str], mode: str = "word"):
        if mode not in ("word", "char"):
            raise ValueError(f"unknown tokenization mode {mode!r}")
        if len(set(tokens)) != len(tokens):
            raise ValueError("vocabulary tokens must be unique")
        if CC_STRING in tokens or BLANK_STRING in tokens:
            raise ValueError("special token strings may not appear in the vocabulary")
        self.tokens = list(tokens)
        self.mode = mode
        self._index = {t: i for i, t in enumerate(self.tokens)}

    @classmethod
    def for_words(cls, words: Iterable[str], mode: str = "word") -> "Vocabulary":
        words = list(dict.fromkeys(words))
        if mode == "word":
            return cls(words, mode)
        pieces: list[str] = []
        for w in words:
            for i, ch in enumerate(w):
                piece = WORD_BOUNDARY + ch if i == 0 else ch
                if piece not in pieces:
                    pieces.append(piece)
        return cls(sorted(pieces), mode)

    def __len__(self) -> int:
        return len(self.tokens)

    def __eq__(self, other: object) -> bool:
        return (
            isinstance(other, Vocabulary)
            and self.tokens == other.tokens
            and self.mode == other.mode
        )

    @property
    def blank_id(self) -> int:
        return len(self.tokens)

    @property
    def cc_id(self) -> int:
        return len(self.tokens) + 1

    @property
    def output_size(self) -> int:
        return len(self.tokens) + 2

    def lookup(self, token: str) -> int:
        if token == CC_STRING:
            return self.cc_id
        try:
            return self._index[token]
        except KeyError:
            raise LabelError(f"out-of-vocabulary token {token!r}") from None

    def id_to_token(self, idx: int) -> str:
        if idx == self.cc_id:
            return CC_STRING
        if idx == self.blank_id:
            return BLANK_STRING
        return self.tokens[idx]

    def tokenize(self, word: str) -> list[int]:
        if self.mode == "word":
            if word not in self._index:
                raise LabelError(f"out-of-vocabulary word {word!r}")
            return [self._index[word]]
        pieces = [WORD_BOUNDARY + word[0]] + list(word[1:]) if word else []
        missing = [p for p in pieces if p not in self._index]
        if not word or missing:
            raise LabelError(f"out-of-vocabulary word {word!r}")
        return [self._index[p] for p in pieces]

    def detokenize(self, ids: Iterable[int]) -> list[str]:
        """Map vocabulary ids back to words; specials are ignored."""
        pieces = [self.tokens[i] for i in ids if 0 <= i < len(self.tokens)]
        if self.mode == "word":
            return pieces
        return "".join(pieces).replace(WORD_BOUNDARY, " ").split()

    def to_json(self) -> dict:
        return {"tokens": self.tokens, "mode": self.mode}

    @classmethod
    def from_json(cls, obj: dict) -> "Vocabulary":
        return cls(obj["tokens"], obj.get("mode", "word"))

    def save(self, path) -> None:
        with open(path, "w", encoding="utf-8") as f:
            json.dump(self.to_json(), f)

    @classmethod
    def load(cls, path) -> "Vocabulary":
        with open(path, encoding="utf-8") as f:
            return cls.from_json(json.load(f))


@dataclass
class ChannelTranscripts:
    channels: list[list[str]] = field(default_factory=lambda: [[], []])

    def text(self, k: int) -> str:
        return " ".join(self.channels[k])


def validate_concurrency(words: Sequence[TimedWord]) -> int:
    """Maximum number of distinct speakers active at any frame."""
    events = []
    for w in words:
        w.check()
        events.append((w.start, 1, w.speaker))
        events.append((w.end, -1, w.speaker))
    # ends sort before starts at the same frame: intervals are half-open
    events.sort(key=lambda e: (e[0], e[1]))
    active: dict[str, int] = {}
    best = 0
    for _, delta, spk in events:
        active[spk] = active.get(spk, 0) + delta
        if active[spk] == 0:
            del active[spk]
        best = max(best, len(active))
    return best


def _ordered_tokens(words: Sequence[TimedWord], vocab: Vocabulary) -> list[tuple[str, int]]:
    by_speaker: dict[str, list[TimedWord]] = {}
    for w in words:
        by_speaker.setdefault(w.speaker, []).append(w)
    keyed = []
    for spk, ws in by_speaker.items():
        ws = sorted(ws, key=lambda w: w.start)
        for i in range(1, len(ws)):
            if ws[i - 1].end > ws[i].start:
                raise LabelError(
                    f"overlapping words {ws[i - 1].word!r} and {ws[i].word!r} "
                    f"within speaker {spk!r}"
                )
        for idx, w in enumerate(ws):
            keyed.append(((w.start, spk, idx), w))
    keyed.sort(key=lambda kw: kw[0])
    oov = []
    out = []
    for _, w in keyed:
        try:
            ids = vocab.tokenize(w.word)
        except LabelError:
            oov.append(w.word)
            continue
        out.extend((w.speaker, i) for i in ids)
    if oov:
        raise LabelError(f"out-of-vocabulary words: {sorted(set(oov))}")
    return out


def serialize_tsot(words: Sequence[TimedWord], vocab: Vocabulary) -> list[int]:
    """Build the t-SOT token sequence for up to two concurrent speakers."""
    conc = validate_concurrency(words)
    if conc > NUM_CHANNELS:
        raise LabelError(
            f"concurrency {conc} exceeds the supported {NUM_CHANNELS} speakers"
        )
    labels: list[int] = []
    prev = None
    for spk, tok in _ordered_tokens(words, vocab):
        if prev is not None and spk != prev:
            labels.append(vocab.cc_id)
        labels.append(tok)
        prev = spk
    return labels


def deserialize_tsot(label: Iterable[int], vocab: Vocabulary) -> ChannelTranscripts:
    """Split a t-SOT token stream into two channels.

    Never fails: leading or repeated ``<cc>`` just toggle the channel again, and
    blank ids are skipped, so raw decoder output is always accepted.
    """
    ids: list[list[int]] = [[], []]
    ch = 0
    for tok in label:
        if tok == vocab.cc_id:
            ch = 1 - ch
        elif 0 <= tok < len(vocab):
            ids[ch].append(tok)
    return ChannelTranscripts([vocab.detokenize(ids[0]), vocab.detokenize(ids[1])])


def speaker_word_sequences(words: Sequence[TimedWord]) -> dict[str, list[str]]:
    """Per-speaker word lists in time order, speakers ordered by first onset."""
    out: dict[str, list[TimedWord]] = {}
    for w in sorted(words, key=lambda w: (w.start, w.speaker)):
        out.setdefault(w.speaker, []).append(w)
    return {spk: [w.word for w in ws] for spk, ws in out.items()}


def render_label(label: Iterable[int], vocab: Vocabulary) -> str:
    return " ".join(vocab.id_to_token(t) for t in label)


def parse_label(text: str, vocab: Vocabulary) -> list[int]:
    return [vocab.lookup(t) for t in text.split()]


# transcript records: {"utt_id": ..., "words": [{"spk", "w", "s", "e"}, ...]}

def words_to_record(utt_id: str, words: Sequence[TimedWord]) -> dict:
    return {
        "utt_id": utt_id,
        "words": [{"spk": w.speaker, "w": w.word, "s": w.start, "e": w.end} for w in words],
    }


def record_to_words(rec: dict) -> list[TimedWord]:
    return [TimedWord(str(d["spk"]), d["w"], int(d["s"]), int(d["e"])) for d in rec["words"]]


def write_transcripts(path, records: Iterable[dict]) -> None:
    with open(path, "w", encoding="utf-8") as f:
        for rec in records:
            f.write(json.dumps(rec, ensure_ascii=False) + "\n")


def read_transcripts(path) -> Iterator[dict]:
    with open(path, encoding="utf-8") as f:
        for line in f:
            line = line.strip()
            if line:
                yield json.loads(line)
