"""Seeded synthetic single- and two-talker corpus.

Text comes from a bigram chain over a closed vocabulary; the "shifted" domain
re-assigns successor distributions between words so that a language model
trained on the general domain is measurably wrong on it.  Each token is
rendered as ``frames_per_token`` copies of a fixed +-1 embedding plus Gaussian
noise, and two utterances are mixed by adding their frames at an offset.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from .labels import TimedWord, Vocabulary, serialize_tsot, speaker_word_sequences
from .scoring import overlap_ratio


@dataclass
class SynthConfig:
    vocab_size: int = 30
    chain_seed: int = 1234
    concentration: float = 0.3  # Dirichlet concentration of transition rows
    shift_seed: int = 99
    shift_temperature: float = 1.0
    frames_per_token: int = 4
    feat_dim: int = 16
    noise: float = 0.1
    mix_prob: float = 0.67
    offset_range: tuple[float, float] = (0.3, 0.7)
    min_words: int = 4
    max_words: int = 8
    n_train: int = 4000
    n_valid: int = 100
    n_test: int = 200
    n_text: int = 4000
    seed: int = 0
    tokenization: str = "word"

    def __post_init__(self):
        self.offset_range = tuple(self.offset_range)
        if not 0.0 <= self.mix_prob <= 1.0:
            raise ValueError("mix_prob must lie in [0, 1]")
        if self.vocab_size > 2 ** self.feat_dim:
            raise ValueError("vocabulary larger than the number of distinct +-1 embeddings")
        if not 1 <= self.min_words <= self.max_words:
            raise ValueError("need 1 <= min_words <= max_words")

    def to_json(self) -> dict:
        d = asdict(self)
        d["offset_range"] = list(self.offset_range)
        return d

    @classmethod
    def from_json(cls, obj: dict) -> "SynthConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(obj) - known
        if unknown:
            raise ValueError(f"unknown synth config keys: {sorted(unknown)}")
        return cls(**obj)


@dataclass
class Utterance:
    utt_id: str
    features: np.ndarray  # (T_in, d) float32
    words: list[TimedWord]
    serialized: list[int] = field(default_factory=list)

    @property
    def num_speakers(self) -> int:
        return len({w.speaker for w in self.words})

    def overlap_ratio(self) -> float:
        """Fraction of frames where two speakers are active."""
        return overlap_ratio(self.words, len(self.features))


_CONSONANTS = "bdfgklmnprstvz"
_VOWELS = "aeiou"


def make_words(n: int) -> list[str]:
    """Deterministic pronounceable word list: ba, be, ..., then bab, ..."""
    out = [c + v for c in _CONSONANTS for v in _VOWELS]
    out += [c + v + c2 for c in _CONSONANTS for v in _VOWELS for c2 in _CONSONANTS]
    if n > len(out):
        raise ValueError(f"at most {len(out)} synthetic words")
    return out[:n]


def make_vocabulary(cfg: SynthConfig) -> Vocabulary:
    return Vocabulary.for_words(make_words(cfg.vocab_size), cfg.tokenization)


class BigramChain:
    """Start distribution plus a row-stochastic transition matrix."""

    def __init__(self, start: np.ndarray, trans: np.ndarray):
        self.start = start
        self.trans = trans

    @classmethod
    def general(cls, cfg: SynthConfig) -> "BigramChain":
        rng = np.random.default_rng(cfg.chain_seed)
        n = cfg.vocab_size
        trans = rng.dirichlet(np.full(n, cfg.concentration), size=n)
        # no immediate repeats: a repeated token would be an unbroken stretch
        # of identical frames
        np.fill_diagonal(trans, 0.0)
        trans /= trans.sum(axis=1, keepdims=True)
        return cls(np.full(n, 1.0 / n), trans)

    def shifted(self, cfg: SynthConfig) -> "BigramChain":
        """Each word takes over another word's successor distribution
        (re-tempered), with the no-repeat constraint re-applied."""
        rng = np.random.default_rng(cfg.shift_seed)
        n = len(self.start)
        perm = rng.permutation(n)
        trans = self.trans[perm] ** (1.0 / cfg.shift_temperature)
        np.fill_diagonal(trans, 0.0)
        dead = trans.sum(axis=1) == 0
        trans[dead] = 1.0
        np.fill_diagonal(trans, 0.0)
        trans /= trans.sum(axis=1, keepdims=True)
        return BigramChain(self.start.copy(), trans)

    def sample(self, rng: np.random.Generator, length: int) -> list[int]:
        seq = [int(rng.choice(len(self.start), p=self.start))]
        for _ in range(length - 1):
            seq.append(int(rng.choice(len(self.start), p=self.trans[seq[-1]])))
        return seq


def derive_rng(seed: int, *keys) -> np.random.Generator:
    """Order-independent per-item generator: hash of (seed, keys)."""
    h = hashlib.sha256(json.dumps([seed, *keys]).encode()).digest()
    return np.random.default_rng(int.from_bytes(h[:8], "little"))


def embedding_table(cfg: SynthConfig, n_tokens: int) -> np.ndarray:
    """Distinct +-1 rows; resampled until injective."""
    rng = np.random.default_rng([cfg.chain_seed, 7])
    while True:
        table = rng.choice([-1.0, 1.0], size=(n_tokens, cfg.feat_dim))
        if len({tuple(r) for r in table}) == n_tokens:
            return table.astype(np.float32)


class Synthesizer:
    def __init__(self, cfg: SynthConfig):
        self.cfg = cfg
        self.words = make_words(cfg.vocab_size)
        self.vocab = make_vocabulary(cfg)
        self.chains = {"general": BigramChain.general(cfg)}
        self.chains["shifted"] = self.chains["general"].shifted(cfg)
        self.table = embedding_table(cfg, len(self.vocab))

    def gen_text(self, n_utts: int, domain: str = "general", stream: str = "text") -> list[list[str]]:
        chain = self.chains[domain]
        out = []
        for i in range(n_utts):
            rng = derive_rng(self.cfg.seed, stream, domain, i)
            n = int(rng.integers(self.cfg.min_words, self.cfg.max_words + 1))
            out.append([self.words[k] for k in chain.sample(rng, n)])
        return out

    def render_features(self, words: list[str], rng: np.random.Generator, speaker: str = "s0",
                        noise: float | None = None):
        cfg = self.cfg
        r = cfg.frames_per_token
        noise = cfg.noise if noise is None else noise
        frames = []
        timed = []
        t = 0
        for w in words:
            ids = self.vocab.tokenize(w)
            for k in ids:
                frames.append(np.repeat(self.table[k][None], r, axis=0))
            timed.append(TimedWord(speaker, w, t, t + r * len(ids)))
            t += r * len(ids)
        feats = np.concatenate(frames, axis=0) if frames else np.zeros((0, cfg.feat_dim), np.float32)
        if noise > 0:
            feats = feats + rng.normal(0.0, noise, size=feats.shape)
        return feats.astype(np.float32), timed

    def single(self, utt_id: str, words: list[str], rng: np.random.Generator) -> Utterance:
        feats, timed = self.render_features(words, rng)
        return Utterance(utt_id, feats, timed, serialize_tsot(timed, self.vocab))

    def mix(self, u1: Utterance, u2: Utterance, offset: int, utt_id: str | None = None) -> Utterance:
        """Overlay ``u2`` starting ``offset`` frames into ``u1``."""
        if offset < 0:
            raise ValueError("offset must be non-negative")
        T = max(len(u1.features), offset + len(u2.features))
        feats = np.zeros((T, self.cfg.feat_dim), dtype=np.float32)
        feats[:len(u1.features)] += u1.features
        feats[offset:offset + len(u2.features)] += u2.features
        words = [TimedWord("s0", w.word, w.start, w.end) for w in u1.words]
        words += [TimedWord("s1", w.word, w.start + offset, w.end + offset) for w in u2.words]
        return Utterance(utt_id or f"{u1.utt_id}+{u2.utt_id}", feats, words,
                         serialize_tsot(words, self.vocab))

    def draw_offset(self, u1: Utterance, rng: np.random.Generator) -> int:
        """Uniform over the configured fraction of ``u1``'s length, skipping
        offsets that line up with token boundaries (both streams would then
        change at the same frame and their order would be undetermined)."""
        r = self.cfg.frames_per_token
        n = len(u1.features)
        lo = int(np.floor(self.cfg.offset_range[0] * n))
        hi = max(int(np.ceil(self.cfg.offset_range[1] * n)), lo + 1)
        choices = [o for o in range(lo, hi + 1) if o % r != 0] or [lo]
        return int(rng.choice(choices))

    def maybe_mix(self, pool: list[Utterance], rng: np.random.Generator, utt_id: str,
                  mix_prob: float | None = None) -> Utterance:
        p = self.cfg.mix_prob if mix_prob is None else mix_prob
        u1 = pool[int(rng.integers(len(pool)))]
        if rng.random() >= p:
            return Utterance(utt_id, u1.features, u1.words, u1.serialized)
        u2 = pool[int(rng.integers(len(pool)))]
        return self.mix(u1, u2, self.draw_offset(u1, rng), utt_id)

    def single_pool(self, n: int, domain: str, stream: str) -> list[Utterance]:
        texts = self.gen_text(n, domain, stream)
        return [self.single(f"{stream}-{domain}-{i:05d}", t, derive_rng(self.cfg.seed, stream, "feat", i))
                for i, t in enumerate(texts)]

    def test_set(self, domain: str, mixed: bool, n: int | None = None) -> list[Utterance]:
        n = self.cfg.n_test if n is None else n
        tag = f"test-{domain}-{'mix' if mixed else 'single'}"
        pool = self.single_pool(2 * n if mixed else n, domain, tag)
        if not mixed:
            return pool
        out = []
        for i in range(n):
            rng = derive_rng(self.cfg.seed, tag, "mix", i)
            u1, u2 = pool[2 * i], pool[2 * i + 1]
            out.append(self.mix(u1, u2, self.draw_offset(u1, rng), f"{tag}-{i:05d}"))
        return out


# ------------------------------------------------------------------ on disk

def write_utterances(directory, name: str, utts: list[Utterance]) -> None:
    """Features as one little-endian float32 blob plus a JSON-lines manifest;
    transcripts in the labels record format."""
    from .labels import render_label, words_to_record, write_transcripts

    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    offset = 0
    manifest = []
    with open(d / f"{name}.feats.bin", "wb") as f:
        for u in utts:
            arr = np.ascontiguousarray(u.features, dtype="<f4")
            f.write(arr.tobytes())
            manifest.append({"utt_id": u.utt_id, "offset": offset, "frames": int(arr.shape[0]),
                             "dim": int(arr.shape[1])})
            offset += arr.nbytes
    with open(d / f"{name}.manifest.jsonl", "w", encoding="utf-8") as f:
        for m in manifest:
            f.write(json.dumps(m) + "\n")
    write_transcripts(d / f"{name}.transcripts.jsonl", (words_to_record(u.utt_id, u.words) for u in utts))


def read_utterances(directory, name: str, vocab: Vocabulary) -> list[Utterance]:
    from .labels import read_transcripts, record_to_words

    d = Path(directory)
    blob = np.fromfile(d / f"{name}.feats.bin", dtype="<f4")
    words = {r["utt_id"]: record_to_words(r) for r in read_transcripts(d / f"{name}.transcripts.jsonl")}
    out = []
    with open(d / f"{name}.manifest.jsonl", encoding="utf-8") as f:
        for line in f:
            m = json.loads(line)
            n = m["frames"] * m["dim"]
            start = m["offset"] // 4
            feats = blob[start:start + n].reshape(m["frames"], m["dim"]).astype(np.float32)
            ws = words[m["utt_id"]]
            out.append(Utterance(m["utt_id"], feats, ws, serialize_tsot(ws, vocab)))
    return out


def write_text(path, texts: list[list[str]]) -> None:
    with open(path, "w", encoding="utf-8") as f:
        for t in texts:
            f.write(" ".join(t) + "\n")


def read_text(path) -> list[list[str]]:
    with open(path, encoding="utf-8") as f:
        return [line.split() for line in f if line.strip()]


def reference_speakers(utt: Utterance) -> list[list[str]]:
    return list(speaker_word_sequences(utt.words).values())
