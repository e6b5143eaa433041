"""Training, LM pretraining, text-only adaptation and evaluation loops."""

from __future__ import annotations

import json
import logging
import math
import time
from dataclasses import asdict, dataclass, fields
from typing import Callable, Sequence

import numpy as np

from . import numerics as nx
from .decoding import beam_search, greedy_decode
from .labels import Vocabulary, deserialize_tsot
from .losses import LossConfig, adapt_loss, fnt_loss, kl_loss, nll_loss, nll_mask, rnnt_loss
from .model import Transducer
from .scoring import WerReport, corpus_report, multitalker_wer, overlap_condition
from .synth import Synthesizer, Utterance, derive_rng, reference_speakers

log = logging.getLogger(__name__)


class DivergenceError(RuntimeError):
    pass


@dataclass
class TrainConfig:
    steps: int = 3000
    batch_size: int = 16
    peak_lr: float = 3e-3
    warmup: int = 300
    final_lr: float = 0.0
    weight_decay: float = 0.01
    clip_norm: float = 5.0
    lm_weight: float = 0.5
    valid_every: int = 250
    log_every: int = 50
    seed: int = 0

    @classmethod
    def from_json(cls, obj: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in obj.items() if k in known})

    def to_json(self) -> dict:
        return asdict(self)


@dataclass
class Batch:
    feats: np.ndarray
    feat_lens: np.ndarray
    labels: np.ndarray
    label_lens: np.ndarray


def make_batch(utts: Sequence[Utterance]) -> Batch:
    B = len(utts)
    d = utts[0].features.shape[1]
    T = max(len(u.features) for u in utts)
    U = max(max(len(u.serialized) for u in utts), 1)
    feats = np.zeros((B, T, d), dtype=np.float32)
    labels = np.zeros((B, U), dtype=np.int64)
    for i, u in enumerate(utts):
        feats[i, :len(u.features)] = u.features
        labels[i, :len(u.serialized)] = u.serialized
    return Batch(feats, np.array([len(u.features) for u in utts]), labels,
                 np.array([len(u.serialized) for u in utts]))


def batch_loss(model: Transducer, batch: Batch, lm_weight: float):
    out = model.forward(batch.feats, batch.feat_lens, batch.labels)
    rnnt = rnnt_loss(out.lattice, batch.labels, out.t_lens, batch.label_lens, model.blank_id)
    if not model.is_factorized:
        return rnnt, rnnt, None
    cc = model.cc_id if model.variant == "integrated" else None
    mask = nll_mask(out.pred_inputs, batch.labels, batch.label_lens, cc)
    nll = nll_loss(out.vocab_logp, model.vocab_targets(batch.labels), mask)
    return fnt_loss(rnnt, nll, LossConfig(lm_weight=lm_weight)), rnnt, nll


def sample_batch(synth: Synthesizer, pool: list[Utterance], seed: int, step: int, size: int) -> Batch:
    rng = derive_rng(seed, "batch", step)
    return make_batch([synth.maybe_mix(pool, rng, f"b{step}-{i}") for i in range(size)])


def validation_loss(model: Transducer, valid: Sequence[Utterance], lm_weight: float, chunk: int = 32) -> dict:
    tot = {"loss": 0.0, "rnnt": 0.0, "nll": 0.0}
    n = 0
    with nx.no_grad():
        for k in range(0, len(valid), chunk):
            part = valid[k:k + chunk]
            loss, rnnt, nll = batch_loss(model, make_batch(part), lm_weight)
            w = len(part)
            tot["loss"] += float(loss.data) * w
            tot["rnnt"] += float(rnnt.data) * w
            tot["nll"] += (float(nll.data) if nll is not None else 0.0) * w
            n += w
    return {k: v / max(n, 1) for k, v in tot.items()}


class Trainer:
    """Minimizes the transducer (+ LM) objective with AdamW."""

    def __init__(self, model: Transducer, synth: Synthesizer, pool: list[Utterance],
                 cfg: TrainConfig, valid: Sequence[Utterance] = ()):
        self.model, self.synth, self.pool, self.cfg, self.valid = model, synth, pool, cfg, list(valid)
        sched = nx.LinearWarmupDecay(cfg.peak_lr, cfg.steps, cfg.warmup, cfg.final_lr)
        self.opt = nx.AdamW(model.params, schedule=sched, weight_decay=cfg.weight_decay,
                            clip_norm=cfg.clip_norm)
        self.step = 0
        self.best_valid = math.inf
        self.history: list[dict] = []

    def train_step(self) -> dict:
        batch = sample_batch(self.synth, self.pool, self.cfg.seed, self.step, self.cfg.batch_size)
        self.model.params.zero_grad()
        try:
            loss, rnnt, nll = batch_loss(self.model, batch, self.cfg.lm_weight)
        except FloatingPointError as e:
            raise DivergenceError(f"non-finite loss at step {self.step}: {e}") from e
        value = float(loss.data)
        if not math.isfinite(value):
            raise DivergenceError(f"non-finite loss at step {self.step}")
        loss.backward()
        lr = self.opt.step()
        rec = {"step": self.step, "loss": value, "rnnt": float(rnnt.data),
               "nll": float(nll.data) if nll is not None else None, "lr": lr}
        self.step += 1
        return rec

    def run(self, on_record: Callable[[dict], None] | None = None,
            on_valid: Callable[[int, dict, bool], None] | None = None, until: int | None = None) -> list[dict]:
        t0 = time.time()
        stop = self.cfg.steps if until is None else min(until, self.cfg.steps)
        while self.step < stop:
            rec = self.train_step()
            rec["wall_time"] = round(time.time() - t0, 3)
            self.history.append(rec)
            if on_record and (rec["step"] % self.cfg.log_every == 0 or self.step == stop):
                on_record(rec)
            if self.valid and (self.step % self.cfg.valid_every == 0 or self.step == self.cfg.steps):
                v = validation_loss(self.model, self.valid, self.cfg.lm_weight)
                improved = v["loss"] < self.best_valid
                self.best_valid = min(self.best_valid, v["loss"])
                if on_valid:
                    on_valid(self.step, v, improved)
        return self.history

    def state_arrays(self) -> dict:
        out = self.opt.state_arrays()
        out["trainer.step"] = np.array([self.step], dtype=np.int64)
        out["trainer.best_valid"] = np.array([self.best_valid])
        return out

    def load_state_arrays(self, arrays: dict) -> None:
        self.opt.load_state_arrays(arrays)
        self.step = int(arrays["trainer.step"][0])
        self.best_valid = float(arrays["trainer.best_valid"][0])


# ---------------------------------------------------------------- LM side

def text_batch(vocab: Vocabulary, texts: Sequence[Sequence[str]], blank_id: int):
    seqs = [[t for w in words for t in vocab.tokenize(w)] for words in texts]
    U = max(len(s) for s in seqs)
    labels = np.zeros((len(seqs), U), dtype=np.int64)
    for i, s in enumerate(seqs):
        labels[i, :len(s)] = s
    lens = np.array([len(s) for s in seqs])
    pred_in = np.concatenate([np.full((len(seqs), 1), blank_id), labels], axis=1)
    mask = nll_mask(pred_in, labels, lens, None)
    return pred_in, labels, mask


def lm_nll(model: Transducer, vocab: Vocabulary, texts, chunk: int = 64) -> float:
    """Per-token NLL of the vocabulary predictor on plain text."""
    tot, n = 0.0, 0
    with nx.no_grad():
        for k in range(0, len(texts), chunk):
            pred_in, labels, mask = text_batch(vocab, texts[k:k + chunk], model.blank_id)
            rows = nx.log_softmax(model.vocab_predictor_run(pred_in))
            nll = nll_loss(rows, labels, mask)
            tot += float(nll.data) * mask.sum()
            n += int(mask.sum())
    return tot / max(n, 1)


@dataclass
class LMConfig:
    steps: int = 1500
    batch_size: int = 32
    peak_lr: float = 3e-3
    warmup: int = 100
    weight_decay: float = 0.01
    seed: int = 0

    @classmethod
    def from_json(cls, obj: dict) -> "LMConfig":
        known = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in obj.items() if k in known})


def pretrain_lm(model: Transducer, vocab: Vocabulary, texts, cfg: LMConfig,
                on_record: Callable[[dict], None] | None = None) -> list[dict]:
    """Train only the vocabulary predictor as a standalone LM."""
    names = model.predictor_param_names()
    opt = nx.AdamW(model.params, names, nx.LinearWarmupDecay(cfg.peak_lr, cfg.steps, cfg.warmup),
                   weight_decay=cfg.weight_decay)
    hist = []
    for step in range(cfg.steps):
        rng = derive_rng(cfg.seed, "lm", step)
        idx = rng.integers(len(texts), size=cfg.batch_size)
        pred_in, labels, mask = text_batch(vocab, [texts[i] for i in idx], model.blank_id)
        model.params.zero_grad()
        loss = nll_loss(nx.log_softmax(model.vocab_predictor_run(pred_in)), labels, mask)
        loss.backward()
        lr = opt.step()
        rec = {"step": step, "nll": float(loss.data), "lr": lr}
        hist.append(rec)
        if on_record and step % 50 == 0:
            on_record(rec)
    return hist


@dataclass
class AdaptConfig:
    steps: int = 300
    batch_size: int = 32
    peak_lr: float = 1e-3
    kl_weight: float = 1.0
    weight_decay: float = 0.0
    seed: int = 0

    @classmethod
    def from_json(cls, obj: dict) -> "AdaptConfig":
        known = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in obj.items() if k in known})


def adapt(model: Transducer, vocab: Vocabulary, texts, cfg: AdaptConfig,
          on_record: Callable[[dict], None] | None = None) -> list[dict]:
    """Text-only adaptation of the vocabulary predictor with a KL anchor to
    its own starting point.  Nothing outside ``vocab.*`` is touched."""
    if not model.is_factorized:
        raise ValueError(
            "adaptation needs a factorized model: the tsot_baseline variant has no "
            "separable vocabulary predictor"
        )
    names = model.predictor_param_names()
    ref = Transducer(model.cfg, dtype=model.params.dtype)
    ref.params.load_state_dict({**model.params.state_dict()})
    opt = nx.AdamW(model.params, names, nx.LinearWarmupDecay(cfg.peak_lr, cfg.steps, 0, 0.0),
                   weight_decay=cfg.weight_decay)
    lcfg = LossConfig(kl_weight=cfg.kl_weight)
    hist = []
    for step in range(cfg.steps):
        rng = derive_rng(cfg.seed, "adapt", step)
        idx = rng.integers(len(texts), size=cfg.batch_size)
        pred_in, labels, mask = text_batch(vocab, [texts[i] for i in idx], model.blank_id)
        with nx.no_grad():
            orig_rows = nx.log_softmax(ref.vocab_predictor_run(pred_in)).data[:, :labels.shape[1]]
        model.params.zero_grad()
        rows = nx.log_softmax(model.vocab_predictor_run(pred_in))
        nll = nll_loss(rows, labels, mask)
        kl = kl_loss(nx.getitem(rows, (slice(None), slice(0, labels.shape[1]))), orig_rows, mask)
        loss = adapt_loss(nll, kl, lcfg)
        loss.backward()
        lr = opt.step()
        rec = {"step": step, "loss": float(loss.data), "nll": float(nll.data), "kl": float(kl.data), "lr": lr}
        hist.append(rec)
        if on_record and step % 50 == 0:
            on_record(rec)
    return hist


# ------------------------------------------------------------- evaluation

def decode_utterances(model: Transducer, utts: Sequence[Utterance], beam: int = 16) -> list[list[int]]:
    out = []
    for u in utts:
        if beam == 0:
            out.append(greedy_decode(model, u.features))
        else:
            out.append(beam_search(model, u.features, beam=beam)[0][0])
    return out


def score_utterances(vocab: Vocabulary, utts: Sequence[Utterance], hyps: Sequence[Sequence[int]]) -> dict:
    per_cond: dict[str, list[WerReport]] = {}
    reports = []
    for u, h in zip(utts, hyps):
        rep = multitalker_wer(reference_speakers(u), deserialize_tsot(h, vocab))
        reports.append(rep)
        per_cond.setdefault(overlap_condition(u.overlap_ratio(), u.num_speakers), []).append(rep)
    total = corpus_report(reports)
    return {
        "wer": total.wer,
        "report": total.to_json(),
        "by_condition": {k: corpus_report(v).to_json() for k, v in sorted(per_cond.items())},
    }


def evaluate(model: Transducer, vocab: Vocabulary, utts: Sequence[Utterance], beam: int = 16) -> dict:
    return score_utterances(vocab, utts, decode_utterances(model, utts, beam))


def dumps(rec: dict) -> str:
    return json.dumps(rec, sort_keys=True)
