"""Greedy and beam-search decoding for the transducer variants.

Both searches work frame by frame.  At each frame a hypothesis either emits
blank (moving on to the next frame) or a label (staying on the frame), with at
most ``max_symbols`` labels per frame.  The beam search ranks the union of
blank-terminated and still-expanding hypotheses together at every expansion
round, which makes ``beam=1`` follow exactly the greedy argmax path.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import numerics as nx
from .labels import ChannelTranscripts, Vocabulary, deserialize_tsot
from .model import PredictorState, Transducer, log_softmax_np

MAX_SYMBOLS = 10


@dataclass
class Hypothesis:
    tokens: tuple[int, ...]
    logp: float
    pstate: PredictorState
    pj: np.ndarray  # projected special-predictor output for the joint
    vocab_row: np.ndarray | None  # cached z_u^v (log-probs)
    frame_hist: list = field(default_factory=list)


def _start(model: Transducer) -> Hypothesis:
    g, h, st = model.initial_state()
    return Hypothesis((), 0.0, st, model.pred_project(g[None])[0],
                      None if h is None else log_softmax_np(h))


def _encode(model: Transducer, feats: np.ndarray):
    with nx.no_grad():
        enc, _ = model.encode(feats)
    enc = enc.data[0]
    ej, hv = model.joint_precompute(enc)
    return enc.shape[0], ej, hv


def _extend(model: Transducer, parents: list[Hypothesis], tokens: list[int], scores: list[float]):
    gs, hs, states = model.step_batch(tokens, [p.pstate for p in parents])
    pj = model.pred_project(np.stack(gs))
    out = []
    for i, (p, y, s) in enumerate(zip(parents, tokens, scores)):
        out.append(Hypothesis(p.tokens + (y,), s, states[i], pj[i],
                              None if hs[i] is None else log_softmax_np(hs[i])))
    return out


def _joint(model: Transducer, ej_t, hv_t, hyps: list[Hypothesis]) -> np.ndarray:
    pj = np.stack([h.pj for h in hyps])
    vr = None if hyps[0].vocab_row is None else np.stack([h.vocab_row for h in hyps])
    return model.joint_step(ej_t, hv_t, pj, vr)


def greedy_decode(model: Transducer, feats: np.ndarray, max_symbols: int = MAX_SYMBOLS,
                  prune_double_cc: bool = True, on_frame=None) -> list[int]:
    """Argmax decoding.  ``on_frame(t, tokens)`` sees the prefix after each frame."""
    T, ej, hv = _encode(model, feats)
    hyp = _start(model)
    for t in range(T):
        for emitted in range(max_symbols + 1):
            lp = _joint(model, ej[t], None if hv is None else hv[t], [hyp])[0]
            if prune_double_cc and hyp.tokens and hyp.tokens[-1] == model.cc_id:
                lp = lp.copy()
                lp[model.cc_id] = -np.inf
            k = int(np.argmax(lp))
            if k == model.blank_id or emitted == max_symbols:
                hyp.logp += float(lp[model.blank_id])
                break
            hyp = _extend(model, [hyp], [k], [hyp.logp + float(lp[k])])[0]
        if on_frame is not None:
            on_frame(t, list(hyp.tokens))
    return list(hyp.tokens)


def _merge_into(pool: dict, hyp: Hypothesis) -> None:
    prev = pool.get(hyp.tokens)
    if prev is None:
        pool[hyp.tokens] = hyp
    else:
        prev.logp = float(np.logaddexp(prev.logp, hyp.logp))


def beam_search(model: Transducer, feats: np.ndarray, beam: int = 16, max_symbols: int = MAX_SYMBOLS,
                prune_double_cc: bool = True, on_frame=None, check_states: bool = False):
    """Returns an n-best list of ``(tokens, logp)``, best first.

    Hypotheses with identical token sequences are merged by log-sum-exp.
    ``on_frame(t, best_tokens)`` receives the current best after each frame.
    """
    if beam < 1:
        raise ValueError("beam must be >= 1")
    T, ej, hv = _encode(model, feats)
    hyps = [_start(model)]
    cc = model.cc_id
    for t in range(T):
        hv_t = None if hv is None else hv[t]
        done: dict = {}  # blank-terminated at this frame, keyed by tokens
        active = hyps
        for emitted in range(max_symbols + 1):
            if not active:
                break
            lp = _joint(model, ej[t], hv_t, active)
            cands = []  # (score, order, kind, hyp index, token)
            order = 0
            for i, h in enumerate(active):
                cands.append((h.logp + float(lp[i, model.blank_id]), order, "blank", i, -1))
                order += 1
                if emitted == max_symbols:
                    continue
                for k in range(model.K):
                    if k == model.blank_id:
                        continue
                    if prune_double_cc and k == cc and h.tokens and h.tokens[-1] == cc:
                        continue
                    cands.append((h.logp + float(lp[i, k]), order, "label", i, k))
                    order += 1
            for tok, h in done.items():
                cands.append((h.logp, -1, "done", -1, tok))
            cands.sort(key=lambda c: (-c[0], c[1]))
            kept = cands[:beam]
            new_done: dict = {}
            expand_parents, expand_tokens, expand_scores = [], [], []
            for score, _, kind, i, k in kept:
                if kind == "done":
                    _merge_into(new_done, done[k])
                elif kind == "blank":
                    h = active[i]
                    _merge_into(new_done, Hypothesis(h.tokens, score, h.pstate, h.pj, h.vocab_row))
                else:
                    expand_parents.append(active[i])
                    expand_tokens.append(k)
                    expand_scores.append(score)
            # hypotheses already finished at this frame but pruned now are gone
            done = new_done
            active = []
            if expand_parents:
                pool: dict = {}
                for h in _extend(model, expand_parents, expand_tokens, expand_scores):
                    _merge_into(pool, h)
                active = list(pool.values())
                if check_states:
                    for h in active:
                        _check_state(model, h)
        hyps = sorted(done.values(), key=lambda h: -h.logp)[:beam]
        if on_frame is not None:
            on_frame(t, list(hyps[0].tokens))
    return [(list(h.tokens), h.logp) for h in hyps]


def _check_state(model: Transducer, hyp: Hypothesis) -> None:
    """Debug: the cached vocabulary row must match a fresh run over the tokens.

    Hypotheses are advanced in batches, so the comparison allows for matmul
    summation-order differences.
    """
    if model.variant != "integrated":
        return
    pred_in = np.array([[model.blank_id, *hyp.tokens]])
    with nx.no_grad():
        rows = model.vocab_predictor_run(pred_in).data[0]
    tol = 1e-9 if rows.dtype == np.float64 else 1e-4
    if not np.allclose(log_softmax_np(rows[-1]), hyp.vocab_row, rtol=0, atol=tol):
        raise AssertionError(f"predictor state diverged for hypothesis {hyp.tokens}")


def split_channels(label, vocab: Vocabulary) -> ChannelTranscripts:
    return deserialize_tsot(label, vocab)


def decode_record(model: Transducer, vocab: Vocabulary, utt_id: str, feats: np.ndarray,
                  beam: int = 16) -> dict:
    if beam == 0:
        tokens, score = greedy_decode(model, feats), None
    else:
        tokens, score = beam_search(model, feats, beam=beam)[0]
    ch = split_channels(tokens, vocab)
    return {
        "utt_id": utt_id,
        "tokens": [vocab.id_to_token(t) for t in tokens],
        "score": score,
        "ch0_text": ch.text(0),
        "ch1_text": ch.text(1),
    }
