import numpy as np
import pytest

from tsotfnt.decoding import MAX_SYMBOLS, beam_search, decode_record, greedy_decode, split_channels
from tsotfnt.labels import Vocabulary
from tsotfnt.model import ModelConfig, Transducer

V = 4
CC = V + 1


def random_model(seed, variant="integrated", sharpen=3.0):
    cfg = ModelConfig(variant=variant, vocab_size=V, feat_dim=3, enc_layers=1, enc_dim=8, special_dim=6,
                      vocab_layers=1, vocab_dim=8, joint_dim=8)
    m = Transducer(cfg, seed=seed, dtype=np.float64)
    for n in m.params.names("joint."):
        m.params[n].data *= sharpen
    return m


def pairs(n, variant="integrated"):
    for seed in range(n):
        m = random_model(seed, variant)
        feats = np.random.default_rng(1000 + seed).normal(size=(int(3 + seed % 5), 3))
        yield m, feats


def test_all_blank_model_gives_empty_label():
    m = random_model(0)
    m.params["joint.out.b"].data[0] = 1e3  # blank logit
    feats = np.random.default_rng(0).normal(size=(6, 3))
    assert greedy_decode(m, feats) == []
    assert beam_search(m, feats, beam=4)[0][0] == []


@pytest.mark.parametrize("variant", ["integrated", "naive", "tsot_baseline"])
def test_beam_one_equals_greedy(variant):
    for m, feats in pairs(30, variant):
        g = greedy_decode(m, feats)
        b = beam_search(m, feats, beam=1)
        assert b[0][0] == g


def test_wider_beam_never_scores_lower():
    for m, feats in pairs(30):
        s1 = beam_search(m, feats, beam=1)[0][1]
        s4 = beam_search(m, feats, beam=4)[0][1]
        s16 = beam_search(m, feats, beam=16)[0][1]
        assert s4 >= s1 - 1e-9 and s16 >= s1 - 1e-9


def test_nbest_sorted_and_unique():
    m, feats = next(pairs(1))
    nbest = beam_search(m, feats, beam=8)
    scores = [s for _, s in nbest]
    assert scores == sorted(scores, reverse=True)
    assert len({tuple(t) for t, _ in nbest}) == len(nbest)


def test_no_double_cc():
    for m, feats in pairs(20):
        m.params["joint.out.b"].data[1] += 2.0  # encourage <cc>
        for tokens in [greedy_decode(m, feats)] + [t for t, _ in beam_search(m, feats, beam=4)]:
            assert all(not (a == b == CC) for a, b in zip(tokens, tokens[1:]))


def test_emission_cap():
    m = random_model(1)
    m.params["joint.out.b"].data[0] = -1e3  # blank never wins
    feats = np.random.default_rng(1).normal(size=(3, 3))
    assert len(greedy_decode(m, feats)) == 3 * MAX_SYMBOLS
    assert len(greedy_decode(m, feats, max_symbols=2)) == 6


def test_greedy_prefix_is_stable():
    for m, feats in pairs(10):
        seen = []
        greedy_decode(m, feats, on_frame=lambda t, toks: seen.append(toks))
        final = seen[-1]
        for prefix in seen:
            assert final[:len(prefix)] == prefix


def test_hypothesis_states_match_fresh_runs():
    for m, feats in pairs(5):
        beam_search(m, feats, beam=4, check_states=True)


def test_beam_rejects_zero():
    m, feats = next(pairs(1))
    with pytest.raises(ValueError):
        beam_search(m, feats, beam=0)


def test_deterministic():
    m, feats = next(pairs(1))
    assert beam_search(m, feats, beam=4) == beam_search(m, feats, beam=4)


def test_decode_record_fields():
    vocab = Vocabulary(["a", "b", "c", "d"])
    m, feats = next(pairs(1))
    rec = decode_record(m, vocab, "u1", feats, beam=4)
    assert set(rec) == {"utt_id", "tokens", "score", "ch0_text", "ch1_text"}
    ids = [vocab.lookup(t) for t in rec["tokens"]]
    ch = split_channels(ids, vocab)
    assert (ch.text(0), ch.text(1)) == (rec["ch0_text"], rec["ch1_text"])
    assert decode_record(m, vocab, "u1", feats, beam=0)["score"] is None
