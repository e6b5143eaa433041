import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from tsotfnt import numerics as nx
from tsotfnt.losses import (MAX_BRUTEFORCE_CELLS, LossConfig, adapt_loss, fnt_loss, kl_loss, nll_loss,
                            nll_mask, rnnt_loss, rnnt_loss_bruteforce)
from tsotfnt.numerics import Tensor


def random_lattice(rng, T, U, K):
    z = rng.normal(size=(T, U + 1, K)) * 2
    return z - np.log(np.exp(z).sum(-1, keepdims=True))


def single(lattice, labels, blank):
    T, U1, K = lattice.shape
    return float(rnnt_loss(Tensor(lattice[None]), np.array([labels]).reshape(1, U1 - 1),
                           [T], [U1 - 1], blank).data)


# ------------------------------------------------------------ oracle tests

def test_t1_u0_single_alignment():
    lat = random_lattice(np.random.default_rng(0), 1, 0, 3)
    assert single(lat, [], 2) == pytest.approx(-lat[0, 0, 2], abs=1e-12)


def test_t2_u1_uniform():
    # three outputs: paths "y, blank, blank" and "blank, y, blank"
    lat = np.full((2, 2, 3), -math.log(3))
    assert single(lat, [0], 2) == pytest.approx(-math.log(2 * (1 / 3) ** 3), abs=1e-12)
    assert rnnt_loss_bruteforce(lat, [0], 2) == pytest.approx(-math.log(2 * (1 / 3) ** 3), abs=1e-12)


def test_matches_bruteforce_random():
    rng = np.random.default_rng(1)
    for _ in range(100):
        T = int(rng.integers(1, 5))
        U = int(rng.integers(0, 4))
        V = int(rng.integers(1, 5))
        K = V + 2
        lat = random_lattice(rng, T, U, K)
        labels = list(rng.integers(0, K, size=U))
        labels = [y if y != V else V + 1 for y in labels]  # never the blank id
        assert abs(single(lat, labels, V) - rnnt_loss_bruteforce(lat, labels, V)) < 1e-6


def test_batched_matches_per_item():
    rng = np.random.default_rng(2)
    B, T, U, K = 3, 4, 3, 5
    lat = np.stack([random_lattice(rng, T, U, K) for _ in range(B)])
    labels = rng.integers(0, 3, size=(B, U))
    t_lens, u_lens = np.array([4, 2, 3]), np.array([3, 1, 0])
    total = float(rnnt_loss(Tensor(lat), labels, t_lens, u_lens, 4, reduction="sum").data)
    parts = sum(rnnt_loss_bruteforce(lat[b, :t_lens[b], :u_lens[b] + 1], labels[b, :u_lens[b]], 4)
                for b in range(B))
    assert total == pytest.approx(parts, abs=1e-9)


def test_forced_single_path():
    # T=1: every label then the final blank, all on frame 0
    rng = np.random.default_rng(3)
    lat = random_lattice(rng, 1, 2, 4)
    expected = -(lat[0, 0, 1] + lat[0, 1, 0] + lat[0, 2, 3])
    assert rnnt_loss_bruteforce(lat, [1, 0], 3) == pytest.approx(expected, abs=1e-12)
    assert single(lat, [1, 0], 3) == pytest.approx(expected, abs=1e-12)


def test_relabeling_symmetry():
    rng = np.random.default_rng(4)
    lat = random_lattice(rng, 3, 2, 5)
    perm = np.array([2, 0, 1, 3, 4])  # permute vocabulary ids, keep blank and cc
    inv = np.argsort(perm)
    lat2 = lat[..., inv]
    labels = [0, 4]
    assert single(lat, labels, 3) == pytest.approx(single(lat2, [int(perm[y]) for y in labels], 3), abs=1e-12)


def test_bruteforce_refuses_large_grids():
    lat = np.zeros((MAX_BRUTEFORCE_CELLS + 1, 1, 2))
    with pytest.raises(ValueError, match="too large"):
        rnnt_loss_bruteforce(lat, [], 1)


def test_rejects_non_finite_lattice():
    lat = np.zeros((1, 2, 2, 3))
    lat[0, 0, 0, 0] = np.nan
    with pytest.raises(FloatingPointError):
        rnnt_loss(Tensor(lat), np.array([[0]]), [2], [1], 2)


@given(st.integers(1, 4), st.integers(0, 3), st.integers(0, 10 ** 6))
@settings(max_examples=50, deadline=None)
def test_loss_is_a_probability(T, U, seed):
    lat = random_lattice(np.random.default_rng(seed), T, U, 4)
    loss = single(lat, [0] * U, 3)
    assert loss >= -1e-12 and 0 < math.exp(-loss) <= 1 + 1e-12


def test_rnnt_gradient():
    rng = np.random.default_rng(5)
    ps = nx.ParamStore(np.float64)
    ps.add("z", rng.normal(size=(2, 3, 3, 4)))
    labels = np.array([[0, 1], [2, 0]])

    def f(p):
        return rnnt_loss(nx.log_softmax(p["z"]), labels, [3, 2], [2, 1], 3)

    err, _ = nx.finite_diff_check(f, ps, eps=1e-5)
    assert err < 1e-6


# ---------------------------------------------------------------- NLL / KL

def test_nll_mask_excludes_cc_and_padding():
    cc = 9
    pred_in = np.array([[8, 1, cc, 2, 0], [8, 3, 4, 0, 0]])
    targets = np.array([[1, cc, 2, 0], [3, 4, 0, 0]])
    mask = nll_mask(pred_in, targets, np.array([3, 2]), cc)
    assert mask.tolist() == [[True, False, False, False], [True, True, False, False]]


def test_nll_all_masked_is_zero():
    z = Tensor(np.zeros((1, 3, 4)))
    assert float(nll_loss(z, np.zeros((1, 2), dtype=int), np.zeros((1, 2), bool)).data) == 0.0


def test_nll_uniform_two_targets():
    z = nx.log_softmax(Tensor(np.zeros((1, 3, 4))))
    val = nll_loss(z, np.array([[1, 3]]), np.array([[True, True]]))
    assert float(val.data) == pytest.approx(math.log(4), abs=1e-15)


def test_nll_rejects_unmasked_cc_target():
    z = Tensor(np.zeros((1, 2, 4)))
    with pytest.raises(ValueError, match="outside"):
        nll_loss(z, np.array([[5]]), np.array([[True]]))


def test_masked_rows_are_inert():
    rng = np.random.default_rng(6)
    base = rng.normal(size=(1, 4, 5))
    targets = np.array([[1, 2, 3]])
    mask = np.array([[True, False, True]])

    def run(data):
        x = Tensor(data.copy(), requires_grad=True)
        v = nll_loss(nx.log_softmax(x), targets, mask)
        v.backward()
        return float(v.data), x.grad

    v1, g1 = run(base)
    pert = base.copy()
    pert[0, 1] += rng.normal(size=5) * 10
    pert[0, 3] += 7.0  # the trailing (U+1)-th row is never scored
    v2, g2 = run(pert)
    assert v1 == v2
    assert np.array_equal(g1[0, [0, 2]], g2[0, [0, 2]])
    assert np.all(g1[0, [1, 3]] == 0) and np.all(g2[0, [1, 3]] == 0)


def test_kl_of_identical_rows_is_zero():
    rng = np.random.default_rng(7)
    p = nx.log_softmax(Tensor(rng.normal(size=(2, 3, 6)))).data
    val = kl_loss(Tensor(p.copy()), p, np.ones((2, 3), bool))
    assert float(val.data) == 0.0


def test_kl_closed_form():
    orig = np.log(np.array([[[0.5, 0.5]]]))
    adapted = Tensor(np.log(np.array([[[0.9, 0.1]]])))
    expected = 0.5 * math.log(0.5 / 0.9) + 0.5 * math.log(0.5 / 0.1)
    assert float(kl_loss(adapted, orig, np.ones((1, 1), bool)).data) == pytest.approx(expected, abs=1e-12)
    assert expected == pytest.approx(0.5108, abs=1e-4)


@given(st.integers(0, 10 ** 6))
@settings(max_examples=50, deadline=None)
def test_kl_non_negative(seed):
    rng = np.random.default_rng(seed)
    a = nx.log_softmax(Tensor(rng.normal(size=(1, 2, 5)) * 3))
    b = nx.log_softmax(Tensor(rng.normal(size=(1, 2, 5)) * 3)).data
    for direction in ("orig_to_adapted", "adapted_to_orig"):
        assert float(kl_loss(a, b, np.ones((1, 2), bool), direction).data) >= -1e-12


def test_kl_gradient_only_through_adapted():
    rng = np.random.default_rng(8)
    ps = nx.ParamStore(np.float64)
    ps.add("a", rng.normal(size=(1, 3, 4)))
    orig = nx.log_softmax(Tensor(rng.normal(size=(1, 3, 4)))).data
    mask = np.array([[True, False, True]])
    err, _ = nx.finite_diff_check(lambda p: kl_loss(nx.log_softmax(p["a"]), orig, mask), ps, eps=1e-5)
    assert err < 1e-6


def test_kl_shape_mismatch():
    with pytest.raises(nx.ShapeError):
        kl_loss(Tensor(np.zeros((1, 2, 3))), np.zeros((1, 2, 4)), np.ones((1, 2), bool))


# ------------------------------------------------------------ combinations

def test_lambda_zero_is_exactly_rnnt():
    r, n = Tensor(np.array(1.2345)), Tensor(np.array(6.789))
    assert fnt_loss(r, n, LossConfig(lm_weight=0.0)) is r


def test_lambda_one_is_sum():
    r, n = Tensor(np.array(1.2345)), Tensor(np.array(6.789))
    assert float(fnt_loss(r, n, LossConfig(lm_weight=1.0)).data) == pytest.approx(1.2345 + 6.789, abs=1e-9)


def test_omega_zero_is_pure_nll():
    n, k = Tensor(np.array(0.5)), Tensor(np.array(3.0))
    assert adapt_loss(n, k, LossConfig(kl_weight=0.0)) is n
    assert LossConfig().kl_weight == 1.0


def test_negative_weights_rejected():
    with pytest.raises(ValueError):
        LossConfig(lm_weight=-1)
