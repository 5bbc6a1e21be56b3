import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from eend import nncore as nn
from eend.loss import (BCE_EPS, batch_pit_loss, bce, best_permutations, intermediate_loss,
                       intermediate_terms, permutations, pit_loss)
from eend.nncore import ParameterStore

from oracles import pit_oracle


def test_bce_examples():
    assert bce(1, 0.5) == pytest.approx(math.log(2), abs=1e-15)
    assert bce(0, 0.5) == pytest.approx(math.log(2), abs=1e-15)
    assert bce(1, 0.9) == pytest.approx(0.105361, abs=1e-6)


def test_bce_clamps():
    assert bce(1, 0.0) == pytest.approx(-math.log(BCE_EPS))
    assert np.isfinite(bce(0, 1.0))


def test_pit_hardened_identity():
    y = np.array([[1, 0, 1, 1], [0, 1, 1, 0]], dtype=float)
    res = pit_loss(y, np.where(y > 0, 0.99, 0.01))
    assert res.best_permutation == (0, 1)


def test_pit_hand_example():
    res = pit_loss(np.array([[1.0, 1.0], [0.0, 0.0]]), np.array([[0.1, 0.1], [0.9, 0.9]]))
    assert res.best_permutation == (1, 0)
    assert res.value == pytest.approx(-math.log(0.9), abs=1e-12)


def test_pit_uniform_tie_picks_identity():
    rng = np.random.default_rng(0)
    y = (rng.random((3, 6)) < 0.5).astype(float)
    res = pit_loss(y, np.full((3, 6), 0.5))
    assert res.best_permutation == (0, 1, 2)
    assert res.value == pytest.approx(math.log(2), abs=1e-12)


def test_pit_shape_mismatch():
    with pytest.raises(ValueError, match="shape"):
        pit_loss(np.zeros((2, 3)), np.full((2, 4), 0.5))


def test_permutation_guard():
    with pytest.raises(ValueError, match="8"):
        best_permutations(np.zeros((9, 2)), np.full((9, 2), 0.5))


def test_permutations_lexicographic():
    assert permutations(3).tolist() == [list(p) for p in
                                        [(0, 1, 2), (0, 2, 1), (1, 0, 2), (1, 2, 0), (2, 0, 1), (2, 1, 0)]]


labels = st.integers(1, 3).flatmap(lambda c: st.tuples(st.just(c), st.integers(1, 6), st.integers(0, 2**31)))


@given(labels)
@settings(max_examples=60, deadline=None)
def test_pit_matches_brute_force(case):
    c, t, seed = case
    rng = np.random.default_rng(seed)
    y = (rng.random((c, t)) < 0.5).astype(float)
    p = rng.uniform(0.01, 0.99, size=(c, t))
    res = pit_loss(y, p)
    ref_loss, _ = pit_oracle(y, p)
    assert res.value == pytest.approx(ref_loss, abs=1e-12)
    assert res.value <= bce(y, p).mean() + 1e-12
    assert sorted(res.best_permutation) == list(range(c))


@given(labels)
@settings(max_examples=60, deadline=None)
def test_pit_invariant_to_reference_row_permutation(case):
    c, t, seed = case
    rng = np.random.default_rng(seed)
    y = (rng.random((c, t)) < 0.5).astype(float)
    p = rng.uniform(0.01, 0.99, size=(c, t))
    perm = rng.permutation(c)
    assert pit_loss(y[perm], p).value == pytest.approx(pit_loss(y, p).value, abs=1e-12)


def test_pit_gradient_away_from_ties():
    rng = np.random.default_rng(1)
    y = (rng.random((2, 5)) < 0.5).astype(float)
    store = ParameterStore()
    store.add("logits", rng.normal(size=(2, 5)))
    fn = lambda: pit_loss(y, nn.sigmoid(store["logits"])).loss  # noqa: E731
    assert nn.grad_check(fn, store) < 1e-5


def test_batch_pit_each_sequence_own_permutation():
    y = np.array([[[1.0, 1.0], [0.0, 0.0]], [[1.0, 1.0], [0.0, 0.0]]])
    p = np.array([[[0.9, 0.9], [0.1, 0.1]], [[0.1, 0.1], [0.9, 0.9]]])
    loss, perms = batch_pit_loss(y, p)
    assert perms.tolist() == [[0, 1], [1, 0]]
    assert loss.item() == pytest.approx(-math.log(0.9), abs=1e-12)


def test_intermediate_identical_terms_double():
    rng = np.random.default_rng(2)
    y = (rng.random((2, 6)) < 0.5).astype(float)
    p = rng.uniform(0.05, 0.95, size=(2, 6))
    final = pit_loss(y, p).value
    assert intermediate_loss(y, p, [p, p, p]).item() == pytest.approx(2 * final, abs=1e-12)
    assert intermediate_loss(y, p, [p]).item() == pytest.approx(2 * final, abs=1e-12)


def test_intermediate_formula_and_independent_permutations():
    rng = np.random.default_rng(3)
    y = (rng.random((2, 6)) < 0.5).astype(float)
    f, a, b = (rng.uniform(0.05, 0.95, size=(2, 6)) for _ in range(3))
    b = b[::-1]  # needs a different permutation than the others
    expected = pit_oracle(y, f)[0] + (pit_oracle(y, a)[0] + pit_oracle(y, b)[0]) / 2
    assert intermediate_loss(y, f, [a, b]).item() == pytest.approx(expected, abs=1e-12)
    total, inter = intermediate_terms(y, f, [a, b], mixing_ratio=0.5)
    assert total.item() == pytest.approx(pit_oracle(y, f)[0] + 0.5 * inter.item(), abs=1e-12)


def test_intermediate_empty_list():
    with pytest.raises(ValueError, match="pit_loss"):
        intermediate_loss(np.zeros((2, 2)), np.full((2, 2), 0.5), [])


@given(st.integers(0, 2**31), st.integers(1, 3))
@settings(max_examples=30, deadline=None)
def test_intermediate_at_least_final(seed, n):
    rng = np.random.default_rng(seed)
    y = (rng.random((2, 4)) < 0.5).astype(float)
    f = rng.uniform(0.01, 0.99, size=(2, 4))
    inters = [rng.uniform(0.01, 0.99, size=(2, 4)) for _ in range(n)]
    assert intermediate_loss(y, f, inters).item() >= pit_loss(y, f).value
