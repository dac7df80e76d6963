import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from contmix.circuits import EPS_P, CircuitStructure, component_log_density
from contmix.clt import (fit_clt_closed_form, fit_independent, learn_structure, max_spanning_tree,
                         mutual_information, pairwise_counts)
from contmix.synthetic import flip_tree_pc, random_tree
from contmix.data import generate_synthetic


def _undirected(structure):
    return {frozenset(e) for e in structure.edges()}


def _is_tree(structure):
    D = structure.num_vars
    if len(structure.edges()) != D - 1:
        return False
    seen, stack = {structure.root}, [structure.root]
    while stack:
        for c in structure.children[stack.pop()]:
            seen.add(c)
            stack.append(c)
    return len(seen) == D


class TestCounts:
    def test_direct(self):
        n = pairwise_counts(np.array([[0, 0], [1, 1]]), alpha=0).table
        assert n[0, 1, 0, 0] == 1 and n[0, 1, 1, 1] == 1
        assert n[0, 1, 0, 1] == 0 and n[0, 1, 1, 0] == 0

    def test_alpha_adds_one(self):
        X = np.array([[0, 1], [1, 1], [0, 0]])
        np.testing.assert_allclose(pairwise_counts(X, 1).table, pairwise_counts(X, 0).table + 1)

    def test_identical_columns(self):
        X = np.array([[0, 0], [1, 1], [1, 1]])
        n = pairwise_counts(X, alpha=0.3).table
        assert n[0, 1, 0, 1] == pytest.approx(0.3) and n[0, 1, 1, 0] == pytest.approx(0.3)

    def test_empty(self):
        with pytest.raises(ValueError):
            pairwise_counts(np.zeros((0, 3)))

    @settings(max_examples=30, deadline=None)
    @given(X=arrays(np.uint8, st.tuples(st.integers(1, 20), st.integers(1, 6)), elements=st.integers(0, 1)),
           alpha=st.floats(0.01, 2))
    def test_symmetric_and_floor(self, X, alpha):
        n = pairwise_counts(X, alpha).table
        np.testing.assert_allclose(n, n.transpose(1, 0, 3, 2))
        assert n.min() >= alpha


class TestMutualInformation:
    def test_independent_fair_coins(self):
        X = np.array([[0, 0], [0, 1], [1, 0], [1, 1]])
        assert mutual_information(pairwise_counts(X, 0))[0, 1] == pytest.approx(0, abs=1e-15)

    def test_copy_is_log2(self):
        X = np.array([[0, 0], [1, 1]] * 5)
        assert mutual_information(pairwise_counts(X, 0))[0, 1] == pytest.approx(np.log(2), rel=1e-12)

    def test_matches_entropy_identity(self, rng):
        # I(u;v) = H(u) + H(v) - H(u,v), computed from raw frequencies
        X = rng.integers(0, 2, (300, 2))
        X[:, 1] = np.where(rng.random(300) < 0.8, X[:, 0], X[:, 1])
        joint = np.array([[np.mean((X[:, 0] == a) & (X[:, 1] == b)) for b in (0, 1)] for a in (0, 1)])

        def H(p):
            p = p[p > 0]
            return -(p * np.log(p)).sum()

        expected = H(joint.sum(1)) + H(joint.sum(0)) - H(joint.ravel())
        assert mutual_information(pairwise_counts(X, 0))[0, 1] == pytest.approx(expected, rel=1e-10)

    @settings(max_examples=30, deadline=None)
    @given(X=arrays(np.uint8, st.tuples(st.integers(1, 20), st.integers(1, 6)), elements=st.integers(0, 1)))
    def test_symmetric_nonnegative(self, X):
        mi = mutual_information(pairwise_counts(X, 0.1))
        np.testing.assert_array_equal(mi, mi.T)
        assert mi.min() >= 0 and np.all(np.diag(mi) == 0)


class TestSpanningTree:
    def test_single_variable(self):
        s = max_spanning_tree(np.zeros((1, 1)))
        assert s.num_vars == 1 and not s.edges()

    def test_three_nodes(self):
        mi = np.array([[0, 0.5, 0.1], [0.5, 0, 0.4], [0.1, 0.4, 0]])
        assert _undirected(max_spanning_tree(mi)) == {frozenset((0, 1)), frozenset((1, 2))}

    def test_root_choice(self):
        mi = np.array([[0, 0.5, 0.1], [0.5, 0, 0.4], [0.1, 0.4, 0]])
        s = max_spanning_tree(mi, root=2)
        assert s.root == 2 and s.parent[1] == 2 and s.parent[0] == 1

    def test_ties_are_deterministic(self):
        mi = np.ones((6, 6))
        a, b = max_spanning_tree(mi), max_spanning_tree(mi.copy())
        assert a.parent == b.parent
        # lowest (u, v) pairs win: a star around 0
        assert _undirected(a) == {frozenset((0, v)) for v in range(1, 6)}

    def test_bad_root(self):
        with pytest.raises(ValueError):
            max_spanning_tree(np.zeros((3, 3)), root=3)

    @settings(max_examples=60, deadline=None)
    @given(D=st.integers(1, 9), data=st.data())
    def test_always_a_tree(self, D, data):
        vals = data.draw(arrays(np.float64, (D, D), elements=st.sampled_from([0.0, 0.1, 0.5, 1.0])))
        mi = vals + vals.T
        s = max_spanning_tree(mi, root=data.draw(st.integers(0, D - 1)))
        assert _is_tree(s)

    @settings(max_examples=30, deadline=None)
    @given(D=st.integers(2, 7), seed=st.integers(0, 10 ** 6))
    def test_maximum_weight(self, D, seed):
        # compare with Prim's algorithm as an independent route
        r = np.random.default_rng(seed).random((D, D))
        mi = np.triu(r, 1) + np.triu(r, 1).T
        in_tree, best = {0}, 0.0
        while len(in_tree) < D:
            w, v = max((mi[u, v], v) for u in in_tree for v in range(D) if v not in in_tree)
            best += w
            in_tree.add(v)
        got = sum(mi[u, v] for u, v in max_spanning_tree(mi).edges())
        assert got == pytest.approx(best, rel=1e-12)


class TestClosedForm:
    def test_copy_child(self):
        X = np.array([[0, 0], [1, 1], [1, 1]])
        p = fit_clt_closed_form(X, CircuitStructure.clt([None, 0]), alpha=0)
        assert p[2] == pytest.approx(EPS_P) and p[3] == pytest.approx(1 - EPS_P)

    def test_chain_hand_values(self):
        X = np.array([[0, 0], [0, 1], [1, 1]])
        p = fit_clt_closed_form(X, CircuitStructure.clt([None, 0]), alpha=0)
        np.testing.assert_allclose(p, [1 / 3, 1 / 3, 0.5, 1 - EPS_P])

    def test_chain_smoothed(self):
        X = np.array([[0, 0], [0, 1], [1, 1]])
        p = fit_clt_closed_form(X, CircuitStructure.clt([None, 0]), alpha=1)
        np.testing.assert_allclose(p, [2 / 5, 2 / 5, 2 / 4, 2 / 3])

    def test_heavy_smoothing(self, rng):
        X = rng.integers(0, 2, (40, 5))
        s = learn_structure(X)
        np.testing.assert_allclose(fit_clt_closed_form(X, s, alpha=1e9), 0.5, atol=1e-7)

    def test_shape_mismatch(self):
        with pytest.raises(ValueError):
            fit_clt_closed_form(np.zeros((3, 2)), CircuitStructure.clt([None, 0, 1]))

    def test_needs_clt(self):
        with pytest.raises(ValueError):
            fit_clt_closed_form(np.zeros((3, 2)), CircuitStructure.factorised(2))

    @settings(max_examples=40, deadline=None)
    @given(X=arrays(np.uint8, st.tuples(st.integers(2, 40), st.integers(2, 7)), elements=st.integers(0, 1)))
    def test_tree_beats_independent_by_mi(self, X):
        s = learn_structure(X, alpha=0)
        mi = mutual_information(pairwise_counts(X, 0))
        ll_tree = component_log_density(s, fit_clt_closed_form(X, s, alpha=0), X).sum()
        ll_ind = component_log_density(CircuitStructure.factorised(X.shape[1]), fit_independent(X, 0), X).sum()
        gap = len(X) * sum(mi[u, v] for u, v in s.edges())
        assert ll_tree >= ll_ind - 1e-9
        assert ll_tree - ll_ind == pytest.approx(gap, abs=1e-5 * len(X) + 1e-9)


def test_recovers_tree():
    true = random_tree(10, seed=3)
    data = generate_synthetic(flip_tree_pc(true, seed=4), 10000, seed=5)
    assert _undirected(learn_structure(data)) == _undirected(true)
