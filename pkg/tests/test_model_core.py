"""Evaluation-layer tests: frozen oracle values, invariances, and gradient checks."""
import math

import numpy as np
import pytest
from numpy.testing import assert_allclose

from conelogit.data import (
    ChoiceDataset,
    InvalidInputError,
    NestPartition,
    TaxonomyTree,
)
from conelogit.likelihood import (
    finite_difference_gradient,
    mnl_choice_probs,
    mnl_log_likelihood,
    nl_choice_probs,
    nl_inclusive_values,
    nl_log_likelihood,
    tnl_log_likelihood,
    tnl_value_functions,
)

from conftest import nl_as_depth3_tree, random_dataset, random_partition, random_tree


def two_alt_dataset(reps=1):
    """reps copies each of (chosen=0) and (chosen=1) over S={0,1}, attrs 0 and 1."""
    offered = tuple(np.array([0, 1]) for _ in range(2 * reps))
    chosen = np.array([0, 1] * reps)
    attrs = tuple(np.array([[0.0], [1.0]]) for _ in range(2 * reps))
    return ChoiceDataset(2, offered, chosen, attrs)


class TestFrozenValues:
    """Hand-checkable values, computed independently and pinned here."""

    def test_softmax_two_alternatives(self):
        data = two_alt_dataset()
        probs = mnl_choice_probs(np.array([1.0]), data, 0)
        assert_allclose(probs, [0.2689414213699951, 0.7310585786300049], rtol=1e-12)

    def test_two_observation_value(self):
        # One success and one failure of the same binary comparison at beta=0.5:
        # log sigma + log(1 - sigma) with sigma = 1/(1 + exp(0.5)).
        data = two_alt_dataset()
        rep = mnl_log_likelihood(np.array([0.5]), data)
        assert_allclose(rep.value, -1.4481539683602134, atol=1e-12)
        assert_allclose(rep.per_observation.sum(), rep.value, rtol=1e-14)

    def test_inclusive_value(self):
        data = ChoiceDataset(
            2, (np.array([0, 1]),), np.array([1]), (np.array([[0.0], [1.0]]),)
        )
        nests = NestPartition(np.array([0, 0]), np.array([0.5]))
        iv = nl_inclusive_values(np.array([1.0]), nests, data, 0)
        assert set(iv) == {0}
        # log(e^0 + e^2) for scaled utilities (0, 1)/0.5
        assert_allclose(iv[0], 2.1269280110429727, atol=1e-12)

    def test_uniform_attributes_give_uniform_probs(self):
        rng = np.random.default_rng(3)
        for m in (2, 3, 7):
            attrs = np.tile(rng.normal(size=(1, 2)), (m, 1))
            data = ChoiceDataset(
                m, (np.arange(m),), np.array([m - 1]), (attrs,)
            )
            beta = rng.normal(size=2)
            rep = mnl_log_likelihood(beta, data)
            assert_allclose(rep.value, -math.log(m), rtol=1e-12)

    def test_singleton_offer_sets_score_zero(self):
        data = ChoiceDataset(
            4,
            (np.array([2]), np.array([0])),
            np.array([2, 0]),
            (np.array([[3.0, -1.0]]), np.array([[0.5, 2.0]])),
        )
        beta = np.array([1.2, -0.7])
        assert mnl_log_likelihood(beta, data).value == 0.0
        nests = NestPartition(np.array([0, 0, 1, 1]), np.array([0.4, 0.7]))
        assert_allclose(nl_log_likelihood(beta, nests, data).value, 0.0, atol=1e-12)

    def test_symmetric_nests_halve(self):
        """Two identical singleton-nest alternatives split probability evenly."""
        data = ChoiceDataset(
            2,
            (np.array([0, 1]),),
            np.array([0]),
            (np.array([[1.5], [1.5]]),),
        )
        for lam in (0.3, 0.8, 1.0):
            nests = NestPartition(np.array([0, 1]), np.array([lam, lam]))
            rep = nl_log_likelihood(np.array([2.0]), nests, data)
            assert_allclose(rep.value, math.log(0.5), rtol=1e-12)


class TestReductions:
    def test_nl_with_unit_scales_is_mnl(self, rng):
        for _ in range(100):
            data = random_dataset(rng, m=6, p=2, n_obs=5)
            nests = random_partition(rng, 6)
            beta = rng.normal(size=2)
            ones = np.ones(nests.num_nests)
            a = nl_log_likelihood(beta, nests, data, lambdas=ones)
            b = mnl_log_likelihood(beta, data)
            assert_allclose(a.value, b.value, atol=1e-10)
            assert_allclose(a.per_observation, b.per_observation, atol=1e-10)
            assert_allclose(a.gradient_beta, b.gradient_beta, atol=1e-9)

    def test_depth3_taxonomy_matches_flat_nests(self, rng):
        for _ in range(100):
            m = int(rng.integers(4, 9))
            data = random_dataset(rng, m=m, p=2, n_obs=6)
            nests = random_partition(rng, m)
            tree = nl_as_depth3_tree(nests)
            beta = rng.normal(size=2)
            a = tnl_log_likelihood(beta, tree, data)
            b = nl_log_likelihood(beta, nests, data)
            assert_allclose(a.value, b.value, atol=1e-10)
            assert_allclose(a.per_observation, b.per_observation, atol=1e-10)
            assert_allclose(a.gradient_beta, b.gradient_beta, atol=1e-9)
            # Tree lambda-gradient at the nest nodes equals the flat one;
            # internal_nodes order is [root, nest nodes...].
            assert_allclose(a.gradient_lambda[1:], b.gradient_lambda, atol=1e-9)

    def test_degenerate_depth2_taxonomy_is_mnl(self, rng):
        m = 5
        parent = np.concatenate([[-1], np.zeros(m, dtype=np.int64)])
        tree = TaxonomyTree(parent, 1 + np.arange(m), np.ones(m + 1))
        for _ in range(20):
            data = random_dataset(rng, m=m, p=3, n_obs=4)
            beta = rng.normal(size=3)
            a = tnl_log_likelihood(beta, tree, data)
            b = mnl_log_likelihood(beta, data)
            assert_allclose(a.value, b.value, atol=1e-10)
            assert_allclose(a.gradient_beta, b.gradient_beta, atol=1e-9)

    def test_unit_scale_taxonomy_is_mnl(self, rng):
        for _ in range(20):
            data = random_dataset(rng, m=8, p=2, n_obs=5)
            tree = random_tree(rng, 8)
            ones = np.ones(tree.num_nodes)
            beta = rng.normal(size=2)
            a = tnl_log_likelihood(beta, tree, data, lambdas=ones)
            b = mnl_log_likelihood(beta, data)
            assert_allclose(a.value, b.value, atol=1e-10)


class TestInvariances:
    def test_probabilities_normalize(self, rng):
        for _ in range(25):
            data = random_dataset(rng, m=7, p=2, n_obs=6)
            nests = random_partition(rng, 7)
            beta = rng.normal(size=2)
            for n in range(data.num_observations):
                pm = mnl_choice_probs(beta, data, n)
                pn = nl_choice_probs(beta, nests, data, n)
                assert_allclose(pm.sum(), 1.0, rtol=1e-12)
                assert_allclose(pn.sum(), 1.0, rtol=1e-12)
                assert np.all(pm > 0) and np.all(pn > 0)

    def test_choice_probs_agree_with_likelihood(self, rng):
        data = random_dataset(rng, m=6, p=2, n_obs=10)
        nests = random_partition(rng, 6)
        beta = rng.normal(size=2)
        rep = nl_log_likelihood(beta, nests, data)
        for n in range(data.num_observations):
            pn = nl_choice_probs(beta, nests, data, n)
            assert_allclose(math.log(pn[data.chosen_pos[n]]), rep.per_observation[n], atol=1e-10)

    def test_tnl_probabilities_normalize(self, rng):
        """exp(per-observation value) sums to one over who-was-chosen."""
        for _ in range(5):
            m = 6
            tree = random_tree(rng, m)
            s = np.sort(rng.choice(m, size=4, replace=False))
            attrs = rng.normal(size=(4, 2))
            beta = rng.normal(size=2)
            total = 0.0
            for pos in range(4):
                data = ChoiceDataset(m, (s,), np.array([s[pos]]), (attrs,))
                total += math.exp(tnl_log_likelihood(beta, tree, data).value)
            assert_allclose(total, 1.0, rtol=1e-10)

    def test_common_utility_shift_cancels(self, rng):
        """Adding one attribute row to every alternative of an observation is a no-op."""
        for _ in range(10):
            data = random_dataset(rng, m=6, p=2, n_obs=4)
            shift = rng.normal(size=2)
            shifted = ChoiceDataset(
                data.num_alternatives,
                data.offered,
                data.chosen,
                tuple(a + shift for a in data.attributes),
            )
            nests = random_partition(rng, 6)
            tree = random_tree(rng, 6)
            beta = rng.normal(size=2)
            for f in (
                lambda d: mnl_log_likelihood(beta, d).value,
                lambda d: nl_log_likelihood(beta, nests, d).value,
                lambda d: tnl_log_likelihood(beta, tree, d).value,
            ):
                assert_allclose(f(shifted), f(data), rtol=1e-9, atol=1e-9)

    def test_mnl_concavity_witness(self, rng):
        data = random_dataset(rng, m=5, p=3, n_obs=8)
        for _ in range(30):
            b1 = rng.normal(size=3)
            b2 = rng.normal(size=3)
            mid = mnl_log_likelihood(0.5 * (b1 + b2), data).value
            avg = 0.5 * (
                mnl_log_likelihood(b1, data).value + mnl_log_likelihood(b2, data).value
            )
            assert mid >= avg - 1e-10


class TestGradients:
    """Analytic gradients against the central-difference oracle."""

    @staticmethod
    def _relcheck(analytic, numeric, tol=1e-6):
        scale = 1.0 + np.abs(numeric)
        assert np.max(np.abs(analytic - numeric) / scale) < tol

    def test_mnl_gradient(self, rng):
        for _ in range(30):
            data = random_dataset(rng, m=6, p=3, n_obs=5)
            beta = rng.normal(size=3)
            rep = mnl_log_likelihood(beta, data)
            fd = finite_difference_gradient(
                lambda b: mnl_log_likelihood(b, data).value, beta
            )
            self._relcheck(rep.gradient_beta, fd)

    def test_nl_gradients(self, rng):
        for _ in range(30):
            data = random_dataset(rng, m=6, p=2, n_obs=5)
            nests = random_partition(rng, 6)
            beta = rng.normal(size=2)
            rep = nl_log_likelihood(beta, nests, data)
            fd_b = finite_difference_gradient(
                lambda b: nl_log_likelihood(b, nests, data).value, beta
            )
            fd_l = finite_difference_gradient(
                lambda l: nl_log_likelihood(beta, nests, data, lambdas=l).value,
                nests.lambdas,
            )
            self._relcheck(rep.gradient_beta, fd_b)
            self._relcheck(rep.gradient_lambda, fd_l)

    def test_tnl_gradients(self, rng):
        for _ in range(15):
            m = int(rng.integers(4, 9))
            data = random_dataset(rng, m=m, p=2, n_obs=5)
            tree = random_tree(rng, m)
            beta = rng.normal(size=2)
            rep = tnl_log_likelihood(beta, tree, data)
            fd_b = finite_difference_gradient(
                lambda b: tnl_log_likelihood(b, tree, data).value, beta
            )
            self._relcheck(rep.gradient_beta, fd_b)
            internal = tree.internal_nodes

            def with_internal(lq):
                full = tree.lambdas.copy()
                full[internal] = lq
                return tnl_log_likelihood(beta, tree, data, lambdas=full).value

            fd_l = finite_difference_gradient(with_internal, tree.lambdas[internal])
            self._relcheck(rep.gradient_lambda, fd_l)

    def test_fd_oracle_on_quadratic(self):
        # the oracle itself: exact for quadratics up to roundoff
        H = np.array([[2.0, 0.5], [0.5, 1.0]])
        f = lambda x: 0.5 * x @ H @ x
        x = np.array([0.3, -1.2])
        assert_allclose(finite_difference_gradient(f, x), H @ x, atol=1e-9)


class TestValueFunctions:
    def test_active_subtree_only(self, rng):
        m = 6
        tree = random_tree(rng, m)
        data = ChoiceDataset(
            m, (np.array([0]),), np.array([0]), (np.array([[1.0, 0.0]]),)
        )
        vals = tnl_value_functions(np.array([1.0, 1.0]), tree, data, 0)
        leaf = int(tree.leaf_alt[0])
        path = tree.path_to_root(leaf)
        assert set(vals) == set(path)
        assert_allclose(vals[leaf], 1.0, atol=1e-12)
        # With one active child everywhere, values telescope exactly.
        for hi, lo in zip(path[:-1], path[1:]):
            expect = (tree.lambdas[lo] / tree.lambdas[hi]) * vals[lo]
            assert_allclose(vals[hi], expect, rtol=1e-12)

    def test_root_value_matches_lse_when_flat(self):
        m = 3
        parent = np.concatenate([[-1], np.zeros(m, dtype=np.int64)])
        tree = TaxonomyTree(parent, 1 + np.arange(m), np.ones(m + 1))
        attrs = np.array([[0.0], [1.0], [2.0]])
        data = ChoiceDataset(m, (np.arange(m),), np.array([0]), (attrs,))
        vals = tnl_value_functions(np.array([1.0]), tree, data, 0)
        assert_allclose(vals[0], np.logaddexp.reduce([0.0, 1.0, 2.0]), rtol=1e-12)


class TestValidation:
    def test_chosen_must_be_offered(self):
        with pytest.raises(InvalidInputError):
            ChoiceDataset(3, (np.array([0, 1]),), np.array([2]), (np.zeros((2, 1)),))

    def test_duplicate_offer_rejected(self):
        with pytest.raises(InvalidInputError):
            ChoiceDataset(3, (np.array([1, 1]),), np.array([1]), (np.zeros((2, 1)),))

    def test_attribute_shape_rejected(self):
        with pytest.raises(InvalidInputError):
            ChoiceDataset(3, (np.array([0, 1]),), np.array([0]), (np.zeros((3, 1)),))

    def test_nest_scale_range(self):
        with pytest.raises(InvalidInputError):
            NestPartition(np.array([0, 1]), np.array([0.5, 1.5]))
        with pytest.raises(InvalidInputError):
            NestPartition(np.array([0, 1]), np.array([0.5, 0.0]))

    def test_empty_nest_rejected(self):
        with pytest.raises(InvalidInputError):
            NestPartition(np.array([0, 0]), np.array([0.5, 0.5]))

    def test_tree_scale_ordering_enforced(self):
        # root -> a -> b -> leaf with lambda increasing a->b must be rejected
        parent = np.array([-1, 0, 1, 2])
        leaf_alt = np.array([3])
        with pytest.raises(InvalidInputError):
            TaxonomyTree(parent, leaf_alt, np.array([1.0, 0.4, 0.6, 1.0]))
        TaxonomyTree(parent, leaf_alt, np.array([1.0, 0.6, 0.4, 1.0]))

    def test_tree_leaf_depths_must_agree(self):
        # root with one leaf child and one internal child holding a leaf
        parent = np.array([-1, 0, 0, 2])
        with pytest.raises(InvalidInputError):
            TaxonomyTree(parent, np.array([1, 3]), np.ones(4))

    def test_tree_root_and_leaf_scales_pinned(self):
        parent = np.array([-1, 0, 1, 1])
        with pytest.raises(InvalidInputError):
            TaxonomyTree(parent, np.array([2, 3]), np.array([0.9, 0.5, 1.0, 1.0]))
        with pytest.raises(InvalidInputError):
            TaxonomyTree(parent, np.array([2, 3]), np.array([1.0, 0.5, 0.9, 1.0]))

    def test_beta_length_checked(self):
        data = two_alt_dataset()
        with pytest.raises(InvalidInputError):
            mnl_log_likelihood(np.array([1.0, 2.0]), data)
