"""Estimator tests: fixed fits, alternating joint fits, and the quasi-Newton baseline."""
import math

import numpy as np
import pytest
from numpy.testing import assert_allclose

from conelogit.data import ChoiceDataset, InvalidInputError, NestPartition
from conelogit.estimate import (
    EstimationResult,
    TwoStageConfig,
    _ChainScales,
    fit_baseline_quasi_newton,
    fit_mnl,
    fit_nl_fixed_lambda,
    fit_nl_joint,
    fit_tnl_fixed_lambda,
    fit_tnl_joint,
)
from conelogit.likelihood import (
    finite_difference_gradient,
    mnl_choice_probs,
    nl_choice_probs,
    nl_log_likelihood,
    tnl_log_likelihood,
)
from conelogit.likelihood import _TNLWork
from conelogit.solver import SolverConfig

from conftest import random_dataset, random_partition, random_tree


def two_alt_dataset(reps=1):
    offered = tuple(np.array([0, 1]) for _ in range(2 * reps))
    chosen = np.array([0, 1] * reps)
    attrs = tuple(np.array([[0.0], [1.0]]) for _ in range(2 * reps))
    return ChoiceDataset(2, offered, chosen, attrs)


def singleton_dataset(n_obs=4, p=2):
    offered = tuple(np.array([0]) for _ in range(n_obs))
    attrs = tuple(np.ones((1, p)) for _ in range(n_obs))
    return ChoiceDataset(1, offered, np.zeros(n_obs, dtype=np.int64), attrs)


def model_sampled_dataset(seed, beta, m, n_obs, membership=None, lam=None):
    """Dataset whose choices are drawn from the model's own probabilities.

    With ``membership`` given the sampler uses nested-logit probabilities at
    scales ``lam``; otherwise plain logit.  Offer sets are random subsets of
    size >= 2 so every observation carries information.
    """
    rng = np.random.default_rng(seed)
    beta = np.asarray(beta, dtype=float)
    offered, attrs = [], []
    for _ in range(n_obs):
        size = rng.integers(2, m + 1)
        s = np.sort(rng.choice(m, size=size, replace=False))
        offered.append(s)
        attrs.append(rng.normal(size=(s.size, beta.size)))
    placeholder = np.array([s[0] for s in offered])
    dummy = ChoiceDataset(m, tuple(offered), placeholder, tuple(attrs))
    chosen = np.empty(n_obs, dtype=np.int64)
    nests = None if membership is None else NestPartition(membership, lam)
    for n in range(n_obs):
        if nests is None:
            pr = mnl_choice_probs(beta, dummy, n)
        else:
            pr = nl_choice_probs(beta, nests, dummy, n)
        chosen[n] = offered[n][rng.choice(offered[n].size, p=pr / pr.sum())]
    data = ChoiceDataset(m, tuple(offered), chosen, tuple(attrs))
    return (data, nests) if nests is not None else data


def monotone(trace, slack=1e-8):
    return all(trace[i + 1] >= trace[i] - slack for i in range(len(trace) - 1))


class TestFixedFits:
    def test_all_singleton_convention(self):
        res = fit_mnl(singleton_dataset())
        assert res.status == "Converged"
        assert res.loglik == 0.0
        assert res.inner_solves == 0
        assert_allclose(res.beta, np.zeros(2))
        assert res.trace == (0.0,)

    def test_two_observation_grid_oracle(self):
        # closed-form objective beta - 2*log(1 + e^beta) scanned on a fine grid
        data = two_alt_dataset()
        grid = np.arange(-5.0, 5.0 + 1e-9, 1e-3)
        values = grid - 2.0 * np.logaddexp(0.0, grid)
        res = fit_mnl(data)
        assert res.status == "Converged"
        assert abs(res.beta[0] - grid[np.argmax(values)]) <= 2e-3
        assert abs(res.loglik - values.max()) <= 1e-3

    def test_nl_unit_scales_matches_mnl(self, rng):
        data = random_dataset(rng, m=6, p=2, n_obs=20)
        nests = random_partition(rng, 6, num_nests=2)
        tight = SolverConfig(tol=1e-9)
        plain = fit_mnl(data, solver=tight)
        nested = fit_nl_fixed_lambda(data, nests, np.ones(2), solver=tight)
        assert_allclose(nested.beta, plain.beta, atol=1e-5)
        assert abs(nested.loglik - plain.loglik) <= 1e-6 * abs(plain.loglik)

    def test_symmetric_two_nest_halves(self):
        # two identical alternatives in separate nests: every choice has
        # probability one half regardless of the scales
        offered = tuple(np.array([0, 1]) for _ in range(4))
        attrs = tuple(np.zeros((2, 1)) for _ in range(4))
        data = ChoiceDataset(2, offered, np.array([0, 1, 0, 1]), attrs)
        nests = NestPartition(np.array([0, 1]), np.array([0.6, 0.6]))
        res = fit_nl_fixed_lambda(data, nests)
        assert res.status == "Converged"
        assert abs(res.loglik - 4 * math.log(0.5)) <= 1e-6

    def test_loglik_matches_model_core(self, rng):
        data = random_dataset(rng, m=6, p=2, n_obs=12)
        nests = random_partition(rng, 6, num_nests=2)
        tree = random_tree(rng, 6)

        rn = fit_nl_fixed_lambda(data, nests)
        direct = nl_log_likelihood(rn.beta, nests, data).value
        assert abs(rn.loglik - direct) <= 1e-9 * max(1.0, abs(direct))
        assert rn.detail["audit"]["objective_rel_err"] <= 1e-6

        rt = fit_tnl_fixed_lambda(data, tree)
        direct_t = tnl_log_likelihood(rt.beta, tree, data).value
        assert abs(rt.loglik - direct_t) <= 1e-9 * max(1.0, abs(direct_t))
        assert rt.detail["audit"]["objective_rel_err"] <= 1e-6

    def test_fixed_fits_dominate_baseline(self, rng):
        for _ in range(2):
            data = random_dataset(rng, m=6, p=2, n_obs=15)
            nests = random_partition(rng, 6, num_nests=2)
            tree = random_tree(rng, 6)
            conic = fit_nl_fixed_lambda(data, nests)
            base = fit_baseline_quasi_newton("nl-fixed", data, nests)
            assert conic.loglik >= base.loglik - 1e-6
            conic_t = fit_tnl_fixed_lambda(data, tree)
            base_t = fit_baseline_quasi_newton("tnl-fixed", data, tree)
            assert conic_t.loglik >= base_t.loglik - 1e-6

    def test_reports_lambdas_used(self, rng):
        data = random_dataset(rng, m=5, p=2, n_obs=8)
        nests = random_partition(rng, 5, num_nests=2)
        res = fit_nl_fixed_lambda(data, nests, np.array([0.5, 0.8]))
        assert_allclose(res.lambdas, [0.5, 0.8])
        tree = random_tree(rng, 5)
        res_t = fit_tnl_fixed_lambda(data, tree)
        assert_allclose(res_t.lambdas, tree.lambdas)


class TestStatusPaths:
    def test_iteration_limit_maps_to_iterlimit(self, rng):
        data = random_dataset(rng, m=6, p=2, n_obs=10)
        res = fit_mnl(data, solver=SolverConfig(max_iters=2))
        assert res.status == "IterLimit"
        assert math.isnan(res.loglik)
        assert np.all(np.isnan(res.beta))
        assert res.trace == ()
        assert res.detail["solver_status"] == "IterationLimit"
        assert "solver_residuals" in res.detail

    def test_joint_inner_failure_reports_failed(self, rng):
        data = random_dataset(rng, m=6, p=2, n_obs=10)
        nests = random_partition(rng, 6, num_nests=2)
        res = fit_nl_joint(data, nests, solver=SolverConfig(max_iters=2))
        assert res.status == "Failed"
        assert res.detail["inner_failure"]["solver_status"] == "IterationLimit"
        assert res.trace == ()

    def test_zero_time_limit_returns_timelimit(self, rng):
        data = random_dataset(rng, m=6, p=2, n_obs=10)
        nests = random_partition(rng, 6, num_nests=2)
        res = fit_nl_joint(data, nests, TwoStageConfig(time_limit_secs=0.0))
        assert res.status == "TimeLimit"
        assert res.inner_solves == 0
        assert res.trace == ()

    def test_outer_iteration_cap(self, rng):
        data = random_dataset(rng, m=6, p=2, n_obs=10)
        nests = random_partition(rng, 6, num_nests=2)
        res = fit_nl_joint(data, nests, TwoStageConfig(max_outer_iters=1))
        assert res.status == "IterLimit"
        assert res.outer_iters == 1
        assert res.inner_solves == 1
        assert res.loglik == res.trace[0]


class TestJointAlternation:
    def test_traces_monotone_and_best_reported(self, rng):
        for trial in range(3):
            data = random_dataset(rng, m=6, p=2, n_obs=12)
            nests = random_partition(rng, 6, num_nests=2)
            tree = random_tree(rng, 6)
            for res in (fit_nl_joint(data, nests), fit_tnl_joint(data, tree)):
                assert res.status == "Converged"
                assert monotone(res.trace)
                assert res.loglik == max(res.trace)
                assert res.outer_iters == len(res.trace)
                assert res.inner_solves == len(res.trace)
                assert len(res.detail["outer_lambda_evals"]) == res.outer_iters - 1

    def test_upper_start_dominates_unit_scale_fit(self, rng):
        data = random_dataset(rng, m=6, p=2, n_obs=15)
        nests = random_partition(rng, 6, num_nests=2)
        fixed = fit_nl_fixed_lambda(data, nests, np.ones(2))
        joint = fit_nl_joint(data, nests, TwoStageConfig(lambda_init_rule="upper"))
        assert joint.loglik >= fixed.loglik - 1e-6

        tree = random_tree(rng, 6)
        unit = tree.with_lambdas(np.ones(tree.num_nodes))
        fixed_t = fit_tnl_fixed_lambda(data, unit)
        joint_t = fit_tnl_joint(data, unit, TwoStageConfig(lambda_init_rule="upper"))
        assert joint_t.loglik >= fixed_t.loglik - 1e-6

    def test_boundary_truth_midpoint_start(self):
        # choices sampled from a plain-logit model: the true scales sit at 1
        data = model_sampled_dataset(404, np.array([0.9, -0.6]), 5, 40)
        nests = NestPartition(np.array([0, 0, 1, 1, 1]), np.array([1.0, 1.0]))
        fixed = fit_nl_fixed_lambda(data, nests, np.ones(2))
        joint = fit_nl_joint(data, nests)
        assert joint.status == "Converged"
        assert joint.loglik >= fixed.loglik - 1e-6

    def test_grid_oracle_bound(self):
        # brute-force scale grid as the oracle; the alternation must match
        # or beat the best grid cell
        data, nests = model_sampled_dataset(
            1105, np.array([1.0, -0.8]), 5, 24,
            membership=np.array([0, 0, 1, 1, 1]), lam=np.array([0.35, 0.45]),
        )
        grid = np.round(np.arange(0.1, 1.05, 0.1), 10)
        best = -np.inf
        for a in grid:
            for b in grid:
                r = fit_nl_fixed_lambda(data, nests, np.array([a, b]))
                assert r.status == "Converged"
                best = max(best, r.loglik)
        joint = fit_nl_joint(data, nests)
        assert joint.status == "Converged"
        assert joint.loglik >= best - 1e-4

    def test_degenerate_bounds_pin_scales_to_mnl(self, rng):
        data = random_dataset(rng, m=6, p=2, n_obs=15)
        nests = random_partition(rng, 6, num_nests=2)
        joint = fit_nl_joint(data, nests, TwoStageConfig(lambda_bounds=(1.0, 1.0)))
        plain = fit_mnl(data)
        assert_allclose(joint.lambdas, np.ones(2))
        assert abs(joint.loglik - plain.loglik) <= 1e-6 * max(1.0, abs(plain.loglik))

    def test_bitwise_deterministic(self, rng):
        data = random_dataset(rng, m=6, p=2, n_obs=12)
        nests = random_partition(rng, 6, num_nests=2)
        tree = random_tree(rng, 6)
        a1, a2 = fit_nl_joint(data, nests), fit_nl_joint(data, nests)
        assert a1.trace == a2.trace
        assert np.array_equal(a1.beta, a2.beta)
        assert np.array_equal(a1.lambdas, a2.lambdas)
        b1, b2 = fit_tnl_joint(data, tree), fit_tnl_joint(data, tree)
        assert b1.trace == b2.trace
        assert np.array_equal(b1.beta, b2.beta)
        assert np.array_equal(b1.lambdas, b2.lambdas)

    def test_inner_solutions_solver_config_invariant(self, rng):
        # the inner subproblem is convex, so different interior-point
        # trajectories must land on the same optimal value
        data = random_dataset(rng, m=6, p=2, n_obs=12)
        nests = random_partition(rng, 6, num_nests=2)
        lam = np.array([0.55, 0.7])
        reference = fit_nl_fixed_lambda(data, nests, lam)
        for variant in (
            SolverConfig(step_fraction=0.93, sigma_max=0.7),
            SolverConfig(refine_rounds=3, neighborhood=4.0),
        ):
            other = fit_nl_fixed_lambda(data, nests, lam, solver=variant)
            assert abs(other.loglik - reference.loglik) <= 1e-7

    def test_sqp_outer_variant_agrees_on_flat_nests(self, rng):
        # both outer methods optimize over the same box for a flat partition,
        # so they must land on the same value; trees are checked separately
        # because the default method boxes the chain multipliers while the
        # SQP method boxes the scales themselves (different feasible sets
        # whenever the optimum pins a lower bound)
        data = random_dataset(rng, m=6, p=2, n_obs=12)
        nests = random_partition(rng, 6, num_nests=2)
        proj = fit_nl_joint(data, nests)
        sqp = fit_nl_joint(data, nests, TwoStageConfig(outer_method="sqp-style-constrained"))
        assert sqp.status == "Converged"
        assert monotone(sqp.trace)
        assert abs(sqp.loglik - proj.loglik) <= 1e-4

    def test_sqp_outer_variant_on_tree(self, rng):
        data = random_dataset(rng, m=6, p=2, n_obs=12)
        tree = random_tree(rng, 6)
        lo, hi = 0.3, 1.0
        res = fit_tnl_joint(
            data, tree,
            TwoStageConfig(outer_method="sqp-style-constrained", lambda_bounds=(lo, hi)),
        )
        assert res.status == "Converged"
        assert monotone(res.trace)
        tree.with_lambdas(res.lambdas)  # ordering held
        free = [int(k) for k in tree.internal_nodes if k != tree.root]
        assert np.all(res.lambdas[free] >= lo - 1e-8)
        assert np.all(res.lambdas[free] <= hi + 1e-8)

    def test_tree_scales_stay_admissible(self, rng):
        data = random_dataset(rng, m=6, p=2, n_obs=12)
        tree = random_tree(rng, 6)
        for cfg in (TwoStageConfig(), TwoStageConfig(outer_method="sqp-style-constrained")):
            res = fit_tnl_joint(data, tree, cfg)
            tree.with_lambdas(res.lambdas)  # raises if the ordering broke
            assert res.lambdas[tree.root] == 1.0
            assert np.all(res.lambdas[tree.is_leaf] == 1.0)


class TestEnvelopeGradient:
    def test_matches_value_function_differences(self, rng):
        data = random_dataset(rng, m=5, p=2, n_obs=12)
        nests = random_partition(rng, 5, num_nests=2)
        lam = np.array([0.55, 0.7])
        tight = SolverConfig(tol=1e-9)

        center = fit_nl_fixed_lambda(data, nests, lam, solver=tight)
        analytic = nl_log_likelihood(center.beta, nests, data, lambdas=lam).gradient_lambda

        h = 1e-4
        fd = np.empty(2)
        for i in range(2):
            step = np.zeros(2)
            step[i] = h
            hi = fit_nl_fixed_lambda(data, nests, lam + step, solver=tight)
            lo = fit_nl_fixed_lambda(data, nests, lam - step, solver=tight)
            fd[i] = (hi.loglik - lo.loglik) / (2 * h)
        assert np.all(np.abs(analytic - fd) <= 1e-4 * np.maximum(1.0, np.abs(analytic)))


class TestChainScales:
    def test_roundtrip_and_ordering(self, rng):
        tree = random_tree(rng, 6)
        scales = _ChainScales(tree)
        theta = rng.uniform(0.3, 1.0, size=scales.count)
        lam = scales.lambdas_from(theta)
        tree.with_lambdas(lam)  # admissible by construction
        assert_allclose(scales.theta_from(lam), theta, rtol=1e-12)

    def test_gradient_chain_rule(self, rng):
        data = random_dataset(rng, m=6, p=2, n_obs=10)
        tree = random_tree(rng, 6)
        work = _TNLWork(data, tree)
        scales = _ChainScales(tree)
        beta = rng.normal(size=2)
        theta = rng.uniform(0.4, 0.95, size=scales.count)

        def value(th):
            lam = scales.lambdas_from(th)
            return work.loglik(beta, lam, want_grad_beta=False, want_grad_lambda=False).value

        lam = scales.lambdas_from(theta)
        rep = work.loglik(beta, lam, want_grad_beta=False, want_grad_lambda=True)
        analytic = scales.gradient_to_theta(rep.gradient_lambda, lam, theta)
        fd = finite_difference_gradient(value, theta, h=1e-6)
        assert_allclose(analytic, fd, rtol=1e-5, atol=1e-8)


class TestBaseline:
    def test_mnl_matches_conic(self, rng):
        for data in (two_alt_dataset(), random_dataset(rng, m=6, p=2, n_obs=20)):
            conic = fit_mnl(data)
            base = fit_baseline_quasi_newton("mnl", data)
            assert base.status == "Converged"
            assert abs(base.loglik - conic.loglik) <= 1e-5
            assert_allclose(base.beta, conic.beta, atol=1e-3)

    def test_all_singleton_converges_immediately(self):
        res = fit_baseline_quasi_newton("mnl", singleton_dataset())
        assert res.status == "Converged"
        assert res.outer_iters == 0
        assert res.loglik == 0.0
        assert res.trace == (0.0,)

    def test_warm_start_plumbing(self, rng):
        data = random_dataset(rng, m=6, p=2, n_obs=20)
        cold = fit_baseline_quasi_newton("mnl", data)
        warm = fit_baseline_quasi_newton("mnl", data, beta0=cold.beta)
        assert warm.outer_iters <= 2
        assert abs(warm.loglik - cold.loglik) <= 1e-8 * max(1.0, abs(cold.loglik))

    def test_joint_respects_bounds_and_ordering(self, rng):
        data = random_dataset(rng, m=6, p=2, n_obs=15)
        nests = random_partition(rng, 6, num_nests=2)
        cfg = TwoStageConfig(lambda_bounds=(0.2, 0.9))
        res = fit_baseline_quasi_newton("nl-joint", data, nests, config=cfg)
        assert np.all(res.lambdas >= 0.2 - 1e-12)
        assert np.all(res.lambdas <= 0.9 + 1e-12)

        tree = random_tree(rng, 6)
        for method in ("projected-quasi-newton", "sqp-style-constrained"):
            tcfg = TwoStageConfig(outer_method=method)
            res_t = fit_baseline_quasi_newton("tnl-joint", data, tree, config=tcfg)
            tree.with_lambdas(res_t.lambdas)  # ordering must survive
            assert res_t.lambdas[tree.root] == 1.0

    def test_joint_alternation_dominates_baseline(self, rng):
        for trial in range(2):
            data = random_dataset(rng, m=6, p=2, n_obs=15)
            nests = random_partition(rng, 6, num_nests=2)
            joint = fit_nl_joint(data, nests)
            base = fit_baseline_quasi_newton("nl-joint", data, nests)
            assert joint.loglik >= base.loglik - 1e-6

    def test_iteration_cap_maps_to_iterlimit(self, rng):
        data = random_dataset(rng, m=6, p=2, n_obs=20)
        res = fit_baseline_quasi_newton("mnl", data, options={"maxiter": 1})
        assert res.status == "IterLimit"
        assert np.isfinite(res.loglik)

    def test_zero_time_limit_maps_to_timelimit(self, rng):
        data = random_dataset(rng, m=6, p=2, n_obs=20)
        res = fit_baseline_quasi_newton("mnl", data, config=TwoStageConfig(time_limit_secs=0.0))
        assert res.status == "TimeLimit"
        assert np.isfinite(res.loglik)

    def test_trace_monotone_best_so_far(self, rng):
        data = random_dataset(rng, m=6, p=2, n_obs=20)
        nests = random_partition(rng, 6, num_nests=2)
        res = fit_baseline_quasi_newton("nl-joint", data, nests)
        assert monotone(res.trace, slack=0.0)
        assert res.trace[-1] == res.loglik

    def test_input_validation(self, rng):
        data = random_dataset(rng, m=6, p=2, n_obs=8)
        nests = random_partition(rng, 6, num_nests=2)
        with pytest.raises(InvalidInputError):
            fit_baseline_quasi_newton("probit", data)
        with pytest.raises(InvalidInputError):
            fit_baseline_quasi_newton("nl-fixed", data)  # missing structure
        with pytest.raises(InvalidInputError):
            fit_baseline_quasi_newton("mnl", data, beta0=np.zeros(3))
        with pytest.raises(InvalidInputError):
            fit_baseline_quasi_newton("tnl-fixed", data, nests)


class TestConfigValidation:
    def test_rejects_bad_fields(self):
        with pytest.raises(InvalidInputError):
            TwoStageConfig(mle_increment_tol=0.0)
        with pytest.raises(InvalidInputError):
            TwoStageConfig(time_limit_secs=-1.0)
        with pytest.raises(InvalidInputError):
            TwoStageConfig(lambda_init_rule="random")
        with pytest.raises(InvalidInputError):
            TwoStageConfig(lambda_init_rule="custom")
        with pytest.raises(InvalidInputError):
            TwoStageConfig(outer_method="newton")
        with pytest.raises(InvalidInputError):
            TwoStageConfig(max_outer_iters=0)

    def test_rejects_bad_bounds(self, rng):
        data = random_dataset(rng, m=6, p=2, n_obs=8)
        nests = random_partition(rng, 6, num_nests=2)
        for bounds in ((0.0, 1.0), (0.2, 1.2), (0.8, 0.2), ((0.1, 0.9),) * 5):
            with pytest.raises(InvalidInputError):
                fit_nl_joint(data, nests, TwoStageConfig(lambda_bounds=bounds))

    def test_custom_init_validation(self, rng):
        data = random_dataset(rng, m=6, p=2, n_obs=8)
        nests = random_partition(rng, 6, num_nests=2)
        good = TwoStageConfig(lambda_init_rule="custom", lambda_init=(0.4, 0.6))
        res = fit_nl_joint(data, nests, good)
        assert res.status == "Converged"
        bad = TwoStageConfig(lambda_init_rule="custom", lambda_init=(0.4, 1.5))
        with pytest.raises(InvalidInputError):
            fit_nl_joint(data, nests, bad)

    def test_custom_tree_init_is_node_scales(self, rng):
        data = random_dataset(rng, m=6, p=2, n_obs=8)
        tree = random_tree(rng, 6)
        cfg = TwoStageConfig(lambda_init_rule="custom", lambda_init=tuple(tree.lambdas))
        res = fit_tnl_joint(data, tree, cfg)
        assert res.status == "Converged"
        ragged = np.ones(tree.num_nodes)
        ragged[1] = 0.5
        ragged[4] = 0.8  # child above its parent: inadmissible
        bad = TwoStageConfig(lambda_init_rule="custom", lambda_init=tuple(ragged))
        with pytest.raises(InvalidInputError):
            fit_tnl_joint(data, tree, bad)
