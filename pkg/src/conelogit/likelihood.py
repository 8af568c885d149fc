"""Choice probabilities, log-likelihoods, and analytic gradients.

Three model families share one flat data layout (see ``ChoiceDataset``):

* multinomial logit (MNL): softmax over each offer set;
* nested logit (NL): a two-level model where alternatives in the same nest
  share a scale parameter ``lambda_l`` in (0, 1];
* tree-nested logit (TNL): a fixed-depth hierarchy where every internal node
  ``k`` carries a scale ``lambda_k`` and the choice probability is the product
  of conditional logits along the root-to-leaf path.

Everything is computed in log-space with max-subtraction, so utilities may be
scaled arbitrarily during optimization without overflow.  Scale parameters
are clamped to ``>= LAMBDA_FLOOR`` on entry as defense in depth against the
``1/lambda`` terms; callers are expected to keep lambda within its bounds.

Gradients with respect to ``beta`` and the scale parameters are analytic and
are verified against ``finite_difference_gradient`` in the test suite before
anything downstream relies on them.  The heavy lifting is done by two small
"work" caches (:class:`_NLWork`, :class:`_TNLWork`) that pre-sort the flat
attribute rows by group; estimators reuse a single work object across many
evaluations.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.special import logsumexp

from .data import (
    ChoiceDataset,
    InvalidInputError,
    LogLikelihoodReport,
    NestPartition,
    TaxonomyTree,
)

__all__ = [
    "LAMBDA_FLOOR",
    "mnl_choice_probs",
    "mnl_log_likelihood",
    "nl_inclusive_values",
    "nl_log_likelihood",
    "nl_choice_probs",
    "tnl_value_functions",
    "tnl_log_likelihood",
    "finite_difference_gradient",
]

LAMBDA_FLOOR = 1e-4


def _check_beta(beta, p: int) -> np.ndarray:
    beta = np.asarray(beta, dtype=float).ravel()
    if beta.shape != (p,):
        raise InvalidInputError(f"beta must have length {p}, got {beta.shape}")
    if not np.all(np.isfinite(beta)):
        raise InvalidInputError("beta must be finite")
    return beta


def _clamp_lambda(lam) -> np.ndarray:
    lam = np.asarray(lam, dtype=float).ravel()
    if not np.all(np.isfinite(lam)):
        raise InvalidInputError("scale parameters must be finite")
    return np.maximum(lam, LAMBDA_FLOOR)


def _segment_lse(values: np.ndarray, starts: np.ndarray) -> np.ndarray:
    """Log-sum-exp over contiguous segments of ``values``.

    ``starts`` has one more entry than there are segments.  Empty segments are
    not allowed (the data layer guarantees |S_n| >= 1).
    """
    seg_max = np.maximum.reduceat(values, starts[:-1])
    seg_id = np.repeat(np.arange(len(starts) - 1), np.diff(starts))
    shifted = np.exp(values - seg_max[seg_id])
    sums = np.add.reduceat(shifted, starts[:-1])
    return seg_max + np.log(sums)


# ---------------------------------------------------------------------------
# MNL
# ---------------------------------------------------------------------------

def mnl_choice_probs(beta, data: ChoiceDataset, n: int) -> np.ndarray:
    """Softmax choice probabilities over observation ``n``'s offer set.

    Returns an array aligned with ``data.offered[n]``; entries are positive
    and sum to one.
    """
    beta = _check_beta(beta, data.num_attributes)
    if not 0 <= n < data.num_observations:
        raise InvalidInputError(f"observation index {n} out of range")
    u = data.attributes[n] @ beta
    u -= u.max()
    e = np.exp(u)
    return e / e.sum()


def mnl_log_likelihood(beta, data: ChoiceDataset) -> LogLikelihoodReport:
    """Log-likelihood of the multinomial logit model with its beta-gradient.

    value = sum_n [beta'a_{n,chosen} - log sum_{j in S_n} exp(beta'a_nj)].
    """
    beta = _check_beta(beta, data.num_attributes)
    X = data.flat_attributes
    u = X @ beta
    starts = data.starts
    lse = _segment_lse(u, starts)
    per_obs = u[data.chosen_flat] - lse

    # grad = sum_n (a_chosen - sum_j P_nj a_nj)
    probs = np.exp(u - lse[data.seg_id])
    grad = X[data.chosen_flat].sum(axis=0) - X.T @ probs
    return LogLikelihoodReport(
        value=float(per_obs.sum()),
        per_observation=per_obs,
        gradient_beta=grad,
    )


# ---------------------------------------------------------------------------
# NL
# ---------------------------------------------------------------------------

class _NLWork:
    """Pre-sorted layout of (observation, nest) groups for one dataset/partition.

    Rows of the flat attribute stack are re-ordered so that every active
    (n, l) pair is contiguous; ``pair_*`` arrays index those groups.  Build
    once, evaluate many times.
    """

    def __init__(self, data: ChoiceDataset, nests: NestPartition):
        if nests.num_alternatives != data.num_alternatives:
            raise InvalidInputError("partition and dataset disagree on m")
        self.data = data
        self.nests = nests
        nest_of_flat = nests.membership[data.flat_offered]
        order = np.lexsort((nest_of_flat, data.seg_id))
        self.order = order
        gn = data.seg_id[order]
        gl = nest_of_flat[order]
        Z = order.size
        is_new = np.ones(Z, dtype=bool)
        is_new[1:] = (gn[1:] != gn[:-1]) | (gl[1:] != gl[:-1])
        pair_first = np.flatnonzero(is_new)
        self.pair_starts = np.append(pair_first, Z)
        self.pair_obs = gn[pair_first]
        self.pair_nest = gl[pair_first]
        self.num_pairs = pair_first.size  # Lambda = total active nests
        pair_of_sorted = np.cumsum(is_new) - 1
        self.pair_of_sorted = pair_of_sorted
        inv = np.empty(Z, dtype=np.int64)
        inv[order] = np.arange(Z)
        self.sorted_pos_of_flat = inv
        self.chosen_pair = pair_of_sorted[inv[data.chosen_flat]]
        # Boundaries of each observation's run of pairs.
        self.obs_pair_starts = np.searchsorted(self.pair_obs, np.arange(data.num_observations + 1))
        self.X_sorted = data.flat_attributes[order]

    def active_counts(self) -> np.ndarray:
        return np.diff(self.obs_pair_starts)

    def loglik(
        self,
        beta,
        lambdas=None,
        want_grad_beta: bool = True,
        want_grad_lambda: bool = True,
    ) -> LogLikelihoodReport:
        data, nests = self.data, self.nests
        beta = _check_beta(beta, data.num_attributes)
        lam = _clamp_lambda(nests.lambdas if lambdas is None else lambdas)
        if lam.shape != nests.lambdas.shape:
            raise InvalidInputError("lambda override has wrong length")

        u_sorted = self.X_sorted @ beta
        lam_pair = lam[self.pair_nest]
        lam_sorted = lam_pair[self.pair_of_sorted]
        log_w = _segment_lse(u_sorted / lam_sorted, self.pair_starts)
        top = _segment_lse(lam_pair * log_w, self.obs_pair_starts)

        lam_chosen = lam_pair[self.chosen_pair]
        u_chosen = u_sorted[self.sorted_pos_of_flat[data.chosen_flat]]
        per_obs = (
            (lam_chosen - 1.0) * log_w[self.chosen_pair]
            + u_chosen / lam_chosen
            - top
        )

        grad_beta = None
        grad_lambda = None
        if want_grad_beta or want_grad_lambda:
            cond = np.exp(u_sorted / lam_sorted - log_w[self.pair_of_sorted])
            p_nest = np.exp(lam_pair * log_w - top[self.pair_obs])
        if want_grad_beta:
            chosen_coef = np.zeros(self.num_pairs)
            chosen_coef[self.chosen_pair] = (lam_chosen - 1.0) / lam_chosen
            w = cond * chosen_coef[self.pair_of_sorted] - cond * p_nest[self.pair_of_sorted]
            grad_beta = self.X_sorted.T @ w
            grad_beta += (
                data.flat_attributes[data.chosen_flat] / lam_chosen[:, None]
            ).sum(axis=0)
        if want_grad_lambda:
            vbar = np.add.reduceat(cond * u_sorted, self.pair_starts[:-1])
            contrib = -p_nest * (log_w - vbar / lam_pair)
            chosen_extra = (
                log_w[self.chosen_pair]
                - (lam_chosen - 1.0) * vbar[self.chosen_pair] / lam_chosen**2
                - u_chosen / lam_chosen**2
            )
            np.add.at(contrib, self.chosen_pair, chosen_extra)
            grad_lambda = np.zeros(nests.num_nests)
            np.add.at(grad_lambda, self.pair_nest, contrib)

        return LogLikelihoodReport(
            value=float(per_obs.sum()),
            per_observation=per_obs,
            gradient_beta=grad_beta,
            gradient_lambda=grad_lambda,
        )

    def choice_probs(self, beta, n: int, lambdas=None) -> np.ndarray:
        data = self.data
        beta = _check_beta(beta, data.num_attributes)
        lam = _clamp_lambda(self.nests.lambdas if lambdas is None else lambdas)
        u_sorted = self.X_sorted @ beta
        lam_pair = lam[self.pair_nest]
        lam_sorted = lam_pair[self.pair_of_sorted]
        log_w = _segment_lse(u_sorted / lam_sorted, self.pair_starts)
        top = _segment_lse(lam_pair * log_w, self.obs_pair_starts)
        cond = np.exp(u_sorted / lam_sorted - log_w[self.pair_of_sorted])
        p_nest = np.exp(lam_pair * log_w - top[self.pair_obs])
        p_sorted = cond * p_nest[self.pair_of_sorted]
        lo, hi = data.starts[n], data.starts[n + 1]
        return p_sorted[self.sorted_pos_of_flat[lo:hi]]


def nl_inclusive_values(beta, nests: NestPartition, data: ChoiceDataset, n: int, lambdas=None) -> dict:
    """Per-nest log-sum of scaled utilities for observation ``n``.

    Returns ``{nest: log W_nl}`` for every nest intersecting the offer set;
    nests with empty intersection are omitted.  log W_nl =
    log sum_{j in nest ∩ S_n} exp(beta'a_nj / lambda_l), computed in log-space.
    """
    beta = _check_beta(beta, data.num_attributes)
    if not 0 <= n < data.num_observations:
        raise InvalidInputError(f"observation index {n} out of range")
    lam = _clamp_lambda(nests.lambdas if lambdas is None else lambdas)
    u = data.attributes[n] @ beta
    members = nests.membership[data.offered[n]]
    out: dict[int, float] = {}
    for l in np.unique(members):
        out[int(l)] = float(logsumexp(u[members == l] / lam[l]))
    return out


def nl_log_likelihood(beta, nests: NestPartition, data: ChoiceDataset, lambdas=None) -> LogLikelihoodReport:
    """Nested-logit log-likelihood with analytic beta- and lambda-gradients.

    Per observation: (lambda_c - 1) log W_c + beta'a_chosen / lambda_c
    - log sum_l W_l^{lambda_l}, where c is the chosen alternative's nest.
    ``gradient_lambda`` is indexed by nest.
    """
    return _NLWork(data, nests).loglik(beta, lambdas)


def nl_choice_probs(beta, nests: NestPartition, data: ChoiceDataset, n: int, lambdas=None) -> np.ndarray:
    """Nested-logit choice probabilities over observation ``n``'s offer set."""
    return _NLWork(data, nests).choice_probs(beta, n, lambdas)


# ---------------------------------------------------------------------------
# TNL
# ---------------------------------------------------------------------------

class _TNLWork:
    """Vectorized-over-observations evaluation plan for one dataset/tree."""

    def __init__(self, data: ChoiceDataset, tree: TaxonomyTree):
        if tree.num_alternatives != data.num_alternatives:
            raise InvalidInputError("tree and dataset disagree on m")
        self.data = data
        self.tree = tree
        K = tree.num_nodes
        N = data.num_observations
        self.leaf_of_flat = tree.leaf_alt[data.flat_offered]

        active = np.zeros((N, K), dtype=bool)
        active[data.seg_id, self.leaf_of_flat] = True
        # Bottom-up: an internal node is active when any child is.
        order = np.argsort(tree.depth_of)[::-1]
        for k in order:
            if not tree.is_leaf[k]:
                for s in tree.children[k]:
                    active[:, k] |= active[:, s]
        self.active = active
        self.bottom_up = [int(k) for k in order if not tree.is_leaf[k]]

        T = tree.depth
        paths = np.empty((tree.num_alternatives, T), dtype=np.int64)
        for j in range(tree.num_alternatives):
            paths[j] = tree.path_to_root(int(tree.leaf_alt[j]))
        self.paths = paths

        internal = tree.internal_nodes
        self.internal = internal
        self.q_index = np.full(K, -1, dtype=np.int64)
        self.q_index[internal] = np.arange(internal.size)

    def log_values(self, beta, lam_nodes) -> np.ndarray:
        """(N, K) matrix of log V per node; -inf marks inactive nodes."""
        data, tree = self.data, self.tree
        u = data.flat_attributes @ beta
        N, K = data.num_observations, tree.num_nodes
        log_v = np.full((N, K), -np.inf)
        log_v[data.seg_id, self.leaf_of_flat] = u
        for k in self.bottom_up:
            kids = tree.children[k]
            ratios = lam_nodes[list(kids)] / lam_nodes[k]
            stacked = log_v[:, list(kids)] * ratios  # -inf stays -inf, ratios > 0
            log_v[:, k] = logsumexp(stacked, axis=1)
        return log_v

    def loglik(
        self,
        beta,
        lambdas=None,
        want_grad_beta: bool = True,
        want_grad_lambda: bool = True,
    ) -> LogLikelihoodReport:
        data, tree = self.data, self.tree
        beta = _check_beta(beta, data.num_attributes)
        lam = _clamp_lambda(tree.lambdas if lambdas is None else lambdas)
        if lam.shape != tree.lambdas.shape:
            raise InvalidInputError("lambda override has wrong length")

        N, K, p = data.num_observations, tree.num_nodes, data.num_attributes
        log_v = self.log_values(beta, lam)
        chosen_paths = self.paths[data.chosen]  # (N, T)
        rows = np.arange(N)
        T = tree.depth

        per_obs = np.zeros(N)
        for t in range(T - 1):
            k_t = chosen_paths[:, t]
            k_next = chosen_paths[:, t + 1]
            ratio = lam[k_next] / lam[k_t]
            per_obs += ratio * log_v[rows, k_next] - log_v[rows, k_t]

        grad_beta = None
        grad_lambda = None
        need_children_probs = want_grad_beta or want_grad_lambda
        if need_children_probs:
            # cond[k][i] = P(child_i | k) per observation, zero when inactive.
            cond: dict[int, np.ndarray] = {}
            for k in self.bottom_up:
                kids = list(tree.children[k])
                ratios = lam[kids] / lam[k]
                with np.errstate(invalid="ignore"):
                    c = np.exp(log_v[:, kids] * ratios - log_v[:, [k]])
                c[~self.active[:, k]] = 0.0
                cond[k] = np.nan_to_num(c, nan=0.0, posinf=0.0)

        if want_grad_beta:
            g = np.zeros((N, K, p))
            g[data.seg_id, self.leaf_of_flat] = data.flat_attributes
            for k in self.bottom_up:
                kids = list(tree.children[k])
                ratios = lam[kids] / lam[k]
                weights = cond[k] * ratios  # (N, |kids|)
                g[:, k, :] = np.einsum("nc,ncp->np", weights, g[:, kids, :])
            grad_beta = np.zeros(p)
            for t in range(T - 1):
                k_t = chosen_paths[:, t]
                k_next = chosen_paths[:, t + 1]
                ratio = lam[k_next] / lam[k_t]
                grad_beta += np.einsum("n,np->p", ratio, g[rows, k_next])
                grad_beta -= g[rows, k_t].sum(axis=0)

        if want_grad_lambda:
            Q = self.internal.size
            h = np.zeros((N, K, Q))
            safe_v = np.where(np.isfinite(log_v), log_v, 0.0)
            for k in self.bottom_up:
                kids = list(tree.children[k])
                ratios = lam[kids] / lam[k]
                weights = cond[k] * ratios
                h[:, k, :] = np.einsum("nc,ncq->nq", weights, h[:, kids, :])
                # direct dependence of the exponents lam_s/lam_k on lam
                pv = cond[k] * safe_v[:, kids]  # P(s|k) * log V_s, 0 if inactive
                h[:, k, self.q_index[k]] -= pv @ (lam[kids] / lam[k] ** 2)
                for i, s in enumerate(kids):
                    if self.q_index[s] >= 0:
                        h[:, k, self.q_index[s]] += pv[:, i] / lam[k]
            grad_lambda = np.zeros(Q)
            for t in range(T - 1):
                k_t = chosen_paths[:, t]
                k_next = chosen_paths[:, t + 1]
                ratio = lam[k_next] / lam[k_t]
                grad_lambda += np.einsum("n,nq->q", ratio, h[rows, k_next])
                grad_lambda -= h[rows, k_t].sum(axis=0)
                # coefficient terms: d(lam_next/lam_t)/d lam_q
                v_next = log_v[rows, k_next]
                qi_next = self.q_index[k_next]
                sel = qi_next >= 0
                np.add.at(grad_lambda, qi_next[sel], v_next[sel] / lam[k_t][sel])
                qi_t = self.q_index[k_t]
                sel = qi_t >= 0
                np.add.at(
                    grad_lambda,
                    qi_t[sel],
                    -v_next[sel] * lam[k_next][sel] / lam[k_t][sel] ** 2,
                )

        return LogLikelihoodReport(
            value=float(per_obs.sum()),
            per_observation=per_obs,
            gradient_beta=grad_beta,
            gradient_lambda=grad_lambda,
        )


def tnl_value_functions(beta, tree: TaxonomyTree, data: ChoiceDataset, n: int, lambdas=None) -> dict:
    """Log-value recursion over the minimal active subtree of observation ``n``.

    Leaf k in S_n: log V_k = beta'a_nk.  Internal k:
    log V_k = log sum_{active children s} exp((lambda_s/lambda_k) log V_s).
    Returns ``{node: log V}`` for active nodes only.
    """
    work = _TNLWork(data, tree)
    beta = _check_beta(beta, data.num_attributes)
    if not 0 <= n < data.num_observations:
        raise InvalidInputError(f"observation index {n} out of range")
    lam = _clamp_lambda(tree.lambdas if lambdas is None else lambdas)
    log_v = work.log_values(beta, lam)
    return {
        int(k): float(log_v[n, k])
        for k in range(tree.num_nodes)
        if work.active[n, k]
    }


def tnl_log_likelihood(beta, tree: TaxonomyTree, data: ChoiceDataset, lambdas=None) -> LogLikelihoodReport:
    """Tree-nested-logit log-likelihood with analytic gradients.

    The value telescopes conditional logits along each observation's
    root-to-chosen-leaf path.  ``gradient_lambda`` is indexed by internal node
    in ``tree.internal_nodes`` order (the root's entry treats its scale as a
    free parameter even though construction pins it to 1).
    """
    return _TNLWork(data, tree).loglik(beta, lambdas)


# ---------------------------------------------------------------------------
# Verification oracle
# ---------------------------------------------------------------------------

def finite_difference_gradient(f, x, h: float = 1e-5) -> np.ndarray:
    """Central finite-difference gradient of scalar ``f`` at ``x``."""
    x = np.asarray(x, dtype=float)
    out = np.empty_like(x)
    for i in range(x.size):
        step = np.zeros_like(x)
        step[i] = h
        out[i] = (f(x + step) - f(x - step)) / (2.0 * h)
    return out
