"""Maximum-likelihood drivers for the three choice models.

Three layers live here.  The fixed-scale fitters build the conic
reformulation of a likelihood, solve it, and extract the coefficients.
The joint estimators for nested and tree-structured scales alternate an
exact inner conic solve for the coefficients with an outer bounded
quasi-Newton ascent over the scales; because each half-step maximizes the
same objective in its own block of variables, the per-iteration
log-likelihood trace never decreases.  The outer gradient needs no extra
machinery: at the inner optimum the partial gradient with respect to the
scales equals the gradient of the optimal-value function, so the ordinary
analytic gradient from the likelihood layer drives the ascent.

The quasi-Newton baseline maximizes the same log-likelihoods directly
through scipy's limited-memory box-constrained solver (or its SQP solver
when explicit ordering constraints are requested), which is the reference
the conic path is benchmarked against.

Tree scales are kept admissible (weakly decreasing away from the root) by
optimizing cumulative-product coordinates: every internal non-root node
carries a multiplier in (0, 1], and a node's scale is the product of the
multipliers along its root path.  Any box on the multipliers then implies
the ordering, so plain projected ascent suffices.
"""

from __future__ import annotations

import time
import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import minimize

from .data import (
    ChoiceDataset,
    InvalidInputError,
    NestPartition,
    TaxonomyTree,
)
from .likelihood import _NLWork, _TNLWork, mnl_log_likelihood
from .reformulate import extract_solution, mnl_to_ecp, nl_to_ecp, tnl_to_ecp
from .solver import SolverConfig, solve

__all__ = [
    "EstimationResult",
    "TwoStageConfig",
    "fit_mnl",
    "fit_nl_fixed_lambda",
    "fit_tnl_fixed_lambda",
    "fit_nl_joint",
    "fit_tnl_joint",
    "fit_baseline_quasi_newton",
]

_OUTER_METHODS = ("projected-quasi-newton", "sqp-style-constrained")
_INIT_RULES = ("midpoint", "upper", "custom")


@dataclass(frozen=True)
class TwoStageConfig:
    """Knobs for the alternating estimators (and limits shared by all fits).

    ``lambda_bounds`` is either a single ``(lo, hi)`` pair broadcast to every
    scale parameter or one pair per parameter; bounds must sit inside (0, 1].
    For trees under the default outer method the bounds apply to the
    per-node multipliers (see module docstring), not to the scales
    themselves.  ``lambda_init_rule`` picks the starting scales from the
    bounds; ``custom`` reads ``lambda_init`` (per-nest scales for flat
    models, per-node scales for trees).
    """

    mle_increment_tol: float = 1e-6
    time_limit_secs: float = 3600.0
    lambda_bounds: tuple = (0.05, 1.0)
    lambda_init_rule: str = "midpoint"
    lambda_init: tuple | None = None
    outer_method: str = "projected-quasi-newton"
    max_outer_iters: int = 100
    max_lambda_subiters: int = 500

    def __post_init__(self) -> None:
        if not self.mle_increment_tol > 0:
            raise InvalidInputError("mle_increment_tol must be positive")
        if self.time_limit_secs < 0:
            raise InvalidInputError("time_limit_secs must be nonnegative")
        if self.lambda_init_rule not in _INIT_RULES:
            raise InvalidInputError(f"unknown lambda_init_rule {self.lambda_init_rule!r}")
        if self.lambda_init_rule == "custom" and self.lambda_init is None:
            raise InvalidInputError("custom initialization requires lambda_init")
        if self.outer_method not in _OUTER_METHODS:
            raise InvalidInputError(f"unknown outer_method {self.outer_method!r}")
        if self.max_outer_iters < 1 or self.max_lambda_subiters < 1:
            raise InvalidInputError("iteration limits must be at least 1")
        if np.asarray(self.lambda_bounds, dtype=float).size == 0:
            raise InvalidInputError("lambda_bounds must be nonempty")


@dataclass(frozen=True)
class EstimationResult:
    """Outcome of one estimation run.

    ``trace`` holds the log-likelihood after each outer iteration (a single
    entry for fixed-scale fits); for the alternating estimators it is
    non-decreasing within 1e-8.  ``lambdas`` is ``None`` for plain logit,
    per-nest for flat nesting, and per-node for trees.  ``detail`` carries
    diagnostics (extraction audit, solver residuals, optimizer messages).
    """

    beta: np.ndarray
    lambdas: np.ndarray | None
    loglik: float
    status: str  # Converged | TimeLimit | IterLimit | Failed
    outer_iters: int
    inner_solves: int
    elapsed: float
    trace: tuple
    detail: dict = field(default_factory=dict)


def _mirror_solver_status(status: str) -> str:
    if status == "Optimal":
        return "Converged"
    if status == "IterationLimit":
        return "IterLimit"
    return "Failed"


def _resolve_bounds(bounds, count: int) -> tuple[np.ndarray, np.ndarray]:
    arr = np.asarray(bounds, dtype=float)
    if arr.shape == (2,):
        lo = np.full(count, arr[0])
        hi = np.full(count, arr[1])
    elif arr.shape == (count, 2):
        lo = arr[:, 0].copy()
        hi = arr[:, 1].copy()
    else:
        raise InvalidInputError(
            f"lambda_bounds must be one (lo, hi) pair or {count} pairs"
        )
    if not np.all(np.isfinite(lo)) or not np.all(np.isfinite(hi)):
        raise InvalidInputError("scale bounds must be finite")
    if np.any(lo <= 0) or np.any(hi > 1) or np.any(lo > hi):
        raise InvalidInputError("scale bounds must satisfy 0 < lo <= hi <= 1")
    return lo, hi


def _initial_point(cfg: TwoStageConfig, lo, hi, custom_map=None) -> np.ndarray:
    """Starting coordinates from the bounds per the configured rule."""
    if cfg.lambda_init_rule == "midpoint":
        return (lo + hi) / 2.0
    if cfg.lambda_init_rule == "upper":
        return hi.copy()
    init = np.asarray(cfg.lambda_init, dtype=float).ravel()
    if custom_map is not None:
        init = custom_map(init)
    if init.shape != lo.shape:
        raise InvalidInputError("lambda_init has the wrong length")
    if np.any(init < lo - 1e-12) or np.any(init > hi + 1e-12):
        raise InvalidInputError("lambda_init violates lambda_bounds")
    return np.clip(init, lo, hi)


# ---------------------------------------------------------------------------
# Fixed-scale conic fits
# ---------------------------------------------------------------------------

def _finish_fixed(build, lam_report, solver_cfg, t0: float) -> EstimationResult:
    sol = solve(build.program, solver_cfg if solver_cfg is not None else SolverConfig())
    elapsed = time.perf_counter() - t0
    p = build.data.num_attributes
    if sol.status != "Optimal":
        detail = {
            "solver_status": sol.status,
            "solver_residuals": dict(sol.residuals),
            "solver_iterations": sol.iterations,
        }
        return EstimationResult(
            beta=np.full(p, np.nan),
            lambdas=lam_report,
            loglik=float("nan"),
            status=_mirror_solver_status(sol.status),
            outer_iters=0,
            inner_solves=1,
            elapsed=elapsed,
            trace=(),
            detail=detail,
        )
    ext = extract_solution(sol, build)
    detail = {"audit": ext.audit, "solver_iterations": sol.iterations}
    return EstimationResult(
        beta=ext.beta,
        lambdas=lam_report,
        loglik=ext.loglik,
        status="Converged",
        outer_iters=0,
        inner_solves=1,
        elapsed=time.perf_counter() - t0,
        trace=(ext.loglik,),
        detail=detail,
    )


def fit_mnl(data: ChoiceDataset, config: TwoStageConfig | None = None,
            solver: SolverConfig | None = None) -> EstimationResult:
    """Plain-logit maximum likelihood through the conic reformulation.

    When every observation offers a single alternative the likelihood is
    identically zero and every coefficient vector is optimal; the zero
    vector is returned by convention without invoking the solver.
    """
    del config  # accepted for signature parity with the joint fitters
    t0 = time.perf_counter()
    p = data.num_attributes
    if int(data.sizes.max()) == 1:
        return EstimationResult(
            beta=np.zeros(p),
            lambdas=None,
            loglik=0.0,
            status="Converged",
            outer_iters=0,
            inner_solves=0,
            elapsed=time.perf_counter() - t0,
            trace=(0.0,),
            detail={"note": "all offer sets are singletons; likelihood is identically zero"},
        )
    return _finish_fixed(mnl_to_ecp(data), None, solver, t0)


def fit_nl_fixed_lambda(data: ChoiceDataset, nests: NestPartition, lambdas=None,
                        config: TwoStageConfig | None = None,
                        solver: SolverConfig | None = None) -> EstimationResult:
    """Nested-logit fit at fixed per-nest scales (defaults to the partition's)."""
    del config
    t0 = time.perf_counter()
    lam = np.asarray(nests.lambdas if lambdas is None else lambdas, dtype=float).ravel()
    build = nl_to_ecp(data, nests, lambda_fixed=lam)
    return _finish_fixed(build, lam.copy(), solver, t0)


def fit_tnl_fixed_lambda(data: ChoiceDataset, tree: TaxonomyTree, lambdas=None,
                         config: TwoStageConfig | None = None,
                         solver: SolverConfig | None = None) -> EstimationResult:
    """Tree-nested fit at fixed per-node scales (defaults to the tree's)."""
    del config
    t0 = time.perf_counter()
    lam = np.asarray(tree.lambdas if lambdas is None else lambdas, dtype=float).ravel()
    build = tnl_to_ecp(data, tree, lambda_fixed=lam)
    return _finish_fixed(build, lam.copy(), solver, t0)


# ---------------------------------------------------------------------------
# Scale-ascent helpers
# ---------------------------------------------------------------------------

def _bounded_ascent(value_grad, x0, bounds, method: str, maxiter: int,
                    constraints=()) -> tuple[np.ndarray, int]:
    """Maximize a smooth function over a box, returning the best point seen.

    ``value_grad`` returns (value, gradient) of the function to maximize.
    Tracking the best evaluated point (the start is always evaluated first)
    guarantees the result is never worse than ``x0``, which is what the
    alternating estimators' monotone-trace contract leans on.
    """
    x0 = np.asarray(x0, dtype=float).copy()
    state = {"val": -np.inf, "x": x0.copy(), "evals": 0}

    def wrapped(xv):
        state["evals"] += 1
        val, grad = value_grad(xv)
        val = float(val)
        if val > state["val"]:
            state["val"] = val
            state["x"] = np.asarray(xv, dtype=float).copy()
        return -val, -np.asarray(grad, dtype=float)

    with warnings.catch_warnings():
        # scipy's SQP routine may probe marginally outside the box before
        # clipping; the warning is noise since the clipped point is used
        warnings.filterwarnings(
            "ignore", message="Values in x were outside bounds", category=RuntimeWarning
        )
        minimize(
            wrapped,
            x0,
            jac=True,
            method=method,
            bounds=list(bounds),
            constraints=list(constraints),
            options={"maxiter": int(maxiter)},
        )
    return state["x"], state["evals"]


class _ChainScales:
    """Cumulative-product coordinates for the scales of a taxonomy tree.

    Every internal non-root node owns one multiplier; the node's scale is
    the product of the multipliers along its root path (root and leaves
    stay pinned at 1).  A box inside (0, 1] on the multipliers keeps every
    scale weakly below its parent's, so admissibility needs no explicit
    inequality constraints.
    """

    def __init__(self, tree: TaxonomyTree) -> None:
        self.tree = tree
        root = tree.root
        self.internal = [int(k) for k in tree.internal_nodes]
        free = [k for k in self.internal if k != root]
        free.sort(key=lambda k: (int(tree.depth_of[k]), k))
        self.free = free
        self.slot = {k: i for i, k in enumerate(free)}
        chains: dict[int, list[int]] = {}
        for k in self.internal:
            node, chain = k, []
            while node != root:
                chain.append(node)
                node = int(tree.parent[node])
            chains[k] = chain
        self.chains = chains

    @property
    def count(self) -> int:
        return len(self.free)

    def lambdas_from(self, theta) -> np.ndarray:
        lam = np.ones(self.tree.num_nodes)
        for k in self.free:  # depth order: parents are filled before children
            lam[k] = lam[int(self.tree.parent[k])] * theta[self.slot[k]]
        return lam

    def theta_from(self, lambdas) -> np.ndarray:
        theta = np.empty(self.count)
        for k in self.free:
            theta[self.slot[k]] = lambdas[k] / lambdas[int(self.tree.parent[k])]
        return theta

    def gradient_to_theta(self, grad_internal, lambdas, theta) -> np.ndarray:
        """Chain rule from per-internal-node scale gradients to multipliers."""
        out = np.zeros(self.count)
        for i, k in enumerate(self.internal):
            if k == self.tree.root:
                continue  # the root's scale is pinned, not a coordinate
            coeff = float(grad_internal[i]) * float(lambdas[k])
            for f in self.chains[k]:
                j = self.slot[f]
                out[j] += coeff / float(theta[j])
        return out


def _project_tree_ordering(tree: TaxonomyTree, lam_full: np.ndarray) -> np.ndarray:
    """Clamp each internal scale to its parent's (top-down min pass).

    The SQP outer step satisfies the ordering only up to its constraint
    tolerance; the builder validates it exactly, so tiny violations are
    projected away before the scales are used anywhere else.
    """
    lam = lam_full.copy()
    order = sorted((int(k) for k in tree.internal_nodes), key=lambda k: int(tree.depth_of[k]))
    for k in order:
        par = int(tree.parent[k])
        if par >= 0:
            lam[k] = min(lam[k], lam[par])
    return lam


def _tree_ordering_constraints(tree: TaxonomyTree, scales: _ChainScales, offset: int):
    """SQP inequality constraints: scale of each free node <= its parent's."""
    cons = []
    for k in scales.free:
        par = int(tree.parent[k])
        if par == tree.root:
            continue  # parent scale is the constant 1; the box already caps the child
        i_par = offset + scales.slot[par]
        i_kid = offset + scales.slot[k]

        def fun(xv, a=i_par, b=i_kid):
            return xv[a] - xv[b]

        def jac(xv, a=i_par, b=i_kid, n=None):
            g = np.zeros(xv.size)
            g[a] = 1.0
            g[b] = -1.0
            return g

        cons.append({"type": "ineq", "fun": fun, "jac": jac})
    return cons


# ---------------------------------------------------------------------------
# Alternating joint estimators
# ---------------------------------------------------------------------------

def _two_stage(p: int, lam0: np.ndarray, build_at, improve_lambda,
               cfg: TwoStageConfig, solver_cfg) -> EstimationResult:
    """Alternate exact inner conic solves with outer scale ascents.

    The inner solve is global for its convex subproblem and the outer step
    never returns a worse point than it started from, so the recorded trace
    is non-decreasing.  Termination: objective increment below the
    configured tolerance, the outer-iteration cap, or the time limit
    (returning the best pair seen so far).
    """
    t0 = time.perf_counter()
    solver_cfg = solver_cfg if solver_cfg is not None else SolverConfig()
    lam = np.asarray(lam0, dtype=float).copy()
    trace: list[float] = []
    outer_evals: list[int] = []
    best_val = -np.inf
    best_beta: np.ndarray | None = None
    best_lam = lam.copy()
    last_audit: dict | None = None
    status = "IterLimit"
    failure: dict | None = None
    inner = 0
    ipm_iters = 0
    prev = -np.inf

    for it in range(cfg.max_outer_iters):
        if time.perf_counter() - t0 >= cfg.time_limit_secs:
            status = "TimeLimit"
            break
        build = build_at(lam)
        sol = solve(build.program, solver_cfg)
        inner += 1
        ipm_iters += sol.iterations
        if sol.status != "Optimal":
            status = "Failed"
            failure = {
                "outer_iter": it,
                "solver_status": sol.status,
                "solver_residuals": dict(sol.residuals),
            }
            break
        ext = extract_solution(sol, build)
        trace.append(ext.loglik)
        last_audit = ext.audit
        if ext.loglik > best_val:
            best_val = ext.loglik
            best_beta = ext.beta.copy()
            best_lam = lam.copy()
        if it > 0 and ext.loglik - prev < cfg.mle_increment_tol:
            status = "Converged"
            break
        prev = ext.loglik
        if time.perf_counter() - t0 >= cfg.time_limit_secs:
            status = "TimeLimit"
            break
        lam, evals = improve_lambda(ext.beta, lam)
        outer_evals.append(evals)

    detail: dict = {
        "outer_lambda_evals": tuple(outer_evals),
        "solver_iterations": ipm_iters,
    }
    if last_audit is not None:
        detail["last_inner_audit"] = last_audit
    if failure is not None:
        detail["inner_failure"] = failure
    return EstimationResult(
        beta=best_beta if best_beta is not None else np.full(p, np.nan),
        lambdas=best_lam,
        loglik=best_val if best_beta is not None else float("nan"),
        status=status,
        outer_iters=len(trace),
        inner_solves=inner,
        elapsed=time.perf_counter() - t0,
        trace=tuple(trace),
        detail=detail,
    )


def fit_nl_joint(data: ChoiceDataset, nests: NestPartition,
                 config: TwoStageConfig | None = None,
                 solver: SolverConfig | None = None) -> EstimationResult:
    """Joint (coefficients, per-nest scales) fit by exact alternation.

    Each round solves the fixed-scale conic program exactly for the
    coefficients, then runs a box-constrained quasi-Newton ascent of the
    likelihood over the scales at those coefficients.  The reported pair is
    the best one visited.
    """
    cfg = config if config is not None else TwoStageConfig()
    work = _NLWork(data, nests)
    lo, hi = _resolve_bounds(cfg.lambda_bounds, nests.num_nests)
    lam0 = _initial_point(cfg, lo, hi)
    method = "L-BFGS-B" if cfg.outer_method == "projected-quasi-newton" else "SLSQP"
    bounds = list(zip(lo, hi))

    def improve(beta, lam):
        def value_grad(lv):
            rep = work.loglik(beta, lv, want_grad_beta=False, want_grad_lambda=True)
            return rep.value, rep.gradient_lambda

        return _bounded_ascent(
            value_grad, np.clip(lam, lo, hi), bounds, method, cfg.max_lambda_subiters
        )

    def build_at(lam):
        return nl_to_ecp(data, nests, lambda_fixed=lam, work=work)

    return _two_stage(data.num_attributes, lam0, build_at, improve, cfg, solver)


def fit_tnl_joint(data: ChoiceDataset, tree: TaxonomyTree,
                  config: TwoStageConfig | None = None,
                  solver: SolverConfig | None = None) -> EstimationResult:
    """Joint (coefficients, per-node scales) fit by exact alternation.

    Under the default outer method the scales move in cumulative-product
    coordinates, so the parent/child ordering holds by construction; the
    SQP variant instead optimizes the scales directly under explicit
    ordering constraints.  ``lambdas`` in the result is the full per-node
    vector (root and leaves stay at 1).
    """
    cfg = config if config is not None else TwoStageConfig()
    work = _TNLWork(data, tree)
    scales = _ChainScales(tree)
    if scales.count == 0:
        raise InvalidInputError("tree has no adjustable scales")

    def build_at(lam_full):
        return tnl_to_ecp(data, tree, lambda_fixed=lam_full, work=work)

    lo, hi = _resolve_bounds(cfg.lambda_bounds, scales.count)

    if cfg.outer_method == "projected-quasi-newton":
        def admit(full):
            tree.with_lambdas(np.asarray(full, dtype=float))
            return scales.theta_from(np.asarray(full, dtype=float))

        theta0 = _initial_point(cfg, lo, hi, custom_map=admit)
        lam0 = scales.lambdas_from(theta0)
        bounds = list(zip(lo, hi))

        def improve(beta, lam_full):
            theta_start = np.clip(scales.theta_from(lam_full), lo, hi)

            def value_grad(theta):
                full = scales.lambdas_from(theta)
                rep = work.loglik(beta, full, want_grad_beta=False, want_grad_lambda=True)
                return rep.value, scales.gradient_to_theta(rep.gradient_lambda, full, theta)

            theta_best, evals = _bounded_ascent(
                value_grad, theta_start, bounds, "L-BFGS-B", cfg.max_lambda_subiters
            )
            return scales.lambdas_from(theta_best), evals

    else:  # sqp-style-constrained: scales are the coordinates, ordering explicit
        def pick_free(full):
            tree.with_lambdas(np.asarray(full, dtype=float))
            return np.asarray(full, dtype=float)[scales.free]

        free0 = _initial_point(cfg, lo, hi, custom_map=pick_free)
        idx_free = [scales.internal.index(k) for k in scales.free]
        cons = _tree_ordering_constraints(tree, scales, offset=0)
        bounds = list(zip(lo, hi))

        def full_of(free):
            lam = np.ones(tree.num_nodes)
            lam[scales.free] = free
            return lam

        lam0 = _project_tree_ordering(tree, full_of(free0))
        if np.any(lam0[scales.free] < lo - 1e-12):
            raise InvalidInputError("lambda_bounds are incompatible with the tree ordering")

        def improve(beta, lam_full):
            def value_grad(free):
                full = full_of(free)
                rep = work.loglik(beta, full, want_grad_beta=False, want_grad_lambda=True)
                return rep.value, np.asarray(rep.gradient_lambda)[idx_free]

            free_best, evals = _bounded_ascent(
                value_grad,
                np.clip(lam_full[scales.free], lo, hi),
                bounds,
                "SLSQP",
                cfg.max_lambda_subiters,
                constraints=cons,
            )
            return _project_tree_ordering(tree, full_of(free_best)), evals

    return _two_stage(data.num_attributes, lam0, build_at, improve, cfg, solver)


# ---------------------------------------------------------------------------
# Quasi-Newton baseline
# ---------------------------------------------------------------------------

def _quasi_newton_ascent(value_grad, x0, bounds, method: str, cfg: TwoStageConfig,
                         options=None, constraints=()):
    """Run scipy's minimizer on the negated objective, tracking the best point.

    Returns (best_x, best_value, status, iterations, evaluations, elapsed,
    progress trace, solver message).  The time limit is enforced through the
    iteration callback; hitting it reports TimeLimit with the best pair seen.
    """
    t0 = time.perf_counter()
    x0 = np.asarray(x0, dtype=float).copy()
    state = {"val": -np.inf, "x": x0.copy(), "evals": 0, "timed_out": False}
    progress: list[float] = []

    def wrapped(xv):
        state["evals"] += 1
        val, grad = value_grad(xv)
        val = float(val)
        if val > state["val"]:
            state["val"] = val
            state["x"] = np.asarray(xv, dtype=float).copy()
        return -val, -np.asarray(grad, dtype=float)

    def on_iterate(_xk):
        progress.append(state["val"])
        if time.perf_counter() - t0 >= cfg.time_limit_secs:
            state["timed_out"] = True
            raise StopIteration

    with warnings.catch_warnings():
        warnings.filterwarnings(
            "ignore", message="Values in x were outside bounds", category=RuntimeWarning
        )
        res = minimize(
            wrapped,
            x0,
            jac=True,
            method=method,
            bounds=bounds,
            constraints=list(constraints),
            callback=on_iterate,
            options=dict(options) if options else None,
        )
    elapsed = time.perf_counter() - t0
    if state["timed_out"]:
        status = "TimeLimit"
    elif res.success:
        status = "Converged"
    elif int(getattr(res, "status", -1)) in (1, 9):
        # L-BFGS-B uses 1 for an exhausted evaluation budget, SLSQP uses 9
        # for its iteration limit; everything else is a genuine failure.
        status = "IterLimit"
    else:
        status = "Failed"
    if not progress or progress[-1] != state["val"]:
        progress.append(state["val"])
    return (
        state["x"],
        state["val"],
        status,
        int(getattr(res, "nit", 0)),
        state["evals"],
        elapsed,
        tuple(progress),
        str(getattr(res, "message", "")),
    )


def fit_baseline_quasi_newton(model: str, data: ChoiceDataset, structure=None,
                              lambdas=None, config: TwoStageConfig | None = None,
                              beta0=None, options=None) -> EstimationResult:
    """Gradient-based reference fit of the same likelihoods.

    ``model`` is one of ``mnl``, ``nl-fixed``, ``tnl-fixed``, ``nl-joint``,
    ``tnl-joint``.  Fixed-scale variants maximize over the coefficients
    alone; joint variants append the scales (boxed, and for trees either
    reparameterized onto multipliers or SQP-constrained, following
    ``config.outer_method``).  Coefficients start at zero unless ``beta0``
    says otherwise; reported values belong to the best point the optimizer
    evaluated, so a line-search failure still returns its last usable
    iterate.
    """
    cfg = config if config is not None else TwoStageConfig()
    kind = str(model).strip().lower()
    p = data.num_attributes
    beta_start = np.zeros(p) if beta0 is None else np.asarray(beta0, dtype=float).copy()
    if beta_start.shape != (p,):
        raise InvalidInputError("beta0 has the wrong length")
    free_bounds = [(None, None)] * p

    if kind == "mnl":
        def value_grad(xv):
            rep = mnl_log_likelihood(xv, data)
            return rep.value, rep.gradient_beta

        bx, bv, status, nit, evals, elapsed, trace, msg = _quasi_newton_ascent(
            value_grad, beta_start, free_bounds, "L-BFGS-B", cfg, options
        )
        return EstimationResult(bx, None, bv, status, nit, evals, elapsed, trace,
                                {"method": "L-BFGS-B", "message": msg})

    if kind == "nl-fixed":
        if not isinstance(structure, NestPartition):
            raise InvalidInputError("nl-fixed needs a NestPartition structure")
        work = _NLWork(data, structure)
        lam = np.asarray(structure.lambdas if lambdas is None else lambdas, dtype=float).ravel()

        def value_grad(xv):
            rep = work.loglik(xv, lam, want_grad_beta=True, want_grad_lambda=False)
            return rep.value, rep.gradient_beta

        bx, bv, status, nit, evals, elapsed, trace, msg = _quasi_newton_ascent(
            value_grad, beta_start, free_bounds, "L-BFGS-B", cfg, options
        )
        return EstimationResult(bx, lam.copy(), bv, status, nit, evals, elapsed, trace,
                                {"method": "L-BFGS-B", "message": msg})

    if kind == "tnl-fixed":
        if not isinstance(structure, TaxonomyTree):
            raise InvalidInputError("tnl-fixed needs a TaxonomyTree structure")
        lam = np.asarray(structure.lambdas if lambdas is None else lambdas, dtype=float).ravel()
        structure.with_lambdas(lam)  # admissibility check
        work = _TNLWork(data, structure)

        def value_grad(xv):
            rep = work.loglik(xv, lam, want_grad_beta=True, want_grad_lambda=False)
            return rep.value, rep.gradient_beta

        bx, bv, status, nit, evals, elapsed, trace, msg = _quasi_newton_ascent(
            value_grad, beta_start, free_bounds, "L-BFGS-B", cfg, options
        )
        return EstimationResult(bx, lam.copy(), bv, status, nit, evals, elapsed, trace,
                                {"method": "L-BFGS-B", "message": msg})

    if kind == "nl-joint":
        if not isinstance(structure, NestPartition):
            raise InvalidInputError("nl-joint needs a NestPartition structure")
        work = _NLWork(data, structure)
        lo, hi = _resolve_bounds(cfg.lambda_bounds, structure.num_nests)
        lam0 = _initial_point(cfg, lo, hi)
        method = "L-BFGS-B" if cfg.outer_method == "projected-quasi-newton" else "SLSQP"

        def value_grad(xv):
            rep = work.loglik(xv[:p], xv[p:], want_grad_beta=True, want_grad_lambda=True)
            return rep.value, np.concatenate([rep.gradient_beta, rep.gradient_lambda])

        bx, bv, status, nit, evals, elapsed, trace, msg = _quasi_newton_ascent(
            value_grad,
            np.concatenate([beta_start, lam0]),
            free_bounds + list(zip(lo, hi)),
            method,
            cfg,
            options,
        )
        return EstimationResult(bx[:p], bx[p:].copy(), bv, status, nit, evals, elapsed,
                                trace, {"method": method, "message": msg})

    if kind == "tnl-joint":
        if not isinstance(structure, TaxonomyTree):
            raise InvalidInputError("tnl-joint needs a TaxonomyTree structure")
        tree = structure
        work = _TNLWork(data, tree)
        scales = _ChainScales(tree)
        if scales.count == 0:
            raise InvalidInputError("tree has no adjustable scales")
        lo, hi = _resolve_bounds(cfg.lambda_bounds, scales.count)

        if cfg.outer_method == "projected-quasi-newton":
            def admit(full):
                tree.with_lambdas(np.asarray(full, dtype=float))
                return scales.theta_from(np.asarray(full, dtype=float))

            theta0 = _initial_point(cfg, lo, hi, custom_map=admit)

            def value_grad(xv):
                theta = xv[p:]
                full = scales.lambdas_from(theta)
                rep = work.loglik(xv[:p], full, want_grad_beta=True, want_grad_lambda=True)
                g_theta = scales.gradient_to_theta(rep.gradient_lambda, full, theta)
                return rep.value, np.concatenate([rep.gradient_beta, g_theta])

            bx, bv, status, nit, evals, elapsed, trace, msg = _quasi_newton_ascent(
                value_grad,
                np.concatenate([beta_start, theta0]),
                free_bounds + list(zip(lo, hi)),
                "L-BFGS-B",
                cfg,
                options,
            )
            lam_full = scales.lambdas_from(bx[p:])
            return EstimationResult(bx[:p], lam_full, bv, status, nit, evals, elapsed,
                                    trace, {"method": "L-BFGS-B", "message": msg})

        def pick_free(full):
            tree.with_lambdas(np.asarray(full, dtype=float))
            return np.asarray(full, dtype=float)[scales.free]

        free0 = _initial_point(cfg, lo, hi, custom_map=pick_free)
        idx_free = [scales.internal.index(k) for k in scales.free]
        cons = _tree_ordering_constraints(tree, scales, offset=p)

        def full_of(free):
            lam = np.ones(tree.num_nodes)
            lam[scales.free] = free
            return lam

        start_full = _project_tree_ordering(tree, full_of(free0))
        if np.any(start_full[scales.free] < lo - 1e-12):
            raise InvalidInputError("lambda_bounds are incompatible with the tree ordering")

        def value_grad(xv):
            full = full_of(xv[p:])
            rep = work.loglik(xv[:p], full, want_grad_beta=True, want_grad_lambda=True)
            return rep.value, np.concatenate(
                [rep.gradient_beta, np.asarray(rep.gradient_lambda)[idx_free]]
            )

        bx, bv, status, nit, evals, elapsed, trace, msg = _quasi_newton_ascent(
            value_grad,
            np.concatenate([beta_start, start_full[scales.free]]),
            free_bounds + list(zip(lo, hi)),
            "SLSQP",
            cfg,
            options,
            constraints=cons,
        )
        lam_full = _project_tree_ordering(tree, full_of(bx[p:]))
        if np.any(lam_full != full_of(bx[p:])):
            # the projection moved a scale; restate the value at the reported point
            bv = work.loglik(bx[:p], lam_full, want_grad_beta=False,
                             want_grad_lambda=False).value
        return EstimationResult(bx[:p], lam_full, bv, status, nit, evals, elapsed,
                                trace, {"method": "SLSQP", "message": msg})

    raise InvalidInputError(
        "model must be one of mnl, nl-fixed, tnl-fixed, nl-joint, tnl-joint"
    )
