"""Path-following interior-point method for exponential-cone programs.

The exponential cone is not symmetric, so Nesterov-Todd scalings are
unavailable; the Newton system linearizes the central-path condition
``s = -sigma * mu * grad F(x)`` using the primal barrier Hessian.  To make
path following sound from an arbitrary start, the program

    maximize c'x  s.t.  Ax = b, x in K

is solved through its homogeneous self-dual embedding in (x, y, s, tau,
kappa): the embedding is feasible by construction, its central path starts
exactly at the initial point (mu_0 = 1), and it terminates either at an
optimum (tau > 0) or at a certificate of primal or dual infeasibility
(kappa > 0).  Each iteration factors one statically regularized,
quasi-definite KKT matrix

    [ mu*H(x) + delta*I   A' ]
    [ A              -delta*I ]

and obtains the embedding direction from two solves with it (a bordered
elimination of the tau column).  An affine probe (sigma = 0) picks the
centering weight sigma = (1 - alpha_aff)^3, then a combined step is taken.
Backtracking keeps (x, s) strictly interior to the primal/dual cones,
(tau, kappa) positive, and the iterate inside a central-path neighborhood:
``||s + mu grad F(x)||`` in the dual local norm at x, extended by the
|tau*kappa - mu| term, must stay below ``neighborhood * mu`` — or at least
shrink, so escapes recover.  Near convergence the iterate legitimately
approaches the cone boundary and that distance becomes numerically
meaningless, so the Hessian-metric guard switches off below
``neighborhood_mu_floor``; a wide-neighborhood floor that never degenerates
takes over at every scale: each complementarity product (per nonnegative
coordinate, per cone block, the block barrier term against its dual
multiplier, and tau*kappa) must stay above ``product_floor`` times the
current average, which bounds the conditioning of the Newton system all
the way to convergence and keeps any single block from pinning itself to
both cone boundaries while mu is still large.  Iterative refinement against the
*unregularized* KKT operator removes the static regularization from the
computed directions, with extra rounds once mu is small.

The solver works on internally equilibrated data (row scaling of A plus
uniform scalings of b and c) but reports iterates, objective, and residuals
in the caller's original scale.  Termination is decided on independently
recomputed original-scale residuals, so ``status == "Optimal"`` guarantees
the audit in :func:`residuals` passes at the configured tolerance.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp
from scipy.sparse.linalg import lsqr, splu

from .data import InvalidInputError
from .program import ConicProgram, validate

__all__ = ["SolverConfig", "ConicSolution", "solve", "residuals"]


@dataclass(frozen=True)
class SolverConfig:
    """Knobs for :func:`solve`; defaults suit all shipped problem families."""

    tol: float = 1e-8
    max_iters: int = 200
    step_fraction: float = 0.98
    static_reg: float = 1e-11
    refine_rounds: int = 2
    highprec_mu: float = 1e-5
    sigma_min: float = 1e-4
    sigma_max: float = 0.9
    neighborhood: float = 8.0
    neighborhood_mu_floor: float = 1e-7
    product_floor: float = 0.1
    verbose: bool = False

    def __post_init__(self) -> None:
        if not 0 < self.step_fraction < 1:
            raise InvalidInputError("step_fraction must lie in (0, 1)")
        if self.tol <= 0:
            raise InvalidInputError("tol must be positive")


@dataclass(frozen=True)
class ConicSolution:
    x: np.ndarray
    y: np.ndarray
    s: np.ndarray
    status: str
    iterations: int
    residuals: dict
    objective: float
    mu_history: tuple[float, ...]

    @property
    def optimal(self) -> bool:
        return self.status == "Optimal"


def _residual_dict(program: ConicProgram, x, y, s) -> dict:
    c, A, b = program.c, program.A, program.b
    primal = np.linalg.norm(A @ x - b) / (1.0 + np.linalg.norm(b))
    dual = np.linalg.norm(A.T @ y - s - c) / (1.0 + np.linalg.norm(c))
    cx = float(c @ x)
    gap = abs(cx - float(b @ y)) / (1.0 + abs(cx))
    return {"primal": float(primal), "dual": float(dual), "gap": float(gap)}


def residuals(program: ConicProgram, solution: ConicSolution) -> dict:
    """Recompute feasibility and gap measures from scratch (audit path)."""
    return _residual_dict(program, solution.x, solution.y, solution.s)


class _KKT:
    """Sparse KKT assembly with a precomputed coordinate pattern.

    The matrix is [[mu*H + delta*I, A'], [A, -delta*I]]; only the barrier
    Hessian values change across iterations, so rows/cols are built once and
    each iteration just concatenates fresh value arrays.
    """

    def __init__(self, A: sp.csr_matrix, layout, delta: float):
        n = A.shape[1]
        meq = A.shape[0]
        self.n, self.meq = n, meq
        self.layout = layout
        self.delta = delta
        coo = A.tocoo()
        h = layout.exp_head
        # 3x3 exponential blocks, row-major to match H.reshape(-1).
        off = np.arange(3)
        er = np.repeat(off, 3)[None, :] + h[:, None]
        ec = np.tile(off, 3)[None, :] + h[:, None]
        rows = [er.ravel(), layout.nn_idx, np.arange(n),
                coo.col, n + coo.row, n + np.arange(meq)]
        cols = [ec.ravel(), layout.nn_idx, np.arange(n),
                n + coo.row, coo.col, n + np.arange(meq)]
        self.rows = np.concatenate(rows)
        self.cols = np.concatenate(cols)
        self._a_vals = coo.data
        self._delta_x = np.full(n, delta)
        self._delta_y = np.full(meq, -delta)
        self.shape = (n + meq, n + meq)

    def factor(self, mu: float, nn_diag: np.ndarray, exp_H: np.ndarray):
        vals = np.concatenate([
            (mu * exp_H).reshape(-1),
            mu * nn_diag,
            self._delta_x,
            self._a_vals,
            self._a_vals,
            self._delta_y,
        ])
        K = sp.csc_matrix((vals, (self.rows, self.cols)), shape=self.shape)
        return splu(K, permc_spec="MMD_AT_PLUS_A", diag_pivot_thresh=0.1,
                    options={"SymmetricMode": True})


def solve(program: ConicProgram, config: SolverConfig | None = None) -> ConicSolution:
    """Solve a validated conic program; see the module docstring for the scheme."""
    config = config or SolverConfig()
    errs = validate(program)
    if errs:
        raise InvalidInputError("invalid program: " + "; ".join(errs))
    lay = program.layout
    n, meq = program.num_vars, program.num_rows

    # --- equilibration -----------------------------------------------------
    A0, b0, c0 = program.A, program.b, program.c
    row_inf = np.maximum(np.abs(A0).max(axis=1).toarray().ravel(), 1e-12) if meq else np.empty(0)
    d_row = 1.0 / row_inf
    As = sp.csr_matrix(sp.diags(d_row) @ A0) if meq else sp.csr_matrix(A0)
    sb = max(1.0, float(np.abs(b0).max())) if meq else 1.0
    sc = max(1.0, float(np.abs(c0).max())) if n else 1.0
    bs = (d_row * b0) / sb
    cs = c0 / sc
    AsT = sp.csr_matrix(As.T)
    # the embedding minimizes, internally
    ch = -cs

    def unscale(x, y, s):
        return sb * x, sc * (d_row * y), sc * s

    # --- initialization: exactly on the embedding's central path ----------
    # The barrier is log-homogeneous, so x0 = rho * x_init with
    # s0 = -(omega/rho) * grad F(x_init), tau = 1, kappa = omega gives every
    # complementarity product the same value omega; the start is exactly
    # centered with mu_0 = omega for any rho, omega > 0.  Along the
    # homogeneous path all residuals then contract by the same factor as mu,
    # so the ratio residual/mu is fixed at its initial value — the two free
    # scales are chosen to make the *recovered* initial residuals O(1),
    # otherwise a laggard residual forces mu far below the numerically safe
    # range before it meets the tolerance.
    x_init = lay.initial_primal()
    g_init = lay.barrier_grad(x_init)
    g_norm = float(np.linalg.norm(g_init))
    if meq:
        rho = (1.0 + float(np.linalg.norm(b0))) / (
            1.0 + float(np.linalg.norm(A0 @ (sb * x_init))))
    else:
        rho = 1.0
    rho = float(np.clip(rho, 1e-4, 1e4))
    if g_norm > 0:
        omega = rho * (1.0 + float(np.linalg.norm(c0))) / (sc * g_norm)
        omega = float(np.clip(omega, 1e-4, 1e4))
    else:
        omega = 1.0
    x = rho * x_init
    y = np.zeros(meq)
    s = -(omega / rho) * g_init
    tau = 1.0
    kappa = omega
    mu0 = omega
    nu_e = lay.nu + 1.0

    kkt = _KKT(As, lay, config.static_reg)
    mu_history: list[float] = []
    status = "IterationLimit"
    iters = 0
    stall = 0
    force_center = False
    mask = lay.cone_mask

    # Working-precision views of the iterate and problem data: float64 in the
    # midgame, numpy extended precision once mu is small (set per iteration).
    xw, yw, sw = x, y, s
    Am, ATm, chm, bsm = As, AsT, ch, bs
    As_hi = None

    def kkt_mul(mu, dx, dy):
        top = mu * lay.hess_mul(xw, dx) + ATm @ dy
        return top, Am @ dx

    def dual_polish(xo, yo, so, res):
        # Least-squares refit of the equality multipliers against the frozen
        # primal/cone pair.  The dual residual is the only one that depends
        # on y alone, so when it is the single laggard just above tolerance
        # this recovers the last digits without disturbing cone membership
        # or primal feasibility; the refit is judged purely on recomputed
        # residuals.  A heavily weighted extra row pins b'y to c'x so the
        # refit cannot trade the gap residual for the dual one.  Run once,
        # on the final iterate, where s is at its best.
        if (meq == 0
                or res["primal"] > config.tol or res["gap"] > config.tol
                or not config.tol < res["dual"] <= 100 * config.tol):
            return yo, res
        anorm = max(1.0, float(np.abs(A0.data).max()) if A0.nnz else 1.0)
        w = 1e4 * anorm / max(1.0, float(np.abs(b0).max()) if meq else 1.0)
        B = sp.vstack([sp.csr_matrix(A0.T), sp.csr_matrix(w * b0[None, :])])
        rhs = np.concatenate([so + c0, [w * float(c0 @ xo)]])
        # atol = btol = 0 lets lsqr run to machine precision; the warm start
        # from the final iterate makes that a few dozen iterations
        y2 = lsqr(B, rhs, x0=yo, atol=0.0, btol=0.0,
                  conlim=0.0, iter_lim=300)[0]
        res2 = _residual_dict(program, xo, y2, so)
        if max(res2.values()) < max(res.values()):
            return y2, res2
        return yo, res

    def embed_mu(xv, sv, tv, kv):
        return (float(xv[mask] @ sv[mask]) + tv * kv) / nu_e

    def path_ratio(xv, sv, tv, kv):
        mu_v = embed_mu(xv, sv, tv, kv)
        if not np.isfinite(mu_v) or mu_v <= 0:
            return mu_v, np.inf
        _, dc = lay.central_path_distance(xv, sv, mu_v)
        dist = np.hypot(dc, tv * kv - mu_v)
        return mu_v, dist / mu_v

    nn_idx = lay.nn_idx
    exp_cols = lay.exp_head[:, None] + np.arange(3) if lay.exp_head.size else None

    def prod_ratio(xv, sv, tv, kv, mu_v):
        if not np.isfinite(mu_v) or mu_v <= 0:
            return 0.0
        worst = tv * kv
        if nn_idx.size:
            worst = min(worst, float(np.min(xv[nn_idx] * sv[nn_idx])))
        if exp_cols is not None:
            blocks = np.einsum("ij,ij->i", xv[exp_cols], sv[exp_cols]) / 3.0
            worst = min(worst, float(np.min(blocks)))
            # the barrier term u = x2*log(x1/x2) - x3 pairs with -s3: their
            # product is exactly mu at centered points, so a collapsing
            # u*(-s3) flags a block pinned to its primal boundary long
            # before the 3-coordinate inner product or the Hessian metric
            # notice anything wrong
            x1 = xv[exp_cols[:, 0]]
            x2 = xv[exp_cols[:, 1]]
            u = x2 * np.log(x1 / x2) - xv[exp_cols[:, 2]]
            worst = min(worst, float(np.min(u * (-sv[exp_cols[:, 2]]))))
        return worst / mu_v

    def classify(a, dx, ds, dtau, dkappa, guarded, ratio0, prod0, probe):
        """Label a trial step: 'ok' or the name of the first failed test."""
        ta = tau + a * dtau
        ka = kappa + a * dkappa
        if not (ta > 0 and ka > 0):
            return "tau/kappa"
        xa = x + a * dx
        sa = s + a * ds
        if not lay.primal_interior(xa):
            return "primal"
        if not lay.dual_interior(sa):
            return "dual"
        if probe:
            return "ok"
        mu_a = embed_mu(xa, sa, ta, ka)
        rp = prod_ratio(xa, sa, ta, ka, mu_a)
        if not (rp >= config.product_floor or rp >= 1.1 * prod0):
            return "prod"
        if guarded:
            # accept inside the neighborhood, or any clear move back
            # toward it — an escaped iterate needs several Newton steps
            # to re-enter, each acceptable en route
            _, ra = path_ratio(xa, sa, ta, ka)
            if not (ra <= config.neighborhood or ra <= 0.9 * ratio0):
                return "guard"
        return "ok"

    def search(dx, ds, dtau, dkappa, start, guarded, ratio0, probe=False):
        a = start
        while a > 1e-13:
            if classify(a, dx, ds, dtau, dkappa, guarded, ratio0, prod0, probe) == "ok":
                return a
            a *= 0.9
        return 0.0

    final = None
    for iters in range(1, config.max_iters + 1):
        # the embedding minimizes -c'x, so its dual variable is -y
        xo, yo, so = unscale(x / tau, -y / tau, s / tau)
        res = _residual_dict(program, xo, yo, so)
        if max(res.values()) <= config.tol:
            status = "Optimal"
            iters -= 1
            final = (xo, yo, so, res)
            break

        # infeasibility certificates appear as tau -> 0 rays
        if tau < 1e-8 * max(1.0, kappa):
            xr, yr, sr = unscale(x, -y, s)
            cxr = float(c0 @ xr)
            if cxr > 0 and np.linalg.norm(A0 @ xr) <= config.tol * cxr:
                status = "DualInfeasible"
                break
            byr = float(b0 @ yr)
            if byr < 0 and np.linalg.norm(A0.T @ yr - sr) <= config.tol * (-byr):
                status = "PrimalInfeasible"
                break

        mu = embed_mu(x, s, tau, kappa)
        if not np.isfinite(mu) or mu <= 1e-16 * mu0:
            status = "NumericalFailure"
            break
        mu_history.append(mu / mu0)

        # Deep in the endgame the KKT conditioning approaches 1/eps for
        # float64 and the cancellation-heavy residual vectors turn to noise
        # one step short of the tolerance; promoting the residual and
        # refinement arithmetic to extended precision buys the missing
        # digits.  The factorization, iterate, and line search stay float64.
        hi = mu < config.highprec_mu * mu0
        if hi:
            if As_hi is None:
                As_hi = As.astype(np.longdouble)
                AsT_hi = AsT.astype(np.longdouble)
                ch_hi = ch.astype(np.longdouble)
                bs_hi = bs.astype(np.longdouble)
            Am, ATm, chm, bsm = As_hi, AsT_hi, ch_hi, bs_hi
            xw = x.astype(np.longdouble)
            yw = y.astype(np.longdouble)
            sw = s.astype(np.longdouble)
        else:
            Am, ATm, chm, bsm = As, AsT, ch, bs
            xw, yw, sw = x, y, s

        rP = Am @ xw - bsm * tau
        rD = ATm @ yw + sw - chm * tau
        rG = bsm @ yw - chm @ xw - kappa
        grad = lay.barrier_grad(xw)
        nn_diag, exp_H = lay.hessian_blocks(x)
        try:
            lu = kkt.factor(mu, nn_diag, exp_H)
        except RuntimeError:
            status = "NumericalFailure"
            break

        rounds = config.refine_rounds + (3 if hi else 0)

        def ksolve(rhs_x, rhs_y):
            rhs = np.concatenate([rhs_x, rhs_y])
            sol = lu.solve(np.asarray(rhs, dtype=np.float64)).astype(rhs.dtype)
            for _ in range(rounds):
                top, bot = kkt_mul(mu, sol[:n], sol[n:])
                r = rhs - np.concatenate([top, bot])
                sol = sol + lu.solve(np.asarray(r, dtype=np.float64))
            return sol[:n], sol[n:]

        # tau-column solve, shared by the affine probe and the combined step
        u1x, u1y = ksolve(-chm, bsm)
        phi1 = chm @ u1x + bsm @ u1y

        def direction(sigma):
            r1 = -sw - sigma * mu * grad + (1.0 - sigma) * rD
            u0x, u0y = ksolve(r1, -(1.0 - sigma) * rP)
            phi0 = chm @ u0x + bsm @ u0y
            denom = kappa / tau - phi1
            if denom <= 0 or not np.isfinite(denom):
                return None
            dtau = (sigma * mu / tau - kappa - (1.0 - sigma) * rG + phi0) / denom
            dx = u0x + dtau * u1x
            dyh = u0y + dtau * u1y  # this is -dy
            # ds from the dual equality row: algebraically equal to the
            # centrality form -s - sigma*mu*grad - mu*H@dx, but free of the
            # 1/mu-amplified cancellation that floors the dual residual
            # near convergence
            ds = -(1.0 - sigma) * rD + chm * dtau + ATm @ dyh
            dkappa = sigma * mu / tau - kappa - (kappa / tau) * dtau
            return (np.asarray(dx, dtype=np.float64),
                    np.asarray(-dyh, dtype=np.float64),
                    np.asarray(ds, dtype=np.float64),
                    float(dtau), float(dkappa))

        guard = bool(np.any(mask)) and mu > config.neighborhood_mu_floor * mu0
        ratio0 = 0.0
        if guard:
            _, ratio0 = path_ratio(x, s, tau, kappa)
        prod0 = prod_ratio(x, s, tau, kappa, mu)

        aff = direction(0.0)
        if aff is None:
            status = "NumericalFailure"
            break
        alpha_aff = search(aff[0], aff[2], aff[3], aff[4], 1.0, False, 0.0,
                           probe=True)
        sigma = float(np.clip((1.0 - alpha_aff) ** 3, config.sigma_min, config.sigma_max))
        if force_center or (guard and ratio0 > config.neighborhood) \
                or prod0 < config.product_floor:
            sigma = config.sigma_max
            force_center = False

        step = direction(sigma)
        if step is None or not all(np.all(np.isfinite(np.atleast_1d(d))) for d in step):
            status = "NumericalFailure"
            break
        dx, dy, ds, dtau, dkappa = step

        alpha = search(dx, ds, dtau, dkappa, config.step_fraction, guard, ratio0)
        if config.verbose:
            print(f"  iter {iters:3d}  mu={mu / mu0:9.2e}  sigma={sigma:5.2f}  "
                  f"alpha={alpha:6.3f}  tau={tau:8.2e}  kappa={kappa:8.2e}  "
                  f"res={max(res.values()):9.2e}")
        if alpha < 1e-10:
            stall += 1
            if stall >= 3:
                status = "NumericalFailure"
                break
            force_center = True
            continue
        if alpha < 0.05:
            stall += 1
            if stall >= 5:
                status = "NumericalFailure"
                break
            force_center = True
        else:
            stall = 0

        x = x + alpha * dx
        y = y + alpha * dy
        s = s + alpha * ds
        tau = tau + alpha * dtau
        kappa = kappa + alpha * dkappa

    if final is None:
        xo, yo, so = unscale(x / tau, -y / tau, s / tau)
        res = _residual_dict(program, xo, yo, so)
        if status not in ("PrimalInfeasible", "DualInfeasible"):
            yo, res = dual_polish(xo, yo, so, res)
    else:
        xo, yo, so, res = final
    if status not in ("PrimalInfeasible", "DualInfeasible") and max(res.values()) <= config.tol:
        status = "Optimal"
    return ConicSolution(
        x=xo,
        y=yo,
        s=so,
        status=status,
        iterations=iters,
        residuals=res,
        objective=program.objective(xo),
        mu_history=tuple(mu_history),
    )
