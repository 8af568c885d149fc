"""Build exponential-cone programs for the three likelihood families.

Each builder turns (dataset, structure, fixed scales) into a standard-form
program ``max c'x, Ax = b, x in K`` whose optimal objective equals the
maximum log-likelihood over beta.  The common pattern: per-observation
epigraph variables replace log-sum-exp terms, each exp() appearing in a
"sum <= 1" constraint becomes an exponential-cone triple (value, 1, exponent),
the constant 1 is realized by pinning the triple's second slot with its own
equality row, and every <= turns into an equality with a nonnegative slack.
Because the relaxed inequalities carry non-positive objective pressure, they
are tight at the optimum; ``extract_solution`` audits exactly that.

Variable ordering: beta first, then per-observation free auxiliaries, then
cone triples grouped by observation, then slacks.  All assembly is
vectorized COO construction — no per-entry Python loops.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp

from .cones import ConeBlock
from .data import ChoiceDataset, InvalidInputError, NestPartition, TaxonomyTree
from .likelihood import _NLWork, _TNLWork, _segment_lse
from .program import ConicProgram

__all__ = [
    "VarMap",
    "SizingReport",
    "EcpBuild",
    "Extraction",
    "ExtractionRefused",
    "mnl_to_ecp",
    "nl_to_ecp",
    "tnl_to_ecp",
    "extract_solution",
]


@dataclass(frozen=True)
class VarMap:
    """Where each semantic variable lives in the conic variable vector.

    ``z_slots`` maps the per-(observation, group) epigraph variables:
    for NL these are the inclusive-value logs (pair-indexed), for TNL the
    node log-values (slot matrix indexed by (n, node), -1 where inactive).
    ``cone_registry`` names the origin of every Exp block, in block order.
    """

    model: str
    beta_slots: np.ndarray
    t_slots: np.ndarray | None = None
    y_slots: np.ndarray | None = None
    z_slots: np.ndarray | None = None
    cone_registry: tuple = ()


@dataclass(frozen=True)
class SizingReport:
    """Aggregate counts: paper-style size measures plus as-built totals.

    Z is the number of alternative appearances, Lambda the active
    (observation, nest) pairs, Gamma the active internal tree nodes, and
    E = Gamma + Z - N the active tree edges.  ``vars`` counts every built
    slot (each Exp triple contributes its pinned-constant and exponent slots
    on top of the value variable, i.e. +2 per block over the paper-style
    variable accounting).
    """

    model: str
    Z: int
    Lambda: int = 0
    Gamma: int = 0
    E: int = 0
    exp_blocks: int = 0
    vars: int = 0
    eq_rows: int = 0
    slacks: int = 0


class ExtractionRefused(RuntimeError):
    """Raised when extraction is attempted on a non-Optimal solution."""

    def __init__(self, status: str):
        super().__init__(f"cannot extract from a solution with status {status!r}")
        self.status = status


@dataclass(frozen=True)
class EcpBuild:
    """Builder output: the program plus everything extraction needs."""

    program: ConicProgram
    varmap: VarMap
    sizing: SizingReport
    data: ChoiceDataset
    structure: object = None  # NestPartition | TaxonomyTree | None
    lambdas: np.ndarray | None = None
    work: object = None  # _NLWork | _TNLWork | None


@dataclass(frozen=True)
class Extraction:
    beta: np.ndarray
    loglik: float
    audit: dict


def _exp_blocks(count: int) -> list[ConeBlock]:
    blk = ConeBlock("exp")
    return [blk] * count


# ---------------------------------------------------------------------------
# MNL
# ---------------------------------------------------------------------------

def mnl_to_ecp(data: ChoiceDataset) -> EcpBuild:
    """Softmax likelihood as an ECP.

    Variables: beta (p, free), t_n (N, free epigraphs of the per-observation
    log-sum-exp), one Exp triple per (n, j in S_n), one slack per observation.
    Rows: exponent ties, pins, and per-observation "sum z + slack = 1".
    """
    N, p, Z = data.num_observations, data.num_attributes, data.total_appearances
    X = data.flat_attributes
    seg = data.seg_id
    fi = np.arange(Z)

    heads = p + N + 3 * fi + seg  # slack slots interleave per observation
    slack = p + N + 3 * data.starts[1:] + np.arange(N)
    n_vars = p + 2 * N + 3 * Z

    # rows: [0, Z) exponent ties; [Z, 2Z) pins; [2Z, 2Z+N) sums
    rows = np.concatenate([
        np.repeat(fi, p), fi, fi,
        Z + fi,
        2 * Z + seg, 2 * Z + np.arange(N),
    ])
    cols = np.concatenate([
        np.tile(np.arange(p), Z), heads + 2, p + seg,
        heads + 1,
        heads, slack,
    ])
    vals = np.concatenate([
        -X.ravel(), np.ones(Z), np.ones(Z),
        np.ones(Z),
        np.ones(Z), np.ones(N),
    ])
    A = sp.coo_matrix((vals, (rows, cols)), shape=(2 * Z + N, n_vars)).tocsr()
    b = np.concatenate([np.zeros(Z), np.ones(Z), np.ones(N)])

    c = np.zeros(n_vars)
    c[:p] = X[data.chosen_flat].sum(axis=0)
    c[p : p + N] = -1.0

    blocks = [ConeBlock("free", p + N)]
    sizes = data.sizes
    for n in range(N):
        blocks.extend(_exp_blocks(int(sizes[n])))
        blocks.append(ConeBlock("nonneg", 1))
    program = ConicProgram(c, A, b, tuple(blocks))

    registry = tuple(
        ("obs-alt", n, j) for n, j in zip(seg.tolist(), data.flat_offered.tolist())
    )
    vmap = VarMap(
        model="mnl",
        beta_slots=np.arange(p),
        t_slots=p + np.arange(N),
        z_slots=heads,
        cone_registry=registry,
    )
    sizing = SizingReport(
        model="mnl", Z=Z, exp_blocks=Z, vars=n_vars,
        eq_rows=2 * Z + N, slacks=N,
    )
    return EcpBuild(program, vmap, sizing, data)


# ---------------------------------------------------------------------------
# NL
# ---------------------------------------------------------------------------

def _check_lambda_range(lam: np.ndarray, what: str) -> np.ndarray:
    lam = np.asarray(lam, dtype=float).ravel()
    if not np.all(np.isfinite(lam)) or np.any(lam <= 0) or np.any(lam > 1):
        raise InvalidInputError(
            f"{what} must lie in (0, 1]; the relaxation is not valid otherwise"
        )
    return lam


def nl_to_ecp(
    data: ChoiceDataset,
    nests: NestPartition,
    lambda_fixed=None,
    *,
    work: _NLWork | None = None,
) -> EcpBuild:
    """Nested-logit likelihood at fixed scales as an ECP.

    Two cone families: "within" triples tie exp(beta'a/lambda_l - z_nl) to the
    inclusive-value epigraph z_nl, "across" triples tie exp(lambda_l z_nl - y_n)
    to the top-level epigraph y_n.  Only active (n, nest) pairs are built.
    """
    if work is None:
        work = _NLWork(data, nests)
    lam = _check_lambda_range(
        nests.lambdas if lambda_fixed is None else lambda_fixed, "nest scales"
    )
    if lam.size != nests.num_nests:
        raise InvalidInputError("lambda_fixed has wrong length")

    N, p, Z = data.num_observations, data.num_attributes, data.total_appearances
    L = work.num_pairs  # Lambda: active pairs
    Xs = work.X_sorted
    pair_of_sorted = work.pair_of_sorted
    lam_pair = lam[work.pair_nest]
    lam_sorted = lam_pair[pair_of_sorted]

    base_z = p + N
    base_k = base_z + L
    base_ws = base_k + 3 * Z
    base_h = base_ws + L
    base_ts = base_h + 3 * L
    n_vars = base_ts + N
    r = np.arange(Z)
    q = np.arange(L)
    head_k = base_k + 3 * r
    head_h = base_h + 3 * q

    # rows: within ties Z | across ties L | pins Z + L | within sums L | top sums N
    row_wt = r
    row_at = Z + q
    row_pk = Z + L + r
    row_ph = 2 * Z + L + q
    row_ws = 2 * Z + 2 * L + pair_of_sorted
    row_ws_slack = 2 * Z + 2 * L + q
    row_ts = 2 * Z + 3 * L + work.pair_obs
    row_ts_slack = 2 * Z + 3 * L + np.arange(N)
    meq = 2 * Z + 3 * L + N

    rows = np.concatenate([
        np.repeat(row_wt, p), row_wt, row_wt,
        row_at, row_at, row_at,
        row_pk, row_ph,
        row_ws, row_ws_slack,
        row_ts, row_ts_slack,
    ])
    cols = np.concatenate([
        np.tile(np.arange(p), Z), head_k + 2, base_z + pair_of_sorted,
        head_h + 2, base_z + q, p + work.pair_obs,
        head_k + 1, head_h + 1,
        head_k, base_ws + q,
        head_h, base_ts + np.arange(N),
    ])
    vals = np.concatenate([
        (-Xs / lam_sorted[:, None]).ravel(), np.ones(Z), np.ones(Z),
        np.ones(L), -lam_pair, np.ones(L),
        np.ones(Z), np.ones(L),
        np.ones(Z), np.ones(L),
        np.ones(L), np.ones(N),
    ])
    A = sp.coo_matrix((vals, (rows, cols)), shape=(meq, n_vars)).tocsr()
    b = np.concatenate([np.zeros(Z + L), np.ones(Z + L), np.ones(L + N)])

    lam_chosen = lam_pair[work.chosen_pair]
    c = np.zeros(n_vars)
    c[:p] = (data.flat_attributes[data.chosen_flat] / lam_chosen[:, None]).sum(axis=0)
    c[p : p + N] = -1.0  # y_n
    c[base_z + work.chosen_pair] = lam_chosen - 1.0

    blocks: list[ConeBlock] = [ConeBlock("free", p + N + L)]
    blocks.extend(_exp_blocks(Z))
    blocks.append(ConeBlock("nonneg", L))
    blocks.extend(_exp_blocks(L))
    blocks.append(ConeBlock("nonneg", N))
    program = ConicProgram(c, A, b, tuple(blocks))

    sorted_alt = data.flat_offered[work.order]
    registry = tuple(
        ("within", n, j, l)
        for n, j, l in zip(
            data.seg_id[work.order].tolist(),
            sorted_alt.tolist(),
            nests.membership[sorted_alt].tolist(),
        )
    ) + tuple(
        ("across", n, l)
        for n, l in zip(work.pair_obs.tolist(), work.pair_nest.tolist())
    )
    vmap = VarMap(
        model="nl",
        beta_slots=np.arange(p),
        y_slots=p + np.arange(N),
        z_slots=base_z + q,
        cone_registry=registry,
    )
    sizing = SizingReport(
        model="nl", Z=Z, Lambda=L, exp_blocks=Z + L,
        vars=n_vars, eq_rows=meq, slacks=L + N,
    )
    return EcpBuild(program, vmap, sizing, data, nests, lam, work)


# ---------------------------------------------------------------------------
# TNL
# ---------------------------------------------------------------------------

def tnl_to_ecp(
    data: ChoiceDataset,
    tree: TaxonomyTree,
    lambda_fixed=None,
    *,
    work: _TNLWork | None = None,
) -> EcpBuild:
    """Tree-nested likelihood at fixed scales as an ECP.

    One free log-value variable per active node, one Exp triple per active
    edge (parent k, child s): (y_ks, 1, (lambda_s/lambda_k) z_s - z_k), plus
    leaf rows z >= beta'a and per-internal-node "sum of child y = 1" rows.
    """
    if work is None:
        work = _TNLWork(data, tree)
    lam = np.asarray(
        tree.lambdas if lambda_fixed is None else lambda_fixed, dtype=float
    ).ravel()
    tree.with_lambdas(lam)  # full admissibility validation (raises if violated)

    N, p, Z = data.num_observations, data.num_attributes, data.total_appearances
    K = tree.num_nodes
    active = work.active
    internal_mask = ~tree.is_leaf

    an, ak = np.nonzero(active)  # n-major
    num_active = an.size
    zslot = np.full((N, K), -1, dtype=np.int64)
    zslot[an, ak] = p + np.arange(num_active)

    active_int = active & internal_mask[None, :]
    gn, gk = np.nonzero(active_int)
    Gamma = gn.size
    gslot = np.full((N, K), -1, dtype=np.int64)
    gslot[gn, gk] = np.arange(Gamma)

    edge_mask = active.copy()
    edge_mask[:, tree.root] = False
    en, es = np.nonzero(edge_mask)
    ek = tree.parent[es]
    E = en.size
    assert E == Gamma + Z - N

    base_t = p + num_active
    base_ls = base_t + 3 * E
    base_ns = base_ls + Z
    n_vars = base_ns + Gamma
    e = np.arange(E)
    head_e = base_t + 3 * e
    fi = np.arange(Z)
    seg = data.seg_id
    X = data.flat_attributes
    ratio = lam[es] / lam[ek]

    # rows: leaf ties Z | edge ties E | pins E | node sums Gamma
    row_leaf = fi
    row_tie = Z + e
    row_pin = Z + E + e
    row_sum_of_edge = Z + 2 * E + gslot[en, ek]
    row_sum_slack = Z + 2 * E + np.arange(Gamma)
    meq = Z + 2 * E + Gamma

    rows = np.concatenate([
        row_leaf, np.repeat(row_leaf, p), row_leaf,
        row_tie, row_tie, row_tie,
        row_pin,
        row_sum_of_edge, row_sum_slack,
    ])
    cols = np.concatenate([
        zslot[seg, work.leaf_of_flat], np.tile(np.arange(p), Z), base_ls + fi,
        head_e + 2, zslot[en, es], zslot[en, ek],
        head_e + 1,
        head_e, base_ns + np.arange(Gamma),
    ])
    vals = np.concatenate([
        np.ones(Z), (-X).ravel(), -np.ones(Z),
        np.ones(E), -ratio, np.ones(E),
        np.ones(E),
        np.ones(E), np.ones(Gamma),
    ])
    A = sp.coo_matrix((vals, (rows, cols)), shape=(meq, n_vars)).tocsr()
    b = np.concatenate([np.zeros(Z + E), np.ones(E), np.ones(Gamma)])

    # objective: telescopes along each observation's chosen path
    paths = work.paths[data.chosen]  # (N, T)
    T = tree.depth
    robs = np.arange(N)
    deepest = paths[:, T - 2]
    c = np.zeros(n_vars)
    c[:p] = (X[data.chosen_flat] / lam[deepest][:, None]).sum(axis=0)
    np.add.at(c, zslot[robs, paths[:, 0]], -1.0)
    for t in range(1, T - 1):
        coef = lam[paths[:, t]] / lam[paths[:, t - 1]] - 1.0
        np.add.at(c, zslot[robs, paths[:, t]], coef)

    blocks: list[ConeBlock] = [ConeBlock("free", p + num_active)]
    blocks.extend(_exp_blocks(E))
    blocks.append(ConeBlock("nonneg", Z + Gamma))
    program = ConicProgram(c, A, b, tuple(blocks))

    registry = tuple(
        ("edge", n, k, s)
        for n, k, s in zip(en.tolist(), ek.tolist(), es.tolist())
    )
    vmap = VarMap(
        model="tnl",
        beta_slots=np.arange(p),
        z_slots=zslot,
        cone_registry=registry,
    )
    sizing = SizingReport(
        model="tnl", Z=Z, Gamma=Gamma, E=E, exp_blocks=E,
        vars=n_vars, eq_rows=meq, slacks=Z + Gamma,
    )
    return EcpBuild(program, vmap, sizing, data, tree, lam, work)


# ---------------------------------------------------------------------------
# Extraction
# ---------------------------------------------------------------------------

def extract_solution(solution, build: EcpBuild) -> Extraction:
    """Map a conic optimum back to beta, with tightness and objective audits.

    The audit reports, per observation, the largest slack among that
    observation's relaxed log-sum-exp inequalities (all should vanish at the
    optimum), plus the relative difference between the conic objective and
    the model log-likelihood recomputed at the extracted beta.
    """
    if solution.status != "Optimal":
        raise ExtractionRefused(solution.status)
    x = solution.x
    data = build.data
    beta = x[build.varmap.beta_slots].copy()
    N = data.num_observations

    if build.varmap.model == "mnl":
        from .likelihood import mnl_log_likelihood

        rep = mnl_log_likelihood(beta, data)
        u = data.flat_attributes @ beta
        lse = _segment_lse(u, data.starts)
        per_obs_slack = np.abs(x[build.varmap.t_slots] - lse)
    elif build.varmap.model == "nl":
        work = build.work
        lam = build.lambdas
        rep = work.loglik(beta, lam, want_grad_beta=False, want_grad_lambda=False)
        z = x[build.varmap.z_slots]
        u_sorted = work.X_sorted @ beta
        lam_pair = lam[work.pair_nest]
        log_w = _segment_lse(u_sorted / lam_pair[work.pair_of_sorted], work.pair_starts)
        top = _segment_lse(lam_pair * z, work.obs_pair_starts)
        pair_slack = z - log_w
        y_slack = x[build.varmap.y_slots] - top
        per_obs_slack = np.abs(y_slack)
        np.maximum.at(per_obs_slack, work.pair_obs, np.abs(pair_slack))
    else:
        work = build.work
        tree = build.structure
        lam = build.lambdas
        rep = work.loglik(beta, lam, want_grad_beta=False, want_grad_lambda=False)
        zslot = build.varmap.z_slots
        # recompute log-values bottom-up from the conic z's
        per_obs_slack = np.zeros(N)
        zmat = np.where(zslot >= 0, x[np.maximum(zslot, 0)], -np.inf)
        u = data.flat_attributes @ beta
        leaf_slack = zmat[data.seg_id, work.leaf_of_flat] - u
        np.maximum.at(per_obs_slack, data.seg_id, np.abs(leaf_slack))
        for k in work.bottom_up:
            kids = list(tree.children[k])
            ratios = lam[kids] / lam[k]
            # inactive nodes carry -inf log-values; the resulting nan/inf
            # lanes are masked out before the log
            with np.errstate(invalid="ignore", divide="ignore"):
                inner = np.exp(zmat[:, kids] * ratios - zmat[:, [k]])
                lhs = np.log(np.nansum(np.where(np.isfinite(inner), inner, 0.0), axis=1))
            node_slack = -lhs  # z_k - log sum exp(ratio z_s) = -log(sum exp(... - z_k))
            rows = work.active[:, k]
            np.maximum.at(per_obs_slack, np.flatnonzero(rows), np.abs(node_slack[rows]))

    obj_rel_err = abs(rep.value - solution.objective) / (1.0 + abs(solution.objective))
    audit = {
        "per_observation_slack": per_obs_slack,
        "max_slack": float(np.max(per_obs_slack)) if N else 0.0,
        "objective_rel_err": float(obj_rel_err),
    }
    return Extraction(beta=beta, loglik=rep.value, audit=audit)
