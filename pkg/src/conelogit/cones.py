"""Cone blocks and the exponential-cone barrier.

A conic variable vector is partitioned into ordered blocks: free variables,
nonnegative orthants, and three-dimensional exponential cones

    K_exp = cl{ (x1, x2, x3) : x2 > 0,  x1 >= x2 * exp(x3 / x2) }.

The barrier used for K_exp is the standard 3-logarithmically-homogeneous one,

    F(x) = -log(x2 * log(x1/x2) - x3) - log(x1) - log(x2),

whose gradient and Hessian are implemented in closed form (and pinned to
finite differences in the tests).  :class:`ConeLayout` precomputes index
arrays so that barrier values, gradients, Hessian blocks, and membership
tests run vectorized across all blocks at once; the interior-point solver
calls nothing else per iteration.

The dual cone (under the standard inner product) is

    K_exp^* = cl{ (s1, s2, s3) : s3 < 0,  s1 >= -s3 * exp(s2/s3 - 1) },

and ``dual_interior`` tests strict membership there.  The nonnegative orthant
is self-dual; free blocks have dual {0}.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .data import InvalidInputError

__all__ = ["ConeBlock", "ConeLayout", "BarrierEval", "exp_cone_barrier", "EXP_INIT"]

# A comfortably interior point of K_exp used for initialization:
# u = x2*log(x1/x2) - x3 = log(1.29) + 0.43 ~ 0.6846.
EXP_INIT = (1.29, 1.0, -0.43)


@dataclass(frozen=True)
class ConeBlock:
    """One block of the variable partition: 'free', 'nonneg', or 'exp'.

    ``dim`` counts variable slots; exponential blocks always have dim 3,
    ordered (x1, x2, x3).
    """

    kind: str
    dim: int = 3

    def __post_init__(self) -> None:
        if self.kind not in ("free", "nonneg", "exp"):
            raise InvalidInputError(f"unknown cone kind {self.kind!r}")
        if self.kind == "exp" and self.dim != 3:
            raise InvalidInputError("exponential cone blocks have dimension 3")
        if self.dim < 1:
            raise InvalidInputError("cone block dimension must be positive")


@dataclass(frozen=True)
class BarrierEval:
    value: float
    gradient: np.ndarray
    hessian: np.ndarray


def _exp_parts(x1, x2, x3):
    """(l, u) with l = log(x1/x2) and u = x2*l - x3, the barrier's inner term."""
    l = np.log(x1) - np.log(x2)
    return l, x2 * l - x3


def _exp_grad_hess(x1, x2, x3):
    """Vectorized gradient/Hessian entries of the K_exp barrier.

    Returns (g (B,3), H (B,3,3)); caller guarantees strict interiority.
    """
    l, u = _exp_parts(x1, x2, x3)
    du1 = x2 / x1
    du2 = l - 1.0
    inv_u = 1.0 / u
    g = np.stack(
        [
            -du1 * inv_u - 1.0 / x1,
            -du2 * inv_u - 1.0 / x2,
            inv_u,
        ],
        axis=-1,
    )
    uu = inv_u * inv_u
    H = np.empty(x1.shape + (3, 3), dtype=np.result_type(x1, np.float64))
    H[..., 0, 0] = du1 * du1 * uu + (x2 / (x1 * x1)) * inv_u + 1.0 / (x1 * x1)
    H[..., 0, 1] = du1 * du2 * uu - inv_u / x1
    H[..., 0, 2] = -du1 * uu
    H[..., 1, 1] = du2 * du2 * uu + inv_u / x2 + 1.0 / (x2 * x2)
    H[..., 1, 2] = -du2 * uu
    H[..., 2, 2] = uu
    H[..., 1, 0] = H[..., 0, 1]
    H[..., 2, 0] = H[..., 0, 2]
    H[..., 2, 1] = H[..., 1, 2]
    return g, H


def exp_cone_barrier(x) -> BarrierEval:
    """Barrier value, gradient, and Hessian at an interior point of K_exp.

    Raises :class:`InvalidInputError` if ``x`` is on the boundary or outside.
    """
    x = np.asarray(x, dtype=float).ravel()
    if x.shape != (3,):
        raise InvalidInputError("expected a 3-vector")
    x1, x2, x3 = x
    if not (np.all(np.isfinite(x)) and x1 > 0 and x2 > 0):
        raise InvalidInputError("point is not interior to the exponential cone")
    l, u = _exp_parts(x1, x2, x3)
    if not u > 0:
        raise InvalidInputError("point is not interior to the exponential cone")
    value = -np.log(u) - np.log(x1) - np.log(x2)
    g, H = _exp_grad_hess(np.array([x1]), np.array([x2]), np.array([x3]))
    return BarrierEval(float(value), g[0], H[0])


class ConeLayout:
    """Index plan over a block list enabling vectorized barrier operations."""

    def __init__(self, blocks: tuple[ConeBlock, ...] | list[ConeBlock]):
        blocks = tuple(blocks)
        free, nonneg, heads = [], [], []
        pos = 0
        for blk in blocks:
            idx = range(pos, pos + blk.dim)
            if blk.kind == "free":
                free.extend(idx)
            elif blk.kind == "nonneg":
                nonneg.extend(idx)
            else:
                heads.append(pos)
            pos += blk.dim
        self.blocks = blocks
        self.dim = pos
        self.free_idx = np.array(free, dtype=np.int64)
        self.nn_idx = np.array(nonneg, dtype=np.int64)
        self.exp_head = np.array(heads, dtype=np.int64)
        self.num_exp = len(heads)
        self.nu = float(3 * self.num_exp + self.nn_idx.size)
        cone = np.ones(pos, dtype=bool)
        cone[self.free_idx] = False
        self.cone_mask = cone

    # -- access helpers ------------------------------------------------------
    def _triples(self, v: np.ndarray):
        h = self.exp_head
        return v[h], v[h + 1], v[h + 2]

    def initial_primal(self) -> np.ndarray:
        x = np.zeros(self.dim)
        x[self.nn_idx] = 1.0
        h = self.exp_head
        x[h], x[h + 1], x[h + 2] = EXP_INIT
        return x

    # -- membership ----------------------------------------------------------
    def primal_interior(self, x: np.ndarray) -> bool:
        if not np.all(np.isfinite(x)):
            return False
        if self.nn_idx.size and not np.all(x[self.nn_idx] > 0):
            return False
        if self.num_exp:
            x1, x2, x3 = self._triples(x)
            if not (np.all(x1 > 0) and np.all(x2 > 0)):
                return False
            _, u = _exp_parts(x1, x2, x3)
            if not np.all(u > 0):
                return False
        return True

    def dual_interior(self, s: np.ndarray) -> bool:
        """Strict membership of the cone coordinates of ``s`` in the dual cone.

        Free coordinates are ignored (the solver keeps them pinned at zero).
        """
        if not np.all(np.isfinite(s)):
            return False
        if self.nn_idx.size and not np.all(s[self.nn_idx] > 0):
            return False
        if self.num_exp:
            s1, s2, s3 = self._triples(s)
            if not (np.all(s1 > 0) and np.all(s3 < 0)):
                return False
            margin = np.log(s1) - np.log(-s3) + 1.0 - s2 / s3
            if not np.all(margin > 0):
                return False
        return True

    # -- barrier -------------------------------------------------------------
    def barrier_value(self, x: np.ndarray) -> float:
        total = 0.0
        if self.nn_idx.size:
            total -= np.log(x[self.nn_idx]).sum()
        if self.num_exp:
            x1, x2, x3 = self._triples(x)
            _, u = _exp_parts(x1, x2, x3)
            total -= (np.log(u) + np.log(x1) + np.log(x2)).sum()
        return float(total)

    def barrier_grad(self, x: np.ndarray) -> np.ndarray:
        g = np.zeros(self.dim, dtype=np.result_type(x, np.float64))
        if self.nn_idx.size:
            g[self.nn_idx] = -1.0 / x[self.nn_idx]
        if self.num_exp:
            x1, x2, x3 = self._triples(x)
            ge, _ = _exp_grad_hess(x1, x2, x3)
            h = self.exp_head
            g[h] = ge[:, 0]
            g[h + 1] = ge[:, 1]
            g[h + 2] = ge[:, 2]
        return g

    def hessian_blocks(self, x: np.ndarray):
        """(diag over nonneg slots, stacked (B,3,3) over exp blocks)."""
        nn_diag = 1.0 / x[self.nn_idx] ** 2 if self.nn_idx.size else np.empty(0)
        if self.num_exp:
            x1, x2, x3 = self._triples(x)
            _, He = _exp_grad_hess(x1, x2, x3)
        else:
            He = np.empty((0, 3, 3))
        return nn_diag, He

    def local_dual_norm_sq(self, x: np.ndarray, v: np.ndarray) -> float:
        """v' H(x)^{-1} v over cone coordinates; free slots contribute 0.

        This is the squared dual local norm at the strictly interior point
        ``x``; interior-point line searches use it to measure how far a dual
        candidate sits from the central-path target.
        """
        total = 0.0
        if self.nn_idx.size:
            total += float(((v[self.nn_idx] * x[self.nn_idx]) ** 2).sum())
        if self.num_exp:
            x1, x2, x3 = self._triples(x)
            _, He = _exp_grad_hess(x1, x2, x3)
            h = self.exp_head
            vt = np.stack([v[h], v[h + 1], v[h + 2]], axis=-1)
            sol = np.linalg.solve(He, vt[..., None])[..., 0]
            total += float(np.einsum("bi,bi->", vt, sol))
        return total

    def central_path_distance(self, x: np.ndarray, s: np.ndarray, mu: float | None = None):
        """(mu, distance) of a strictly interior pair from the central path.

        The distance is ``||s + mu grad F(x)||`` in the dual local norm at x,
        over cone coordinates only.  On the central path it is exactly 0.
        ``mu`` defaults to the normalized cone inner product x's / nu; callers
        embedding the program in a larger model pass their own.
        """
        if mu is None:
            mask = self.cone_mask
            mu = float(x[mask] @ s[mask]) / max(self.nu, 1.0)
        total = 0.0
        if self.nn_idx.size:
            # psi_i = s_i - mu/x_i, and H^{-1/2} is diag(x): (s_i x_i - mu)^2
            total += float(((s[self.nn_idx] * x[self.nn_idx] - mu) ** 2).sum())
        if self.num_exp:
            x1, x2, x3 = self._triples(x)
            ge, He = _exp_grad_hess(x1, x2, x3)
            h = self.exp_head
            st = np.stack([s[h], s[h + 1], s[h + 2]], axis=-1)
            psi = st + mu * ge
            try:
                sol = np.linalg.solve(He, psi[..., None])[..., 0]
            except np.linalg.LinAlgError:
                # numerically singular block: x is, for this purpose, on the
                # boundary, i.e. infinitely far from the central path
                return mu, float("inf")
            total += float(np.einsum("bi,bi->", psi, sol))
        if not np.isfinite(total):
            return mu, float("inf")
        return mu, float(np.sqrt(max(total, 0.0)))

    def hess_mul(self, x: np.ndarray, v: np.ndarray) -> np.ndarray:
        """H(x) @ v restricted to cone coordinates (free slots map to 0)."""
        out = np.zeros(self.dim, dtype=np.result_type(x, v, np.float64))
        nn_diag, He = self.hessian_blocks(x)
        if self.nn_idx.size:
            out[self.nn_idx] = nn_diag * v[self.nn_idx]
        if self.num_exp:
            h = self.exp_head
            vt = np.stack([v[h], v[h + 1], v[h + 2]], axis=-1)
            prod = np.einsum("bij,bj->bi", He, vt)
            out[h] = prod[:, 0]
            out[h + 1] = prod[:, 1]
            out[h + 2] = prod[:, 2]
        return out
