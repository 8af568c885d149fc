"""Core data structures for discrete-choice estimation.

A :class:`ChoiceDataset` holds N independent observations.  Observation ``n``
offers a subset ``S_n`` of the ``m`` alternatives, records which alternative
was chosen, and attaches a ``p``-vector of attributes to every offered
alternative.  Grouping structures for correlated alternatives come in two
flavours: a flat :class:`NestPartition` (one layer of nests) and a
:class:`TaxonomyTree` (a fixed-depth hierarchy whose leaves are the
alternatives).

All containers are frozen after construction and may be shared freely across
threads.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

__all__ = [
    "InvalidInputError",
    "ChoiceDataset",
    "NestPartition",
    "TaxonomyTree",
    "LogLikelihoodReport",
]


class InvalidInputError(ValueError):
    """Raised when inputs violate a documented precondition."""


def _as_float_matrix(a, rows: int, cols: int, what: str) -> np.ndarray:
    out = np.asarray(a, dtype=float)
    if out.shape != (rows, cols):
        raise InvalidInputError(f"{what}: expected shape {(rows, cols)}, got {out.shape}")
    if not np.all(np.isfinite(out)):
        raise InvalidInputError(f"{what}: non-finite entries")
    return out


@dataclass(frozen=True)
class ChoiceDataset:
    """Immutable container of observations, offer sets and attributes.

    Parameters
    ----------
    num_alternatives:
        Size ``m`` of the alternative universe; alternatives are ``0..m-1``.
    offered:
        One integer array per observation listing the offered alternatives
        ``S_n`` (distinct, each in ``[0, m)``).
    chosen:
        Array of length N; ``chosen[n]`` is the chosen alternative and must be
        a member of ``offered[n]``.
    attributes:
        One ``(|S_n|, p)`` float array per observation, row ``i`` belonging to
        ``offered[n][i]``.  All entries must be finite and ``p`` must agree
        across observations.
    """

    num_alternatives: int
    offered: tuple[np.ndarray, ...]
    chosen: np.ndarray
    attributes: tuple[np.ndarray, ...]

    # Derived, filled in __post_init__ (kept out of __init__/repr).
    num_observations: int = field(init=False, repr=False)
    num_attributes: int = field(init=False, repr=False)

    def __post_init__(self) -> None:
        m = int(self.num_alternatives)
        if m < 1:
            raise InvalidInputError("num_alternatives must be positive")
        offered = tuple(np.asarray(o, dtype=np.int64).ravel() for o in self.offered)
        chosen = np.asarray(self.chosen, dtype=np.int64).ravel()
        n_obs = len(offered)
        if n_obs == 0:
            raise InvalidInputError("need at least one observation")
        if chosen.shape != (n_obs,):
            raise InvalidInputError("chosen must have one entry per observation")
        if len(self.attributes) != n_obs:
            raise InvalidInputError("attributes must have one block per observation")
        p = np.asarray(self.attributes[0], dtype=float).shape
        if len(p) != 2:
            raise InvalidInputError("attribute blocks must be 2-D (|S_n|, p)")
        p = p[1]
        if p < 1:
            raise InvalidInputError("num_attributes must be positive")
        attrs = []
        chosen_pos = np.empty(n_obs, dtype=np.int64)
        for n, (s_n, a_n) in enumerate(zip(offered, self.attributes)):
            if s_n.size < 1:
                raise InvalidInputError(f"observation {n}: empty offer set")
            if s_n.min() < 0 or s_n.max() >= m:
                raise InvalidInputError(f"observation {n}: alternative id out of range")
            if np.unique(s_n).size != s_n.size:
                raise InvalidInputError(f"observation {n}: duplicate offered alternative")
            hit = np.flatnonzero(s_n == chosen[n])
            if hit.size != 1:
                raise InvalidInputError(
                    f"observation {n}: chosen alternative {chosen[n]} not offered"
                )
            chosen_pos[n] = hit[0]
            attrs.append(_as_float_matrix(a_n, s_n.size, p, f"observation {n} attributes"))

        sizes = np.array([s.size for s in offered], dtype=np.int64)
        starts = np.zeros(n_obs + 1, dtype=np.int64)
        np.cumsum(sizes, out=starts[1:])

        set_ = object.__setattr__
        set_(self, "offered", offered)
        set_(self, "chosen", chosen)
        set_(self, "attributes", tuple(attrs))
        set_(self, "num_observations", n_obs)
        set_(self, "num_attributes", int(p))
        # Flat (CSR-like) views used by the vectorized likelihood code.
        set_(self, "_sizes", sizes)
        set_(self, "_starts", starts)
        set_(self, "_flat_offered", np.concatenate(offered))
        set_(self, "_flat_attrs", np.concatenate(attrs, axis=0))
        set_(self, "_seg_id", np.repeat(np.arange(n_obs), sizes))
        set_(self, "_chosen_pos", chosen_pos)
        set_(self, "_chosen_flat", starts[:-1] + chosen_pos)

    # -- flat layout -------------------------------------------------------
    @property
    def sizes(self) -> np.ndarray:
        """|S_n| per observation."""
        return self._sizes  # type: ignore[attr-defined]

    @property
    def starts(self) -> np.ndarray:
        """Offsets of each observation's segment in the flat layout (N+1)."""
        return self._starts  # type: ignore[attr-defined]

    @property
    def flat_offered(self) -> np.ndarray:
        return self._flat_offered  # type: ignore[attr-defined]

    @property
    def flat_attributes(self) -> np.ndarray:
        """(Z, p) stack of all attribute rows, observation-major."""
        return self._flat_attrs  # type: ignore[attr-defined]

    @property
    def seg_id(self) -> np.ndarray:
        """Observation index of each flat row (Z,)."""
        return self._seg_id  # type: ignore[attr-defined]

    @property
    def chosen_pos(self) -> np.ndarray:
        """Position of the chosen alternative within its offer set (N,)."""
        return self._chosen_pos  # type: ignore[attr-defined]

    @property
    def chosen_flat(self) -> np.ndarray:
        """Flat-layout row index of the chosen alternative per observation."""
        return self._chosen_flat  # type: ignore[attr-defined]

    @property
    def total_appearances(self) -> int:
        """Z = sum of |S_n| -- total alternative appearances."""
        return int(self._starts[-1])  # type: ignore[attr-defined]


@dataclass(frozen=True)
class NestPartition:
    """Flat one-level grouping of alternatives into L nests.

    ``membership[j]`` is the nest index of alternative ``j``; ``lambdas[l]``
    is the scale (dissimilarity) parameter of nest ``l``, in (0, 1].
    """

    membership: np.ndarray
    lambdas: np.ndarray

    def __post_init__(self) -> None:
        membership = np.asarray(self.membership, dtype=np.int64).ravel()
        lambdas = np.asarray(self.lambdas, dtype=float).ravel()
        L = lambdas.size
        if L < 1:
            raise InvalidInputError("need at least one nest")
        if membership.size < 1:
            raise InvalidInputError("membership must cover the alternatives")
        if membership.min() < 0 or membership.max() >= L:
            raise InvalidInputError("membership refers to a nonexistent nest")
        if np.unique(membership).size != L:
            raise InvalidInputError("every nest must contain at least one alternative")
        if not np.all(np.isfinite(lambdas)) or lambdas.min() <= 0 or lambdas.max() > 1:
            raise InvalidInputError("nest scale parameters must lie in (0, 1]")
        object.__setattr__(self, "membership", membership)
        object.__setattr__(self, "lambdas", lambdas)

    @property
    def num_nests(self) -> int:
        return int(self.lambdas.size)

    @property
    def num_alternatives(self) -> int:
        return int(self.membership.size)


@dataclass(frozen=True)
class TaxonomyTree:
    """Rooted tree of scale parameters whose leaves carry the alternatives.

    Nodes are ``0..num_nodes-1``; ``parent[k]`` is the parent id (``-1`` for
    the single root).  Every leaf sits at the same depth T.  ``leaf_alt[j]``
    is the leaf node carrying alternative ``j`` (a bijection between leaves
    and alternatives).  ``lambdas[k]`` is the node's scale parameter in
    (0, 1]: 1 at the root and at every leaf, and weakly decreasing from the
    root down through internal nodes (``lambda[parent] >= lambda[child]``
    whenever the child is internal).  That ordering is what keeps the model a
    random-utility model and, downstream, what makes the conic relaxation of
    the likelihood tight.
    """

    parent: np.ndarray
    leaf_alt: np.ndarray
    lambdas: np.ndarray

    def __post_init__(self) -> None:
        parent = np.asarray(self.parent, dtype=np.int64).ravel()
        leaf_alt = np.asarray(self.leaf_alt, dtype=np.int64).ravel()
        lambdas = np.asarray(self.lambdas, dtype=float).ravel()
        n_nodes = parent.size
        if lambdas.shape != (n_nodes,):
            raise InvalidInputError("lambdas must have one entry per node")
        roots = np.flatnonzero(parent < 0)
        if roots.size != 1:
            raise InvalidInputError("tree must have exactly one root")
        root = int(roots[0])
        if parent.max() >= n_nodes:
            raise InvalidInputError("parent refers to a nonexistent node")

        # Depth of every node; also detects cycles (a cycle never reaches the
        # root, leaving its depth unresolved).
        depth = np.full(n_nodes, -1, dtype=np.int64)
        depth[root] = 0
        pending = True
        while pending:
            pending = False
            resolvable = (depth < 0) & (depth[np.where(parent >= 0, parent, root)] >= 0)
            resolvable &= parent >= 0
            if np.any(resolvable):
                depth[resolvable] = depth[parent[resolvable]] + 1
                pending = True
        if np.any(depth < 0):
            raise InvalidInputError("tree is disconnected or cyclic")

        has_child = np.zeros(n_nodes, dtype=bool)
        has_child[parent[parent >= 0]] = True
        is_leaf = ~has_child
        leaf_ids = np.flatnonzero(is_leaf)
        if np.unique(depth[leaf_ids]).size != 1:
            raise InvalidInputError("all leaves must sit at the same depth")
        if sorted(leaf_alt.tolist()) != sorted(leaf_ids.tolist()):
            raise InvalidInputError("leaf_alt must be a bijection onto the leaf set")
        if not np.all(np.isfinite(lambdas)) or lambdas.min() <= 0 or lambdas.max() > 1:
            raise InvalidInputError("scale parameters must lie in (0, 1]")
        if abs(lambdas[root] - 1.0) > 0:
            raise InvalidInputError("root scale must equal 1")
        if np.any(np.abs(lambdas[leaf_ids] - 1.0) > 0):
            raise InvalidInputError("leaf scales must equal 1")
        internal = np.flatnonzero(~is_leaf)
        for k in internal:
            if k == root:
                continue
            if lambdas[k] > lambdas[parent[k]] + 1e-12:
                raise InvalidInputError(
                    f"scale must not increase from node {parent[k]} to internal child {k}"
                )

        children: list[list[int]] = [[] for _ in range(n_nodes)]
        for k in range(n_nodes):
            if parent[k] >= 0:
                children[parent[k]].append(k)

        set_ = object.__setattr__
        set_(self, "parent", parent)
        set_(self, "leaf_alt", leaf_alt)
        set_(self, "lambdas", lambdas)
        set_(self, "_root", root)
        set_(self, "_depth", depth)
        set_(self, "_is_leaf", is_leaf)
        set_(self, "_children", tuple(tuple(c) for c in children))

    @property
    def num_nodes(self) -> int:
        return int(self.parent.size)

    @property
    def num_alternatives(self) -> int:
        return int(self.leaf_alt.size)

    @property
    def root(self) -> int:
        return self._root  # type: ignore[attr-defined]

    @property
    def depth_of(self) -> np.ndarray:
        return self._depth  # type: ignore[attr-defined]

    @property
    def depth(self) -> int:
        """Tree depth T counted in levels (root = level 1, leaves = level T)."""
        return int(self.depth_of.max()) + 1

    @property
    def is_leaf(self) -> np.ndarray:
        return self._is_leaf  # type: ignore[attr-defined]

    @property
    def children(self) -> tuple[tuple[int, ...], ...]:
        return self._children  # type: ignore[attr-defined]

    @property
    def internal_nodes(self) -> np.ndarray:
        return np.flatnonzero(~self.is_leaf)

    def path_to_root(self, leaf: int) -> list[int]:
        """Node ids from the root down to ``leaf`` inclusive."""
        path = [int(leaf)]
        while self.parent[path[-1]] >= 0:
            path.append(int(self.parent[path[-1]]))
        return path[::-1]

    def with_lambdas(self, lambdas: np.ndarray) -> "TaxonomyTree":
        return TaxonomyTree(self.parent, self.leaf_alt, lambdas)


@dataclass(frozen=True)
class LogLikelihoodReport:
    """Value and gradients of a log-likelihood evaluation.

    ``value`` is always the exact sum of ``per_observation``.  Gradients are
    optional: ``gradient_lambda`` is indexed by nest for flat models and by
    internal node for tree models.
    """

    value: float
    per_observation: np.ndarray
    gradient_beta: np.ndarray | None = None
    gradient_lambda: np.ndarray | None = None
