"""Seeded synthetic instance generation for the benchmark grids.

Attributes are i.i.d. uniform on [0, 3]; offer sets are uniform random
subsets of a fixed size; the chosen alternative is uniform over the offer
set.  Scale parameters draw an instance-level interval [l, u] with
u ~ U[0.8, 0.9] and l ~ U[0.1, 0.2], then each scale i.i.d. from [l, u];
tree scales are additionally permuted into place by a sift-down pass so
every internal parent weakly dominates its internal children (raw i.i.d.
draws would violate admissibility).  The pass is a plain heapify, so the
multiset of drawn values is preserved exactly.

All randomness flows through counter-based Philox streams keyed by the
instance seed, one stream per field, so the sub-draws are independent of
each other and of evaluation order.  Generation is a pure function of the
spec.  Instances serialize to a versioned JSON document whose reals are
written in shortest round-trip form, making save/load lossless.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from .data import ChoiceDataset, InvalidInputError, NestPartition, TaxonomyTree

__all__ = [
    "InstanceSpec",
    "Instance",
    "SIZE_TABLE",
    "gen_instance",
    "gen_lambda",
    "save_instance",
    "load_instance",
]

SIZE_TABLE = {"S": (500, 50), "M": (1000, 100), "L": (2000, 200)}

_MODELS = ("mnl", "nl", "tnl")

# Stream ids for the per-field Philox generators.  Keeping them distinct in
# the counter's top word means no two fields ever share random state.
STREAM_ATTRS = 1
STREAM_OFFER = 2
STREAM_CHOSEN = 3
STREAM_NESTS = 4
STREAM_LAMBDA = 5
STREAM_TREE = 6

_SCHEMA_VERSION = 1


def _stream(seed: int, stream_id: int) -> np.random.Generator:
    """Counter-based generator: same (seed, stream) always replays identically."""
    bits = np.random.Philox(key=np.uint64(seed), counter=[0, 0, 0, np.uint64(stream_id)])
    return np.random.Generator(bits)


@dataclass(frozen=True)
class InstanceSpec:
    """Recipe for one synthetic instance.

    ``size`` is a named tier from ``SIZE_TABLE`` or an explicit ``(N, m)``
    pair for desk-scale runs.  ``offer_rate`` fixes every offer set's size
    at ``max(1, floor(rate * m))``.  ``branching`` gives the level-1 and
    level-2 child counts of the depth-4 taxonomy (leaves sit at level 4).
    """

    model: str
    p: int
    size: object = "S"
    offer_rate: float = 0.5
    num_nests: int = 2
    branching: tuple = (2, 2)
    seed: int = 0

    def __post_init__(self) -> None:
        if self.model not in _MODELS:
            raise InvalidInputError(f"model must be one of {_MODELS}")
        if self.p < 1:
            raise InvalidInputError("p must be at least 1")
        if not 0.0 < self.offer_rate <= 1.0:
            raise InvalidInputError("offer_rate must lie in (0, 1]")
        N, m = self.resolve_size()
        if N < 1 or m < 1:
            raise InvalidInputError("instance size must be positive")
        if self.model == "nl":
            if self.num_nests < 2:
                raise InvalidInputError("nested instances need at least 2 nests")
            if m < self.num_nests:
                raise InvalidInputError("cannot fill every nest: m < num_nests")
        if self.model == "tnl":
            b1, b2 = self.branching
            if b1 not in (2, 3) or b2 not in (2, 3):
                raise InvalidInputError("branching factors must come from {2, 3}")
            if m < b1 * b2:
                raise InvalidInputError(
                    f"cannot attach {m} alternatives to {b1 * b2} level-3 nodes"
                )

    def resolve_size(self) -> tuple[int, int]:
        if isinstance(self.size, str):
            if self.size not in SIZE_TABLE:
                raise InvalidInputError(f"unknown size tier {self.size!r}")
            return SIZE_TABLE[self.size]
        N, m = self.size
        return int(N), int(m)

    @property
    def offer_size(self) -> int:
        _, m = self.resolve_size()
        return max(1, int(self.offer_rate * m))


@dataclass(frozen=True)
class Instance:
    """A generated (or loaded) problem instance."""

    model: str
    data: ChoiceDataset
    structure: object = None  # NestPartition | TaxonomyTree | None
    lambdas: np.ndarray | None = None  # generating scales (per nest / per node)
    spec: InstanceSpec | None = None


def _sift_down(values: np.ndarray, children: list[list[int]], order: list[int]) -> None:
    """In-place heapify: parent weakly dominates children among the touched nodes."""
    for start in order:
        k = start
        while children[k]:
            kids = children[k]
            best = max(kids, key=lambda c: (values[c], -c))
            if values[best] <= values[k]:
                break
            values[k], values[best] = values[best], values[k]
            k = best


def gen_lambda(count_or_tree, seed: int):
    """Draw scale parameters for a flat partition (int) or a taxonomy tree.

    Flat: returns ``count`` i.i.d. values from the instance-level interval.
    Tree: returns the full per-node vector with root and leaves pinned at 1
    and the internal draws rearranged (multiset preserved) so scales never
    increase away from the root.
    """
    rng = _stream(seed, STREAM_LAMBDA)
    upper = rng.uniform(0.8, 0.9)
    lower = rng.uniform(0.1, 0.2)
    if isinstance(count_or_tree, (int, np.integer)):
        return rng.uniform(lower, upper, size=int(count_or_tree))

    tree: TaxonomyTree = count_or_tree
    free = [int(k) for k in tree.internal_nodes if k != tree.root]
    draws = rng.uniform(lower, upper, size=len(free))
    lam = np.ones(tree.num_nodes)
    lam[free] = draws
    # internal-only child lists, processed deepest-first like a heap build
    kids: list[list[int]] = [
        [int(c) for c in tree.children[k] if not tree.is_leaf[c]]
        for k in range(tree.num_nodes)
    ]
    order = sorted(free, key=lambda k: (-int(tree.depth_of[k]), k))
    _sift_down(lam, kids, order)
    return lam


def _build_tree(m: int, b1: int, b2: int, anchor_of_alt: np.ndarray,
                lambdas: np.ndarray | None = None) -> TaxonomyTree:
    """Depth-4 taxonomy: root -> b1 -> b1*b2 -> m leaves at the given anchors."""
    n_internal = 1 + b1 + b1 * b2
    parent = [-1]
    parent += [0] * b1
    for i in range(b1):
        parent += [1 + i] * b2
    parent += [int(anchor_of_alt[j]) for j in range(m)]
    leaf_alt = n_internal + np.arange(m)
    if lambdas is None:
        lambdas = np.ones(len(parent))
    return TaxonomyTree(np.asarray(parent), leaf_alt, lambdas)


def gen_instance(spec: InstanceSpec) -> Instance:
    """Generate the dataset (and structure) the spec describes.

    Pure in the spec: the same spec always yields byte-identical output.
    """
    N, m = spec.resolve_size()
    k = spec.offer_size
    p = spec.p

    offer_rng = _stream(spec.seed, STREAM_OFFER)
    offered = []
    for _ in range(N):
        s = offer_rng.choice(m, size=k, replace=False)
        s.sort()
        offered.append(s)

    attrs_rng = _stream(spec.seed, STREAM_ATTRS)
    blocks = attrs_rng.uniform(0.0, 3.0, size=(N, k, p))
    attributes = tuple(blocks[n] for n in range(N))

    chosen_rng = _stream(spec.seed, STREAM_CHOSEN)
    picks = chosen_rng.integers(0, k, size=N)
    chosen = np.array([offered[n][picks[n]] for n in range(N)])

    data = ChoiceDataset(m, tuple(offered), chosen, attributes)

    if spec.model == "mnl":
        return Instance("mnl", data, spec=spec)

    if spec.model == "nl":
        L = spec.num_nests
        perm = _stream(spec.seed, STREAM_NESTS).permutation(m)
        membership = np.empty(m, dtype=np.int64)
        membership[perm] = np.arange(m) % L  # balanced round-robin
        lam = gen_lambda(L, spec.seed)
        nests = NestPartition(membership, lam)
        return Instance("nl", data, nests, lam, spec)

    b1, b2 = spec.branching
    q = b1 * b2
    perm = _stream(spec.seed, STREAM_TREE).permutation(m)
    anchor_of_alt = np.empty(m, dtype=np.int64)
    anchor_of_alt[perm] = 1 + b1 + (np.arange(m) % q)  # level-3 node ids
    skeleton = _build_tree(m, b1, b2, anchor_of_alt)
    lam = gen_lambda(skeleton, spec.seed)
    tree = skeleton.with_lambdas(lam)
    return Instance("tnl", data, tree, lam, spec)


# ---------------------------------------------------------------------------
# JSON round-trip
# ---------------------------------------------------------------------------

def _require(cond: bool, where: str, what: str) -> None:
    if not cond:
        raise InvalidInputError(f"instance file: {what} at {where}")


def save_instance(instance: Instance, path) -> None:
    """Write the versioned JSON document (sorted keys, shortest-exact reals)."""
    data = instance.data
    doc: dict = {
        "version": _SCHEMA_VERSION,
        "model": instance.model,
        "p": data.num_attributes,
        "N": data.num_observations,
        "m": data.num_alternatives,
        "observations": [
            {"chosen": int(data.chosen[n]), "offered": [int(j) for j in data.offered[n]]}
            for n in range(data.num_observations)
        ],
        "attributes": [
            [[float(v) for v in row] for row in np.asarray(block)]
            for block in data.attributes
        ],
        "structure": None,
        "lambda": None,
    }
    st = instance.structure
    if isinstance(st, NestPartition):
        doc["structure"] = {
            "type": "nests",
            "membership": [int(l) for l in st.membership],
        }
        doc["lambda"] = [float(v) for v in st.lambdas]
    elif isinstance(st, TaxonomyTree):
        doc["structure"] = {
            "type": "tree",
            "parent": [int(v) for v in st.parent],
            "leaf_alt": [int(v) for v in st.leaf_alt],
        }
        doc["lambda"] = [float(v) for v in st.lambdas]
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(doc, fh, sort_keys=True, indent=1)
        fh.write("\n")


def load_instance(path) -> Instance:
    """Read an instance document, validating schema and shapes as it goes."""
    with open(path, "r", encoding="utf-8") as fh:
        try:
            doc = json.load(fh)
        except json.JSONDecodeError as err:
            raise InvalidInputError(
                f"instance file: malformed JSON at line {err.lineno} column {err.colno}"
            ) from err

    _require(isinstance(doc, dict), "$", "top level must be an object")
    _require(doc.get("version") == _SCHEMA_VERSION, "$.version",
             f"unsupported schema version {doc.get('version')!r}")
    model = doc.get("model")
    _require(model in _MODELS, "$.model", f"unknown model {model!r}")
    for key in ("p", "N", "m", "observations", "attributes"):
        _require(key in doc, f"$.{key}", "missing required key")
    N, m, p = int(doc["N"]), int(doc["m"]), int(doc["p"])
    obs = doc["observations"]
    attr = doc["attributes"]
    _require(isinstance(obs, list) and len(obs) == N, "$.observations",
             f"expected {N} entries")
    _require(isinstance(attr, list) and len(attr) == N, "$.attributes",
             f"expected {N} entries")

    offered, attributes, chosen = [], [], np.empty(N, dtype=np.int64)
    for n, entry in enumerate(obs):
        where = f"$.observations[{n}]"
        _require(isinstance(entry, dict) and "chosen" in entry and "offered" in entry,
                 where, "needs chosen and offered")
        s = np.asarray(entry["offered"], dtype=np.int64)
        _require(s.size >= 1 and np.all((0 <= s) & (s < m)), where + ".offered",
                 "alternatives out of range")
        _require(int(entry["chosen"]) in s.tolist(), where + ".chosen",
                 "chosen alternative not offered")
        block = np.asarray(attr[n], dtype=float)
        _require(block.shape == (s.size, p), f"$.attributes[{n}]",
                 f"expected shape {(s.size, p)}, got {block.shape}")
        offered.append(s)
        attributes.append(block)
        chosen[n] = int(entry["chosen"])
    data = ChoiceDataset(m, tuple(offered), chosen, tuple(attributes))

    st_doc = doc.get("structure")
    lam_doc = doc.get("lambda")
    if model == "mnl":
        return Instance("mnl", data)
    _require(isinstance(st_doc, dict), "$.structure", f"{model} needs a structure")
    _require(lam_doc is not None, "$.lambda", f"{model} needs scale values")
    lam = np.asarray(lam_doc, dtype=float)
    if model == "nl":
        _require(st_doc.get("type") == "nests", "$.structure.type", "expected 'nests'")
        membership = np.asarray(st_doc.get("membership"), dtype=np.int64)
        nests = NestPartition(membership, lam)
        return Instance("nl", data, nests, lam)
    _require(st_doc.get("type") == "tree", "$.structure.type", "expected 'tree'")
    tree = TaxonomyTree(
        np.asarray(st_doc.get("parent"), dtype=np.int64),
        np.asarray(st_doc.get("leaf_alt"), dtype=np.int64),
        lam,
    )
    return Instance("tnl", data, tree, lam)
