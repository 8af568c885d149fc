"""Shared builders for small random problem instances used across test modules."""
import numpy as np
import pytest

from conelogit.data import ChoiceDataset, NestPartition, TaxonomyTree


def random_dataset(rng, m=6, p=2, n_obs=8, full_offer=False, attr_scale=1.0):
    """Draw a small dataset with uniform offer sets and standard-normal attributes."""
    offered, attrs = [], []
    for _ in range(n_obs):
        if full_offer:
            s = np.arange(m)
        else:
            size = rng.integers(1, m + 1)
            s = rng.choice(m, size=size, replace=False)
            s.sort()
        offered.append(s)
        attrs.append(attr_scale * rng.normal(size=(s.size, p)))
    chosen = np.array([rng.choice(s) for s in offered])
    return ChoiceDataset(m, tuple(offered), chosen, tuple(attrs))


def random_partition(rng, m, num_nests=None, lam_range=(0.2, 0.9)):
    """Partition of 0..m-1 into nonempty nests with scales in ``lam_range``."""
    if num_nests is None:
        num_nests = int(rng.integers(2, max(3, m // 2 + 1)))
    num_nests = min(num_nests, m)
    # Guarantee every nest is hit, then fill the rest uniformly.
    membership = np.concatenate(
        [np.arange(num_nests), rng.integers(0, num_nests, size=m - num_nests)]
    )
    rng.shuffle(membership)
    lambdas = rng.uniform(*lam_range, size=num_nests)
    return NestPartition(membership, lambdas)


def random_tree(rng, m, b1=2, b2=2):
    """Depth-4 taxonomy: root -> b1 nodes -> b1*b2 nodes -> m leaves (round robin).

    Scales decrease strictly from the root down, with comfortable margins so
    finite-difference probes stay inside the admissible region.
    """
    if m < b1 * b2:
        raise ValueError("need at least one leaf per level-3 node")
    n_internal = 1 + b1 + b1 * b2
    parent = [-1]
    for _ in range(b1):
        parent.append(0)
    for i in range(b1):
        for _ in range(b2):
            parent.append(1 + i)
    leaf_alt = np.empty(m, dtype=np.int64)
    for j in range(m):
        anchor = 1 + b1 + (j % (b1 * b2))
        parent.append(anchor)
        leaf_alt[j] = n_internal + j
    lambdas = np.ones(len(parent))
    for k in range(1, 1 + b1):
        lambdas[k] = rng.uniform(0.55, 0.9)
    for k in range(1 + b1, n_internal):
        lambdas[k] = lambdas[parent[k]] * rng.uniform(0.35, 0.85)
    return TaxonomyTree(np.array(parent), leaf_alt, lambdas)


def nl_as_depth3_tree(nests: NestPartition) -> TaxonomyTree:
    """Encode a flat partition as the equivalent three-level taxonomy."""
    L = nests.num_nests
    m = nests.num_alternatives
    parent = np.concatenate([[-1], np.zeros(L, dtype=np.int64),
                             1 + nests.membership])
    leaf_alt = 1 + L + np.arange(m)
    lambdas = np.concatenate([[1.0], nests.lambdas, np.ones(m)])
    return TaxonomyTree(parent, leaf_alt, lambdas)


@pytest.fixture
def rng():
    return np.random.default_rng(20260816)
