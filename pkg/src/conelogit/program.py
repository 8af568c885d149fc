"""Standard-form conic programs: maximize c'x subject to Ax = b, x in K.

K is the product of the ordered :class:`~conelogit.cones.ConeBlock` list.
Programs are immutable once built; ``validate`` collects every violation
instead of stopping at the first, and the JSON dump exists purely for
offline debugging (it round-trips losslessly via repr-precision floats).
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp

from .cones import ConeBlock, ConeLayout

__all__ = ["ConicProgram", "validate", "program_to_json", "program_from_json"]


@dataclass(frozen=True)
class ConicProgram:
    """max c'x  s.t.  A x = b,  x in the product cone described by ``cones``."""

    c: np.ndarray
    A: sp.csr_matrix
    b: np.ndarray
    cones: tuple[ConeBlock, ...]

    layout: ConeLayout = field(init=False, repr=False, compare=False)

    def __post_init__(self) -> None:
        c = np.asarray(self.c, dtype=float).ravel()
        b = np.asarray(self.b, dtype=float).ravel()
        A = sp.csr_matrix(self.A, dtype=float)
        set_ = object.__setattr__
        set_(self, "c", c)
        set_(self, "b", b)
        set_(self, "A", A)
        set_(self, "cones", tuple(self.cones))
        set_(self, "layout", ConeLayout(self.cones))

    @property
    def num_vars(self) -> int:
        return int(self.c.size)

    @property
    def num_rows(self) -> int:
        return int(self.b.size)

    def objective(self, x: np.ndarray) -> float:
        return float(self.c @ x)


def validate(program: ConicProgram) -> list[str]:
    """Return all structural violations (empty list means well-formed)."""
    errors: list[str] = []
    n = program.c.size
    if program.layout.dim != n:
        errors.append(
            f"cone blocks cover {program.layout.dim} slots but c has {n} entries"
        )
    if program.A.shape[1] != n:
        errors.append(f"A has {program.A.shape[1]} columns, expected {n}")
    if program.A.shape[0] != program.b.size:
        errors.append(
            f"A has {program.A.shape[0]} rows but b has {program.b.size} entries"
        )
    if not np.all(np.isfinite(program.c)):
        errors.append("c contains non-finite entries")
    if not np.all(np.isfinite(program.b)):
        errors.append("b contains non-finite entries")
    if program.A.nnz and not np.all(np.isfinite(program.A.data)):
        bad = np.flatnonzero(~np.isfinite(program.A.data))[0]
        row = np.searchsorted(program.A.indptr, bad, side="right") - 1
        errors.append(f"A contains a non-finite entry in row {row}")
    return errors


def program_to_json(program: ConicProgram) -> str:
    coo = program.A.tocoo()
    doc = {
        "c": program.c.tolist(),
        "A": {
            "shape": list(program.A.shape),
            "rows": coo.row.tolist(),
            "cols": coo.col.tolist(),
            "vals": coo.data.tolist(),
        },
        "b": program.b.tolist(),
        "cones": [[blk.kind, blk.dim] for blk in program.cones],
    }
    return json.dumps(doc, sort_keys=True)


def program_from_json(text: str) -> ConicProgram:
    doc = json.loads(text)
    a = doc["A"]
    A = sp.coo_matrix(
        (a["vals"], (a["rows"], a["cols"])), shape=tuple(a["shape"])
    ).tocsr()
    cones = tuple(ConeBlock(kind, dim) for kind, dim in doc["cones"])
    return ConicProgram(np.array(doc["c"]), A, np.array(doc["b"]), cones)
