"""Observed dyad data, estimand specification and the ego/peer role swap.

A dyad row is ``(x, z1, z2, d1, d2, y1[, y2])``: covariates, the two binary
instruments, the two binary treatments and the two outcomes.  Every estimator
in the package works on the *direct-effect form* where unit 1 is the ego and
the target is the effect of ``d1`` on ``y1`` at peer level ``d2 = d``.
Spillover targets and the unit-2 ego are reduced to that form by exchanging
columns (see :func:`to_direct_form`).
"""

from __future__ import annotations

import csv
import enum
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .errors import DomainError, ParseError, PreconditionError, SchemaError

BINARY_COLUMNS = ("z1", "z2", "d1", "d2")


@dataclass(frozen=True)
class DyadRow:
    x: tuple
    z1: int
    z2: int
    d1: int
    d2: int
    y1: float
    y2: Optional[float] = None

    def __post_init__(self):
        for name in BINARY_COLUMNS:
            if getattr(self, name) not in (0, 1):
                raise DomainError(f"{name} must be 0 or 1, got {getattr(self, name)!r}")
        if not math.isfinite(self.y1):
            raise DomainError("y1 must be finite")
        if self.y2 is not None and not math.isfinite(self.y2):
            raise DomainError("y2 must be finite")


def _frozen(a, dtype):
    a = np.array(a, dtype=dtype, copy=True)
    a.setflags(write=False)
    return a


class DyadDataset:
    """Immutable column store of dyad observations.

    Columns are kept as read-only numpy arrays; ``rows`` materialises
    :class:`DyadRow` objects on demand.
    """

    __slots__ = ("x", "z1", "z2", "d1", "d2", "y1", "y2")

    def __init__(self, x, z1, z2, d1, d2, y1, y2=None):
        x = np.asarray(x, dtype=float)
        if x.ndim == 1:
            x = x.reshape(-1, 1)
        if x.ndim != 2:
            raise SchemaError("covariates must be a 2-d array")
        n = x.shape[0]
        cols = {}
        for name, col in (("z1", z1), ("z2", z2), ("d1", d1), ("d2", d2)):
            col = np.asarray(col)
            if col.shape != (n,):
                raise SchemaError(f"column {name} has shape {col.shape}, expected ({n},)")
            bad = (col != 0) & (col != 1)
            if bad.any():
                i = int(np.flatnonzero(bad)[0])
                raise DomainError(f"{name} must be 0 or 1, got {col[i]!r} in row {i}")
            cols[name] = col
        y1 = np.asarray(y1, dtype=float)
        if y1.shape != (n,):
            raise SchemaError(f"y1 has shape {y1.shape}, expected ({n},)")
        if not np.all(np.isfinite(y1)):
            raise DomainError("y1 must be finite")
        if not np.all(np.isfinite(x)):
            raise DomainError("covariates must be finite")
        if y2 is not None:
            y2 = np.asarray(y2, dtype=float)
            if y2.shape != (n,):
                raise SchemaError(f"y2 has shape {y2.shape}, expected ({n},)")
            if not np.all(np.isfinite(y2)):
                raise DomainError("y2 must be finite")
        object.__setattr__(self, "x", _frozen(x, float))
        for name, col in cols.items():
            object.__setattr__(self, name, _frozen(col, np.int8))
        object.__setattr__(self, "y1", _frozen(y1, float))
        object.__setattr__(self, "y2", None if y2 is None else _frozen(y2, float))

    def __setattr__(self, name, value):
        raise AttributeError("DyadDataset is immutable")

    def __reduce__(self):
        # rebuild through __init__ so pickling (process pools) respects immutability
        return (DyadDataset, (self.x, self.z1, self.z2, self.d1, self.d2, self.y1, self.y2))

    @classmethod
    def from_rows(cls, rows: Sequence[DyadRow]) -> "DyadDataset":
        rows = list(rows)
        if not rows:
            raise SchemaError("dataset needs at least one row")
        p = len(rows[0].x)
        if any(len(r.x) != p for r in rows):
            raise SchemaError("rows have inconsistent covariate dimension")
        has_y2 = [r.y2 is not None for r in rows]
        if any(has_y2) and not all(has_y2):
            raise SchemaError("y2 must be present on every row or on none")
        return cls(
            x=np.array([r.x for r in rows], dtype=float).reshape(len(rows), p),
            z1=[r.z1 for r in rows],
            z2=[r.z2 for r in rows],
            d1=[r.d1 for r in rows],
            d2=[r.d2 for r in rows],
            y1=[r.y1 for r in rows],
            y2=[r.y2 for r in rows] if all(has_y2) else None,
        )

    @property
    def n(self) -> int:
        return self.x.shape[0]

    def __len__(self):
        return self.n

    @property
    def covariate_dim(self) -> int:
        return self.x.shape[1]

    @property
    def has_y2(self) -> bool:
        return self.y2 is not None

    @property
    def rows(self) -> list:
        y2 = self.y2 if self.y2 is not None else [None] * self.n
        return [
            DyadRow(tuple(float(v) for v in self.x[i]), int(self.z1[i]), int(self.z2[i]),
                    int(self.d1[i]), int(self.d2[i]), float(self.y1[i]),
                    None if y2[i] is None else float(y2[i]))
            for i in range(self.n)
        ]

    def replace(self, **cols) -> "DyadDataset":
        """New dataset with some columns substituted."""
        base = {k: getattr(self, k) for k in self.__slots__}
        base.update(cols)
        return DyadDataset(**base)

    def take(self, idx) -> "DyadDataset":
        idx = np.asarray(idx)
        return DyadDataset(
            self.x[idx], self.z1[idx], self.z2[idx], self.d1[idx], self.d2[idx],
            self.y1[idx], None if self.y2 is None else self.y2[idx],
        )

    def __eq__(self, other):
        if not isinstance(other, DyadDataset):
            return NotImplemented
        if (self.y2 is None) != (other.y2 is None):
            return False
        same = all(np.array_equal(getattr(self, k), getattr(other, k))
                   for k in ("x", "z1", "z2", "d1", "d2", "y1"))
        return same and (self.y2 is None or np.array_equal(self.y2, other.y2))

    __hash__ = None

    def __repr__(self):
        return f"DyadDataset(n={self.n}, covariate_dim={self.covariate_dim}, has_y2={self.has_y2})"

    def check_overlap(self):
        """Both arms of each instrument must be non-empty."""
        for name in ("z1", "z2"):
            m = float(np.mean(getattr(self, name)))
            if not 0.0 < m < 1.0:
                raise PreconditionError(
                    f"instrument {name} has a single arm (mean {m:g}); overlap fails")


class Target(enum.Enum):
    DTE = "dte"
    STE = "ste"
    ITE = "ite"


@dataclass(frozen=True)
class EstimandSpec:
    """Which causal contrast is targeted and for which ego.

    ``d`` is the level the other treatment is held at (peer treatment for
    DTE, ego treatment for STE); it is ignored for ITE.
    """

    target: Target
    d: int = 1
    ego: int = 1

    def __post_init__(self):
        if not isinstance(self.target, Target):
            object.__setattr__(self, "target", Target(str(self.target).lower()))
        if self.ego not in (1, 2):
            raise ValueError("ego must be 1 or 2")
        if self.target is not Target.ITE and self.d not in (0, 1):
            raise ValueError("d must be 0 or 1")
        if self.target is Target.ITE:
            object.__setattr__(self, "d", None)

    @classmethod
    def parse(cls, label: str, ego: int = 1) -> "EstimandSpec":
        """Parse ``dte1``, ``dte0``, ``ste1``, ``ste0`` or ``ite``."""
        label = label.strip().lower()
        if label == "ite":
            return cls(Target.ITE, None, ego)
        if len(label) == 4 and label[:3] in ("dte", "ste") and label[3] in "01":
            return cls(Target(label[:3]), int(label[3]), ego)
        raise ValueError(f"unknown estimand {label!r}")

    @property
    def label(self) -> str:
        if self.target is Target.ITE:
            return "ite"
        return f"{self.target.value}{self.d}"

    def as_dict(self) -> dict:
        return {"label": self.label, "target": self.target.name, "d": self.d, "ego": self.ego}


def swap_roles(ds: DyadDataset) -> DyadDataset:
    """Exchange ``(z1, d1, y1)`` with ``(z2, d2, y2)`` on every row."""
    if ds.y2 is None:
        raise PreconditionError("swap_roles needs y2 on every row")
    return DyadDataset(ds.x, ds.z2, ds.z1, ds.d2, ds.d1, ds.y2, ds.y1)


def _swap_outcomes(ds: DyadDataset) -> DyadDataset:
    return DyadDataset(ds.x, ds.z1, ds.z2, ds.d1, ds.d2, ds.y2, ds.y1)


def to_direct_form(ds: DyadDataset, spec: EstimandSpec) -> DyadDataset:
    """Rewrite ``ds`` so that ``spec`` becomes a unit-1 direct effect.

    ========  =====  =====================================================
    target    ego    transformation
    ========  =====  =====================================================
    DTE/ITE   1      none
    DTE/ITE   2      swap_roles
    STE       1      swap_roles, then take the outcome back from unit 1
    STE       2      outcome taken from unit 2, instruments untouched
    ========  =====  =====================================================
    """
    if spec.target is Target.STE:
        if spec.ego == 1:
            return _swap_outcomes(swap_roles(ds))
        if ds.y2 is None:
            raise PreconditionError("ego=2 needs y2 on every row")
        return _swap_outcomes(ds)
    if spec.ego == 2:
        return swap_roles(ds)
    return ds


def signed_indicator_terms(row: DyadRow, spec: EstimandSpec):
    """Return ``(s, w_num, w_den)`` for one direct-form row.

    ``s = (-1)^(1-z1)``, ``w_num = I(d2=d) y1``, ``w_den = d1 I(d2=d)``.
    """
    ind = 1.0 if row.d2 == spec.d else 0.0
    s = 1.0 if row.z1 == 1 else -1.0
    return s, ind * row.y1, row.d1 * ind


def indicator_columns(ds: DyadDataset, d: int):
    """Vectorised :func:`signed_indicator_terms` over a direct-form dataset."""
    ind = (ds.d2 == d).astype(float)
    s = 2.0 * ds.z1 - 1.0
    return s, ind * ds.y1, ds.d1 * ind


# -- CSV ---------------------------------------------------------------------

def _header(p: int, has_y2: bool) -> list:
    cols = [f"x{j + 1}" for j in range(p)] + ["z1", "z2", "d1", "d2", "y1"]
    return cols + ["y2"] if has_y2 else cols


def load_csv(path, has_y2: Optional[bool] = None) -> DyadDataset:
    """Read a dyad CSV (header ``x1..xp,z1,z2,d1,d2,y1[,y2]``).

    ``has_y2=None`` infers the optional column from the header; ``True`` or
    ``False`` make the header check strict.
    """
    path = Path(path)
    with path.open(newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = [h.strip() for h in next(reader)]
        except StopIteration:
            raise SchemaError("empty file", line=1) from None
        file_has_y2 = bool(header) and header[-1] == "y2"
        if has_y2 is not None and has_y2 != file_has_y2:
            raise SchemaError(f"header {'lacks' if has_y2 else 'has'} a y2 column", line=1)
        p = len(header) - (6 if file_has_y2 else 5)
        if p < 0 or header != _header(p, file_has_y2):
            raise SchemaError(f"unexpected header {','.join(header)}", line=1)
        width = len(header)
        xs, cols, y1, y2 = [], {k: [] for k in BINARY_COLUMNS}, [], []
        for lineno, fields in enumerate(reader, start=2):
            if not fields or all(not f.strip() for f in fields):
                continue
            if len(fields) != width:
                raise SchemaError(f"expected {width} fields, found {len(fields)}", line=lineno)
            try:
                vals = [float(f) for f in fields]
            except ValueError as exc:
                raise ParseError(f"malformed number ({exc})", line=lineno) from None
            if not all(math.isfinite(v) for v in vals):
                raise ParseError("non-finite value", line=lineno)
            xs.append(vals[:p])
            for k, v in zip(BINARY_COLUMNS, vals[p:p + 4]):
                if v not in (0.0, 1.0):
                    raise DomainError(f"{k} must be 0 or 1, got {fields[p + BINARY_COLUMNS.index(k)].strip()}",
                                      line=lineno)
                cols[k].append(int(v))
            y1.append(vals[p + 4])
            if file_has_y2:
                y2.append(vals[p + 5])
    if not y1:
        raise SchemaError("no data rows", line=2)
    return DyadDataset(np.array(xs, dtype=float).reshape(len(y1), p), cols["z1"], cols["z2"],
                       cols["d1"], cols["d2"], y1, y2 if file_has_y2 else None)


def write_csv(ds: DyadDataset, path) -> None:
    """Write ``ds`` in the schema :func:`load_csv` reads (17 significant digits)."""
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(_header(ds.covariate_dim, ds.has_y2))
        for i in range(ds.n):
            row = [repr(float(v)) for v in ds.x[i]]
            row += [str(int(ds.z1[i])), str(int(ds.z2[i])), str(int(ds.d1[i])), str(int(ds.d2[i]))]
            row.append(repr(float(ds.y1[i])))
            if ds.has_y2:
                row.append(repr(float(ds.y2[i])))
            w.writerow(row)


def augment_with_peer_instrument(ds: DyadDataset) -> DyadDataset:
    """Append ``z2`` as an extra covariate column (interaction-effect variant)."""
    return ds.replace(x=np.column_stack([ds.x, ds.z2.astype(float)]))

