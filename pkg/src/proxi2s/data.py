"""Datasets, regressor specifications and design matrices."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterable, Mapping, Sequence

import numpy as np

from .errors import DataError

Term = tuple[str, ...]

ROLE_COLUMNS = ("y", "a", "w", "u")


def _as_matrix(values, n, name):
    if values is None:
        return np.empty((n, 0))
    arr = np.asarray(values, dtype=float)
    if arr.ndim == 1:
        arr = arr[:, None]
    if arr.ndim != 2 or arr.shape[0] != n:
        raise DataError(f"{name} must have {n} rows, got shape {arr.shape}")
    return arr


def _default_names(prefix, k):
    if k == 1:
        return (prefix,)
    return tuple(f"{prefix}{j + 1}" for j in range(k))


@dataclass(frozen=True, eq=False)
class Dataset:
    """Observed columns ``(y, a, w, z, x)`` plus an optional latent ``u``.

    ``y_levels`` / ``w_levels`` give the number of categories of a
    category-coded column (levels ``0..K`` with 0 the reference level); leave
    them ``None`` for real-valued, count or binary 0/1 columns.
    """

    y: np.ndarray
    a: np.ndarray
    w: np.ndarray
    z: np.ndarray
    x: np.ndarray = None
    u: np.ndarray | None = None
    z_names: tuple[str, ...] = ()
    x_names: tuple[str, ...] = ()
    y_levels: int | None = None
    w_levels: int | None = None

    def __post_init__(self):
        y = np.asarray(self.y, dtype=float).ravel()
        n = y.shape[0]
        if n < 1:
            raise DataError("dataset must contain at least one row")
        set_ = object.__setattr__
        set_(self, "y", y)
        for name in ("a", "w"):
            col = np.asarray(getattr(self, name), dtype=float).ravel()
            if col.shape[0] != n:
                raise DataError(f"column {name!r} has length {col.shape[0]}, expected {n}")
            set_(self, name, col)
        if self.u is not None:
            u = np.asarray(self.u, dtype=float).ravel()
            if u.shape[0] != n:
                raise DataError(f"column 'u' has length {u.shape[0]}, expected {n}")
            set_(self, "u", u)
        z = _as_matrix(self.z, n, "z")
        x = _as_matrix(self.x, n, "x")
        set_(self, "z", z)
        set_(self, "x", x)
        z_names = tuple(self.z_names) or _default_names("z", z.shape[1])
        x_names = tuple(self.x_names) or _default_names("x", x.shape[1])
        if len(z_names) != z.shape[1] or len(x_names) != x.shape[1]:
            raise DataError("z_names/x_names do not match the number of columns")
        set_(self, "z_names", z_names)
        set_(self, "x_names", x_names)
        names = list(ROLE_COLUMNS) + list(z_names) + list(x_names)
        if len(set(names)) != len(names):
            raise DataError(f"column names must be distinct: {names}")
        for name, col in self._columns().items():
            if not np.all(np.isfinite(col)):
                bad = int(np.flatnonzero(~np.isfinite(col))[0])
                raise DataError(f"column {name!r} has a non-finite value at row {bad}")
        for name, levels in (("y", self.y_levels), ("w", self.w_levels)):
            if levels is None:
                continue
            col = getattr(self, name)
            if levels < 2:
                raise DataError(f"{name}_levels must be at least 2")
            if np.any(col != np.round(col)) or col.min() < 0 or col.max() > levels - 1:
                raise DataError(f"column {name!r} must hold integer codes 0..{levels - 1}")
            if not np.any(col == 0):
                raise DataError(f"reference level 0 of column {name!r} is not observed")

    # -- column access -----------------------------------------------------
    @property
    def n(self) -> int:
        return self.y.shape[0]

    def _columns(self):
        cols = {"y": self.y, "a": self.a, "w": self.w}
        if self.u is not None:
            cols["u"] = self.u
        cols.update(zip(self.z_names, self.z.T))
        cols.update(zip(self.x_names, self.x.T))
        return cols

    @property
    def column_names(self) -> tuple[str, ...]:
        return tuple(self._columns())

    def column(self, name: str) -> np.ndarray:
        try:
            return self._columns()[name]
        except KeyError:
            raise DataError(f"unknown column {name!r}") from None

    def levels(self, name: str) -> int | None:
        return {"y": self.y_levels, "w": self.w_levels}.get(name)

    def take(self, index) -> "Dataset":
        """Rows at ``index`` (used for bootstrap resampling)."""
        index = np.asarray(index)
        return Dataset(
            y=self.y[index], a=self.a[index], w=self.w[index],
            z=self.z[index], x=self.x[index],
            u=None if self.u is None else self.u[index],
            z_names=self.z_names, x_names=self.x_names,
            y_levels=self.y_levels, w_levels=self.w_levels,
        )

    def observed(self) -> "Dataset":
        """Copy without the latent column."""
        return Dataset(
            y=self.y, a=self.a, w=self.w, z=self.z, x=self.x,
            z_names=self.z_names, x_names=self.x_names,
            y_levels=self.y_levels, w_levels=self.w_levels,
        )


def parse_term(term) -> Term:
    if isinstance(term, str):
        parts = tuple(p.strip() for p in term.split(":"))
    else:
        parts = tuple(term)
    if not parts or any(not p for p in parts):
        raise DataError(f"malformed term {term!r}")
    if len(set(parts)) != len(parts):
        raise DataError(f"term {term!r} repeats a column")
    return parts


def term_label(term: Term) -> str:
    return ":".join(term)


@dataclass(frozen=True)
class TermSpec:
    """Ordered regressor terms; an intercept is always prepended.

    Terms are column names or products written ``"a:z"``.
    """

    terms: tuple[Term, ...] = ()
    intercept: bool = field(default=True, init=False)

    def __post_init__(self):
        parsed = tuple(parse_term(t) for t in self.terms)
        seen = set()
        for t in parsed:
            key = frozenset(t)
            if key in seen:
                raise DataError(f"duplicate term {term_label(t)!r}")
            seen.add(key)
        object.__setattr__(self, "terms", parsed)

    @classmethod
    def of(cls, *terms) -> "TermSpec":
        return cls(tuple(terms))

    def __add__(self, other) -> "TermSpec":
        extra = other.terms if isinstance(other, TermSpec) else tuple(other)
        return TermSpec(self.terms + tuple(parse_term(t) for t in extra))

    def __contains__(self, term) -> bool:
        key = frozenset(parse_term(term))
        return any(frozenset(t) == key for t in self.terms)

    def labels(self) -> list[str]:
        return [term_label(t) for t in self.terms]

    def columns(self) -> set[str]:
        return {c for t in self.terms for c in t}


def _factor_columns(dataset, name, overrides, extra):
    """Columns contributed by one factor: itself, or level indicators."""
    if name in extra:
        values = np.asarray(extra[name], dtype=float)
    else:
        values = dataset.column(name)
    if name in overrides:
        values = np.full(dataset.n, float(overrides[name]))
    levels = dataset.levels(name)
    if levels is None:
        return [values], [name]
    cols = [(values == k).astype(float) for k in range(1, levels)]
    return cols, [f"{name}[{k}]" for k in range(1, levels)]


def _expand(dataset, spec, overrides, extra):
    columns = [np.ones(dataset.n)]
    names = ["(intercept)"]
    for term in spec.terms:
        parts = [_factor_columns(dataset, f, overrides, extra) for f in term]
        prod_cols = [np.ones(dataset.n)]
        prod_names = [""]
        for cols, labels in parts:
            prod_cols = [p * c for p in prod_cols for c in cols]
            prod_names = [f"{p}:{l}" if p else l for p in prod_names for l in labels]
        columns.extend(prod_cols)
        names.extend(prod_names)
    return np.column_stack(columns), names


def build_design(
    dataset: Dataset,
    spec: TermSpec,
    overrides: Mapping[str, float] | None = None,
    extra: Mapping[str, Sequence[float]] | None = None,
) -> np.ndarray:
    """Design matrix ``[1, terms...]`` for ``spec``.

    ``overrides`` replaces a named column by a constant before products are
    formed (e.g. ``{"y": 1}``); ``extra`` supplies columns that are not part
    of the dataset, such as a control variable ``s``.
    """
    overrides = dict(overrides or {})
    extra = dict(extra or {})
    known = set(dataset.column_names) | set(extra)
    for name in spec.columns() | set(overrides):
        if name not in known:
            raise DataError(f"unknown column {name!r}")
    return _expand(dataset, spec, overrides, extra)[0]


def design_names(dataset: Dataset, spec: TermSpec, extra: Iterable[str] = ()) -> list[str]:
    """Column labels matching :func:`build_design`."""
    placeholders = {name: np.zeros(dataset.n) for name in extra}
    return _expand(dataset, spec, {}, placeholders)[1]
