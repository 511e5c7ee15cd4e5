"""Two-stage proximal regression for every supported link combination.

The first stage regresses the outcome proxy ``w`` on treatment, treatment
proxies and covariates (plus ``y`` whenever a logit link is involved on the
outcome side or the proxy is categorical).  Its linear predictor, evaluated at
a fixed ``y`` stratum when required, is the control variable ``s``.  The
second stage regresses ``y`` on treatment, covariates, ``s`` and any proxy
terms; the coefficient on treatment estimates the causal parameter.
"""
from __future__ import annotations

import warnings
from dataclasses import dataclass, field, replace

import numpy as np

from . import glm
from .data import Dataset, TermSpec, build_design, design_names, term_label
from .errors import DataError, ProxiError, UnsupportedModelError, annotate

Y_LINKS = ("identity", "log", "logit", "multinomial")
CONDITION_WARN = 1e8


@dataclass(frozen=True)
class ModelSpec:
    """Link pair and regressor choices for one two-stage fit.

    ``first_stage_terms`` defaults to ``a + z... + x...`` and
    ``second_stage_terms`` to ``a + x...``; ``y``, ``s`` and proxy terms are
    added according to the resolved procedure.
    """

    y_link: str
    w_link: str
    first_stage_terms: TermSpec | None = None
    second_stage_terms: TermSpec | None = None
    interactions: bool = False
    restrict_symmetry: bool = False

    def __post_init__(self):
        for name in ("y_link", "w_link"):
            if getattr(self, name) not in Y_LINKS:
                raise DataError(f"{name} must be one of {Y_LINKS}, got {getattr(self, name)!r}")
        for name in ("first_stage_terms", "second_stage_terms"):
            value = getattr(self, name)
            if value is not None and not isinstance(value, TermSpec):
                object.__setattr__(self, name, TermSpec(tuple(value)))

    def first_terms(self, dataset: Dataset) -> TermSpec:
        if self.first_stage_terms is not None:
            return self.first_stage_terms
        return TermSpec(("a",) + dataset.z_names + dataset.x_names)

    def second_terms(self, dataset: Dataset) -> TermSpec:
        if self.second_stage_terms is not None:
            return self.second_stage_terms
        return TermSpec(("a",) + dataset.x_names)


@dataclass(frozen=True)
class ProcedurePlan:
    procedure_id: str
    y_link: str
    w_link: str
    include_y_in_first_stage: bool
    s_formula: str
    s_stratum: int | None = None
    second_stage_extra: tuple[str, ...] = ()
    offset_w: bool = False
    interaction_expansion: bool = False

    @property
    def second_stage_offset(self) -> str | None:
        return "alpha_y*w" if self.offset_w else None


def _plan(pid, y, w, s_formula, *, with_y=False, stratum=None, extra=(), offset=False, expand=False):
    return ProcedurePlan(pid, y, w, with_y, s_formula, stratum, tuple(extra), offset, expand)


_NO_INTERACTION = {
    ("identity", "identity"): _plan("1", "identity", "identity", "E[W|A,Z]"),
    ("log", "log"): _plan("2", "log", "log", "log E[W|A,Z]"),
    ("logit", "logit"): _plan("3", "logit", "logit", "logit P(W=1|A,Z,Y=1)",
                              with_y=True, stratum=1, extra=("w",)),
    ("log", "identity"): _plan("6", "log", "identity", "E[W|A,Z]"),
    ("identity", "log"): _plan("7", "identity", "log", "log E[W|A,Z]"),
    ("logit", "identity"): _plan("8", "logit", "identity", "E[W|A,Z,Y=1]", with_y=True, stratum=1),
    ("identity", "logit"): _plan("10", "identity", "logit", "logit P(W=1|A,Z)", extra=("w",)),
    ("logit", "log"): _plan("12", "logit", "log", "log E[W|A,Z,Y=1]", with_y=True, stratum=1),
    ("log", "logit"): _plan("14", "log", "logit", "logit P(W=1|A,Z)", extra=("w",)),
}

_INTERACTION = {
    ("logit", "identity"): _plan("9", "logit", "identity", "E[W|A,Z,Y=1]",
                                 with_y=True, stratum=1, expand=True),
    ("identity", "logit"): _plan("11", "identity", "logit", "logit P(W=1|A,Z)", extra=("w", "sw")),
    ("logit", "log"): _plan("13", "logit", "log", "log E[W|A,Z,Y=1]",
                            with_y=True, stratum=1, expand=True),
    ("log", "logit"): _plan("15", "log", "logit", "logit P(W=1|A,Z)", extra=("w", "sw")),
}

_POLYTOMOUS = ("logit", "multinomial")


def resolve_plan(spec: ModelSpec) -> ProcedurePlan:
    """Map a link pair (and flags) to its two-stage procedure."""
    pair = (spec.y_link, spec.w_link)
    if "multinomial" in pair:
        if spec.y_link not in _POLYTOMOUS or spec.w_link not in _POLYTOMOUS:
            raise UnsupportedModelError(
                f"no procedure for {pair}: category-coded variables need logit-type links on "
                "both sides; use y_link and w_link from {'logit', 'multinomial'}"
            )
        if spec.interactions or spec.restrict_symmetry:
            raise UnsupportedModelError(
                "the polytomous procedure has no interaction or symmetry-restricted variant; "
                "drop interactions/restrict_symmetry"
            )
        return _plan("P4", spec.y_link, spec.w_link, "sum_k logit P(W=k|A,Z,Y=0)",
                     with_y=True, stratum=0, extra=("w",))
    if spec.restrict_symmetry and pair != ("logit", "logit"):
        raise UnsupportedModelError(
            f"restrict_symmetry applies only to (logit, logit), not {pair}"
        )
    if spec.interactions:
        if pair == ("logit", "logit"):
            raise UnsupportedModelError(
                "the logit-logit interaction variant is not available; use interactions=False "
                "(procedure 3)"
            )
        if pair not in _INTERACTION:
            raise UnsupportedModelError(
                f"no interaction variant is defined for {pair}; use interactions=False "
                f"(procedure {_NO_INTERACTION[pair].procedure_id})"
            )
        return _INTERACTION[pair]
    plan = _NO_INTERACTION[pair]
    if spec.restrict_symmetry:
        plan = replace(plan, second_stage_extra=(), offset_w=True)
    return plan


def _interaction_terms(dataset: Dataset) -> TermSpec:
    """``a + z + y + a:z + a:y + z:y + a:z:y`` (per z column) plus covariates."""
    terms = ["a", *dataset.z_names, *(f"a:{z}" for z in dataset.z_names)]
    with_y = [f"{t}:y" for t in terms]
    return TermSpec(tuple(terms[:1 + len(dataset.z_names)] + ["y"] + terms[1 + len(dataset.z_names):]
                          + with_y) + dataset.x_names)


def first_stage_terms(dataset: Dataset, plan: ProcedurePlan, spec: ModelSpec) -> TermSpec:
    if plan.interaction_expansion:
        return _interaction_terms(dataset)
    terms = spec.first_terms(dataset)
    if "y" in terms.columns() or "w" in terms.columns():
        raise DataError("first-stage terms must not reference y or w directly")
    if plan.include_y_in_first_stage:
        terms = terms + ["y"]
    return terms


def second_stage_terms(dataset: Dataset, plan: ProcedurePlan, spec: ModelSpec) -> TermSpec:
    terms = spec.second_terms(dataset)
    if ("a",) not in terms.terms:
        raise DataError("second-stage terms must include the treatment 'a'")
    if {"y", "w", "s"} & terms.columns():
        raise DataError("second-stage terms must not reference y, w or s directly")
    extra = ["s"]
    if "w" in plan.second_stage_extra:
        extra.append("w")
    if "sw" in plan.second_stage_extra:
        extra.append("s:w")
    return terms + extra


def _check_links(dataset: Dataset, plan: ProcedurePlan):
    for col, link in (("y", plan.y_link), ("w", plan.w_link)):
        levels = dataset.levels(col)
        if link == "multinomial" and levels is None:
            raise DataError(f"column {col!r} must be category-coded for the multinomial link")
        if link != "multinomial" and levels is not None and levels > 2:
            raise DataError(f"column {col!r} has {levels} categories; use the multinomial link")


def _fit(design, response, link, levels=None, offset=None, names=None):
    if link == "multinomial":
        return glm.fit_multinomial(design, response, levels)
    return glm.fit_glm(design, response, link, offset=offset, names=names)


def first_stage(dataset: Dataset, plan: ProcedurePlan, spec: ModelSpec):
    """Fit the outcome-proxy model; returns a GlmFit or MultinomialFit."""
    _check_links(dataset, plan)
    terms = first_stage_terms(dataset, plan, spec)
    X = build_design(dataset, terms)
    return _fit(X, dataset.w, plan.w_link, dataset.w_levels, names=design_names(dataset, terms))


def control_variable(first_fit, dataset: Dataset, plan: ProcedurePlan, terms: TermSpec) -> np.ndarray:
    """Control variable ``s`` from the first-stage coefficients.

    ``s`` is the first-stage linear predictor with ``y`` fixed at the plan's
    stratum; for a categorical proxy it is the sum over non-reference levels.
    """
    overrides = {} if plan.s_stratum is None else {"y": plan.s_stratum}
    if plan.s_stratum is not None and "y" not in terms.columns():
        raise DataError("control variable needs y in the first stage")
    Xs = build_design(dataset, terms, overrides=overrides)
    coef = np.asarray(first_fit.coef)
    if coef.ndim == 2:
        s = Xs @ coef.sum(axis=0)
    else:
        s = Xs @ coef
    if not np.all(np.isfinite(s)):
        raise DataError("control variable has non-finite entries")
    return s


def _offset(first_fit, dataset, plan, first_terms):
    if not plan.offset_w:
        return None
    idx = design_names(dataset, first_terms).index("y")
    return first_fit.coef[idx] * dataset.w


def second_stage(dataset: Dataset, s, plan: ProcedurePlan, spec: ModelSpec, offset=None):
    """Fit the outcome model on treatment, covariates, ``s`` and proxy terms."""
    terms = second_stage_terms(dataset, plan, spec)
    X = build_design(dataset, terms, extra={"s": s})
    names = design_names(dataset, terms, extra=("s",))
    return _fit(X, dataset.y, plan.y_link, dataset.y_levels, offset=offset, names=names)


@dataclass(frozen=True, eq=False)
class TwoStageFit:
    plan: ProcedurePlan
    spec: ModelSpec
    first: object
    s: np.ndarray
    second: object
    first_terms: TermSpec
    second_terms: TermSpec
    first_names: list[str]
    second_names: list[str]
    condition_number: float = float("nan")
    diagnostics: dict = field(default_factory=dict)

    @property
    def a_index(self) -> int:
        return self.second_names.index("a")

    @property
    def beta_a(self):
        """Treatment coefficient (one per non-reference level for multinomial)."""
        coef = np.asarray(self.second.coef)
        if coef.ndim == 2:
            return coef[:, self.a_index].copy()
        return float(coef[self.a_index])

    @property
    def alpha_y(self) -> float | None:
        if "y" in self.first_names and np.ndim(self.first.coef) == 1:
            return float(self.first.coef[self.first_names.index("y")])
        return None

    def first_coefs(self) -> dict:
        return _named(self.first.coef, self.first_names)

    def second_coefs(self) -> dict:
        return _named(self.second.coef, self.second_names)

    @property
    def reduced_coefs(self) -> dict:
        """Second-stage coefficients under their reduced-form names."""
        rename = {"(intercept)": "beta0*", "a": "beta_a", "s": "beta_u*", "w": "beta_w~",
                  "s:w": "beta_uw*"}
        out = {}
        for key, value in self.second_coefs().items():
            base, _, level = key.partition("@")
            label = rename.get(base, base)
            out[f"{label}@{level}" if level else label] = value
        if self.plan.offset_w:
            out["beta_w~"] = self.alpha_y
        return out


def _named(coef, names):
    coef = np.asarray(coef)
    if coef.ndim == 1:
        return {n: float(c) for n, c in zip(names, coef)}
    return {f"{n}@{k + 1}": float(coef[k, j]) for k in range(coef.shape[0]) for j, n in enumerate(names)}


def _scaled_condition(X):
    norms = np.linalg.norm(X, axis=0)
    norms[norms == 0] = 1.0
    return float(np.linalg.cond(X / norms))


def fit_two_stage(dataset: Dataset, spec: ModelSpec) -> TwoStageFit:
    """Run the resolved procedure end to end."""
    plan = resolve_plan(spec)
    try:
        f_terms = first_stage_terms(dataset, plan, spec)
        s_terms = second_stage_terms(dataset, plan, spec)
        first = first_stage(dataset, plan, spec)
    except ProxiError as exc:
        raise annotate(exc, "first stage") from exc
    try:
        s = control_variable(first, dataset, plan, f_terms)
    except ProxiError as exc:
        raise annotate(exc, "control variable") from exc
    try:
        offset = _offset(first, dataset, plan, f_terms)
        second = second_stage(dataset, s, plan, spec, offset=offset)
    except ProxiError as exc:
        raise annotate(exc, "second stage") from exc
    X2 = build_design(dataset, s_terms, extra={"s": s})
    cond = _scaled_condition(X2)
    if cond > CONDITION_WARN:
        warnings.warn(
            f"second-stage design is ill-conditioned (condition number {cond:.3g}); "
            "the proxies may be weakly relevant", RuntimeWarning, stacklevel=2,
        )
    diagnostics = {
        "first_converged": bool(first.converged),
        "second_converged": bool(second.converged),
        "first_iterations": int(first.iterations),
        "second_iterations": int(second.iterations),
        "second_stage_condition_number": cond,
    }
    return TwoStageFit(
        plan=plan, spec=spec, first=first, s=s, second=second,
        first_terms=f_terms, second_terms=s_terms,
        first_names=design_names(dataset, f_terms),
        second_names=design_names(dataset, s_terms, extra=("s",)),
        condition_number=cond, diagnostics=diagnostics,
    )


def describe_terms(terms: TermSpec) -> str:
    return " + ".join(["1"] + [term_label(t) for t in terms.terms])
