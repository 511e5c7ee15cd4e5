"""Stacked estimating equations, sandwich variance and percentile bootstrap.

The two stages are treated jointly as one M-estimator with parameter
``theta = (alpha, beta)``: ``alpha`` solves the first-stage score equations
and ``beta`` the second-stage ones, where the second-stage design depends on
``alpha`` through the control variable ``s``.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.linalg
from scipy.stats import norm

from . import glm
from .data import Dataset, build_design, design_names
from .errors import (
    BootstrapError, DataError, ProxiError, SingularJacobianError,
    UnsupportedModelError,
)
from .proximal import (
    ModelSpec, ProcedurePlan, TwoStageFit, _check_links, first_stage_terms, resolve_plan,
    second_stage_terms,
)

SINGULAR_COND = 1e12
MAX_BOOT_FAILURE = 0.2


def _indicators(values, levels):
    return (values[:, None] == np.arange(1, levels)[None, :]).astype(float)


@dataclass(frozen=True, eq=False)
class StackedSystem:
    """Data arrays and parameter layout of the stacked two-stage problem.

    ``D2_base`` is the second-stage design with the ``s`` (and ``s:w``)
    columns zeroed; they are filled from ``alpha`` on every evaluation.
    """

    plan: ProcedurePlan
    D1: np.ndarray
    Ds: np.ndarray
    D2_base: np.ndarray
    w: np.ndarray
    y: np.ndarray
    w_levels: int | None
    y_levels: int | None
    js: int
    jsw: int | None
    w_col: np.ndarray
    jy: int | None
    first_names: tuple[str, ...]
    second_names: tuple[str, ...]

    # -- layout ------------------------------------------------------------
    @property
    def n(self) -> int:
        return self.D1.shape[0]

    @property
    def k1(self) -> int:
        return self.w_levels - 1 if self.plan.w_link == "multinomial" else 1

    @property
    def k2(self) -> int:
        return self.y_levels - 1 if self.plan.y_link == "multinomial" else 1

    @property
    def p1(self) -> int:
        return self.k1 * self.D1.shape[1]

    @property
    def dim(self) -> int:
        return self.p1 + self.k2 * self.D2_base.shape[1]

    @property
    def param_names(self) -> list[str]:
        def block(prefix, names, k, multi):
            if not multi:
                return [f"{prefix}:{n}" for n in names]
            return [f"{prefix}:{n}@{lev}" for lev in range(1, k + 1) for n in names]

        return (block("first", self.first_names, self.k1, self.plan.w_link == "multinomial")
                + block("second", self.second_names, self.k2, self.plan.y_link == "multinomial"))

    @property
    def param_layout(self) -> dict:
        return {name: j for j, name in enumerate(self.param_names)}

    @property
    def a_indices(self) -> list[int]:
        j = self.second_names.index("a")
        width = self.D2_base.shape[1]
        return [self.p1 + k * width + j for k in range(self.k2)]

    def split(self, theta):
        theta = np.asarray(theta, dtype=float)
        if theta.shape != (self.dim,):
            raise DataError(f"parameter vector has shape {theta.shape}, expected ({self.dim},)")
        alpha = theta[:self.p1]
        beta = theta[self.p1:]
        if self.plan.w_link == "multinomial":
            alpha = alpha.reshape(self.k1, -1)
        if self.plan.y_link == "multinomial":
            beta = beta.reshape(self.k2, -1)
        return alpha, beta

    # -- model pieces ------------------------------------------------------
    def control(self, alpha) -> np.ndarray:
        alpha = np.asarray(alpha)
        return self.Ds @ (alpha.sum(axis=0) if alpha.ndim == 2 else alpha)

    def design2(self, s) -> np.ndarray:
        X = self.D2_base.copy()
        X[:, self.js] = s
        if self.jsw is not None:
            X[:, self.jsw] = s * self.w_col
        return X

    def offset2(self, alpha):
        if self.jy is None:
            return None
        return alpha[self.jy] * self.w

    def take(self, index) -> "StackedSystem":
        index = np.asarray(index)
        return StackedSystem(
            self.plan, self.D1[index], self.Ds[index], self.D2_base[index], self.w[index],
            self.y[index], self.w_levels, self.y_levels, self.js, self.jsw,
            self.w_col[index], self.jy, self.first_names, self.second_names,
        )

    # -- scores ------------------------------------------------------------
    def psi(self, theta) -> np.ndarray:
        """Per-row estimating functions, shape ``(n, dim)``."""
        alpha, beta = self.split(theta)
        X2 = self.design2(self.control(alpha))
        off = self.offset2(alpha)
        return np.hstack([
            _glm_psi(self.D1, self.w, alpha, self.plan.w_link, self.w_levels, None),
            _glm_psi(X2, self.y, beta, self.plan.y_link, self.y_levels, off),
        ])

    def score(self, theta) -> np.ndarray:
        return self.psi(theta).mean(axis=0)

    def estimate(self) -> np.ndarray:
        """Two-stage solution ``theta_hat``; raises on any fitting failure."""
        first = _fit(self.D1, self.w, self.plan.w_link, self.w_levels)
        alpha = first.coef
        second = _fit(self.design2(self.control(alpha)), self.y, self.plan.y_link, self.y_levels,
                      self.offset2(alpha))
        return np.concatenate([np.ravel(alpha), np.ravel(second.coef)])


def _fit(X, response, link, levels, offset=None):
    if link == "multinomial":
        return glm.fit_multinomial(X, response, levels)
    return glm.fit_glm(X, response, link, offset=offset)


def _glm_psi(X, response, coef, link, levels, offset):
    eta = X @ coef.T if np.ndim(coef) == 2 else X @ coef
    if offset is not None:
        eta = eta + offset
    if link == "multinomial":
        resid = _indicators(response, levels) - glm.multinomial_probabilities(eta)[:, 1:]
        return np.hstack([X * resid[:, [k]] for k in range(resid.shape[1])])
    return X * (response - glm.inverse_link(link, eta))[:, None]


def build_system(dataset: Dataset, spec: ModelSpec) -> StackedSystem:
    plan = resolve_plan(spec)
    _check_links(dataset, plan)
    f_terms = first_stage_terms(dataset, plan, spec)
    s_terms = second_stage_terms(dataset, plan, spec)
    overrides = {} if plan.s_stratum is None else {"y": plan.s_stratum}
    D1 = build_design(dataset, f_terms)
    Ds = build_design(dataset, f_terms, overrides=overrides)
    zeros = np.zeros(dataset.n)
    D2 = build_design(dataset, s_terms, extra={"s": zeros})
    first_names = design_names(dataset, f_terms)
    second_names = design_names(dataset, s_terms, extra=("s",))
    jsw = second_names.index("s:w") if "s:w" in second_names else None
    jy = first_names.index("y") if plan.offset_w else None
    return StackedSystem(
        plan, D1, Ds, D2, dataset.w, dataset.y,
        dataset.w_levels if plan.w_link == "multinomial" else None,
        dataset.y_levels if plan.y_link == "multinomial" else None,
        second_names.index("s"), jsw, dataset.w, jy,
        tuple(first_names), tuple(second_names),
    )


def theta_from_fit(fit: TwoStageFit) -> np.ndarray:
    return np.concatenate([np.ravel(fit.first.coef), np.ravel(fit.second.coef)])


def stacked_score(system: StackedSystem, theta) -> np.ndarray:
    """Mean stacked estimating function at ``theta``."""
    return system.score(theta)


def jacobian_analytic(system: StackedSystem, theta) -> np.ndarray:
    """Closed-form derivative of the mean stacked score.

    Available whenever both stages are scalar canonical-link GLMs; the
    ``alpha`` dependence of the second stage enters through ``s``, the
    ``s:w`` product and (restricted form) the offset ``alpha_y * w``.
    """
    plan = system.plan
    if "multinomial" in (plan.y_link, plan.w_link):
        raise UnsupportedModelError("no closed-form Jacobian for multinomial stages")
    alpha, beta = system.split(theta)
    n, p1 = system.D1.shape
    D1, Ds = system.D1, system.Ds
    s = system.control(alpha)
    X2 = system.design2(s)
    eta1 = D1 @ alpha
    mu1 = glm.inverse_link(plan.w_link, eta1)
    v1 = glm.variance_function(plan.w_link, mu1)
    eta2 = X2 @ beta
    off = system.offset2(alpha)
    if off is not None:
        eta2 = eta2 + off
    mu2 = glm.inverse_link(plan.y_link, eta2)
    v2 = glm.variance_function(plan.y_link, mu2)
    r2 = system.y - mu2

    A11 = -(D1.T @ (D1 * v1[:, None])) / n
    A22 = -(X2.T @ (X2 * v2[:, None])) / n

    # d eta2 / d alpha, one row per observation
    scale = np.full(n, beta[system.js])
    if system.jsw is not None:
        scale = scale + beta[system.jsw] * system.w_col
    deta = Ds * scale[:, None]
    if system.jy is not None:
        deta[:, system.jy] += system.w
    A21 = -(X2.T @ (deta * v2[:, None])) / n
    # the second-stage design itself moves with alpha
    A21[system.js] += (r2 @ Ds) / n
    if system.jsw is not None:
        A21[system.jsw] += ((r2 * system.w_col) @ Ds) / n

    A = np.zeros((system.dim, system.dim))
    A[:p1, :p1] = A11
    A[p1:, :p1] = A21
    A[p1:, p1:] = A22
    return A


def jacobian_numeric(system: StackedSystem, theta, rel_step=1e-6) -> np.ndarray:
    """Central finite differences of the mean stacked score."""
    theta = np.asarray(theta, dtype=float)
    A = np.empty((system.dim, system.dim))
    for k in range(system.dim):
        h = rel_step * (1.0 + abs(theta[k]))
        up = theta.copy()
        dn = theta.copy()
        up[k] += h
        dn[k] -= h
        A[:, k] = (system.score(up) - system.score(dn)) / (2.0 * h)
    return A


def jacobian(system: StackedSystem, theta) -> np.ndarray:
    try:
        return jacobian_analytic(system, theta)
    except UnsupportedModelError:
        return jacobian_numeric(system, theta)


@dataclass(frozen=True, eq=False)
class SandwichResult:
    A_n: np.ndarray
    B_n: np.ndarray
    V_n: np.ndarray
    names: tuple[str, ...]
    se: dict
    beta_a: float | np.ndarray
    sigma_a: float | np.ndarray
    ci: tuple
    level: float
    condition_number: float
    n: int

    @property
    def se_a(self):
        return self.sigma_a / np.sqrt(self.n)


def _z(level):
    if not 0 < level < 1:
        raise DataError(f"confidence level must lie in (0, 1), got {level}")
    return float(norm.ppf(0.5 + level / 2.0))


def sandwich(system: StackedSystem, theta, level=0.95) -> SandwichResult:
    """``V = A^-1 B A^-T`` with Wald intervals for the treatment coefficient."""
    theta = np.asarray(theta, dtype=float)
    z = _z(level)
    n = system.n
    psi = system.psi(theta)
    B = psi.T @ psi / n
    A = jacobian(system, theta)
    cond = float(np.linalg.cond(A))
    if not np.isfinite(cond) or cond > SINGULAR_COND:
        raise SingularJacobianError(
            f"score Jacobian is singular (condition number {cond:.3g}); "
            "the proxies may carry too little information about the confounder", cond,
        )
    lu = scipy.linalg.lu_factor(A)
    AinvB = scipy.linalg.lu_solve(lu, B)
    V = scipy.linalg.lu_solve(lu, AinvB.T).T
    V = 0.5 * (V + V.T)
    diag = np.clip(np.diag(V), 0.0, None)
    se = np.sqrt(diag / n)
    names = tuple(system.param_names)
    idx = system.a_indices
    beta_a = theta[idx]
    sigma_a = np.sqrt(diag[idx])
    half = z * sigma_a / np.sqrt(n)
    lower, upper = beta_a - half, beta_a + half
    if len(idx) == 1:
        beta_a, sigma_a = float(beta_a[0]), float(sigma_a[0])
        ci = (float(lower[0]), float(upper[0]))
    else:
        ci = (lower, upper)
    return SandwichResult(A, B, V, names, dict(zip(names, se.tolist())), beta_a, sigma_a, ci,
                          level, cond, n)


def sandwich_for_fit(dataset: Dataset, fit: TwoStageFit, level=0.95) -> SandwichResult:
    return sandwich(build_system(dataset, fit.spec), theta_from_fit(fit), level)


@dataclass(frozen=True, eq=False)
class BootstrapResult:
    B: int
    estimates: np.ndarray
    se: float | np.ndarray
    ci: tuple
    failures: int
    level: float


def bootstrap(dataset: Dataset, spec: ModelSpec, B: int, seed, level=0.95,
              system: StackedSystem | None = None) -> BootstrapResult:
    """Percentile bootstrap of the treatment coefficient over resampled rows.

    Replicates whose fit fails are dropped and counted; more than 20% failures
    raises :class:`BootstrapError`.
    """
    if B < 2:
        raise DataError("bootstrap needs at least 2 replicates")
    _z(level)
    system = system or build_system(dataset, spec)
    n = system.n
    rng = np.random.default_rng(seed)
    idx = system.a_indices
    estimates = []
    failures = 0
    for _ in range(B):
        rows = rng.integers(0, n, size=n)
        try:
            theta = system.take(rows).estimate()
        except (ProxiError, np.linalg.LinAlgError):
            failures += 1
            continue
        estimates.append(theta[idx])
    if failures > MAX_BOOT_FAILURE * B:
        raise BootstrapError(
            f"{failures} of {B} bootstrap replicates failed; the estimator is unstable on these data"
        )
    est = np.array(estimates)
    tail = (1.0 - level) / 2.0
    lower, upper = np.quantile(est, [tail, 1.0 - tail], axis=0)
    se = est.std(axis=0, ddof=1)
    if est.shape[1] == 1:
        est = est[:, 0]
        return BootstrapResult(B, est, float(se[0]), (float(lower[0]), float(upper[0])), failures, level)
    return BootstrapResult(B, est, se, (lower, upper), failures, level)


__all__ = [
    "StackedSystem", "SandwichResult", "BootstrapResult", "build_system", "theta_from_fit",
    "stacked_score", "jacobian_analytic", "jacobian_numeric", "jacobian", "sandwich",
    "sandwich_for_fit", "bootstrap",
]
