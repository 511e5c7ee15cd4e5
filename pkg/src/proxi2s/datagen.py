"""Synthetic data that satisfy each two-stage model exactly.

Every generator draws ``A`` and ``Z`` as independent mean-zero normals and a
latent confounder ``U`` whose law, in the reference stratum of the binary or
categorical variables, is ``m(A, Z) + eps``.  When ``y`` and/or ``w`` are
categorical the joint law of ``(U, state)`` is

    f(u, state | a, z)  ∝  f_eps(u - m(a, z)) * exp(c_state + r_state * u),

so ``U`` is drawn from the state-marginal by accept-reject and the state is
then drawn given ``U``.  Continuous and count variables are drawn from their
structural means given ``U``.
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field, replace

import numpy as np
from scipy import stats
from scipy.special import expit, logsumexp

from .data import Dataset
from .errors import DataError, NumericalError

ENVELOPE_GRID = 2001
ENVELOPE_HALF_WIDTH = 25.0
ENVELOPE_INFLATION = 1.5
PROPOSAL_SAFETY = 1.25
MAX_REJECTIONS = 100_000


@dataclass(frozen=True)
class EpsDist:
    """Error law of ``U`` around ``m(A, Z)``: ``logistic`` or ``normal``."""

    kind: str = "logistic"
    loc: float = 0.0
    scale: float = 0.3

    def __post_init__(self):
        if self.kind not in ("logistic", "normal"):
            raise DataError(f"eps kind must be 'logistic' or 'normal', got {self.kind!r}")
        if not self.scale > 0:
            raise DataError("eps scale must be positive")

    @property
    def _dist(self):
        family = stats.logistic if self.kind == "logistic" else stats.norm
        return family(loc=self.loc, scale=self.scale)

    def logpdf(self, v):
        return self._dist.logpdf(v)

    def cdf(self, v):
        return self._dist.cdf(v)

    def rvs(self, rng, size):
        if self.kind == "logistic":
            return rng.logistic(self.loc, self.scale, size)
        return rng.normal(self.loc, self.scale, size)

    @property
    def max_tilt(self) -> float:
        """Largest exponential tilt rate with a finite normaliser."""
        return 1.0 / self.scale if self.kind == "logistic" else math.inf


@dataclass(frozen=True)
class DgpParams:
    """Structural coefficients of the outcome and proxy models.

    ``alpha_y`` left as ``None`` means "equal to ``beta_w``", the only
    admissible value when both ``y`` and ``w`` are binary.  ``m_coefs`` are
    ``(c0, c_a, c_z, c_az)`` of ``m(A, Z) = c0 + c_a A + c_z Z + c_az A Z``.
    """

    beta0: float = -1.4
    beta_a: float = 1.2
    beta_u: float = -0.7
    beta_w: float = 0.5
    alpha0: float = -0.8
    alpha_u: float = 0.5
    alpha_y: float | None = None
    beta_uw: float = 0.0
    alpha_uy: float = 0.0
    m_coefs: tuple[float, float, float, float] = (-0.4, 0.8, 1.2, -1.0)
    eps: EpsDist = field(default_factory=EpsDist)
    sd_a: float = 0.5
    sd_z: float = 0.5
    noise_sd: float = 1.0

    def __post_init__(self):
        if isinstance(self.eps, dict):
            object.__setattr__(self, "eps", EpsDist(**self.eps))
        object.__setattr__(self, "m_coefs", tuple(float(c) for c in self.m_coefs))
        if len(self.m_coefs) != 4:
            raise DataError("m_coefs must have four entries (c0, c_a, c_z, c_az)")
        for name in ("sd_a", "sd_z"):
            if not getattr(self, name) > 0:
                raise DataError(f"{name} must be positive")
        if self.noise_sd < 0:
            raise DataError("noise_sd must be nonnegative")

    @property
    def alpha_y_effective(self) -> float:
        return self.beta_w if self.alpha_y is None else self.alpha_y

    def m(self, a, z):
        c0, ca, cz, caz = self.m_coefs
        return c0 + ca * a + cz * z + caz * a * z

    def check_symmetry(self):
        if self.alpha_y is not None and self.alpha_y != self.beta_w:
            raise DataError(
                f"binary outcome and proxy share one association parameter: alpha_y={self.alpha_y} "
                f"but beta_w={self.beta_w}"
            )

    def check_tail_rate(self, rates):
        bound = self.eps.max_tilt
        worst = float(np.max(np.abs(rates)))
        if worst >= bound:
            raise DataError(
                f"tilt rate {worst:.4g} is not below 1/scale = {bound:.4g}; "
                "the latent density is not integrable"
            )

    def to_dict(self) -> dict:
        out = asdict(self)
        out["m_coefs"] = list(self.m_coefs)
        return out

    @classmethod
    def from_dict(cls, data) -> "DgpParams":
        data = dict(data)
        if "eps" in data and isinstance(data["eps"], dict):
            data["eps"] = EpsDist(**data["eps"])
        if "m_coefs" in data:
            data["m_coefs"] = tuple(data["m_coefs"])
        unknown = set(data) - set(cls.__dataclass_fields__)
        if unknown:
            raise DataError(f"unknown DGP parameters: {sorted(unknown)}")
        return cls(**data)


SS_DEFAULT = DgpParams()


@dataclass(frozen=True)
class PolyDgpParams:
    """Scalar-confounder model for a categorical outcome and proxy.

    ``y`` has ``len(beta0) + 1`` levels and ``w`` has ``len(alpha0) + 1``;
    ``beta_w[t][k]`` is the shared association of ``Y = t+1`` with
    ``W = k+1``.
    """

    beta0: tuple[float, ...] = (-0.5,)
    beta_a: tuple[float, ...] = (1.0,)
    beta_u: tuple[float, ...] = (-0.6,)
    alpha0: tuple[float, ...] = (-0.3, -0.6)
    alpha_u: tuple[float, ...] = (0.6, 0.3)
    beta_w: tuple[tuple[float, ...], ...] = ((0.4, -0.2),)
    m_coefs: tuple[float, float, float, float] = (0.0, 0.5, 1.0, 0.0)
    eps: EpsDist = field(default_factory=lambda: EpsDist("normal", 0.0, 0.5))
    sd_a: float = 0.5
    sd_z: float = 0.5

    def __post_init__(self):
        T, K = len(self.beta0), len(self.alpha0)
        if len(self.beta_a) != T or len(self.beta_u) != T:
            raise DataError("beta0, beta_a and beta_u must have one entry per outcome level")
        if len(self.alpha_u) != K:
            raise DataError("alpha0 and alpha_u must have one entry per proxy level")
        bw = np.asarray(self.beta_w, dtype=float)
        if bw.shape != (T, K):
            raise DataError(f"beta_w must be {T}x{K}")

    def m(self, a, z):
        c0, ca, cz, caz = self.m_coefs
        return c0 + ca * a + cz * z + caz * a * z


@dataclass(frozen=True, eq=False)
class GeneratedDataset:
    dataset: Dataset
    params: object
    seed: object
    rejection_stats: tuple[int, int]


def _seed_sequence(seed) -> np.random.SeedSequence:
    if isinstance(seed, np.random.SeedSequence):
        return seed
    return np.random.SeedSequence(seed)


def _streams(seed, k=6):
    """Independent generators for a, z, u, state, y and w."""
    return [np.random.default_rng(s) for s in _seed_sequence(seed).spawn(k)]


# -- latent confounder -----------------------------------------------------
def logit_states(a, params: DgpParams):
    """Energies ``c`` (n x 4) and rates ``r`` (4,) for (y, w) in
    (0,0), (1,0), (0,1), (1,1)."""
    b = params.beta0 + params.beta_a * np.asarray(a, dtype=float)
    a0 = np.full_like(b, params.alpha0)
    c = np.column_stack([np.zeros_like(b), b, a0, b + a0 + params.beta_w])
    r = np.array([0.0, params.beta_u, params.alpha_u, params.beta_u + params.alpha_u])
    return c, r


def density_u_unnorm(u, a, z, params: DgpParams):
    """Unnormalised density of ``U`` given ``(A, Z)`` for binary ``(Y, W)``."""
    u, a, z = np.broadcast_arrays(*(np.asarray(v, dtype=float) for v in (u, a, z)))
    c, r = logit_states(a.ravel(), params)
    log_bracket = logsumexp(c + np.outer(u.ravel(), r), axis=1)
    b = params.beta0 + params.beta_a * a.ravel()
    log_norm = np.logaddexp(0.0, b) + np.logaddexp(0.0, params.alpha0)
    logd = params.eps.logpdf(u.ravel() - params.m(a.ravel(), z.ravel())) + log_bracket - log_norm
    out = np.exp(logd).reshape(u.shape)
    return out if out.ndim else float(out)


class TiltedSampler:
    """Accept-reject sampler for ``f_eps(u - m) * sum_k exp(c_k + r_k u)``.

    The proposal is the error family centred at ``m`` with its scale widened
    so that every tilt ``exp(r_k u)`` is dominated in both tails.  The
    per-tilt log-ratio bound ``G_k`` is maximised once on a grid; the row
    envelope is ``1.5 * sum_k exp(c_k + r_k m + G_k)``.
    """

    def __init__(self, eps: EpsDist, rates, debug=False):
        self.eps = eps
        self.rates = np.asarray(rates, dtype=float)
        self.debug = debug
        r = float(np.max(np.abs(self.rates)))
        if eps.kind == "logistic":
            if r >= 1.0 / eps.scale:
                raise DataError(
                    f"tilt rate {r:.4g} is not below 1/scale = {1.0 / eps.scale:.4g}; "
                    "the latent density is not integrable"
                )
            scale = PROPOSAL_SAFETY / (1.0 / eps.scale - r) if r > 0 else eps.scale
        else:
            scale = PROPOSAL_SAFETY * eps.scale if r > 0 else eps.scale
        self.proposal = EpsDist(eps.kind, eps.loc, scale)
        half = ENVELOPE_HALF_WIDTH * max(1.0, scale)
        grid = np.linspace(-half, half, ENVELOPE_GRID)
        base = eps.logpdf(grid) - self.proposal.logpdf(grid)
        self.G = np.max(base[None, :] + self.rates[:, None] * grid[None, :], axis=1)

    def log_target(self, u, m, c):
        return self.eps.logpdf(u - m) + logsumexp(c + u[:, None] * self.rates[None, :], axis=1)

    def log_envelope(self, m, c):
        return logsumexp(c + m[:, None] * self.rates[None, :] + self.G[None, :], axis=1) \
            + math.log(ENVELOPE_INFLATION)

    def sample(self, m, c, rng):
        """One draw per row; returns ``(u, proposals)``."""
        m = np.asarray(m, dtype=float)
        n = m.shape[0]
        c = np.broadcast_to(np.asarray(c, dtype=float), (n, self.rates.shape[0]))
        log_m = self.log_envelope(m, c)
        u = np.empty(n)
        todo = np.arange(n)
        tries = np.zeros(n, dtype=np.int64)
        proposals = 0
        while todo.size:
            prop = m[todo] + self.proposal.rvs(rng, todo.size)
            log_ratio = (self.log_target(prop, m[todo], c[todo])
                         - self.proposal.logpdf(prop - m[todo]) - log_m[todo])
            if self.debug and np.any(log_ratio > 1e-12):
                raise NumericalError(
                    f"envelope violated: acceptance ratio {np.exp(log_ratio.max()):.6g} > 1"
                )
            accept = np.log(rng.uniform(size=todo.size)) < log_ratio
            proposals += todo.size
            u[todo[accept]] = prop[accept]
            tries[todo[~accept]] += 1
            todo = todo[~accept]
            if todo.size and tries[todo].max() > MAX_REJECTIONS:
                raise NumericalError(
                    f"more than {MAX_REJECTIONS} rejections for a single draw; "
                    "the envelope does not fit these parameters"
                )
        return u, proposals


def sample_states(u, c, rates, rng):
    """Draw a state index per row with probability ∝ exp(c + r u)."""
    logits = c + np.asarray(u)[:, None] * np.asarray(rates)[None, :]
    probs = np.exp(logits - logsumexp(logits, axis=1, keepdims=True))
    cum = np.cumsum(probs, axis=1)
    draws = rng.uniform(size=(probs.shape[0], 1))
    return np.minimum((draws > cum).sum(axis=1), probs.shape[1] - 1)


def sample_u(a, z, params: DgpParams, rng, debug=False):
    """Draws of ``U | A, Z`` for binary ``(Y, W)``; returns ``(u, proposals)``."""
    a = np.atleast_1d(np.asarray(a, dtype=float))
    z = np.atleast_1d(np.asarray(z, dtype=float))
    a, z = np.broadcast_arrays(a, z)
    c, r = logit_states(a, params)
    params.check_tail_rate(r)
    sampler = TiltedSampler(params.eps, r, debug=debug)
    return sampler.sample(params.m(a, z), c, rng)


def yw_probabilities(u, a, z, params: DgpParams) -> np.ndarray:
    """P(Y=y, W=w | U, A, Z) for (0,0), (1,0), (0,1), (1,1); n x 4."""
    u = np.atleast_1d(np.asarray(u, dtype=float))
    a = np.broadcast_to(np.asarray(a, dtype=float), u.shape)
    c, r = logit_states(a, params)
    logits = c + u[:, None] * r[None, :]
    return np.exp(logits - logsumexp(logits, axis=1, keepdims=True))


def sample_yw(u, a, z, params: DgpParams, rng):
    u = np.atleast_1d(np.asarray(u, dtype=float))
    a = np.broadcast_to(np.asarray(a, dtype=float), u.shape)
    c, r = logit_states(a, params)
    state = sample_states(u, c, r, rng)
    return (state % 2).astype(float), (state // 2).astype(float)


def _draw_az(n, params, rng_a, rng_z):
    if n < 1:
        raise DataError("n must be at least 1")
    return rng_a.normal(0.0, params.sd_a, n), rng_z.normal(0.0, params.sd_z, n)


def generate_logit_dataset(n: int, params: DgpParams = SS_DEFAULT, seed=0, debug=False) -> GeneratedDataset:
    """Binary ``(Y, W)`` with a shared odds-ratio parameter."""
    params.check_symmetry()
    ra, rz, ru, ryw, _, _ = _streams(seed)
    a, z = _draw_az(n, params, ra, rz)
    u, proposals = sample_u(a, z, params, ru, debug=debug)
    y, w = sample_yw(u, a, z, params, ryw)
    return GeneratedDataset(Dataset(y=y, a=a, w=w, z=z, u=u), params, seed, (proposals, n))


def _continuous_u(n, params, seed):
    ra, rz, ru, _, ry, rw = _streams(seed)
    a, z = _draw_az(n, params, ra, rz)
    u = params.m(a, z) + params.eps.rvs(ru, n)
    return a, z, u, ry, rw


def _draw(link, mean_eta, rng, noise_sd):
    if link == "identity":
        return mean_eta + rng.normal(0.0, noise_sd, mean_eta.shape[0]) if noise_sd > 0 else mean_eta.copy()
    if link == "log":
        return rng.poisson(np.exp(mean_eta)).astype(float)
    return (rng.uniform(size=mean_eta.shape[0]) < expit(mean_eta)).astype(float)


def _both_direct(n, params, seed, y_link, w_link):
    a, z, u, ry, rw = _continuous_u(n, params, seed)
    w = _draw(w_link, params.alpha0 + params.alpha_u * u, rw, params.noise_sd)
    y = _draw(y_link, params.beta0 + params.beta_a * a + params.beta_u * u, ry, params.noise_sd)
    return GeneratedDataset(Dataset(y=y, a=a, w=w, z=z, u=u), params, seed, (n, n))


def generate_linear_dataset(n: int, params: DgpParams, seed=0) -> GeneratedDataset:
    """Linear ``W`` and ``Y`` given ``U`` with normal noise of SD ``noise_sd``."""
    return _both_direct(n, params, seed, "identity", "identity")


def generate_count_dataset(n: int, params: DgpParams, seed=0) -> GeneratedDataset:
    """Poisson ``W`` and ``Y`` with log-linear means in ``U``."""
    return _both_direct(n, params, seed, "log", "log")


def _logit_one_side(n, params, seed, binary, other_link, debug=False):
    """One binary variable sharing a tilted latent law; the other drawn given it."""
    ra, rz, ru, r_state, ry, rw = _streams(seed)
    a, z = _draw_az(n, params, ra, rz)
    if binary == "y":
        c = np.column_stack([np.zeros(n), params.beta0 + params.beta_a * a])
        rates = np.array([0.0, params.beta_u])
    else:
        c = np.column_stack([np.zeros(n), np.full(n, params.alpha0)])
        rates = np.array([0.0, params.alpha_u])
    params.check_tail_rate(rates)
    sampler = TiltedSampler(params.eps, rates, debug=debug)
    u, proposals = sampler.sample(params.m(a, z), c, ru)
    state = sample_states(u, c, rates, r_state).astype(float)
    if binary == "y":
        y = state
        eta = params.alpha0 + params.alpha_u * u + params.alpha_y_effective * y + params.alpha_uy * u * y
        w = _draw(other_link, eta, rw, params.noise_sd)
    else:
        w = state
        eta = (params.beta0 + params.beta_a * a + params.beta_u * u + params.beta_w * w
               + params.beta_uw * u * w)
        y = _draw(other_link, eta, ry, params.noise_sd)
    return GeneratedDataset(Dataset(y=y, a=a, w=w, z=z, u=u), params, seed, (proposals, n))


def generate_dataset(n: int, params: DgpParams, y_link: str, w_link: str, seed=0,
                     debug=False) -> GeneratedDataset:
    """Data satisfying the model of the ``(y_link, w_link)`` procedure.

    Interaction terms are active whenever ``alpha_uy`` (binary ``y``) or
    ``beta_uw`` (binary ``w``) is non-zero.
    """
    pair = (y_link, w_link)
    if pair == ("logit", "logit"):
        return generate_logit_dataset(n, params, seed, debug=debug)
    if y_link == "logit":
        return _logit_one_side(n, params, seed, "y", w_link, debug)
    if w_link == "logit":
        return _logit_one_side(n, params, seed, "w", y_link, debug)
    if "multinomial" in pair:
        raise DataError("use generate_poly_dataset for category-coded variables")
    return _both_direct(n, params, seed, y_link, w_link)


def poly_states(a, params: PolyDgpParams):
    """Energies (n x (T+1)(K+1)) and rates for state ``t * (K+1) + k``."""
    a = np.asarray(a, dtype=float)
    b0 = np.concatenate([[0.0], params.beta0])
    ba = np.concatenate([[0.0], params.beta_a])
    bu = np.concatenate([[0.0], params.beta_u])
    a0 = np.concatenate([[0.0], params.alpha0])
    au = np.concatenate([[0.0], params.alpha_u])
    bw = np.zeros((len(b0), len(a0)))
    bw[1:, 1:] = np.asarray(params.beta_w, dtype=float)
    ey = b0[None, :] + ba[None, :] * a[:, None]
    c = (ey[:, :, None] + a0[None, None, :] + bw[None, :, :]).reshape(a.shape[0], -1)
    r = (bu[:, None] + au[None, :]).ravel()
    return c, r


def generate_poly_dataset(n: int, params: PolyDgpParams, seed=0, debug=False) -> GeneratedDataset:
    """Category-coded ``Y`` (T+1 levels) and ``W`` (K+1 levels)."""
    ra, rz, ru, rs, _, _ = _streams(seed)
    a, z = _draw_az(n, params, ra, rz)
    c, r = poly_states(a, params)
    sampler = TiltedSampler(params.eps, r, debug=debug)
    u, proposals = sampler.sample(params.m(a, z), c, ru)
    state = sample_states(u, c, r, rs)
    K1 = len(params.alpha0) + 1
    y = (state // K1).astype(float)
    w = (state % K1).astype(float)
    T1 = len(params.beta0) + 1
    data = Dataset(y=y, a=a, w=w, z=z, u=u,
                   y_levels=T1 if T1 > 2 else None, w_levels=K1)
    return GeneratedDataset(data, params, seed, (proposals, n))


def with_beta_u(params, value):
    """Copy of ``params`` with the confounder's outcome effect replaced."""
    if isinstance(params, PolyDgpParams):
        return replace(params, beta_u=tuple(value for _ in params.beta_u))
    return replace(params, beta_u=value)


@dataclass(frozen=True)
class MatchedSetting:
    """A procedure together with data generated under its own assumptions."""

    procedure: str
    y_link: str
    w_link: str
    dgp: DgpParams | PolyDgpParams
    interactions: bool = False
    restrict_symmetry: bool = False
    first_stage_terms: tuple[str, ...] | None = None

    def generate(self, n, seed=0) -> GeneratedDataset:
        if isinstance(self.dgp, PolyDgpParams):
            return generate_poly_dataset(n, self.dgp, seed)
        return generate_dataset(n, self.dgp, self.y_link, self.w_link, seed)


def _matched():
    eps = EpsDist("normal", 0.0, 0.5)
    m = (0.0, 0.5, 1.0, 0.0)
    base = dict(eps=eps, m_coefs=m, sd_a=0.5, sd_z=0.5, noise_sd=1.0)
    lin = DgpParams(beta0=0.5, beta_a=1.0, beta_u=1.0, beta_w=0.0, alpha0=0.0, alpha_u=1.0, **base)
    cnt = DgpParams(beta0=0.0, beta_a=0.5, beta_u=0.5, beta_w=0.0, alpha0=0.2, alpha_u=0.5, **base)
    y_bin = dict(beta0=-0.5, beta_a=1.0, beta_u=-0.8, beta_w=0.0, alpha0=0.0, alpha_u=1.0)
    y_bin_log = dict(y_bin, alpha0=0.2, alpha_u=0.5)
    w_bin = dict(beta0=0.0, beta_a=1.0, beta_u=1.0, beta_w=0.5, alpha0=-0.3, alpha_u=0.8)
    w_bin_log = dict(w_bin, beta0=-0.2, beta_a=0.5, beta_u=0.5, beta_w=0.3)
    ss_terms = ("a", "z", "a:z")
    settings = [
        MatchedSetting("1", "identity", "identity", lin),
        MatchedSetting("2", "log", "log", cnt),
        MatchedSetting("3", "logit", "logit", SS_DEFAULT, first_stage_terms=ss_terms),
        MatchedSetting("3r", "logit", "logit", SS_DEFAULT, restrict_symmetry=True,
                       first_stage_terms=ss_terms),
        MatchedSetting("6", "log", "identity", replace(cnt, alpha0=0.0, alpha_u=1.0)),
        MatchedSetting("7", "identity", "log", replace(lin, alpha0=0.2, alpha_u=0.5)),
        MatchedSetting("8", "logit", "identity", DgpParams(**y_bin, alpha_y=0.5, **base)),
        MatchedSetting("9", "logit", "identity", DgpParams(**y_bin, alpha_y=0.5, alpha_uy=0.5, **base),
                       interactions=True),
        MatchedSetting("10", "identity", "logit", DgpParams(**w_bin, **base)),
        MatchedSetting("11", "identity", "logit", DgpParams(**w_bin, beta_uw=0.7, **base),
                       interactions=True),
        MatchedSetting("12", "logit", "log", DgpParams(**y_bin_log, alpha_y=0.3, **base)),
        MatchedSetting("13", "logit", "log", DgpParams(**y_bin_log, alpha_y=0.3, alpha_uy=0.3, **base),
                       interactions=True),
        MatchedSetting("14", "log", "logit", DgpParams(**w_bin_log, **base)),
        MatchedSetting("15", "log", "logit", DgpParams(**w_bin_log, beta_uw=0.3, **base),
                       interactions=True),
        MatchedSetting("P4", "logit", "multinomial", PolyDgpParams()),
        MatchedSetting("P4m", "multinomial", "multinomial",
                       PolyDgpParams(beta0=(-0.5, -0.8), beta_a=(1.0, 0.6), beta_u=(-0.6, 0.4),
                                     beta_w=((0.4, -0.2), (0.1, 0.3)))),
    ]
    return {s.procedure: s for s in settings}


MATCHED_SETTINGS = _matched()
