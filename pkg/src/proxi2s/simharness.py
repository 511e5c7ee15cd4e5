"""Monte Carlo studies of the naive, two-stage and oracle estimators.

Each replication draws its data and bootstrap streams from
``SeedSequence([master_seed, n, rep])``, so results do not depend on the
order or the number of worker processes.
"""
from __future__ import annotations

import csv
import io
import json
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, fields

import numpy as np
from scipy.stats import norm

from . import glm
from .data import Dataset, TermSpec, build_design
from .datagen import DgpParams, EpsDist, PolyDgpParams, generate_dataset, generate_poly_dataset
from .errors import DataError, ProxiError
from .inference import bootstrap, build_system, sandwich
from .proximal import ModelSpec

VARIANCE_METHODS = ("bootstrap", "sandwich", "both", "none")
NAIVE_FORMS = ("glm", "linear")
CSV_COLUMNS = ("n", "estimator", "bias", "empirical_se", "model_se", "coverage", "failures")
ESTIMATOR_ORDER = ("naive", "two_stage", "two_stage_sandwich", "oracle")


@dataclass(frozen=True)
class StudyConfig:
    dgp: DgpParams | PolyDgpParams = field(default_factory=DgpParams)
    sample_sizes: tuple[int, ...] = (250, 500, 1000, 1500)
    replications: int = 500
    bootstrap_B: int = 300
    ci_level: float = 0.95
    variance_method: str = "bootstrap"
    master_seed: int = 0
    y_link: str = "logit"
    w_link: str = "logit"
    first_stage_terms: tuple[str, ...] | None = ("a", "z", "a:z")
    interactions: bool = False
    restrict_symmetry: bool = False
    naive: str = "glm"

    def __post_init__(self):
        object.__setattr__(self, "sample_sizes", tuple(int(n) for n in self.sample_sizes))
        if self.first_stage_terms is not None:
            object.__setattr__(self, "first_stage_terms", tuple(self.first_stage_terms))
        if self.replications < 2:
            raise DataError("replications must be at least 2")
        if not self.sample_sizes or min(self.sample_sizes) < 10:
            raise DataError("sample sizes must be at least 10")
        if self.variance_method not in VARIANCE_METHODS:
            raise DataError(f"variance_method must be one of {VARIANCE_METHODS}")
        if self.naive not in NAIVE_FORMS:
            raise DataError(f"naive must be one of {NAIVE_FORMS}")
        if not 0 < self.ci_level < 1:
            raise DataError("ci_level must lie in (0, 1)")
        if self.variance_method in ("bootstrap", "both") and self.bootstrap_B < 2:
            raise DataError("bootstrap_B must be at least 2")
        self.model_spec()

    def model_spec(self) -> ModelSpec:
        return ModelSpec(self.y_link, self.w_link, first_stage_terms=self.first_stage_terms,
                         interactions=self.interactions, restrict_symmetry=self.restrict_symmetry)

    @property
    def target(self) -> float:
        return float(np.ravel(self.dgp.beta_a)[0])

    def to_dict(self) -> dict:
        out = {f.name: getattr(self, f.name) for f in fields(self) if f.name != "dgp"}
        out["sample_sizes"] = list(self.sample_sizes)
        if self.first_stage_terms is not None:
            out["first_stage_terms"] = list(self.first_stage_terms)
        dgp = asdict(self.dgp)
        dgp["kind"] = "poly" if isinstance(self.dgp, PolyDgpParams) else "binary"
        out["dgp"] = _lists(dgp)
        return out

    @classmethod
    def from_dict(cls, data) -> "StudyConfig":
        data = dict(data)
        dgp = dict(data.pop("dgp", {}))
        kind = dgp.pop("kind", "binary")
        if "eps" in dgp:
            dgp["eps"] = EpsDist(**dgp["eps"])
        if kind == "poly":
            dgp = PolyDgpParams(**{k: _tuples(v) for k, v in dgp.items()})
        elif kind == "binary":
            dgp = DgpParams.from_dict(dgp)
        else:
            raise DataError(f"unknown dgp kind {kind!r}")
        unknown = set(data) - {f.name for f in fields(cls)}
        if unknown:
            raise DataError(f"unknown study settings: {sorted(unknown)}")
        return cls(dgp=dgp, **data)


def _lists(value):
    if isinstance(value, dict):
        return {k: _lists(v) for k, v in value.items()}
    if isinstance(value, (tuple, list)):
        return [_lists(v) for v in value]
    return value


def _tuples(value):
    if isinstance(value, list):
        return tuple(_tuples(v) for v in value)
    if isinstance(value, dict):
        return EpsDist(**value)
    return value


def preset(name: str) -> StudyConfig:
    """Bundled study configurations."""
    if name == "ss_default":
        return StudyConfig()
    raise DataError(f"unknown preset {name!r}; available: ss_default")


@dataclass(frozen=True)
class Estimate:
    beta_a: float = math.nan
    se: float = math.nan
    lower: float = math.nan
    upper: float = math.nan
    failed: bool = False
    message: str = ""


@dataclass(frozen=True)
class ReplicationResult:
    n: int
    rep: int
    estimates: dict
    bootstrap_failures: int = 0


def replication_seeds(master_seed, n, rep):
    """Data and bootstrap seed sequences for one replication."""
    return np.random.SeedSequence([int(master_seed), int(n), int(rep)]).spawn(2)


def _generate(config, n, seed):
    if isinstance(config.dgp, PolyDgpParams):
        return generate_poly_dataset(n, config.dgp, seed).dataset
    return generate_dataset(n, config.dgp, config.y_link, config.w_link, seed).dataset


def _first(x):
    return float(np.ravel(x)[0])


def _direct(data: Dataset, terms, link, level) -> Estimate:
    """Single regression of ``y`` on ``terms`` with a Wald interval."""
    spec = TermSpec(terms)
    X = build_design(data, spec)
    if link == "multinomial":
        fit = glm.fit_multinomial(X, data.y, data.y_levels)
        return Estimate(beta_a=float(fit.coef[0, 1]))
    fit = glm.fit_glm(X, data.y, link)
    se = float(np.sqrt(glm.glm_covariance(fit, X)[1, 1]))
    z = float(norm.ppf(0.5 + level / 2))
    b = float(fit.coef[1])
    return Estimate(b, se, b - z * se, b + z * se)


def _safe(fn):
    try:
        return fn()
    except (ProxiError, np.linalg.LinAlgError) as exc:
        return Estimate(failed=True, message=str(exc))


def run_replication(config: StudyConfig, n: int, rep: int) -> ReplicationResult:
    data_seed, boot_seed = replication_seeds(config.master_seed, n, rep)
    full = _generate(config, n, data_seed)
    data = full.observed()
    link = config.y_link if config.naive == "glm" else "identity"
    estimates = {
        "naive": _safe(lambda: _direct(data, ("a", "w"), link, config.ci_level)),
        "oracle": _safe(lambda: _direct(full, ("a", "w", "u"), config.y_link, config.ci_level)),
    }
    spec = config.model_spec()
    boot_failures = 0
    try:
        system = build_system(data, spec)
        theta = system.estimate()
        beta_a = _first(theta[system.a_indices])
        method = config.variance_method
        if method in ("sandwich", "both"):
            sw = sandwich(system, theta, config.ci_level)
            lo, hi = sw.ci
            key = "two_stage" if method == "sandwich" else "two_stage_sandwich"
            estimates[key] = Estimate(beta_a, _first(sw.se_a), _first(lo), _first(hi))
        if method in ("bootstrap", "both"):
            bs = bootstrap(data, spec, config.bootstrap_B, boot_seed, config.ci_level, system=system)
            boot_failures = bs.failures
            estimates["two_stage"] = Estimate(beta_a, _first(bs.se), _first(bs.ci[0]), _first(bs.ci[1]))
        if method == "none":
            estimates["two_stage"] = Estimate(beta_a)
    except (ProxiError, np.linalg.LinAlgError) as exc:
        estimates["two_stage"] = Estimate(failed=True, message=str(exc))
        if config.variance_method == "both":
            estimates["two_stage_sandwich"] = Estimate(failed=True, message=str(exc))
    return ReplicationResult(n, rep, estimates, boot_failures)


def _run_chunk(args):
    config, tasks = args
    return [run_replication(config, n, rep) for n, rep in tasks]


@dataclass(frozen=True)
class ReportRow:
    n: int
    estimator: str
    bias: float
    empirical_se: float
    model_se: float
    coverage: float
    failures: int


@dataclass(frozen=True, eq=False)
class SimReport:
    rows: tuple[ReportRow, ...]
    config: StudyConfig | None = None
    replicates: tuple[ReplicationResult, ...] = ()

    def row(self, n, estimator) -> ReportRow:
        for r in self.rows:
            if r.n == n and r.estimator == estimator:
                return r
        raise KeyError((n, estimator))

    def estimates(self, n, estimator) -> np.ndarray:
        """Successful point estimates in replication order."""
        return np.array([r.estimates[estimator].beta_a for r in self.replicates
                         if r.n == n and estimator in r.estimates
                         and not r.estimates[estimator].failed])


def _mean(values):
    values = [v for v in values if not math.isnan(v)]
    return float(np.mean(values)) if values else math.nan


def aggregate(results, target, sample_sizes) -> tuple[ReportRow, ...]:
    rows = []
    for n in sample_sizes:
        block = [r for r in results if r.n == n]
        names = sorted({k for r in block for k in r.estimates}, key=ESTIMATOR_ORDER.index)
        for name in names:
            ests = [r.estimates[name] for r in block if name in r.estimates]
            ok = [e for e in ests if not e.failed]
            values = np.array([e.beta_a for e in ok])
            if values.size:
                bias = float(values.mean() - target)
                emp = float(values.std(ddof=1)) if values.size > 1 else math.nan
            else:
                bias = emp = math.nan
            covered = [e.lower <= target <= e.upper for e in ok if not math.isnan(e.lower)]
            coverage = float(np.mean(covered)) if covered else math.nan
            rows.append(ReportRow(n, name, bias, emp, _mean([e.se for e in ok]), coverage,
                                  len(ests) - len(ok)))
    return tuple(rows)


def run_study(config: StudyConfig, jobs: int = 1) -> SimReport:
    tasks = [(n, rep) for n in config.sample_sizes for rep in range(config.replications)]
    if jobs <= 1:
        results = [run_replication(config, n, rep) for n, rep in tasks]
    else:
        size = max(1, len(tasks) // (4 * jobs))
        chunks = [(config, tasks[i:i + size]) for i in range(0, len(tasks), size)]
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            results = [r for chunk in pool.map(_run_chunk, chunks) for r in chunk]
    results.sort(key=lambda r: (r.n, r.rep))
    return SimReport(aggregate(results, config.target, config.sample_sizes), config, tuple(results))


# -- rendering ---------------------------------------------------------------
def table_header(config: StudyConfig | None = None) -> tuple[str, ...]:
    method = config.variance_method if config is not None else "bootstrap"
    se_label = {"sandwich": "Sandwich S.E.", "none": "Model S.E."}.get(method, "Bootstrap S.E.")
    return ("Sample Size", "Estimator", "Bias", "Empirical S.E.", se_label, "Coverage", "Failures")


def _fmt(x, digits=2):
    return "NA" if math.isnan(x) else f"{x:.{digits}f}"


def summarize(report: SimReport, digits: int = 2) -> str:
    """Aligned text table, one line per (sample size, estimator)."""
    header = table_header(report.config)
    lines = [header]
    for r in report.rows:
        lines.append((str(r.n), r.estimator, _fmt(r.bias, digits), _fmt(r.empirical_se, digits),
                      _fmt(r.model_se, digits), _fmt(r.coverage, digits), str(r.failures)))
    widths = [max(len(line[j]) for line in lines) for j in range(len(header))]
    return "\n".join("  ".join(cell.rjust(w) for cell, w in zip(line, widths)) for line in lines) + "\n"


def _num(x):
    return "nan" if math.isnan(x) else repr(float(x))


def to_csv(report: SimReport) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(CSV_COLUMNS)
    for r in report.rows:
        writer.writerow([r.n, r.estimator, _num(r.bias), _num(r.empirical_se), _num(r.model_se),
                         _num(r.coverage), r.failures])
    return buf.getvalue()


def from_csv(text: str) -> SimReport:
    reader = csv.reader(io.StringIO(text))
    header = next(reader, None)
    if tuple(header or ()) != CSV_COLUMNS:
        raise DataError(f"report CSV header must be {','.join(CSV_COLUMNS)}")
    rows = []
    for line in reader:
        n, est, *vals, fails = line
        rows.append(ReportRow(int(n), est, *(float(v) for v in vals), int(fails)))
    return SimReport(tuple(rows))


def _json_num(x):
    return None if isinstance(x, float) and math.isnan(x) else x


def to_json(report: SimReport) -> str:
    payload = {
        "columns": list(CSV_COLUMNS),
        "config": report.config.to_dict() if report.config is not None else None,
        "rows": [{k: _json_num(v) for k, v in asdict(r).items()} for r in report.rows],
    }
    return json.dumps(payload, indent=2, sort_keys=True) + "\n"


def from_json(text: str) -> SimReport:
    payload = json.loads(text)
    rows = tuple(
        ReportRow(**{k: (math.nan if v is None else v) for k, v in row.items()})
        for row in payload["rows"]
    )
    config = StudyConfig.from_dict(payload["config"]) if payload.get("config") else None
    return SimReport(rows, config)
