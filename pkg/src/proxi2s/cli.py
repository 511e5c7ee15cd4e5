"""``proxi2s`` command line: ``fit`` a two-stage model or ``simulate`` a study.

Exit status is 0 on success, 2 for data or configuration problems and 3 for
numerical failures.
"""
from __future__ import annotations

import argparse
import csv
import json
import math
import sys
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from .data import Dataset
from .errors import DataError, NumericalError
from .inference import bootstrap, build_system, sandwich, theta_from_fit
from .proximal import ModelSpec, fit_two_stage

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

EXIT_OK, EXIT_DATA, EXIT_NUMERIC = 0, 2, 3
LINKS = ("identity", "log", "logit", "multinomial")
VARIANCES = ("bootstrap", "sandwich", "both", "none")


# -- CSV input -----------------------------------------------------------------
@dataclass(frozen=True)
class Roles:
    y: str = "y"
    a: str = "a"
    w: str = "w"
    z: tuple[str, ...] = ("z",)
    x: tuple[str, ...] = ()
    y_link: str | None = None
    w_link: str | None = None

    def columns(self):
        return [self.y, self.a, self.w, *self.z, *self.x]

    def validate(self):
        cols = self.columns()
        if not self.z:
            raise DataError("at least one z column is required")
        dup = sorted({c for c in cols if cols.count(c) > 1})
        if dup:
            raise DataError(f"column roles must be disjoint; repeated: {dup}")


def _category_levels(values, name, link):
    if link == "logit":
        bad = np.flatnonzero((values != 0) & (values != 1))
        if bad.size:
            raise DataError(f"column {name!r} must be 0/1 for the logit link (row {bad[0] + 1})")
        return None
    if link == "multinomial":
        bad = np.flatnonzero((values < 0) | (values != np.round(values)))
        if bad.size:
            raise DataError(
                f"column {name!r} must hold category codes 0..K for the multinomial link "
                f"(row {bad[0] + 1})"
            )
        return int(values.max()) + 1
    if link == "log":
        bad = np.flatnonzero((values < 0) | (values != np.round(values)))
        if bad.size:
            raise DataError(f"column {name!r} must hold nonnegative counts for the log link "
                            f"(row {bad[0] + 1})")
    return None


def load_csv(path, roles: Roles) -> Dataset:
    """Read a header-first numeric CSV into a :class:`Dataset`.

    Rows are numbered from 1 after the header; errors name the row and
    column.
    """
    roles.validate()
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise DataError(f"cannot read {path}: {exc.strerror or exc}") from None
    reader = csv.reader(text.splitlines())
    header = next(reader, None)
    if not header or not any(h.strip() for h in header):
        raise DataError(f"{path}: row 0: empty file or missing header")
    header = [h.strip() for h in header]
    index = {name: j for j, name in enumerate(header)}
    missing = [c for c in roles.columns() if c not in index]
    if missing:
        raise DataError(f"{path}: missing column(s) {missing}; header has {header}")
    wanted = roles.columns()
    values = {c: [] for c in wanted}
    for rownum, row in enumerate(reader, start=1):
        if not row or all(not cell.strip() for cell in row):
            continue
        if len(row) != len(header):
            raise DataError(f"{path}: row {rownum}: expected {len(header)} fields, got {len(row)}")
        for c in wanted:
            cell = row[index[c]].strip()
            try:
                v = float(cell)
            except ValueError:
                raise DataError(f"{path}: row {rownum}, column {c!r}: cannot parse {cell!r}") from None
            if not math.isfinite(v):
                raise DataError(f"{path}: row {rownum}, column {c!r}: non-finite value {cell!r}")
            values[c].append(v)
    if not values[roles.y]:
        raise DataError(f"{path}: no data rows")
    cols = {c: np.array(v) for c, v in values.items()}
    y_levels = _category_levels(cols[roles.y], roles.y, roles.y_link)
    w_levels = _category_levels(cols[roles.w], roles.w, roles.w_link)
    # role names become the canonical column names inside the package
    z_names = tuple(f"z_{c}" if c in ("y", "a", "w", "u") else c for c in roles.z)
    x_names = tuple(f"x_{c}" if c in ("y", "a", "w", "u") else c for c in roles.x)
    return Dataset(
        y=cols[roles.y], a=cols[roles.a], w=cols[roles.w],
        z=np.column_stack([cols[c] for c in roles.z]),
        x=np.column_stack([cols[c] for c in roles.x]) if roles.x else None,
        z_names=z_names, x_names=x_names, y_levels=y_levels, w_levels=w_levels,
    )


# -- fit -----------------------------------------------------------------------
@dataclass(frozen=True)
class FitConfig:
    input: str
    out: str
    roles: Roles = field(default_factory=Roles)
    y_link: str = "identity"
    w_link: str = "identity"
    interactions: bool = False
    restrict_symmetry: bool = False
    variance: str = "sandwich"
    boot_b: int = 300
    seed: int = 0
    level: float = 0.95

    def __post_init__(self):
        if self.variance not in VARIANCES:
            raise DataError(f"variance must be one of {VARIANCES}")
        if not 0 < self.level < 1:
            raise DataError("level must lie in (0, 1)")
        if self.variance in ("bootstrap", "both") and self.boot_b < 2:
            raise DataError("--boot-b must be at least 2")


@dataclass
class FitReport:
    procedure: str
    y_link: str
    w_link: str
    n: int
    first_stage: dict
    second_stage: dict
    beta_a: dict
    diagnostics: dict

    def to_json(self) -> str:
        return json.dumps(_clean(asdict(self)), indent=2, sort_keys=True) + "\n"

    @classmethod
    def from_json(cls, text: str) -> "FitReport":
        return cls(**json.loads(text))


def _clean(value):
    if isinstance(value, dict):
        return {str(k): _clean(v) for k, v in value.items()}
    if isinstance(value, (list, tuple, np.ndarray)):
        return [_clean(v) for v in value]
    if isinstance(value, (np.floating, float)):
        value = float(value)
        return None if not math.isfinite(value) else value
    if isinstance(value, np.integer):
        return int(value)
    if isinstance(value, np.bool_):
        return bool(value)
    return value


def run_fit(config: FitConfig) -> FitReport:
    roles = replace(config.roles, y_link=config.y_link, w_link=config.w_link)
    data = load_csv(config.input, roles)
    spec = ModelSpec(config.y_link, config.w_link, interactions=config.interactions,
                     restrict_symmetry=config.restrict_symmetry)
    fit = fit_two_stage(data, spec)
    system = build_system(data, spec)
    theta = theta_from_fit(fit)
    second = {name: {"coef": value} for name, value in fit.second_coefs().items()}
    beta_a = {"estimate": fit.beta_a, "level": config.level}
    diagnostics = dict(fit.diagnostics)
    if config.variance in ("sandwich", "both"):
        sw = sandwich(system, theta, config.level)
        for name, se in sw.se.items():
            stage, _, coef = name.partition(":")
            if stage == "second" and coef in second:
                second[coef]["se"] = se
        beta_a["sandwich"] = {"se": sw.se_a, "ci": list(sw.ci)}
        diagnostics["jacobian_condition_number"] = sw.condition_number
    if config.variance in ("bootstrap", "both"):
        bs = bootstrap(data, spec, config.boot_b, config.seed, config.level, system=system)
        beta_a["bootstrap"] = {"se": bs.se, "ci": list(bs.ci), "B": bs.B, "failures": bs.failures,
                               "seed": config.seed}
        diagnostics["bootstrap_failures"] = bs.failures
    if fit.plan.offset_w:
        diagnostics["offset_alpha_y"] = fit.alpha_y
    report = FitReport(
        procedure=fit.plan.procedure_id, y_link=config.y_link, w_link=config.w_link, n=data.n,
        first_stage=fit.first_coefs(), second_stage=second, beta_a=beta_a,
        diagnostics=diagnostics,
    )
    return FitReport.from_json(report.to_json())


def _split(text):
    return tuple(c.strip() for c in text.split(",") if c.strip()) if text else ()


def cmd_fit(args) -> int:
    try:
        roles = Roles(args.y, args.a, args.w, _split(args.z), _split(args.x))
        config = FitConfig(
            input=args.input, out=args.out, roles=roles, y_link=args.y_link, w_link=args.w_link,
            interactions=args.interactions, restrict_symmetry=args.restrict_symmetry,
            variance=args.variance, boot_b=args.boot_b, seed=args.seed, level=args.level,
        )
        report = run_fit(config)
    except DataError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except NumericalError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    text = report.to_json()
    if args.out == "-":
        sys.stdout.write(text)
    else:
        Path(args.out).write_text(text, encoding="utf-8")
    return EXIT_OK


# -- simulate ------------------------------------------------------------------
def study_config(args):
    from .simharness import StudyConfig, preset
    if args.config:
        try:
            with open(args.config, "rb") as fh:
                raw = tomllib.load(fh)
        except OSError as exc:
            raise DataError(f"cannot read {args.config}: {exc.strerror or exc}") from None
        except tomllib.TOMLDecodeError as exc:
            raise DataError(f"{args.config}: {exc}") from None
        config = StudyConfig.from_dict(raw)
    else:
        config = preset(args.preset or "ss_default")
    changes = {}
    if args.sizes:
        changes["sample_sizes"] = tuple(args.sizes)
    if args.reps is not None:
        changes["replications"] = args.reps
    if args.seed is not None:
        changes["master_seed"] = args.seed
    if args.boot_b is not None:
        changes["bootstrap_B"] = args.boot_b
    if args.variance is not None:
        changes["variance_method"] = args.variance
    if args.naive is not None:
        changes["naive"] = args.naive
    if args.dgp_beta_u is not None:
        from .datagen import with_beta_u
        changes["dgp"] = with_beta_u(config.dgp, args.dgp_beta_u)
    return replace(config, **changes) if changes else config


def _validate_dgp(config):
    """Reject parameter sets whose latent density is not integrable."""
    from .datagen import DgpParams, generate_dataset, generate_poly_dataset
    if isinstance(config.dgp, DgpParams):
        generate_dataset(10, config.dgp, config.y_link, config.w_link, seed=0)
    else:
        generate_poly_dataset(10, config.dgp, seed=0)


def cmd_simulate(args) -> int:
    from .simharness import run_study, summarize, to_csv, to_json
    try:
        config = study_config(args)
        _validate_dgp(config)
        if args.jobs < 1:
            raise DataError("--jobs must be at least 1")
        report = run_study(config, jobs=args.jobs)
    except DataError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except NumericalError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "sim_report.csv").write_text(to_csv(report), encoding="utf-8")
    (out / "sim_report.json").write_text(to_json(report), encoding="utf-8")
    sys.stdout.write(summarize(report))
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="proxi2s", description="Proximal two-stage regression.")
    sub = parser.add_subparsers(dest="command", required=True)

    fit = sub.add_parser("fit", help="fit a two-stage model to a CSV file")
    fit.add_argument("--input", required=True)
    fit.add_argument("--y", default="y")
    fit.add_argument("--a", default="a")
    fit.add_argument("--w", default="w")
    fit.add_argument("--z", default="z", help="comma-separated treatment-proxy columns")
    fit.add_argument("--x", default="", help="comma-separated covariate columns")
    fit.add_argument("--y-link", choices=LINKS, default="identity")
    fit.add_argument("--w-link", choices=LINKS, default="identity")
    fit.add_argument("--interactions", action="store_true")
    fit.add_argument("--restrict-symmetry", action="store_true")
    fit.add_argument("--variance", choices=VARIANCES, default="sandwich")
    fit.add_argument("--boot-b", type=int, default=300)
    fit.add_argument("--seed", type=int, default=0)
    fit.add_argument("--level", type=float, default=0.95)
    fit.add_argument("--out", default="-", help="report path ('-' for stdout)")
    fit.set_defaults(func=cmd_fit)

    sim = sub.add_parser("simulate", help="run a Monte Carlo study")
    src = sim.add_mutually_exclusive_group()
    src.add_argument("--config", help="study TOML file")
    src.add_argument("--preset", choices=("ss_default",))
    sim.add_argument("--sizes", type=int, nargs="+")
    sim.add_argument("--reps", type=int)
    sim.add_argument("--seed", type=int)
    sim.add_argument("--jobs", type=int, default=1)
    sim.add_argument("--boot-b", type=int)
    sim.add_argument("--variance", choices=VARIANCES)
    sim.add_argument("--naive", choices=("glm", "linear"))
    sim.add_argument("--dgp-beta-u", type=float)
    sim.add_argument("--out-dir", required=True)
    sim.set_defaults(func=cmd_simulate)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
