"""Command-line runner for the experiments in :mod:`alstucker.problems`.

Three subcommands write CSV files:

``run``
    one trajectory, columns ``t,rel_error,rel_defect,sweeps,step_ms``
``convergence``
    final-time errors for a list of step sizes plus the fitted log-log slope
``stability``
    ALS Euler against the gauged baseline over ranks and step sizes

Settings come from flags or from a ``key=value`` file given by ``--config``;
flags override the file.
"""

import argparse
import csv
import io
import math
import sys
import time
from dataclasses import dataclass, field, fields, replace

import numpy as np

from .integrator import IntegratorConfig, StepFailure, step
from .linalg import SingularGramError
from .problems import PROBLEMS, InfeasibleReference, build_problem, relative_error

BLOWUP_THRESHOLD = 1e6
MAX_LOGGED_RECORDS = 1000
RUN_COLUMNS = ("t", "rel_error", "rel_defect", "sweeps", "step_ms")

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_BLOWUP = 3

SCHEMES = {"euler": "euler", "improved-euler": "improved_euler", "gauged-reference": "gauged_reference"}

# Per-experiment defaults: manifold rank, regularization, fit tolerance.
EXPERIMENT_DEFAULTS = {
    "koch_lubich": dict(rank=(10,), reg="off", tol=1e-5),
    "rotating_decay": dict(rank=(4,), reg="h2", tol=1e-6),
    "heat": dict(rank=(4,), reg="h2", tol=1e-6),
    "reaction_diffusion": dict(rank=(3,), reg="h2", tol=1e-6),
    "constant": dict(rank=(3,), reg="off", tol=1e-5),
}


class ConfigError(ValueError):
    """Invalid run configuration."""


def _parse_experiment(value):
    kind = str(value).strip().lower().replace("-", "_")
    if kind not in PROBLEMS:
        raise ConfigError(f"unknown experiment {value!r}; choose from {sorted(PROBLEMS)}")
    return kind


def _parse_scheme(value):
    key = str(value).strip().lower().replace("_", "-")
    if key not in SCHEMES:
        raise ConfigError(f"unknown scheme {value!r}; choose from {sorted(SCHEMES)}")
    return key


def _parse_rank(value):
    if isinstance(value, (tuple, list)):
        parts = list(value)
    else:
        parts = [p for p in str(value).replace(" ", "").split(",") if p]
    try:
        rank = tuple(int(p) for p in parts)
    except ValueError:
        raise ConfigError(f"rank must be an integer or a comma-separated list, got {value!r}") from None
    if not rank or any(r < 1 for r in rank):
        raise ConfigError(f"ranks must be positive, got {value!r}")
    return rank


def _parse_reg(value):
    text = str(value).strip().lower()
    if text in ("off", "none", "0"):
        return "off"
    if text in ("h2", "alpha=h2", "h^2", "alpha=h^2"):
        return "h2"
    try:
        alpha = float(text.removeprefix("alpha="))
    except ValueError:
        raise ConfigError(f"regularization must be off, h2 or a number, got {value!r}") from None
    if not alpha >= 0 or not math.isfinite(alpha):
        raise ConfigError(f"regularization alpha must be finite and nonnegative, got {value!r}")
    return repr(alpha)


def _parse_bool(value):
    if isinstance(value, bool):
        return value
    text = str(value).strip().lower()
    if text in ("1", "true", "yes", "on"):
        return True
    if text in ("0", "false", "no", "off"):
        return False
    raise ConfigError(f"expected a boolean, got {value!r}")


def _positive(name, value, kind=float):
    try:
        x = kind(value)
    except (TypeError, ValueError):
        raise ConfigError(f"{name} must be a number, got {value!r}") from None
    if not x > 0 or (kind is float and not math.isfinite(x)):
        raise ConfigError(f"{name} must be positive, got {value!r}")
    return x


@dataclass(frozen=True)
class RunConfig:
    """All settings of one run.  ``None`` fields take experiment defaults.

    ``horizon`` may be zero (only the initial record is written).  ``stride``
    of ``None`` logs every ``ceil(N / 1000)``-th of the ``N`` steps.
    """

    experiment: str = "koch_lubich"
    dim: int = None
    size: int = None
    rank: tuple = None
    step: float = 1e-3
    horizon: float = 1.0
    eps: float = None
    scheme: str = "euler"
    reg: str = None
    seed: int = 0
    out: str = "-"
    tol: float = None
    max_sweeps: int = 10
    stride: int = None
    timing: bool = False
    warm_start: bool = False

    def __post_init__(self):
        set_ = object.__setattr__
        set_(self, "experiment", _parse_experiment(self.experiment))
        defaults = EXPERIMENT_DEFAULTS[self.experiment]
        set_(self, "rank", _parse_rank(defaults["rank"] if self.rank is None else self.rank))
        set_(self, "reg", _parse_reg(defaults["reg"] if self.reg is None else self.reg))
        set_(self, "tol", _positive("tol", defaults["tol"] if self.tol is None else self.tol))
        set_(self, "scheme", _parse_scheme(self.scheme))
        set_(self, "step", _positive("step", self.step))
        try:
            horizon = float(self.horizon)
        except (TypeError, ValueError):
            raise ConfigError(f"horizon must be a number, got {self.horizon!r}") from None
        if not horizon >= 0 or not math.isfinite(horizon):
            raise ConfigError(f"horizon must be finite and nonnegative, got {self.horizon!r}")
        set_(self, "horizon", horizon)
        for name in ("dim", "size", "stride"):
            value = getattr(self, name)
            if value is not None:
                set_(self, name, _positive(name, value, int))
        if self.eps is not None:
            set_(self, "eps", _positive("eps", self.eps))
        set_(self, "max_sweeps", _positive("max_sweeps", self.max_sweeps, int))
        set_(self, "seed", int(self.seed))
        set_(self, "timing", _parse_bool(self.timing))
        set_(self, "warm_start", _parse_bool(self.warm_start))
        set_(self, "out", str(self.out))

    @property
    def num_steps(self):
        n = self.horizon / self.step
        N = int(round(n))
        if abs(n - N) > 1e-9 * max(1.0, n):
            raise ConfigError(f"horizon {self.horizon!r} is not a multiple of the step {self.step!r}")
        return N

    @property
    def log_stride(self):
        if self.stride is not None:
            return self.stride
        return max(1, math.ceil(self.num_steps / MAX_LOGGED_RECORDS))

    def integrator_config(self, step_size=None):
        reg = {"off": None, "h2": "h2"}.get(self.reg)
        if reg is None and self.reg != "off":
            reg = float(self.reg)
        return IntegratorConfig(
            step_size=self.step if step_size is None else step_size,
            fit_tolerance=self.tol,
            max_sweeps=self.max_sweeps,
            regularization=reg,
            scheme=SCHEMES[self.scheme],
            warm_start=self.warm_start,
        )

    def build(self):
        """``(problem, Y0)`` for this configuration."""
        rank = self.rank[0] if len(self.rank) == 1 else self.rank
        try:
            return build_problem(self.experiment, rank, dim=self.dim, size=self.size, eps=self.eps, seed=self.seed)
        except TypeError as exc:
            raise ConfigError(f"invalid parameters for {self.experiment}: {exc}") from None

    def to_text(self):
        """``key=value`` lines that :meth:`from_text` maps back to an equal config."""
        lines = []
        for f in fields(self):
            value = getattr(self, f.name)
            if value is None:
                continue
            if f.name == "rank":
                value = ",".join(str(r) for r in value)
            elif isinstance(value, float):
                value = repr(value)
            lines.append(f"{f.name}={value}")
        return "\n".join(lines) + "\n"

    @classmethod
    def from_mapping(cls, mapping):
        names = {f.name for f in fields(cls)}
        kwargs = {}
        for key, value in mapping.items():
            name = key.strip().replace("-", "_")
            if name not in names:
                raise ConfigError(f"unknown config key {key!r}")
            kwargs[name] = value
        return cls(**kwargs)

    @classmethod
    def from_text(cls, text):
        return cls.from_mapping(parse_config_text(text))


def parse_config_text(text):
    """Parse ``key=value`` lines; blank lines and ``#`` comments are ignored."""
    out = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"config line {lineno} is not key=value: {raw!r}")
        key, value = line.split("=", 1)
        out[key.strip()] = value.strip()
    return out


@dataclass
class RunRecord:
    t: float
    rel_error: float = None
    rel_defect: float = None
    sweeps: int = None
    step_ms: float = None
    blowup: bool = False

    def row(self):
        return [_fmt(self.t), _fmt(self.rel_error), _fmt(self.rel_defect), _fmt(self.sweeps), _fmt(self.step_ms)]


@dataclass
class RunResult:
    records: list = field(default_factory=list)
    status: int = EXIT_OK
    message: str = ""

    @property
    def blew_up(self):
        return self.status == EXIT_BLOWUP

    @property
    def final_error(self):
        return self.records[-1].rel_error if self.records else None


def _fmt(value):
    if value is None:
        return ""
    if isinstance(value, (int, np.integer)):
        return str(int(value))
    return repr(float(value))


def _is_blowup(value):
    return value is not None and (not math.isfinite(value) or value > BLOWUP_THRESHOLD)


def _reference_error(problem, Y, t):
    try:
        reference = problem.reference(t)
    except (AttributeError, InfeasibleReference):
        return None
    return relative_error(Y, reference)


def run_experiment(cfg, problem=None, initial=None):
    """Integrate ``cfg.experiment`` from 0 to ``cfg.horizon``.

    Errors against the reference solution are computed at logged steps only.
    A step whose defect or error exceeds ``BLOWUP_THRESHOLD`` or is not
    finite, or a step that raises a numerical failure, ends the run with a
    blow-up record (failed metrics written as ``inf``) and status
    ``EXIT_BLOWUP``.

    Returns
    -------
    RunResult
    """
    if problem is None:
        problem, initial = cfg.build()
    N = cfg.num_steps
    stride = cfg.log_stride
    icfg = cfg.integrator_config()
    h = cfg.step
    Y = initial
    result = RunResult([RunRecord(0.0, rel_error=_reference_error(problem, Y, 0.0))])
    report = None
    for k in range(N):
        t = k * h
        t_next = (k + 1) * h
        start = time.perf_counter()
        try:
            with np.errstate(over="ignore", invalid="ignore"):
                Y, report = step(Y, t, problem, icfg, previous=report)
        except (SingularGramError, StepFailure, np.linalg.LinAlgError, FloatingPointError) as exc:
            result.records.append(RunRecord(t_next, math.inf, math.inf, blowup=True))
            result.status = EXIT_BLOWUP
            result.message = f"blow-up at t={t_next!r}: {exc}"
            return result
        elapsed = (time.perf_counter() - start) * 1e3 if cfg.timing else None
        defect = report.relative_defect
        logged = (k + 1) % stride == 0 or k + 1 == N
        finite_state = all(np.all(np.isfinite(F)) for F in (Y.core, *Y.factors))
        error = None
        if finite_state and (logged or _is_blowup(defect)):
            error = _reference_error(problem, Y, t_next)
        if not finite_state or _is_blowup(defect) or _is_blowup(error):
            rec = RunRecord(
                t_next,
                math.inf if error is None or not finite_state else error,
                defect if math.isfinite(defect) else math.inf,
                report.sweeps,
                elapsed,
                blowup=True,
            )
            result.records.append(rec)
            result.status = EXIT_BLOWUP
            result.message = f"blow-up at t={t_next!r}: defect {defect!r}, error {error!r}"
            return result
        if logged:
            result.records.append(RunRecord(t_next, error, defect, report.sweeps, elapsed))
    return result


def _write_csv(path, header, rows):
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(header)
    writer.writerows(rows)
    text = buf.getvalue()
    if path in ("-", ""):
        sys.stdout.write(text)
    else:
        with open(path, "w", newline="") as fh:
            fh.write(text)


def write_run_csv(path, result):
    _write_csv(path, RUN_COLUMNS, [rec.row() for rec in result.records])


def fitted_slope(steps, errors):
    """Least-squares slope of ``log(error)`` against ``log(h)``.

    ``nan`` when fewer than two positive finite errors are available.
    """
    pts = [(h, e) for h, e in zip(steps, errors) if e is not None and math.isfinite(e) and e > 0]
    if len(pts) < 2:
        return math.nan
    x = np.log([p[0] for p in pts])
    y = np.log([p[1] for p in pts])
    return float(np.polyfit(x, y, 1)[0])


def convergence_study(cfg, steps):
    """Final-time error for every step size in ``steps``.

    Returns ``(rows, slope)`` with rows ``(h, rel_error, status)``; a run that
    blows up contributes an ``inf`` error and is left out of the fit.
    """
    rows = []
    for h in steps:
        res = run_experiment(replace(cfg, step=h, stride=None))
        err = math.inf if res.blew_up else res.final_error
        rows.append((h, err, res.status))
    slope = fitted_slope([r[0] for r in rows], [None if r[2] else r[1] for r in rows])
    return rows, slope


def stability_comparison(cfg, ranks, steps, schemes=("euler", "gauged-reference")):
    """Run every scheme for every rank and step size.

    Returns a list of dicts with keys ``scheme, rank, h, rel_error,
    model_error, status`` where ``status`` is ``ok`` or ``blowup``.
    """
    rows = []
    for rank in ranks:
        for scheme in schemes:
            for h in steps:
                run_cfg = replace(cfg, rank=rank, scheme=scheme, step=h, stride=None)
                problem, Y0 = run_cfg.build()
                res = run_experiment(run_cfg, problem, Y0)
                model = None
                if hasattr(problem, "model_accuracy"):
                    model = problem.model_accuracy(run_cfg.horizon, run_cfg.rank[0] if len(run_cfg.rank) == 1 else run_cfg.rank)
                rows.append(
                    dict(
                        scheme=scheme,
                        rank=",".join(str(r) for r in run_cfg.rank),
                        h=h,
                        rel_error=math.inf if res.blew_up else res.final_error,
                        model_error=model,
                        status="blowup" if res.blew_up else "ok",
                    )
                )
    return rows


def _float_list(text):
    try:
        values = [float(v) for v in str(text).split(",") if v.strip()]
    except ValueError:
        raise ConfigError(f"expected a comma-separated list of numbers, got {text!r}") from None
    if not values or any(not v > 0 for v in values):
        raise ConfigError(f"list entries must be positive, got {text!r}")
    return values


def _build_parser():
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="file of key=value lines; flags override it")
    common.add_argument("--experiment", help="koch-lubich, rotating-decay, heat, reaction-diffusion or constant")
    common.add_argument("--dim", type=int)
    common.add_argument("--size", type=int, help="mode size I")
    common.add_argument("--rank", help="rank r or comma-separated rank vector")
    common.add_argument("--step", type=float, help="step size h")
    common.add_argument("--horizon", type=float, help="final time T")
    common.add_argument("--eps", type=float, help="perturbation level of the koch-lubich data")
    common.add_argument("--scheme", help="euler, improved-euler or gauged-reference")
    common.add_argument("--reg", help="off, h2 or a fixed alpha")
    common.add_argument("--seed", type=int)
    common.add_argument("--out", help="output CSV path, '-' for stdout")
    common.add_argument("--tol", type=float, help="relative fit tolerance of the ALS sweeps")
    common.add_argument("--max-sweeps", type=int)
    common.add_argument("--stride", type=int, help="log every n-th step")
    common.add_argument("--timing", action="store_const", const=True, help="fill the step_ms column")
    common.add_argument("--warm-start", action="store_const", const=True, help="start sweeps from the previous increments")

    parser = argparse.ArgumentParser(prog="alstucker", description=__doc__.split("\n\n")[0])
    sub = parser.add_subparsers(dest="command", required=True)
    sub.add_parser("run", parents=[common], help="integrate one trajectory")
    conv = sub.add_parser("convergence", parents=[common], help="final errors against step size")
    conv.add_argument("--steps", default="1e-2,5e-3,2.5e-3,1.25e-3", help="comma-separated step sizes")
    stab = sub.add_parser("stability", parents=[common], help="ALS against the gauged baseline")
    stab.add_argument("--steps", default="1e-2,1e-3,1e-4", help="comma-separated step sizes")
    stab.add_argument("--ranks", default="4,8,12,16", help="comma-separated ranks")
    return parser


_CONFIG_FLAGS = (
    "experiment", "dim", "size", "rank", "step", "horizon", "eps", "scheme",
    "reg", "seed", "out", "tol", "max_sweeps", "stride", "timing", "warm_start",
)


def config_from_args(args):
    """Merge a config file (if any) with the flags given on the command line."""
    mapping = {}
    if args.config:
        with open(args.config) as fh:
            mapping.update(parse_config_text(fh.read()))
    for name in _CONFIG_FLAGS:
        value = getattr(args, name, None)
        if value is not None:
            mapping[name] = value
    return RunConfig.from_mapping(mapping)


def main(argv=None):
    parser = _build_parser()
    args = parser.parse_args(argv)
    try:
        cfg = config_from_args(args)
        if args.command == "run":
            result = run_experiment(cfg)
            write_run_csv(cfg.out, result)
            if result.status != EXIT_OK:
                print(result.message, file=sys.stderr)
            return result.status
        if args.command == "convergence":
            rows, slope = convergence_study(cfg, _float_list(args.steps))
            _write_csv(cfg.out, ("h", "rel_error", "fitted_slope"), [[_fmt(h), _fmt(e), _fmt(slope)] for h, e, _ in rows])
            return EXIT_BLOWUP if any(status for _, _, status in rows) else EXIT_OK
        ranks = [int(r) for r in _float_list(args.ranks)]
        rows = stability_comparison(cfg, ranks, _float_list(args.steps))
        header = ("scheme", "rank", "h", "rel_error", "model_error", "status")
        body = [[r["scheme"], r["rank"], _fmt(r["h"]), _fmt(r["rel_error"]), _fmt(r["model_error"]), r["status"]] for r in rows]
        _write_csv(cfg.out, header, body)
        # gauged blow-ups are the expected outcome here; only ALS failures count
        return EXIT_BLOWUP if any(r["status"] != "ok" and r["scheme"] != "gauged-reference" for r in rows) else EXIT_OK
    except (ConfigError, InfeasibleReference, ValueError, OSError) as exc:
        print(f"alstucker: error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
