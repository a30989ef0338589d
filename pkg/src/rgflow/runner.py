"""Config-driven experiment orchestration and machine-readable reports.

Checks declared in the config are executed in dependency order; shared
artifacts (curvature schedules, spectral traces) are computed once and
reused.  Reports are emitted as one flat CSV plus a 1:1 JSON-lines mirror,
with numbers at 17 significant digits; two runs with the same config and
seed produce byte-identical files.  Wall-clock time lives only in the run
summary on stdout, never in the data files.
"""

from __future__ import annotations

import math
import os
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from . import __version__, curvature as curvature_mod, phi4 as phi4_mod
from .config import ExperimentConfig
from .covariance import make_schedule, schedule_from_table_file
from .errors import ConfigError, NonConvergenceError
from .flow import (Box, GridFunction, conservation_check, default_box,
                   default_sample_points, graded_t_grid, heatflow_harness,
                   make_flow_measure)
from .potential import PotentialDescriptor, QuadratureRule
from .spectral import build_generator, spectrum

WORKERS_ENV = "RGFLOW_WORKERS"

CHECK_ORDER = ("criterion", "spectrum", "theorem", "higher-k", "intertwining",
               "variance", "phi4-identity", "heatflow")


def worker_count() -> int:
    raw = os.environ.get(WORKERS_ENV, "1")
    try:
        return max(1, int(raw))
    except ValueError:
        return 1


def _parallel_map(fn, items):
    """Order-preserving map over a bounded thread pool (deterministic merge)."""
    n = worker_count()
    items = list(items)
    if n == 1 or len(items) <= 1:
        return [fn(x) for x in items]
    with ThreadPoolExecutor(max_workers=n) as pool:
        return list(pool.map(fn, items))


@dataclass
class RunReport:
    statuses: dict = field(default_factory=dict)
    rows: list = field(default_factory=list)
    tolerances: dict = field(default_factory=dict)
    errors: dict = field(default_factory=dict)
    wallclock: float = 0.0
    version: str = __version__
    config_echo: str = ""
    max_k: int = 1

    @property
    def worst_status(self) -> str:
        order = {"pass": 0, "unconverged": 1, "fail": 2}
        worst = "pass"
        for st in self.statuses.values():
            if order[st] > order[worst]:
                worst = st
        return worst


class _Context:
    """Lazy shared artifacts for one experiment run."""

    def __init__(self, cfg: ExperimentConfig):
        self.cfg = cfg
        self.model_kind = cfg.model["kind"]
        self.phi4_model = None
        self.schedule, self.V0 = self._build_model()
        dim = self.V0.dimension
        self.quad = QuadratureRule(order=cfg.quadrature_order,
                                   dimension=min(dim, 3))
        if cfg.box_halfwidth is not None:
            self.box = Box.cube(cfg.box_halfwidth, dim)
        else:
            self.box = default_box(self.schedule)
        self._curv = None
        self._curv_long = None
        self._spec_trace = None
        self._samples = None

    def _build_model(self):
        cfg = self.cfg
        m = cfg.model
        kind = m["kind"]
        if kind == "phi4":
            if "a_matrix" not in m:
                raise ConfigError("phi4 model requires model.a_matrix")
            model = phi4_mod.Phi4Model(
                np.array(m["a_matrix"], dtype=float), float(m.get("g", 1.0)),
                float(m.get("nu", 0.0)), np.atleast_1d(m.get("h", 0.0)))
            self.phi4_model = model
            if cfg.schedule["kind"] != "pauli-villars":
                raise ConfigError("phi4 models use the pauli-villars schedule")
            return model.schedule(), model.potential()

        sched = self._build_schedule()
        if kind == "gaussian":
            return sched, PotentialDescriptor.zero(sched.dim)
        if kind == "quadratic":
            if "b_matrix" not in m:
                raise ConfigError("quadratic model requires model.b_matrix")
            v0 = PotentialDescriptor.quadratic(np.array(m["b_matrix"], dtype=float))
            if v0.dimension != sched.dim:
                raise ConfigError("model and schedule dimensions disagree")
            return sched, v0
        # custom-poly
        v0 = PotentialDescriptor.quartic(
            np.atleast_1d(m.get("g", 0.0)), np.atleast_1d(m.get("nu", 0.0)),
            np.atleast_1d(m.get("h", 0.0)), dimension=sched.dim,
            form="polynomial")
        return sched, v0

    def _build_schedule(self):
        s = self.cfg.schedule
        kind = s["kind"]
        if kind == "custom-table":
            if "table" not in s:
                raise ConfigError("custom-table schedule requires schedule.table")
            return schedule_from_table_file(s["table"])
        c_inf = s.get("c_infinity")
        aux = s.get("a_matrix")
        if c_inf is None and aux is None:
            raise ConfigError(
                "schedule requires schedule.c_infinity or schedule.a_matrix")
        if kind == "pauli-villars" and c_inf is None:
            return make_schedule(kind, aux=np.array(aux, dtype=float))
        return make_schedule(kind, c_infinity=np.array(c_inf, dtype=float))

    # -- shared artifacts --------------------------------------------------

    def samples(self):
        if self._samples is None:
            if self.V0.form in ("zero", "quadratic"):
                self._samples = np.zeros((1, self.V0.dimension))
            else:
                fm0 = make_flow_measure(self.schedule, self.V0, 0.0,
                                        self.cfg.grid_points, box=self.box,
                                        q=self.quad)
                self._samples = default_sample_points(fm0, seed=self.cfg.seed)
        return self._samples

    def lambda_prime_override(self):
        if self.phi4_model is None:
            return None
        model = self.phi4_model
        return lambda t: 1.0 / t - phi4_mod.susceptibility(model, t).value / t**2

    def schedule_t_grid(self, t_max=None):
        cfg = self.cfg
        count = int(cfg.option("curvature.count", 60))
        t_max = cfg.t_max if t_max is None else t_max
        if self.schedule.kind == "pauli-villars":
            base = curvature_mod.pv_t_grid(t_max, count)
        else:
            base = np.linspace(0.0, t_max, count)
        extra = cfg.t_grid()
        return np.unique(np.concatenate([base, extra[extra <= t_max + 1e-12]]))

    def curvature(self):
        if self._curv is None:
            grid = self.schedule_t_grid()
            rates = _parallel_map(
                lambda t: self._rates_at(t), grid)
            lp = np.array([r[0] for r in rates])
            ap = np.array([r[1] for r in rates])
            self._curv = curvature_mod.integrate_schedules(
                (grid, lp, ap),
                sample_spec=f"default sample set, seed {self.cfg.seed}")
        return self._curv

    def _rates_at(self, t):
        te = float(t) if t > 0 else float(self.schedule_t_grid()[1])
        override = self.lambda_prime_override()
        if override is not None:
            lp = override(te)
        else:
            lp = curvature_mod.multiscale_margin(self.schedule, self.V0, te,
                                                 self.samples(), self.quad)
        ap = curvature_mod.alpha_prime(self.schedule, self.V0, te,
                                       self.samples(), self.quad)
        return lp, ap

    def spectral_trace(self, k: int):
        if self._spec_trace is None or self._spec_trace[0] < k:
            results = []
            for t in self.cfg.t_grid():
                fm = make_flow_measure(self.schedule, self.V0, float(t),
                                       self.cfg.grid_points, box=self.box,
                                       q=self.quad)
                gen = build_generator(fm)
                results.append(spectrum(gen, k=k, refine=True))
            self._spec_trace = (k, results)
        return self._spec_trace[1]


def _fmt(v) -> str:
    if v is None or v == "":
        return ""
    if isinstance(v, (bool, np.bool_)):
        return "true" if v else "false"
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    if isinstance(v, (float, np.floating)):
        return f"{float(v):.17g}"
    return str(v)


def _row(**kw) -> dict:
    return kw


# ---------------------------------------------------------------------------
# individual checks
# ---------------------------------------------------------------------------

def _check_spectrum(ctx: _Context, report: RunReport):
    k = int(ctx.cfg.option("spectrum.k", 3))
    report.max_k = max(report.max_k, k)
    results = ctx.spectral_trace(k)
    all_conv = True
    for t, res in zip(ctx.cfg.t_grid(), results):
        row = _row(section="spectrum", check="spectrum", t=float(t),
                   converged=res.converged, detail="weighted")
        for i, mu in enumerate(res.eigenvalues):
            row[f"mu_{i}"] = float(mu)
        report.rows.append(row)
        all_conv = all_conv and res.converged
    if ctx.model_kind == "gaussian":
        # metric discrepancy reporting: unweighted constants alongside
        for t in ctx.cfg.t_grid():
            fm = make_flow_measure(ctx.schedule, ctx.V0, float(t),
                                   ctx.cfg.grid_points, box=ctx.box, q=ctx.quad)
            gen = build_generator(fm, cprime=np.eye(ctx.V0.dimension))
            res = spectrum(gen, k=1, refine=False)
            row = _row(section="spectrum", check="spectrum", t=float(t),
                       converged=res.converged, detail="unweighted")
            for i, mu in enumerate(res.eigenvalues):
                row[f"mu_{i}"] = float(mu)
            report.rows.append(row)
    return "pass" if all_conv else "unconverged"


def _check_criterion(ctx: _Context, report: RunReport):
    curv = ctx.curvature()
    tol = float(ctx.cfg.option("criterion.tolerance", 1e-6))
    report.tolerances["criterion"] = tol
    ok = True
    chi_cache = {}
    for i, t in enumerate(curv.t_grid):
        te = float(t) if t > 0 else float(curv.t_grid[1])
        row = _row(section="schedule", check="criterion", t=float(t),
                   lambda_prime=float(curv.lambda_prime[i]),
                   alpha_prime=float(curv.alpha_prime[i]),
                   lambda_int=float(curv.lambda_integral[i]),
                   alpha_int=float(curv.alpha_integral[i]),
                   samples_used=len(ctx.samples()))
        if ctx.phi4_model is not None:
            est = phi4_mod.susceptibility(ctx.phi4_model, te)
            margin = curvature_mod.multiscale_margin(
                ctx.schedule, ctx.V0, te, ctx.samples(), ctx.quad)
            sig = phi4_mod.tilted_covariance(ctx.phi4_model, te,
                                             np.zeros(ctx.V0.dimension))
            row["chi"] = float(est.value)
            row["chi_stderr"] = float(est.stderr)
            row["sigma_min"] = float(np.linalg.eigvalsh(sig.value)[0])
            row["margin"] = margin - curv.lambda_prime[i]
            row["tolerance"] = tol
            ok = ok and (margin >= curv.lambda_prime[i] - tol)
        report.rows.append(row)
    return "pass" if ok else "fail"


def _check_theorem(ctx: _Context, report: RunReport):
    k = int(ctx.cfg.option("spectrum.k", 3))
    tol = float(ctx.cfg.option("theorem.tolerance", curvature_mod.TOL_TOTAL))
    report.tolerances["theorem"] = tol
    results = ctx.spectral_trace(k)
    trace = [(float(t), res.poincare_constant)
             for t, res in zip(ctx.cfg.t_grid(), results)]
    margins = curvature_mod.theorem_margin(trace, ctx.curvature(),
                                           tol_total=tol)
    ok = True
    for m in margins:
        report.rows.append(_row(section="margin", check="theorem", s=m.s,
                                t=m.t, k=1, margin=m.margin,
                                tolerance=m.tolerance))
        ok = ok and m.ok
    return "pass" if ok else "fail"


def _check_higher_k(ctx: _Context, report: RunReport):
    k = int(ctx.cfg.option("spectrum.k", 3))
    report.max_k = max(report.max_k, k)
    tol = float(ctx.cfg.option("theorem.tolerance", curvature_mod.TOL_TOTAL))
    report.tolerances["higher-k"] = tol
    results = ctx.spectral_trace(k)
    traces = {kk: [(float(t), res.eigenvalue(kk))
                   for t, res in zip(ctx.cfg.t_grid(), results)]
              for kk in range(1, k + 1)}
    margins = curvature_mod.higher_eigenvalue_margin(traces, ctx.curvature(),
                                                     tol_total=tol)
    ok = True
    for m in margins:
        report.rows.append(_row(section="margin", check="higher-k", s=m.s,
                                t=m.t, k=m.k, margin=m.margin,
                                tolerance=m.tolerance))
        ok = ok and m.ok
    return "pass" if ok else "fail"


def _check_intertwining(ctx: _Context, report: RunReport):
    if ctx.V0.dimension != 1:
        raise ConfigError("intertwining check is implemented for d = 1 grids")
    times = ctx.cfg.option("intertwining.times", [0.5, 1.0, 2.0])
    n_bumps = int(ctx.cfg.option("intertwining.bumps", 3))
    tol = float(ctx.cfg.option("intertwining.tolerance", 1e-6 + 1e-4))
    report.tolerances["intertwining"] = tol
    curv = ctx.curvature()
    xs = ctx.box.axes((ctx.cfg.grid_points,))[0]
    rng = np.random.default_rng(ctx.cfg.seed)
    ok = True
    for b in range(n_bumps):
        center = rng.uniform(-1.5, 1.5)
        width = rng.uniform(0.6, 1.2)
        F = GridFunction(ctx.box, np.exp(-(xs - center) ** 2 / (2 * width**2)),
                         tag=f"bump{b}")
        for t in times:
            viol = curvature_mod.intertwining_check(ctx.schedule, ctx.V0, F,
                                                    float(t), curv, ctx.quad)
            report.rows.append(_row(section="margin", check="intertwining",
                                    t=float(t), k=b, margin=viol,
                                    tolerance=tol,
                                    detail=f"bump center={center:.3f}"))
            ok = ok and viol <= tol
    return "pass" if ok else "fail"


def _check_variance(ctx: _Context, report: RunReport):
    if ctx.V0.dimension != 1:
        raise ConfigError("variance check is implemented for d = 1 grids")
    gaussian = ctx.V0.form == "zero"
    tol = float(ctx.cfg.option("variance.tolerance",
                               1e-6 if gaussian else 1e-3))
    t_max = float(ctx.cfg.option("variance.t_max", 20.0 if gaussian else 30.0))
    count = int(ctx.cfg.option("variance.count", 2600 if gaussian else 380))
    report.tolerances["variance"] = tol
    xs = ctx.box.axes((ctx.cfg.grid_points,))[0]
    F = GridFunction(ctx.box, xs.copy() if gaussian else np.exp(-xs**2),
                     tag="variance test function")
    tg = graded_t_grid(t_max, count, growth=3.0 if gaussian else 3.5)
    if gaussian:
        curv = ctx.curvature()
        rep = conservation_check(
            ctx.schedule, ctx.V0, F, tg, ctx.quad,
            lambda_at_T=curv.lambda_prime_at(curv.t_grid[-1]) * t_max,
            lambda_prime_floor=float(np.min(curv.lambda_prime)))
    else:
        rep = conservation_check(ctx.schedule, ctx.V0, F, tg, ctx.quad)
    report.rows.append(_row(
        section="margin", check="variance", margin=rep.relative_mismatch,
        tolerance=tol, value=rep.variance,
        detail=f"integral={rep.integral:.12g} tail={rep.tail_estimate:.3g} "
               f"cons_dev={rep.conservation_max_dev:.3g}"))
    ok = rep.relative_mismatch <= tol and rep.tail_ok \
        and rep.conservation_max_dev <= 1e-6
    return "pass" if ok else "fail"


def _check_phi4_identity(ctx: _Context, report: RunReport):
    if ctx.phi4_model is None:
        raise ConfigError("phi4-identity check requires a phi4 model")
    tol = float(ctx.cfg.option("phi4.identity_tolerance", 1e-5))
    report.tolerances["phi4-identity"] = tol
    times = ctx.cfg.option("phi4.identity_times", [0.5, 1.0, 2.0])
    n_samp = int(ctx.cfg.option("phi4.identity_samples", 10))
    rng = np.random.default_rng(ctx.cfg.seed)
    phis = rng.normal(0.0, 1.0, size=(n_samp, ctx.phi4_model.n_sites))
    ok = True
    for t in times:
        err = phi4_mod.hessian_identity_check(ctx.phi4_model, float(t), phis)
        report.rows.append(_row(section="margin", check="phi4-identity",
                                t=float(t), margin=err, tolerance=tol,
                                detail=f"{n_samp} seeded samples"))
        ok = ok and err <= tol
    return "pass" if ok else "fail"


def _check_heatflow(ctx: _Context, report: RunReport):
    source = ctx.cfg.option("heatflow.input", "uniform")
    s_max = float(ctx.cfg.option("heatflow.s_max", 2.0))
    s_count = int(ctx.cfg.option("heatflow.s_count", 9))
    tol = float(ctx.cfg.option("heatflow.tolerance", 1e-4))
    report.tolerances["heatflow"] = tol
    if source == "uniform":
        x = np.linspace(-1.0, 1.0, 2001)
        dens = np.full_like(x, 0.5)
    elif source == "gaussian":
        x = np.linspace(-9.0, 9.0, 1801)
        dens = np.exp(-x**2 / 2) / math.sqrt(2 * math.pi)
    else:
        from .flow import load_density_table
        x, dens = load_density_table(str(source))
    rep = heatflow_harness(x, dens, np.linspace(0.0, s_max, s_count),
                           monotone_tol=tol)
    for s, cp in zip(rep.s_grid, rep.poincare):
        report.rows.append(_row(section="margin", check="heatflow", s=float(s),
                                value=float(cp),
                                detail=f"log_concave={rep.log_concave_input}"))
    report.rows.append(_row(section="margin", check="heatflow",
                            margin=-rep.worst_drop, tolerance=tol,
                            value=rep.two_sided_margin,
                            detail="worst monotonicity drop; value = "
                                   "two-sided convolution margin"))
    ok = (rep.monotone or not rep.log_concave_input) \
        and rep.two_sided_margin >= -tol
    return "pass" if ok else "fail"


_CHECKS = {
    "spectrum": _check_spectrum,
    "criterion": _check_criterion,
    "theorem": _check_theorem,
    "higher-k": _check_higher_k,
    "intertwining": _check_intertwining,
    "variance": _check_variance,
    "phi4-identity": _check_phi4_identity,
    "heatflow": _check_heatflow,
}


def run_experiment(cfg: ExperimentConfig) -> RunReport:
    """Execute the configured checks; module errors mark a check failed
    without aborting independent checks."""
    start = time.perf_counter()
    report = RunReport(config_echo=cfg.raw_text)
    report.max_k = int(cfg.option("spectrum.k", 3)) if any(
        c in cfg.checks for c in ("spectrum", "theorem", "higher-k")) else 1
    ctx = _Context(cfg)
    ordered = [c for c in CHECK_ORDER if c in cfg.checks]
    for name in ordered:
        try:
            report.statuses[name] = _CHECKS[name](ctx, report)
        except NonConvergenceError as exc:
            report.statuses[name] = "unconverged"
            report.errors[name] = str(exc)
        except Exception as exc:  # noqa: BLE001 - attach to the owning check
            report.statuses[name] = "fail"
            report.errors[name] = f"{type(exc).__name__}: {exc}"
    for name, status in report.statuses.items():
        report.rows.append(_row(section="status", check=name, status=status,
                                detail=report.errors.get(name, "")))
    report.wallclock = time.perf_counter() - start
    return report


def report_header(report: RunReport) -> list[str]:
    mu_cols = [f"mu_{i}" for i in range(report.max_k + 1)]
    return (["section", "check", "status", "t", "s", "k",
             "lambda_prime", "alpha_prime", "lambda_int", "alpha_int",
             "samples_used", "chi", "chi_stderr", "sigma_min"]
            + mu_cols
            + ["converged", "margin", "tolerance", "value", "detail"])


def emit_report(report: RunReport, out_dir: str,
                formats=("csv", "json-lines")) -> list[str]:
    """Write results.csv / results.jsonl / config.echo under ``out_dir``."""
    try:
        os.makedirs(out_dir, exist_ok=True)
    except OSError as exc:
        raise OSError(f"cannot write reports under {out_dir!r}: {exc}") from exc
    header = report_header(report)
    written = []
    if "csv" in formats:
        path = os.path.join(out_dir, "results.csv")
        with open(path, "w", encoding="utf-8", newline="\n") as fh:
            fh.write(",".join(header) + "\n")
            for row in report.rows:
                fh.write(",".join(_fmt(row.get(col, "")) for col in header) + "\n")
        written.append(path)
    if "json-lines" in formats:
        path = os.path.join(out_dir, "results.jsonl")
        with open(path, "w", encoding="utf-8", newline="\n") as fh:
            for row in report.rows:
                cells = ",".join(
                    f'"{col}":"{_fmt(row.get(col, ""))}"' for col in header)
                fh.write("{" + cells + "}\n")
        written.append(path)
    echo_path = os.path.join(out_dir, "config.echo")
    with open(echo_path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(report.config_echo)
    written.append(echo_path)
    return written
