"""Flow measures, the scale-to-scale semigroup, and the heat-flow harness.

The flow measure at scale t has unnormalized log density

    -1/2 <x, (C_inf - C_t)^{-1} x> - V_t(x)

on a truncated box; the normalizing constant is absorbed numerically.  The
semigroup P_{s,t} maps functions at scale s to scale t through

    P_{s,t} f = exp(V_t) * gaussian_{C_t - C_s} conv (f exp(-V_s)),

computed here by Gauss-Hermite quadrature against the kernel with cubic
interpolation of f between grid nodes.  Grids are plain tensor products;
trapezoid quadrature over the box is spectrally accurate because every
integrand decays to numerical zero before the boundary.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.interpolate import CubicSpline, RegularGridInterpolator
from scipy.stats import norm

from . import _stencils
from .covariance import CovarianceSchedule
from .potential import (MAX_TENSOR_DIM, PotentialDescriptor, QuadratureRule,
                        renormalized_value)

BOX_HALFWIDTH_SIGMAS = 8.0

# Kernel-vs-box guard: the convolution kernel must fit inside the box with
# this many standard deviations to spare.
_KERNEL_SIGMAS = 6.0


@dataclass(frozen=True)
class Box:
    """Axis-aligned product domain."""

    lo: tuple
    hi: tuple

    @staticmethod
    def cube(halfwidth: float, dim: int) -> "Box":
        return Box(lo=(-float(halfwidth),) * dim, hi=(float(halfwidth),) * dim)

    @property
    def dim(self) -> int:
        return len(self.lo)

    def axes(self, shape) -> list[np.ndarray]:
        return [np.linspace(self.lo[k], self.hi[k], shape[k])
                for k in range(self.dim)]

    def spacing(self, shape) -> np.ndarray:
        return np.array([(self.hi[k] - self.lo[k]) / (shape[k] - 1)
                         for k in range(self.dim)])

    def halfwidths(self) -> np.ndarray:
        return 0.5 * (np.asarray(self.hi) - np.asarray(self.lo))

    def nodes(self, shape) -> np.ndarray:
        """All grid nodes, shape (prod(shape), dim), row-major."""
        grids = np.meshgrid(*self.axes(shape), indexing="ij")
        return np.stack([g.ravel() for g in grids], axis=-1)

    def trapezoid_weights(self, shape) -> np.ndarray:
        out = np.ones(shape)
        for k, h in enumerate(self.spacing(shape)):
            w = np.full(shape[k], h)
            w[0] = w[-1] = 0.5 * h
            sl = [None] * self.dim
            sl[k] = slice(None)
            out = out * w[tuple(sl)]
        return out


@dataclass
class GridFunction:
    """Values tabulated on a tensor grid over a box. Immutable by convention."""

    box: Box
    values: np.ndarray
    tag: str = ""

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=float)
        if self.values.ndim != self.box.dim:
            raise ValueError(
                f"values rank {self.values.ndim} != box dimension {self.box.dim}")
        if not np.all(np.isfinite(self.values)):
            raise ValueError("grid function has non-finite node values")

    @property
    def shape(self):
        return self.values.shape

    def spacing(self) -> np.ndarray:
        return self.box.spacing(self.shape)

    def interpolator(self, method: str = "cubic"):
        axes = self.box.axes(self.shape)
        if self.box.dim == 1 and method == "cubic":
            spline = CubicSpline(axes[0], self.values, extrapolate=True)
            return lambda pts: spline(np.asarray(pts)[..., 0])
        return RegularGridInterpolator(axes, self.values, method=method,
                                       bounds_error=False, fill_value=None)

    def gradient(self) -> np.ndarray:
        return _stencils.gradient(self.values, self.spacing())

    def with_values(self, values, tag=None) -> "GridFunction":
        return GridFunction(box=self.box, values=values,
                            tag=self.tag if tag is None else tag)


def integrate_grid(box: Box, values: np.ndarray) -> float:
    return float(np.sum(box.trapezoid_weights(values.shape) * values))


def default_box(schedule: CovarianceSchedule, t_min: float = 0.0,
                sigmas: float = BOX_HALFWIDTH_SIGMAS) -> Box:
    """Box sized from the dominating Gaussian factor at the earliest scale.

    One box serves every later scale because the Gaussian part only shrinks
    along the flow.
    """
    c, _, _ = schedule.eval(t_min)
    resid = schedule.c_infinity - c
    sigma = math.sqrt(max(np.linalg.eigvalsh(resid)[-1], 1e-300))
    return Box.cube(sigmas * sigma, schedule.dim)


def nu_log_density(schedule: CovarianceSchedule, V0: PotentialDescriptor,
                   t: float, x, q: QuadratureRule | None = None):
    """Unnormalized log density of the flow measure at (t, x); batched in x."""
    q = q or QuadratureRule(dimension=min(V0.dimension, MAX_TENSOR_DIM))
    prec = schedule.residual_inverse(t)
    c, _, _ = schedule.eval(t)
    x = np.asarray(x, dtype=float)
    single = x.ndim <= 1
    xb = np.atleast_2d(x)
    quad = 0.5 * np.einsum("mi,ij,mj->m", xb, prec, xb)
    v = np.atleast_1d(renormalized_value(V0, c, xb, q))
    out = -quad - v
    return float(out[0]) if single else out


@dataclass
class FlowMeasure:
    """The flow measure at one scale, materialized on a truncated grid.

    Carries the unnormalized log density on the nodes, the log normalizer
    over the box, and enough context (schedule, potential, quadrature rule)
    to re-evaluate itself on refined grids.
    """

    schedule: CovarianceSchedule
    V0: PotentialDescriptor
    t: float
    box: Box
    grid_shape: tuple
    quad: QuadratureRule
    log_density_grid: np.ndarray = field(default=None, repr=False)
    v_grid: np.ndarray = field(default=None, repr=False)
    log_normalizer: float = None

    def __post_init__(self):
        if self.log_density_grid is None:
            nodes = self.box.nodes(self.grid_shape)
            prec = self.schedule.residual_inverse(self.t)
            c, _, _ = self.schedule.eval(self.t)
            quadform = 0.5 * np.einsum("mi,ij,mj->m", nodes, prec, nodes)
            v = np.atleast_1d(renormalized_value(self.V0, c, nodes, self.quad))
            self.v_grid = v.reshape(self.grid_shape)
            self.log_density_grid = (-quadform - v).reshape(self.grid_shape)
        if self.log_normalizer is None:
            shift = float(np.max(self.log_density_grid))
            w = self.box.trapezoid_weights(self.grid_shape)
            self.log_normalizer = shift + math.log(
                float(np.sum(w * np.exp(self.log_density_grid - shift))))

    @property
    def density(self) -> GridFunction:
        """Normalized density values on the grid."""
        return GridFunction(self.box,
                            np.exp(self.log_density_grid - self.log_normalizer),
                            tag=f"nu_t density t={self.t}")

    def log_density(self, x):
        return nu_log_density(self.schedule, self.V0, self.t, x, self.quad)

    def expectation(self, values: np.ndarray) -> float:
        w = self.box.trapezoid_weights(self.grid_shape)
        dens = np.exp(self.log_density_grid - self.log_normalizer)
        return float(np.sum(w * dens * values))

    def second_moment(self) -> float:
        nodes = self.box.nodes(self.grid_shape)
        r2 = np.sum(nodes**2, axis=1).reshape(self.grid_shape)
        return self.expectation(r2)

    def tail_mass_estimate(self) -> float:
        """Gaussian tail bound on the mass outside the box.

        Uses the dominating Gaussian factor and the grid minimum of V_t as a
        proxy for its global minimum (valid when the box is generously sized).
        """
        prec = self.schedule.residual_inverse(self.t)
        cov = np.linalg.inv(prec)
        sig = np.sqrt(np.diag(cov))
        hw = self.box.halfwidths()
        tail_prob = float(sum(2.0 * norm.sf(hw[k] / sig[k])
                              for k in range(self.box.dim)))
        d = self.box.dim
        log_gauss_norm = 0.5 * d * math.log(2.0 * math.pi) \
            + 0.5 * float(np.linalg.slogdet(cov)[1])
        v_min = float(np.min(self.v_grid))
        if tail_prob == 0.0:
            return 0.0
        log_out = -v_min + log_gauss_norm + math.log(tail_prob)
        return math.exp(log_out - self.log_normalizer)

    def refined(self, factor: int = 2) -> "FlowMeasure":
        shape = tuple(factor * (n - 1) + 1 for n in self.grid_shape)
        return FlowMeasure(self.schedule, self.V0, self.t, self.box, shape,
                           self.quad)

    def on_box(self, box: Box, grid_shape: tuple) -> "FlowMeasure":
        return FlowMeasure(self.schedule, self.V0, self.t, box, grid_shape,
                           self.quad)


def make_flow_measure(schedule, V0, t, grid_shape, box=None,
                      q: QuadratureRule | None = None) -> FlowMeasure:
    q = q or QuadratureRule(dimension=min(V0.dimension, MAX_TENSOR_DIM))
    if box is None:
        box = default_box(schedule)
    if isinstance(grid_shape, int):
        grid_shape = (grid_shape,) * box.dim
    return FlowMeasure(schedule, V0, t, box, tuple(grid_shape), q)


def semigroup_apply(schedule, V0, s: float, t: float, f: GridFunction,
                    q: QuadratureRule | None = None) -> GridFunction:
    """Apply P_{s,t} to a grid function, returning values on the same grid."""
    if s > t:
        raise ValueError(f"semigroup requires s <= t, got s={s}, t={t}")
    q = q or QuadratureRule(dimension=min(V0.dimension, MAX_TENSOR_DIM))
    cs, _, _ = schedule.eval(s)
    ct, _, _ = schedule.eval(t)
    kernel = ct - cs
    kw = np.linalg.eigvalsh(0.5 * (kernel + kernel.T))
    if kw[0] < -1e-10 * max(1.0, kw[-1]):
        raise ValueError("C_t - C_s is not positive-semidefinite")
    if kw[-1] <= 1e-14:
        return f.with_values(f.values.copy(), tag=f"P[{s},{t}] {f.tag}")
    reach = _KERNEL_SIGMAS * math.sqrt(kw[-1])
    if reach > float(np.min(f.box.halfwidths())):
        raise ValueError(
            f"convolution kernel ({reach:.2f} at {_KERNEL_SIGMAS} sigma) wider "
            f"than box halfwidth {np.min(f.box.halfwidths()):.2f}; "
            "use a larger box")

    from .potential import _covariance_factor  # shared range-restricted factor

    nodes = f.box.nodes(f.shape)
    L = _covariance_factor(kernel, f.box.dim)
    znodes, logw = q.rule(L.shape[1])
    z = znodes @ L.T
    interp = f.interpolator()
    v_t = np.atleast_1d(renormalized_value(V0, ct, nodes, q))

    n = nodes.shape[0]
    out = np.empty(n)
    chunk = max(1, int(2e6) // max(len(z), 1))
    for start in range(0, n, chunk):
        xc = nodes[start:start + chunk]
        pts = xc[:, None, :] + z[None, :, :]
        flat = pts.reshape(-1, f.box.dim)
        fv = np.asarray(interp(flat)).reshape(pts.shape[:2])
        vs = np.atleast_1d(renormalized_value(V0, cs, flat, q)).reshape(pts.shape[:2])
        le = logw[None, :] - vs
        shift = np.max(le, axis=1)
        ssum = np.einsum("mq,mq->m", np.exp(le - shift[:, None]), fv)
        out[start:start + chunk] = np.exp(v_t[start:start + chunk] + shift) * ssum
    return f.with_values(out.reshape(f.shape), tag=f"P[{s},{t}] {f.tag}")


@dataclass
class VarianceDecompositionReport:
    variance: float
    integral: float
    tail_estimate: float
    relative_mismatch: float
    conservation_max_dev: float
    integrand: np.ndarray
    t_grid: np.ndarray
    tail_ok: bool
    flags: list


def graded_t_grid(t_max: float, count: int, growth: float = 3.0) -> np.ndarray:
    """Time grid refined near zero, suited to exponentially decaying integrands."""
    u = np.linspace(0.0, 1.0, count)
    return t_max * (np.exp(growth * u) - 1.0) / (math.exp(growth) - 1.0)


def conservation_check(schedule, V0, F: GridFunction, t_grid,
                       q: QuadratureRule | None = None,
                       lambda_at_T: float | None = None,
                       lambda_prime_floor: float | None = None,
                       tail_tol: float = 1e-4) -> VarianceDecompositionReport:
    """Variance decomposition audit along the flow.

    Checks Var_{nu_0}(F) against the time integral of the weighted Dirichlet
    energies of P_{0,t}F, plus conservation of E_{nu_t}[P_{0,t}F] in t.  The
    infinite upper limit is truncated at T = max(t_grid); the tail is bounded
    with the curvature data when supplied and by the empirical decay rate of
    the integrand otherwise.
    """
    t_grid = np.asarray(t_grid, dtype=float)
    if t_grid.ndim != 1 or len(t_grid) < 2 or np.any(np.diff(t_grid) <= 0):
        raise ValueError("t_grid must be increasing with at least two entries")
    q = q or QuadratureRule(dimension=min(V0.dimension, MAX_TENSOR_DIM))
    shape = F.shape
    flags = []

    m0 = make_flow_measure(schedule, V0, 0.0, shape, box=F.box, q=q)
    mean0 = m0.expectation(F.values)
    var0 = m0.expectation(F.values**2) - mean0**2

    integrand = np.empty(len(t_grid))
    cons_dev = 0.0
    for i, t in enumerate(t_grid):
        phi = semigroup_apply(schedule, V0, 0.0, t, F, q) if t > 0 else F
        mt = make_flow_measure(schedule, V0, t, shape, box=F.box, q=q)
        _, cp, _ = schedule.eval(t)
        grad = phi.gradient()
        energy = np.einsum("...i,ij,...j->...", grad, cp, grad)
        integrand[i] = mt.expectation(energy)
        cons_dev = max(cons_dev, abs(mt.expectation(phi.values) - mean0))

    integral = float(np.trapezoid(integrand, t_grid))

    if lambda_at_T is not None and lambda_prime_floor is not None:
        if lambda_prime_floor <= 0:
            raise ValueError("bound divergent: lambda-prime floor <= 0")
        _, cpT, _ = schedule.eval(t_grid[-1])
        gradF = F.gradient()
        sup_grad2 = float(np.max(np.sum(gradF**2, axis=-1)))
        radius = float(np.max(np.abs(np.linalg.eigvalsh(cpT))))
        tail = radius * math.exp(-2.0 * lambda_at_T) * sup_grad2 \
            / (2.0 * lambda_prime_floor)
    else:
        # empirical decay: fit the log slope of the last integrand values
        tailpts = integrand[-5:]
        ts = t_grid[-5:]
        pos = tailpts > 0
        if pos.sum() >= 2:
            slope = np.polyfit(ts[pos], np.log(tailpts[pos]), 1)[0]
            tail = integrand[-1] / (-slope) if slope < 0 else math.inf
        else:
            tail = 0.0
        if not math.isfinite(tail):
            flags.append("tail estimate divergent (integrand not decaying)")
            tail = math.inf

    tail_ok = tail <= tail_tol
    if not tail_ok:
        flags.append("T too small: tail estimate exceeds tolerance")
    mismatch = abs(var0 - integral) / max(abs(var0), 1e-300)
    return VarianceDecompositionReport(
        variance=var0, integral=integral, tail_estimate=tail,
        relative_mismatch=mismatch, conservation_max_dev=cons_dev,
        integrand=integrand, t_grid=t_grid, tail_ok=tail_ok, flags=flags)


def load_density_table(path):
    """Two-column text table (x, density), uniform strictly increasing x."""
    data = np.loadtxt(path, comments="#")
    if data.ndim != 2 or data.shape[1] != 2:
        raise ValueError("density table must have exactly two columns")
    x, dens = data[:, 0], data[:, 1]
    dx = np.diff(x)
    if np.any(dx <= 0):
        raise ValueError("density table x must be strictly increasing")
    if np.max(np.abs(dx - dx[0])) > 1e-8 * dx[0]:
        raise ValueError("density table requires uniform spacing")
    return x, dens


@dataclass
class HeatflowReport:
    s_grid: np.ndarray
    poincare: np.ndarray
    log_concave_input: bool
    monotone: bool
    monotone_tol: float
    worst_drop: float
    two_sided_margin: float
    normalized_input: bool


def _discrete_log_concave(density: np.ndarray) -> bool:
    pos = density > 0
    if not np.all(pos[np.argmax(pos):len(pos) - np.argmax(pos[::-1])]):
        return False
    logd = np.log(density[pos])
    if len(logd) < 3:
        return True
    mid = 0.5 * (logd[:-2] + logd[2:])
    scale = max(1.0, float(np.max(np.abs(logd))))
    return bool(np.all(logd[1:-1] >= mid - 1e-9 * scale))


def heatflow_harness(x_nodes, density, s_grid, grid_points: int = 2049,
                     monotone_tol: float = 1e-4) -> HeatflowReport:
    """Poincare constant of mu0 convolved with gaussian_s, per s.

    Uses the standard (unweighted) carre du champ.  If the input density is
    log-concave by the discrete midpoint test, the trace is checked for
    monotonicity within ``monotone_tol``.  Also reports the two-sided margin
    C_P(mu0) - (C_P(mu0 * gamma_1) - 1), which is nonnegative for any input.
    """
    import warnings

    from .spectral import build_generator_from_density, spectrum

    x_nodes = np.asarray(x_nodes, dtype=float)
    density = np.asarray(density, dtype=float)
    if np.any(density < 0):
        raise ValueError("density table has negative entries")
    dx = x_nodes[1] - x_nodes[0]
    total = float(np.trapezoid(density, x_nodes))
    normalized = abs(total - 1.0) <= 1e-8
    if not normalized:
        warnings.warn(f"input density integrates to {total:.6g}; normalizing",
                      stacklevel=2)
        density = density / total

    log_concave = _discrete_log_concave(density)
    s_grid = np.asarray(s_grid, dtype=float)
    s_eval = np.unique(np.concatenate([s_grid, [0.0, 1.0]]))

    table_w = np.full(len(x_nodes), dx)
    table_w[0] = table_w[-1] = 0.5 * dx

    def poincare_at(s: float) -> float:
        if s == 0.0:
            box = Box((x_nodes[0],), (x_nodes[-1],))
            ys = box.axes((grid_points,))[0]
            w = np.interp(ys, x_nodes, density)
        else:
            pad = BOX_HALFWIDTH_SIGMAS * math.sqrt(s)
            box = Box((x_nodes[0] - pad,), (x_nodes[-1] + pad,))
            ys = box.axes((grid_points,))[0]
            kern = norm.pdf(ys[:, None] - x_nodes[None, :], scale=math.sqrt(s))
            w = kern @ (table_w * density)
        gen = build_generator_from_density(box, w, mobility=np.eye(1))
        return spectrum(gen, k=1, refine=False).poincare_constant

    values = {s: poincare_at(s) for s in s_eval}
    trace = np.array([values[s] for s in s_grid])
    drops = np.diff(trace)
    worst_drop = float(-np.min(drops)) if len(drops) else 0.0
    monotone = worst_drop <= monotone_tol
    two_sided = values[0.0] - (values[1.0] - 1.0)
    return HeatflowReport(
        s_grid=s_grid, poincare=trace, log_concave_input=log_concave,
        monotone=monotone, monotone_tol=monotone_tol, worst_drop=worst_drop,
        two_sided_margin=float(two_sided), normalized_input=normalized)


def default_sample_points(measure: FlowMeasure, grid_per_axis: int = 17,
                          n_random: int = 100, seed: int = 1234,
                          mass_tol: float = 1e-6) -> np.ndarray:
    """Sample set standing in for "for all x" quantifiers.

    Tensor grid over the sub-box holding all but ``mass_tol`` of the measure,
    plus seeded uniform points in the same sub-box.
    """
    dens = measure.density.values
    w = measure.box.trapezoid_weights(measure.grid_shape)
    axes = measure.box.axes(measure.grid_shape)
    lims = []
    for k in range(measure.box.dim):
        other = tuple(i for i in range(measure.box.dim) if i != k)
        marg = np.sum(dens * w, axis=other)
        cum = np.cumsum(marg)
        cum /= cum[-1]
        lo_i = int(np.searchsorted(cum, 0.5 * mass_tol))
        hi_i = int(np.searchsorted(cum, 1.0 - 0.5 * mass_tol))
        lims.append((axes[k][max(lo_i - 1, 0)],
                     axes[k][min(hi_i + 1, len(axes[k]) - 1)]))
    grids = np.meshgrid(*[np.linspace(lo, hi, grid_per_axis) for lo, hi in lims],
                        indexing="ij")
    pts = np.stack([g.ravel() for g in grids], axis=-1)
    rng = np.random.default_rng(seed)
    rand = np.column_stack([rng.uniform(lo, hi, n_random) for lo, hi in lims])
    return np.vstack([pts, rand])
