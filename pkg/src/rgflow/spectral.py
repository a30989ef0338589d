"""Self-adjoint discretizations of the flow generators and their spectra.

The generator at scale t, in divergence form, is

    L f = (1/w) div( A w grad f )

with mobility matrix A and weight w chosen by the drift variant:

    script-L : A = C_t',      w ~ flow-measure density      (full drift)
    Lambda   : A = C_t',      w ~ exp(-V_t)
    L        : A = C_t' / 2,  w ~ exp(-2 V_t)

Assembly uses Q1 finite elements with 2^d-point Gauss quadrature per cell and
a lumped (trapezoid) weighted mass matrix, which makes the discrete operator
exactly symmetric in the w-weighted inner product, keeps constants in the
kernel to machine precision, and converges at second order in the mesh.
Boundary conditions are natural zero-flux (reflecting) on the truncated box.

Eigenpairs come from dense symmetric solves on small grids and shift-invert
Lanczos (ARPACK) on large ones, with a deterministic start vector, residual
verification, and a Richardson consistency check under mesh halving.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from . import _stencils
from .errors import NonConvergenceError
from .flow import Box, FlowMeasure, GridFunction, semigroup_apply
from .potential import renormalized_derivatives

DRIFTS = ("script-L", "L", "Lambda")

# Nodes whose log weight falls this far below the maximum are trimmed off the
# box before assembly; exp(-570) is comfortably inside float range.
TRIM_LOG = 570.0

_DENSE_CUTOFF = 600
_EIG_RESIDUAL_RTOL = 1e-10
_RICHARDSON_RTOL = 5e-3

_GAUSS_1D = (0.5 * (1.0 - 1.0 / math.sqrt(3.0)), 0.5 * (1.0 + 1.0 / math.sqrt(3.0)))


@dataclass
class GeneratorDiscretization:
    """Assembled divergence-form generator at one scale."""

    t: float
    box: Box
    grid_shape: tuple
    weight: GridFunction
    mobility: np.ndarray          # matrix entering the carre du champ (C_t')
    drift: str
    stiffness: sp.csr_matrix = field(repr=False)
    mass: np.ndarray = field(repr=False)  # lumped weighted mass, diagonal
    flow_measure: FlowMeasure | None = None
    refiner: object = None        # () -> GeneratorDiscretization on halved mesh
    gauss_precision: np.ndarray | None = None  # (C_inf - C_t)^{-1} for script-L

    @property
    def n_nodes(self) -> int:
        return int(np.prod(self.grid_shape))

    def apply(self, values: np.ndarray) -> np.ndarray:
        """Generator action L f = -M^{-1} E f on node values."""
        flat = np.asarray(values, dtype=float).reshape(-1)
        return (-(self.stiffness @ flat) / self.mass).reshape(self.grid_shape)

    def dirichlet_form(self, f, g) -> float:
        fv = np.asarray(f, dtype=float).reshape(-1)
        gv = np.asarray(g, dtype=float).reshape(-1)
        return float(fv @ (self.stiffness @ gv))

    def weighted_inner(self, f, g) -> float:
        fv = np.asarray(f, dtype=float).reshape(-1)
        gv = np.asarray(g, dtype=float).reshape(-1)
        return float(fv @ (self.mass * gv))

    def weighted_mean(self, f) -> float:
        fv = np.asarray(f, dtype=float).reshape(-1)
        return float((self.mass @ fv) / self.mass.sum())

    def potential_derivatives(self):
        """(grad V_t, hess V_t) on the grid nodes; needs an analytic measure."""
        if self.flow_measure is None:
            raise ValueError("generator has no analytic flow measure attached")
        fm = self.flow_measure
        c, _, _ = fm.schedule.eval(self.t)
        nodes = self.box.nodes(self.grid_shape)
        grad, hess = renormalized_derivatives(fm.V0, c, nodes, fm.quad)
        d = self.box.dim
        return (grad.reshape(self.grid_shape + (d,)),
                hess.reshape(self.grid_shape + (d, d)))


def _trim_window(log_w: np.ndarray, threshold: float) -> tuple:
    """Smallest axis-aligned index window containing {log_w >= max - threshold}."""
    keep = log_w >= np.max(log_w) - threshold
    slices = []
    for axis in range(log_w.ndim):
        other = tuple(i for i in range(log_w.ndim) if i != axis)
        line = np.any(keep, axis=other)
        idx = np.nonzero(line)[0]
        slices.append(slice(int(idx[0]), int(idx[-1]) + 1))
    return tuple(slices)


def _assemble(box: Box, shape: tuple, w: np.ndarray, a_matrix: np.ndarray):
    """Q1 stiffness (full Gauss) and lumped weighted mass on a tensor grid."""
    d = box.dim
    h = box.spacing(shape)
    mass = (box.trapezoid_weights(shape) * w).reshape(-1)

    if d == 1:
        n = shape[0]
        a = float(a_matrix[0, 0])
        wbar = 0.5 * (w[:-1] + w[1:])
        k = a * wbar / h[0]
        diag = np.zeros(n)
        diag[:-1] += k
        diag[1:] += k
        e = sp.diags([diag, -k, -k], [0, -1, 1], format="csr")
        return e, mass

    if d == 2:
        nx, ny = shape
        hx, hy = h
        corners = [(0, 0), (1, 0), (0, 1), (1, 1)]
        gps = [(u, v) for u in _GAUSS_1D for v in _GAUSS_1D]
        bmats = []
        nvals = []
        for (u, v) in gps:
            bx = np.array([-(1 - v), (1 - v), -v, v]) / hx
            by = np.array([-(1 - u), -u, (1 - u), u]) / hy
            bmats.append(np.stack([bx, by]))          # (2, 4)
            nvals.append(np.array([(1 - u) * (1 - v), u * (1 - v),
                                   (1 - u) * v, u * v]))
        area = hx * hy

        ci, cj = np.meshgrid(np.arange(nx - 1), np.arange(ny - 1), indexing="ij")
        ci, cj = ci.ravel(), cj.ravel()
        glob = np.stack([(ci + di) * ny + (cj + dj) for (di, dj) in corners],
                        axis=-1)                       # (ncell, 4)
        wc = np.stack([w[ci + di, cj + dj] for (di, dj) in corners], axis=-1)

        kvals = np.zeros((len(ci), 4, 4))
        for bmat, nval in zip(bmats, nvals):
            local = bmat.T @ a_matrix @ bmat           # (4, 4)
            wgp = wc @ nval                            # (ncell,)
            kvals += (0.25 * area) * wgp[:, None, None] * local[None, :, :]

        rows = np.repeat(glob, 4, axis=-1).ravel()
        cols = np.tile(glob, (1, 4)).ravel()
        e = sp.coo_matrix((kvals.ravel(), (rows, cols)),
                          shape=(nx * ny, nx * ny)).tocsr()
        return e, mass

    raise ValueError("grid eigenproblems are implemented for d <= 2")


def build_generator(flow_measure: FlowMeasure, cprime=None,
                    drift: str = "script-L", trim: bool = True,
                    underflow_frac: float = 0.2) -> GeneratorDiscretization:
    """Assemble the generator of the requested drift variant at fm.t."""
    if drift not in DRIFTS:
        raise ValueError(f"unknown drift variant {drift!r}; expected {DRIFTS}")
    fm = flow_measure
    if cprime is None:
        _, cprime, _ = fm.schedule.eval(fm.t)
    cprime = np.atleast_2d(np.asarray(cprime, dtype=float))

    if drift == "script-L":
        log_w = fm.log_density_grid
    elif drift == "Lambda":
        log_w = -fm.v_grid
    else:
        log_w = -2.0 * fm.v_grid

    raw_w = np.exp(log_w - np.max(log_w))
    frac_zero = float(np.count_nonzero(raw_w == 0.0)) / raw_w.size
    if frac_zero > underflow_frac:
        raise ValueError(
            f"box too large / resolution too coarse: weight underflows at "
            f"{100 * frac_zero:.1f}% of nodes")

    box, shape = fm.box, fm.grid_shape
    if trim:
        window = _trim_window(log_w, TRIM_LOG)
        if any(sl.stop - sl.start < shape[k] for k, sl in enumerate(window)):
            axes = box.axes(shape)
            box = Box(tuple(axes[k][window[k].start] for k in range(box.dim)),
                      tuple(axes[k][window[k].stop - 1] for k in range(box.dim)))
            shape = tuple(sl.stop - sl.start for sl in window)
            fm = fm.on_box(box, shape)
            if drift == "script-L":
                log_w = fm.log_density_grid
            elif drift == "Lambda":
                log_w = -fm.v_grid
            else:
                log_w = -2.0 * fm.v_grid
            raw_w = np.exp(log_w - np.max(log_w))

    w = raw_w / integrate_box(box, raw_w)
    a_op = cprime if drift != "L" else 0.5 * cprime
    e, mass = _assemble(box, shape, w, a_op)

    gauss_prec = fm.schedule.residual_inverse(fm.t) if drift == "script-L" else None

    def refiner(fm=fm, cprime=cprime, drift=drift):
        return build_generator(fm.refined(), cprime=cprime, drift=drift,
                               trim=False)

    return GeneratorDiscretization(
        t=fm.t, box=box, grid_shape=shape,
        weight=GridFunction(box, w, tag=f"weight {drift}"),
        mobility=cprime, drift=drift, stiffness=e, mass=mass,
        flow_measure=fm, refiner=refiner, gauss_precision=gauss_prec)


def integrate_box(box: Box, values: np.ndarray) -> float:
    return float(np.sum(box.trapezoid_weights(values.shape) * values))


def build_generator_from_density(box: Box, w_values: np.ndarray, mobility=None,
                                 refiner=None) -> GeneratorDiscretization:
    """Generator for a tabulated density (no analytic potential attached)."""
    w_values = np.asarray(w_values, dtype=float)
    if np.any(w_values < 0):
        raise ValueError("density values must be nonnegative")
    shape = w_values.shape
    mobility = np.eye(box.dim) if mobility is None else \
        np.atleast_2d(np.asarray(mobility, dtype=float))
    floor = np.max(w_values) * 1e-290
    w = np.maximum(w_values, floor)
    w = w / integrate_box(box, w)
    e, mass = _assemble(box, shape, w, mobility)
    return GeneratorDiscretization(
        t=0.0, box=box, grid_shape=shape,
        weight=GridFunction(box, w, tag="tabulated weight"),
        mobility=mobility, drift="script-L", stiffness=e, mass=mass,
        flow_measure=None, refiner=refiner)


@dataclass
class SpectralResult:
    t: float
    eigenvalues: np.ndarray          # mu_0 <= ... <= mu_k of -L
    eigenvectors: list               # GridFunctions, w-orthonormal
    poincare_constant: float         # 1 / mu_1
    residuals: np.ndarray
    converged: bool
    richardson_change: float | None
    clusters: list

    def eigenvalue(self, k: int) -> float:
        return float(self.eigenvalues[k])


def _smallest_pairs(e: sp.csr_matrix, mass: np.ndarray, k: int):
    """(k+1) smallest eigenpairs of the pencil (E, diag(mass))."""
    n = len(mass)
    dinv = 1.0 / np.sqrt(mass)
    b = sp.diags(dinv) @ e @ sp.diags(dinv)
    b = 0.5 * (b + b.T)

    if n <= _DENSE_CUTOFF or k + 2 >= n - 1:
        dense = b.toarray()
        vals, vecs = np.linalg.eigh(dense)
        vals, vecs = vals[:k + 1], vecs[:, :k + 1]
    else:
        scale = float(np.mean(b.diagonal()))
        v0 = np.random.default_rng(90210).standard_normal(n)
        vals, vecs = spla.eigsh(b.tocsc(), k=k + 1, sigma=-1e-3 * max(scale, 1e-12),
                                which="LM", mode="normal", v0=v0)
        order = np.argsort(vals)
        vals, vecs = vals[order], vecs[:, order]

    norm_b = float(np.max(np.abs(b).sum(axis=1)))
    residuals = np.array([
        np.linalg.norm(b @ vecs[:, i] - vals[i] * vecs[:, i])
        for i in range(k + 1)])
    if np.any(residuals > _EIG_RESIDUAL_RTOL * max(norm_b, 1e-300)):
        raise NonConvergenceError(
            "eigensolver residuals exceed tolerance: "
            + ", ".join(f"{r:.3e}" for r in residuals)
            + f" against {_EIG_RESIDUAL_RTOL:.1e} * |A| = "
            f"{_EIG_RESIDUAL_RTOL * norm_b:.3e}")

    # back to the weighted problem; w-orthonormal by construction
    wvecs = dinv[:, None] * vecs
    for i in range(wvecs.shape[1]):
        col = wvecs[:, i]
        nz = np.nonzero(np.abs(col) > 1e-8 * np.max(np.abs(col)))[0]
        if len(nz) and col[nz[0]] < 0:
            wvecs[:, i] = -col
    return vals, wvecs, residuals


def spectrum(gen: GeneratorDiscretization, k: int,
             refine: bool = True) -> SpectralResult:
    """Smallest k+1 eigenpairs of -L in the w-weighted problem."""
    if k < 1:
        raise ValueError("k must be >= 1")
    if k + 1 >= gen.n_nodes:
        raise ValueError("k + 1 must be below the number of grid nodes")
    vals, wvecs, residuals = _smallest_pairs(gen.stiffness, gen.mass, k)

    richardson = None
    converged = True
    if refine and gen.refiner is not None:
        fine = gen.refiner()
        fvals, _, _ = _smallest_pairs(fine.stiffness, fine.mass, 1)
        richardson = abs(fvals[1] - vals[1]) / max(abs(vals[1]), 1e-300)
        converged = richardson <= _RICHARDSON_RTOL

    scale = max(float(vals[-1]), 1.0)
    clusters = []
    current = [0]
    for i in range(1, len(vals)):
        if vals[i] - vals[i - 1] <= 1e-6 * scale:
            current.append(i)
        else:
            clusters.append(current)
            current = [i]
    clusters.append(current)

    vecs = [GridFunction(gen.box, wvecs[:, i].reshape(gen.grid_shape),
                         tag=f"eigvec {i}") for i in range(k + 1)]
    return SpectralResult(
        t=gen.t, eigenvalues=vals, eigenvectors=vecs,
        poincare_constant=1.0 / float(vals[1]), residuals=residuals,
        converged=converged, richardson_change=richardson, clusters=clusters)


def rayleigh_quotient(gen: GeneratorDiscretization, phi) -> float:
    """Weighted Dirichlet energy over variance, after recentering phi."""
    values = phi.values if isinstance(phi, GridFunction) else np.asarray(phi)
    flat = values.reshape(-1).astype(float)
    flat = flat - gen.weighted_mean(flat)
    denom = gen.weighted_inner(flat, flat) / gen.mass.sum()
    if denom <= 1e-14:
        raise ValueError("degenerate test function: zero variance after centering")
    return gen.dirichlet_form(flat, flat) / gen.weighted_inner(flat, flat)


def rayleigh_flow_trace(schedule, V0, phi0: GridFunction, t_grid,
                        q=None, drift: str = "script-L") -> list:
    """(t, R_phi(t)) along the flow, with phi_t = P_{0,t} phi0."""
    t_grid = np.asarray(t_grid, dtype=float)
    if np.any(np.diff(t_grid) <= 0):
        raise ValueError("t_grid must be strictly increasing")
    out = []
    for t in t_grid:
        phi_t = semigroup_apply(schedule, V0, 0.0, float(t), phi0, q) \
            if t > 0 else phi0
        fm = FlowMeasure(schedule, V0, float(t), phi0.box, phi0.shape,
                         q or _default_quad(V0))
        gen = build_generator(fm, drift=drift, trim=False)
        out.append((float(t), rayleigh_quotient(gen, phi_t)))
    return out


def _default_quad(V0):
    from .potential import MAX_TENSOR_DIM, QuadratureRule
    return QuadratureRule(dimension=min(V0.dimension, MAX_TENSOR_DIM))


def minmax_trial_bound(gen: GeneratorDiscretization, functions) -> float:
    """Largest Rayleigh quotient over the span of the given grid functions.

    By min-max this dominates mu_{k}(gen) for any (k+1) independent trials.
    """
    cols = []
    for f in functions:
        v = (f.values if isinstance(f, GridFunction) else np.asarray(f)).reshape(-1)
        cols.append(v)
    basis = np.stack(cols, axis=1)
    gmat = basis.T @ (gen.stiffness @ basis)
    mmat = basis.T @ (gen.mass[:, None] * basis)
    from scipy.linalg import eigh as dense_eigh
    vals = dense_eigh(0.5 * (gmat + gmat.T), 0.5 * (mmat + mmat.T),
                      eigvals_only=True)
    return float(vals[-1])


# ---------------------------------------------------------------------------
# Pointwise Gamma-calculus on grids
# ---------------------------------------------------------------------------

def _drift_ingredients(gen: GeneratorDiscretization):
    """(A_op, mobility C', drift vector field b(X)) for the stencil operator."""
    cp = gen.mobility
    grad_v, hess_v = gen.potential_derivatives()
    nodes = gen.box.nodes(gen.grid_shape).reshape(gen.grid_shape + (gen.box.dim,))
    if gen.drift == "script-L":
        bvec = np.einsum("ij,...j->...i", cp, grad_v) \
            + np.einsum("ij,jk,...k->...i", cp, gen.gauss_precision, nodes)
        a_op = cp
    elif gen.drift == "Lambda":
        bvec = np.einsum("ij,...j->...i", cp, grad_v)
        a_op = cp
    else:
        bvec = np.einsum("ij,...j->...i", cp, grad_v)
        a_op = 0.5 * cp
    return a_op, cp, bvec, hess_v


def apply_drift_operator(gen: GeneratorDiscretization, values: np.ndarray,
                         _cache: dict | None = None) -> np.ndarray:
    """Pointwise stencil action of the drift operator (4th-order interior)."""
    if _cache is not None and "ingredients" in _cache:
        a_op, _, bvec, _ = _cache["ingredients"]
    else:
        a_op, cp, bvec, hess_v = _drift_ingredients(gen)
        if _cache is not None:
            _cache["ingredients"] = (a_op, cp, bvec, hess_v)
    h = gen.box.spacing(gen.grid_shape)
    hess = _stencils.hessian(values, h)
    grad = _stencils.gradient(values, h)
    return np.einsum("ij,...ij->...", a_op, hess) \
        - np.einsum("...i,...i->...", bvec, grad)


@dataclass
class GammaReport:
    gamma: GridFunction
    gamma2_composition: GridFunction
    gamma2_explicit: GridFunction
    drift: str
    interior: np.ndarray
    max_rel_disagreement: float


def gamma_operator(gen: GeneratorDiscretization, phi: GridFunction) -> GridFunction:
    """Carre du champ |grad phi|^2 in the C_t' metric (both drift variants)."""
    grad = phi.gradient()
    vals = np.einsum("...i,ij,...j->...", grad, gen.mobility, grad)
    return phi.with_values(vals, tag=f"Gamma({phi.tag})")


def gamma_two(gen: GeneratorDiscretization, phi: GridFunction,
              margin: int = 5) -> GammaReport:
    """Iterated Gamma operator computed two independent ways.

    Composition: (op Gamma(phi) - 2 Gamma(phi, op phi)) / 2 with the carre du
    champ |grad .|^2_{C'}.  Explicit Bochner form: c * |hess phi|^2_{C'} +
    <(hess V_t [+ (C_inf - C_t)^{-1} for the full drift]) C' grad phi,
    grad phi>_{C'}; c = 1/2 for the half-Laplacian variant and 1 otherwise.
    """
    cache: dict = {}
    a_op, cp, bvec, hess_v = _drift_ingredients(gen)
    cache["ingredients"] = (a_op, cp, bvec, hess_v)
    h = gen.box.spacing(gen.grid_shape)

    grad_phi = _stencils.gradient(phi.values, h)
    gamma_vals = np.einsum("...i,ij,...j->...", grad_phi, cp, grad_phi)
    op_phi = apply_drift_operator(gen, phi.values, cache)
    grad_op_phi = _stencils.gradient(op_phi, h)
    cross = np.einsum("...i,ij,...j->...", grad_phi, cp, grad_op_phi)
    comp = 0.5 * (apply_drift_operator(gen, gamma_vals, cache) - 2.0 * cross)

    hess_phi = _stencils.hessian(phi.values, h)
    hnorm = np.einsum("ij,...jk,kl,...li->...", cp, hess_phi, cp, hess_phi)
    curv = hess_v.copy()
    if gen.drift == "script-L":
        curv = curv + gen.gauss_precision
    expl = (0.5 if gen.drift == "L" else 1.0) * hnorm + np.einsum(
        "...ij,jk,...k,il,...l->...", curv, cp, grad_phi, cp, grad_phi)

    interior = _stencils.interior_mask(phi.shape, margin)
    scale = float(np.max(np.abs(expl[interior]))) or 1.0
    disagreement = float(np.max(np.abs(comp[interior] - expl[interior]))) / scale
    return GammaReport(
        gamma=phi.with_values(gamma_vals, tag="Gamma"),
        gamma2_composition=phi.with_values(comp, tag="Gamma2 comp"),
        gamma2_explicit=phi.with_values(expl, tag="Gamma2 expl"),
        drift=gen.drift, interior=interior,
        max_rel_disagreement=disagreement)


def gamma_operators(gen_pair, phi: GridFunction):
    """(Gamma, Gamma2 for the half-Laplacian drift, Gamma2 for the full drift).

    ``gen_pair`` is (generator with drift "L" or "Lambda", generator with
    drift "script-L") assembled on the same grid; the boundary-touching
    contract is enforced on the weighted mass of phi near the box faces.
    """
    gen_a, gen_script = gen_pair
    if gen_script.drift != "script-L":
        raise ValueError("second generator must be the full-drift variant")
    edge = ~_stencils.interior_mask(phi.shape, 2)
    w = gen_script.weight.values
    boundary_mass = float(np.sum(w[edge] * phi.values[edge] ** 2)
                          / max(np.sum(w * phi.values**2), 1e-300))
    if boundary_mass > 1e-8:
        raise ValueError(
            f"support too large for Gamma2 check: boundary mass {boundary_mass:.2e}")
    rep_a = gamma_two(gen_a, phi)
    rep_s = gamma_two(gen_script, phi)
    return rep_a.gamma, rep_a, rep_s
