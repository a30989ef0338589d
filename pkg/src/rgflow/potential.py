"""Renormalized potentials V_t = -log(gaussian_C * exp(-V0)) and derivatives.

The base potential V0 comes in four forms: zero, quadratic (1/2 <x, Bx>),
per-coordinate quartic polynomials, and the lattice quartic site sum
sum_i (g/4 x_i^4 + nu/2 x_i^2 - h_i x_i).  Smoothing by a Gaussian of
covariance C is computed with tensorized Gauss-Hermite quadrature restricted
to the range of C, stabilized in log space.  Zero and quadratic forms also
have exact closed-form fast paths.

Gradient and Hessian of the smoothed potential are tilted moments: with
rho(z) proportional to exp(-V0(x+z)) gamma_C(dz),

    grad V_t(x) = E_rho[grad V0(x+z)]
    hess V_t(x) = E_rho[hess V0(x+z)] - Cov_rho(grad V0(x+z)).
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache

import numpy as np
from scipy.special import logsumexp

from .errors import QuadratureOverflowError

FORMS = ("zero", "quadratic", "polynomial", "phi4-site-sum")

DEFAULT_ORDER = 40
MAX_TENSOR_DIM = 3

# Relative eigenvalue cutoff below which a covariance direction is treated as
# degenerate and dropped from the quadrature (convolution on range(C) only).
_RANK_RTOL = 1e-13


@dataclass(frozen=True)
class PotentialDescriptor:
    """Base potential with value/gradient/Hessian evaluators.

    ``g``/``nu``/``h`` are per-coordinate arrays for the quartic forms;
    ``b_matrix`` is the symmetric matrix of the quadratic form.  All
    evaluators accept a single point ``(d,)`` or a batch ``(m, d)``.
    """

    form: str
    dimension: int
    b_matrix: np.ndarray | None = None
    g: np.ndarray | None = None
    nu: np.ndarray | None = None
    h: np.ndarray | None = None

    @staticmethod
    def zero(dimension: int) -> "PotentialDescriptor":
        return PotentialDescriptor(form="zero", dimension=int(dimension))

    @staticmethod
    def quadratic(b_matrix) -> "PotentialDescriptor":
        b = np.atleast_2d(np.asarray(b_matrix, dtype=float))
        if not np.allclose(b, b.T, atol=1e-12 * max(1.0, np.abs(b).max())):
            raise ValueError("quadratic coefficient matrix must be symmetric")
        return PotentialDescriptor(form="quadratic", dimension=b.shape[0],
                                   b_matrix=0.5 * (b + b.T))

    @staticmethod
    def quartic(g, nu, h=None, dimension=None, form="phi4-site-sum") -> "PotentialDescriptor":
        """Per-coordinate quartic family g/4 x^4 + nu/2 x^2 - h x."""
        g = np.atleast_1d(np.asarray(g, dtype=float))
        nu = np.atleast_1d(np.asarray(nu, dtype=float))
        if dimension is None:
            dimension = max(len(g), len(nu), 0 if h is None else len(np.atleast_1d(h)))
        g = np.broadcast_to(g, (dimension,)).copy()
        nu = np.broadcast_to(nu, (dimension,)).copy()
        h = np.zeros(dimension) if h is None else np.broadcast_to(
            np.atleast_1d(np.asarray(h, dtype=float)), (dimension,)).copy()
        if np.any(g < 0):
            raise ValueError("quartic coefficients must be nonnegative for integrability")
        return PotentialDescriptor(form=form, dimension=dimension, g=g, nu=nu, h=h)

    def value(self, x) -> np.ndarray | float:
        x, single = _as_batch(x, self.dimension)
        if self.form == "zero":
            out = np.zeros(x.shape[0])
        elif self.form == "quadratic":
            out = 0.5 * np.einsum("mi,ij,mj->m", x, self.b_matrix, x)
        else:
            out = np.sum(0.25 * self.g * x**4 + 0.5 * self.nu * x**2 - self.h * x,
                         axis=-1)
        return out[0] if single else out

    def gradient(self, x) -> np.ndarray:
        x, single = _as_batch(x, self.dimension)
        if self.form == "zero":
            out = np.zeros_like(x)
        elif self.form == "quadratic":
            out = x @ self.b_matrix
        else:
            out = self.g * x**3 + self.nu * x - self.h
        return out[0] if single else out

    def hessian(self, x) -> np.ndarray:
        x, single = _as_batch(x, self.dimension)
        m, d = x.shape
        if self.form == "zero":
            out = np.zeros((m, d, d))
        elif self.form == "quadratic":
            out = np.broadcast_to(self.b_matrix, (m, d, d)).copy()
        else:
            diag = 3.0 * self.g * x**2 + self.nu
            out = np.zeros((m, d, d))
            idx = np.arange(d)
            out[:, idx, idx] = diag
        return out[0] if single else out


def _as_batch(x, d):
    x = np.asarray(x, dtype=float)
    if x.ndim == 0:
        x = x.reshape(1, 1)
        return x, True
    if x.ndim == 1:
        if len(x) != d:
            raise ValueError(f"point has dimension {len(x)}, potential expects {d}")
        return x.reshape(1, d), True
    if x.shape[-1] != d:
        raise ValueError(f"batch has dimension {x.shape[-1]}, potential expects {d}")
    return x, False


@lru_cache(maxsize=64)
def _hermite_tensor(order: int, dim: int):
    nodes1, w1 = np.polynomial.hermite_e.hermegauss(order)
    w1 = w1 / np.sqrt(2.0 * np.pi)  # standard normal expectation weights
    if dim == 0:
        return np.zeros((1, 0)), np.array([0.0])
    grids = np.meshgrid(*([nodes1] * dim), indexing="ij")
    nodes = np.stack([g.ravel() for g in grids], axis=-1)
    logw = np.zeros(nodes.shape[0])
    lw1 = np.log(w1)
    for axis in range(dim):
        grid = np.meshgrid(*([lw1] * dim), indexing="ij")[axis]
        logw += grid.ravel()
    return nodes, logw


@dataclass(frozen=True)
class QuadratureRule:
    """Tensor Gauss-Hermite rule for expectations against the standard normal.

    Exact for per-axis polynomials of degree <= 2*order - 1.  Tensor grids
    are capped at dimension 3; higher dimensions go through sampling paths
    elsewhere.
    """

    order: int = DEFAULT_ORDER
    dimension: int = 1

    def __post_init__(self):
        if self.order < 1:
            raise ValueError("quadrature order must be >= 1")
        if self.dimension > MAX_TENSOR_DIM:
            raise ValueError(
                f"tensor quadrature capped at dimension {MAX_TENSOR_DIM}, "
                f"got {self.dimension}")

    def rule(self, dim: int | None = None):
        """(nodes, log-weights) for a standard normal in ``dim`` axes."""
        dim = self.dimension if dim is None else dim
        if dim > MAX_TENSOR_DIM:
            raise ValueError(f"tensor quadrature capped at dimension {MAX_TENSOR_DIM}")
        return _hermite_tensor(self.order, dim)

    @property
    def max_abs_node(self) -> float:
        nodes, _ = _hermite_tensor(self.order, 1)
        return float(np.max(np.abs(nodes)))

    def with_order(self, order: int) -> "QuadratureRule":
        return QuadratureRule(order=order, dimension=self.dimension)


def _covariance_factor(c, d):
    """Cholesky-like factor L (d x r) of C restricted to its range."""
    c = np.atleast_2d(np.asarray(c, dtype=float))
    if c.shape != (d, d):
        raise ValueError(f"covariance has shape {c.shape}, expected {(d, d)}")
    w, u = np.linalg.eigh(0.5 * (c + c.T))
    if w[0] < -1e-10 * max(1.0, w[-1]):
        raise ValueError(f"covariance not positive-semidefinite: eigenvalue {w[0]:.3e}")
    keep = w > _RANK_RTOL * max(w[-1], 1e-300)
    if not np.any(keep):
        return np.zeros((d, 0))
    return u[:, keep] * np.sqrt(w[keep])


def _shifted_nodes(V0, c, x, q):
    """Quadrature nodes x + z_i with z ~ gamma_C; returns (points, logw, m)."""
    x, single = _as_batch(x, V0.dimension)
    L = _covariance_factor(c, V0.dimension)
    r = L.shape[1]
    nodes, logw = q.rule(r)
    z = nodes @ L.T  # (Q, d)
    pts = x[:, None, :] + z[None, :, :]
    return pts, logw, x, single


def renormalized_value(V0: PotentialDescriptor, c, x, q: QuadratureRule | None = None,
                       method: str = "auto"):
    """Smoothed potential -log E_{z~gamma_C}[exp(-V0(x+z))] at x.

    ``method``: "auto" uses closed forms for zero/quadratic V0 and quadrature
    otherwise; "quadrature" forces the numerical path; "closed-form" requires
    an analytic form.  Batched over x.
    """
    q = q or QuadratureRule(dimension=min(V0.dimension, MAX_TENSOR_DIM))
    if method not in ("auto", "quadrature", "closed-form"):
        raise ValueError(f"unknown method {method!r}")
    if method != "quadrature" and V0.form in ("zero", "quadratic"):
        return _closed_form_value(V0, c, x)
    if method == "closed-form":
        raise ValueError(f"no closed form for potential form {V0.form!r}")

    pts, logw, xb, single = _shifted_nodes(V0, c, x, q)
    m, Q, d = pts.shape
    exps = -V0.value(pts.reshape(-1, d)).reshape(m, Q)
    total = logsumexp(exps + logw[None, :], axis=1)
    if not np.all(np.isfinite(total)):
        worst = float(np.max(exps))
        raise QuadratureOverflowError(
            "quadrature overflow: all weights underflowed "
            f"(max exponent {worst:.6g}); increase the quadrature order")
    out = -total
    return float(out[0]) if single else out


def _closed_form_value(V0, c, x):
    x, single = _as_batch(x, V0.dimension)
    if V0.form == "zero":
        out = np.zeros(x.shape[0])
        return float(out[0]) if single else out
    b = V0.b_matrix
    c = np.atleast_2d(np.asarray(c, dtype=float))
    mmat = np.eye(V0.dimension) + c @ b
    heff = np.linalg.solve(mmat.T, b.T).T  # B (I + C B)^{-1}, symmetric
    heff = 0.5 * (heff + heff.T)
    sign, logdet = np.linalg.slogdet(mmat)
    if sign <= 0:
        raise ValueError("I + C B is not positive; quadratic form not integrable")
    out = 0.5 * np.einsum("mi,ij,mj->m", x, heff, x) + 0.5 * logdet
    return float(out[0]) if single else out


def _closed_form_derivatives(V0, c, x):
    x, single = _as_batch(x, V0.dimension)
    d = V0.dimension
    if V0.form == "zero":
        g = np.zeros((x.shape[0], d))
        h = np.zeros((x.shape[0], d, d))
    else:
        b = V0.b_matrix
        c = np.atleast_2d(np.asarray(c, dtype=float))
        mmat = np.eye(d) + c @ b
        heff = np.linalg.solve(mmat.T, b.T).T
        heff = 0.5 * (heff + heff.T)
        g = x @ heff
        h = np.broadcast_to(heff, (x.shape[0], d, d)).copy()
    return (g[0], h[0]) if single else (g, h)


def tilted_moments(V0: PotentialDescriptor, c, x, q: QuadratureRule | None = None):
    """Moments of the tilted measure rho(z) ~ exp(-V0(x+z)) gamma_C(dz).

    Returns (log_mass, mean, cov) of the shifted variable psi = x + z for a
    single point x; log_mass = -V_t(x).
    """
    q = q or QuadratureRule(dimension=min(V0.dimension, MAX_TENSOR_DIM))
    pts, logw, xb, single = _shifted_nodes(V0, c, x, q)
    if not single:
        raise ValueError("tilted_moments expects a single point")
    pts = pts[0]  # (Q, d)
    le = logw - V0.value(pts)
    mshift = np.max(le)
    if not np.isfinite(mshift):
        raise QuadratureOverflowError(
            "quadrature overflow in tilted moments; increase the order")
    wts = np.exp(le - mshift)
    norm = wts.sum()
    wts = wts / norm
    mean = wts @ pts
    centered = pts - mean
    cov = (centered * wts[:, None]).T @ centered
    log_mass = mshift + np.log(norm)
    return float(log_mass), mean, 0.5 * (cov + cov.T)


def renormalized_derivatives(V0: PotentialDescriptor, c, x,
                             q: QuadratureRule | None = None,
                             method: str = "auto", chunk: int = 256):
    """Gradient and Hessian of the smoothed potential at x (batched).

    Returns ``(grad, hess)`` with shapes ``(d,), (d, d)`` for a single point
    and ``(m, d), (m, d, d)`` for a batch.
    """
    q = q or QuadratureRule(dimension=min(V0.dimension, MAX_TENSOR_DIM))
    if method != "quadrature" and V0.form in ("zero", "quadratic"):
        return _closed_form_derivatives(V0, c, x)

    xb, single = _as_batch(x, V0.dimension)
    m, d = xb.shape
    grads = np.empty((m, d))
    hesss = np.empty((m, d, d))
    L = _covariance_factor(c, d)
    nodes, logw = q.rule(L.shape[1])
    z = nodes @ L.T
    for start in range(0, m, chunk):
        xc = xb[start:start + chunk]
        pts = xc[:, None, :] + z[None, :, :]
        mm, Q, _ = pts.shape
        flat = pts.reshape(-1, d)
        le = logw[None, :] - V0.value(flat).reshape(mm, Q)
        mshift = np.max(le, axis=1, keepdims=True)
        if not np.all(np.isfinite(mshift)):
            raise QuadratureOverflowError(
                "quadrature overflow in derivatives; increase the order")
        wts = np.exp(le - mshift)
        wts /= wts.sum(axis=1, keepdims=True)
        gv = V0.gradient(flat).reshape(mm, Q, d)
        hv = V0.hessian(flat).reshape(mm, Q, d, d)
        gbar = np.einsum("mq,mqi->mi", wts, gv)
        centered = gv - gbar[:, None, :]
        cov = np.einsum("mq,mqi,mqj->mij", wts, centered, centered)
        grads[start:start + chunk] = gbar
        hesss[start:start + chunk] = np.einsum("mq,mqij->mij", wts, hv) - cov
    if single:
        return grads[0], hesss[0]
    return grads, hesss
