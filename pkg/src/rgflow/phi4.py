"""Lattice quartic (phi^4) models: susceptibility, tilted covariance, rates.

A model on a finite site set is the probability density on R^n

    exp( -(phi, A phi)/2 - sum_x (g phi_x^4/4 + nu phi_x^2/2) + (h, phi) ) / Z

with A symmetric positive-definite and g > 0.  Under the mass
regularization C_t = (A + 1/t)^{-1} the admissible curvature rate has the
closed form lambda'_t = 1/t - chi_t/t^2, with chi_t the susceptibility of
the mass-shifted zero-field measure, and the corrective rate is bounded by

    alpha'_t <= 1/t - inf_phi lambda_min(Sigma_t(phi))/t^2
               + lambda_max(A) (t lambda_max(A) + 1),

where Sigma_t(phi) is the covariance of the measure with mass shift 1/t and
external field C_t^{-1} phi.  Moments are computed by importance-weighted
tensor Gauss-Hermite quadrature for n <= 3 and by seeded single-site
random-walk Metropolis otherwise (always available for cross-checks).
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .covariance import CovarianceSchedule, make_schedule
from .errors import NonConvergenceError
from .potential import PotentialDescriptor, QuadratureRule

QUADRATURE_MAX_SITES = 3

_MCMC_BURNIN = 100_000
_MCMC_TARGET_ACCEPT = 0.4
_MCMC_MIN_ESS = 1000


@dataclass(frozen=True)
class Phi4Model:
    """Quartic lattice model parameters."""

    a_matrix: np.ndarray
    g: float
    nu: float
    h: np.ndarray

    def __post_init__(self):
        a = np.atleast_2d(np.asarray(self.a_matrix, dtype=float))
        object.__setattr__(self, "a_matrix", 0.5 * (a + a.T))
        object.__setattr__(self, "h", np.broadcast_to(
            np.atleast_1d(np.asarray(self.h, dtype=float)), (a.shape[0],)).copy())
        if not np.allclose(a, a.T, atol=1e-10 * max(1.0, np.abs(a).max())):
            raise ValueError("coupling matrix A must be symmetric")
        w = np.linalg.eigvalsh(self.a_matrix)
        if w[0] <= 0:
            raise ValueError(
                f"coupling matrix A must be positive-definite; eigenvalue {w[0]:.3e}")
        if self.g < 0:
            raise ValueError("quartic coupling g must be nonnegative")
        if self.g == 0 and w[0] + self.nu <= 0:
            # g = 0 admitted for the Gaussian-reduction checks only
            raise ValueError("g = 0 requires A + nu to stay positive-definite")

    @property
    def n_sites(self) -> int:
        return self.a_matrix.shape[0]

    def potential(self) -> PotentialDescriptor:
        """The non-Gaussian part as a per-site quartic descriptor."""
        return PotentialDescriptor.quartic(self.g, self.nu, self.h,
                                           dimension=self.n_sites)

    def schedule(self) -> CovarianceSchedule:
        """Mass-regularized covariance decomposition with C_inf = A^{-1}."""
        return make_schedule("pauli-villars", aux=self.a_matrix)

    def action(self, phi: np.ndarray, mass_shift: float = 0.0,
               field=None) -> np.ndarray:
        """S(phi) with optional extra mass and external field; batched."""
        phi = np.atleast_2d(np.asarray(phi, dtype=float))
        eta = self.h if field is None else np.asarray(field, dtype=float)
        quad = 0.5 * np.einsum("mi,ij,mj->m", phi, self.a_matrix, phi)
        local = np.sum(0.25 * self.g * phi**4
                       + 0.5 * (self.nu + mass_shift) * phi**2, axis=-1)
        return quad + local - phi @ eta


@dataclass
class MomentEstimate:
    value: object               # scalar or matrix
    stderr: float
    method: str                 # "quadrature" | "mcmc"
    seed: int | None = None
    n_samples: int = 0
    converged: bool = True

    def __post_init__(self):
        if self.stderr < 0:
            raise ValueError("stderr must be nonnegative")


def _marginal_scale(model: Phi4Model, mass_shift: float, eta: np.ndarray):
    """Per-site reference center and width from the 1D marginal actions."""
    n = model.n_sites
    centers = np.empty(n)
    widths = np.empty(n)
    for i in range(n):
        aii = model.a_matrix[i, i]
        m2 = aii + model.nu + mass_shift

        def u(y, i=i, m2=m2):
            return 0.25 * model.g * y**4 + 0.5 * m2 * y**2 - eta[i] * y

        if model.g > 0:
            span = (60.0 / model.g) ** 0.25 + 3.0 * abs(eta[i]) / max(aii, 0.1) + 3.0
        else:
            if m2 <= 0:
                raise ValueError("g = 0 marginal requires a positive mass")
            span = 10.0 / math.sqrt(m2) + 3.0 * abs(eta[i]) / m2
        ys = np.linspace(-span, span, 1601)
        uy = u(ys)
        uy -= uy.min()
        w = np.exp(-uy)
        w /= np.trapezoid(w, ys)
        mean = np.trapezoid(ys * w, ys)
        var = np.trapezoid((ys - mean) ** 2 * w, ys)
        centers[i] = mean
        widths[i] = math.sqrt(max(var, 1e-12))
    return centers, widths


def lattice_moments(model: Phi4Model, mass_shift: float = 0.0, field=None,
                    order: int = 96, width_factor: float = 1.6):
    """Mean and covariance of the (shifted, tilted) lattice measure.

    Importance-weighted tensor Gauss-Hermite against a diagonal reference
    Gaussian sized from the 1D marginals; deterministic.  Returns
    (mean, cov, converged) where ``converged`` compares order and order+16.
    """
    n = model.n_sites
    if n > QUADRATURE_MAX_SITES:
        raise ValueError(
            f"quadrature path supports n <= {QUADRATURE_MAX_SITES} sites")
    eta = model.h if field is None else np.broadcast_to(
        np.atleast_1d(np.asarray(field, dtype=float)), (n,))
    centers, widths = _marginal_scale(model, mass_shift, eta)
    widths = widths * width_factor

    def moments_at(p: int):
        nodes1, w1 = np.polynomial.hermite_e.hermegauss(p)
        logw1 = np.log(w1)
        grids = np.meshgrid(*([nodes1] * n), indexing="ij")
        z = np.stack([g.ravel() for g in grids], axis=-1)
        logw = np.zeros(z.shape[0])
        for axis in range(n):
            logw += np.meshgrid(*([logw1] * n), indexing="ij")[axis].ravel()
        phi = centers[None, :] + z * widths[None, :]
        # remove the reference Gaussian, reweight by the true action
        log_ref = -0.5 * np.sum(z**2, axis=-1)
        le = logw - model.action(phi, mass_shift, eta) - log_ref
        le -= le.max()
        wts = np.exp(le)
        wts /= wts.sum()
        mean = wts @ phi
        centered = phi - mean
        cov = (centered * wts[:, None]).T @ centered
        return mean, 0.5 * (cov + cov.T)

    mean, cov = moments_at(order)
    mean2, cov2 = moments_at(order + 16)
    scale = max(float(np.max(np.abs(cov))), 1e-300)
    drift = max(float(np.max(np.abs(cov - cov2))),
                float(np.max(np.abs(mean - mean2)))) / scale
    return mean2, cov2, drift <= 1e-8


def metropolis_moments(model: Phi4Model, mass_shift: float = 0.0, field=None,
                       seed: int = 0, n_measure_sweeps: int = 60_000,
                       burnin: int = _MCMC_BURNIN):
    """Single-site random-walk Metropolis moments with stderr.

    Proposal scales are tuned toward 0.4 acceptance during burn-in; samples
    are thinned by the integrated autocorrelation time of the slowest
    tracked observable and the effective sample size must reach 1000.
    Returns (mean, cov, stderr_cov, ess, n_kept).
    """
    n = model.n_sites
    eta = model.h if field is None else np.broadcast_to(
        np.atleast_1d(np.asarray(field, dtype=float)), (n,))
    rng = np.random.default_rng(seed)
    a = model.a_matrix
    m2 = model.nu + mass_shift
    g = model.g

    phi = rng.standard_normal(n) * 0.5
    scale = np.full(n, 1.0)
    accepts = np.zeros(n)
    trials = np.zeros(n)

    def site_energy(i, value, other_sum):
        return (0.5 * a[i, i] * value**2 + value * other_sum
                + 0.25 * g * value**4 + 0.5 * m2 * value**2 - eta[i] * value)

    def sweep():
        for i in range(n):
            other = a[i] @ phi - a[i, i] * phi[i]
            old = phi[i]
            new = old + scale[i] * rng.standard_normal()
            de = site_energy(i, new, other) - site_energy(i, old, other)
            trials[i] += 1
            if de <= 0 or rng.random() < math.exp(-de):
                phi[i] = new
                accepts[i] += 1

    tune_block = 500
    for step in range(burnin):
        sweep()
        if (step + 1) % tune_block == 0:
            rate = accepts / np.maximum(trials, 1)
            scale *= np.exp(rate - _MCMC_TARGET_ACCEPT)
            accepts[:] = 0
            trials[:] = 0

    samples = np.empty((n_measure_sweeps, n))
    for step in range(n_measure_sweeps):
        sweep()
        samples[step] = phi

    # integrated autocorrelation of the slowest observable (total field,
    # falling back to sum phi^2 when symmetry kills the linear mode)
    obs = samples.sum(axis=1)
    if abs(np.mean(obs)) < 5 * np.std(obs) / math.sqrt(len(obs)) and np.all(eta == 0):
        obs = (samples**2).sum(axis=1)
    tau = _integrated_autocorr(obs)
    stride = max(1, int(math.ceil(tau)))
    kept = samples[::stride]
    ess = float(len(kept))
    if ess < _MCMC_MIN_ESS:
        raise NonConvergenceError(
            f"MCMC effective sample size {ess:.0f} < {_MCMC_MIN_ESS} "
            f"(tau = {tau:.1f}, sweeps = {n_measure_sweeps}); run longer")

    mean = kept.mean(axis=0)
    centered = kept - mean
    cov = centered.T @ centered / (len(kept) - 1)

    # block jackknife stderr on the covariance entries
    nblocks = 20
    blocks = np.array_split(np.arange(len(kept)), nblocks)
    cov_blocks = []
    for b in blocks:
        mask = np.ones(len(kept), dtype=bool)
        mask[b] = False
        sub = kept[mask]
        sm = sub.mean(axis=0)
        sc = sub - sm
        cov_blocks.append(sc.T @ sc / (len(sub) - 1))
    cov_blocks = np.array(cov_blocks)
    stderr = float(np.max(np.sqrt(
        (nblocks - 1) * np.mean((cov_blocks - cov_blocks.mean(0)) ** 2, axis=0))))
    return mean, cov, stderr, ess, len(kept)


def _integrated_autocorr(x: np.ndarray) -> float:
    x = np.asarray(x, dtype=float)
    x = x - x.mean()
    n = len(x)
    f = np.fft.rfft(x, n=2 * n)
    acf = np.fft.irfft(f * np.conj(f))[:n].real
    if acf[0] <= 0:
        return 1.0
    acf /= acf[0]
    tau = 1.0
    for k in range(1, min(n // 2, 2000)):
        if acf[k] < 0.05:
            break
        tau += 2.0 * acf[k]
    return tau


def susceptibility(model: Phi4Model, t: float, order: int = 96,
                   method: str = "auto", seed: int = 0,
                   n_measure_sweeps: int = 60_000) -> MomentEstimate:
    """chi_t: max over sites of covariance row sums of the mass-shifted,
    zero-field measure."""
    if t <= 0:
        raise ValueError("susceptibility requires t > 0")
    zero_field = Phi4Model(model.a_matrix, model.g, model.nu,
                           np.zeros(model.n_sites))
    use_quad = method == "quadrature" or (
        method == "auto" and model.n_sites <= QUADRATURE_MAX_SITES)
    if use_quad:
        _, cov, converged = lattice_moments(zero_field, mass_shift=1.0 / t,
                                            order=order)
        chi = float(np.max(np.sum(cov, axis=1)))
        return MomentEstimate(value=chi, stderr=0.0, method="quadrature",
                              converged=converged)
    mean, cov, stderr, ess, kept = metropolis_moments(
        zero_field, mass_shift=1.0 / t, seed=seed,
        n_measure_sweeps=n_measure_sweeps)
    chi = float(np.max(np.sum(cov, axis=1)))
    return MomentEstimate(value=chi, stderr=model.n_sites * stderr,
                          method="mcmc", seed=seed, n_samples=kept)


def tilted_covariance(model: Phi4Model, t: float, phi, order: int = 96,
                      method: str = "auto", seed: int = 0) -> MomentEstimate:
    """Covariance of the measure with mass shift 1/t and field C_t^{-1} phi."""
    if t <= 0:
        raise ValueError("tilted covariance requires t > 0")
    phi = np.atleast_1d(np.asarray(phi, dtype=float))
    field = (model.a_matrix + np.eye(model.n_sites) / t) @ phi + model.h
    base = Phi4Model(model.a_matrix, model.g, model.nu,
                     np.zeros(model.n_sites))
    use_quad = method == "quadrature" or (
        method == "auto" and model.n_sites <= QUADRATURE_MAX_SITES)
    if use_quad:
        _, cov, converged = lattice_moments(base, mass_shift=1.0 / t,
                                            field=field, order=order)
        return MomentEstimate(value=cov, stderr=0.0, method="quadrature",
                              converged=converged)
    _, cov, stderr, ess, kept = metropolis_moments(
        base, mass_shift=1.0 / t, field=field, seed=seed)
    return MomentEstimate(value=cov, stderr=stderr, method="mcmc", seed=seed,
                          n_samples=kept)


def phi4_schedules(model: Phi4Model, t_grid, phi_samples, order: int = 96,
                   descent_steps: int = 12):
    """Certified rate lambda'_t = 1/t - chi_t/t^2 and the alpha' formula.

    The infimum of lambda_min(Sigma_t(phi)) over phi is approximated from
    the sample set plus coordinate descent; since the sampled inf is an
    upper bound for the true one, the reported alpha' formula errs upward
    (conservative for the monotonicity exponent).  Returns a dict of arrays:
    lambda_prime, alpha_prime_formula, chi, sigma_min.
    """
    t_grid = np.asarray(t_grid, dtype=float)
    phi_samples = np.atleast_2d(np.asarray(phi_samples, dtype=float))
    amax = float(np.linalg.eigvalsh(model.a_matrix)[-1])
    out = {"lambda_prime": np.empty(len(t_grid)),
           "alpha_prime_formula": np.empty(len(t_grid)),
           "chi": np.empty(len(t_grid)),
           "sigma_min": np.empty(len(t_grid))}

    for i, t in enumerate(t_grid):
        chi = susceptibility(model, t, order=order).value

        def sig_min(phi, t=t):
            cov = tilted_covariance(model, t, phi, order=order).value
            return float(np.linalg.eigvalsh(cov)[0])

        vals = [sig_min(p) for p in phi_samples]
        best_idx = int(np.argmin(vals))
        best = vals[best_idx]
        x = phi_samples[best_idx].copy()
        step = max(float(np.max(np.abs(phi_samples))), 1.0) / 4.0
        for _ in range(descent_steps):
            improved = False
            for k2 in range(model.n_sites):
                for delta in (step, -step):
                    trial = x.copy()
                    trial[k2] += delta
                    v = sig_min(trial)
                    if v < best:
                        best, x = v, trial
                        improved = True
            if not improved:
                step *= 0.5
        out["chi"][i] = chi
        out["sigma_min"][i] = best
        out["lambda_prime"][i] = 1.0 / t - chi / t**2
        out["alpha_prime_formula"][i] = (1.0 / t - best / t**2
                                         + amax * (t * amax + 1.0))
    return out


def hessian_identity_check(model: Phi4Model, t: float, phi_samples,
                           order: int = 96, fd_step: float = 1e-3) -> float:
    """Max relative error of hess V_t = C^{-1} - C^{-1} Sigma_t(phi) C^{-1}.

    The right side uses the tilted covariance; the left side is a central
    finite-difference Hessian of the smoothed potential value, so the two
    routes share no differentiation machinery.
    """
    if model.n_sites > QUADRATURE_MAX_SITES:
        raise ValueError("identity check runs on the quadrature path (n <= 3)")
    from .potential import renormalized_value

    phi_samples = np.atleast_2d(np.asarray(phi_samples, dtype=float))
    sched = model.schedule()
    c, _, _ = sched.eval(t)
    cinv = np.linalg.inv(c)
    V0 = model.potential()
    q = QuadratureRule(order=min(order, 60 if model.n_sites >= 2 else order),
                       dimension=model.n_sites)
    n = model.n_sites
    worst = 0.0
    for phi in phi_samples:
        sigma = tilted_covariance(model, t, phi, order=order).value
        rhs = cinv - cinv @ sigma @ cinv

        lhs = np.empty((n, n))
        base = phi.copy()
        for i in range(n):
            for j in range(i, n):
                if i == j:
                    pts = np.array([base + fd_step * _unit(n, i),
                                    base,
                                    base - fd_step * _unit(n, i)])
                    v = renormalized_value(V0, c, pts, q)
                    lhs[i, i] = (v[0] - 2 * v[1] + v[2]) / fd_step**2
                else:
                    ei, ej = _unit(n, i), _unit(n, j)
                    pts = np.array([base + fd_step * (ei + ej),
                                    base + fd_step * (ei - ej),
                                    base - fd_step * (ei - ej),
                                    base - fd_step * (ei + ej)])
                    v = renormalized_value(V0, c, pts, q)
                    val = (v[0] - v[1] - v[2] + v[3]) / (4 * fd_step**2)
                    lhs[i, j] = lhs[j, i] = val
        # ambient scale C^{-1}: both sides are differences of such terms
        scale = max(float(np.max(np.abs(rhs))),
                    1e-6 * float(np.max(np.abs(cinv))))
        worst = max(worst, float(np.max(np.abs(lhs - rhs))) / scale)
    return worst


def _unit(n: int, i: int) -> np.ndarray:
    e = np.zeros(n)
    e[i] = 1.0
    return e
