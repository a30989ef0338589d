"""Independent brute-force oracles used to pin expected values in tests.

Everything here deliberately avoids the production code paths: smoothed
potentials are integrated with adaptive quadrature (scipy.integrate.quad),
Gaussian facts come from closed forms, and the harmonic-oscillator spectrum
is the textbook ladder.  The CLI ``oracle`` subcommand evaluates the same
functions and writes their reference values to disk.
"""

from __future__ import annotations

import math

import numpy as np
from scipy import integrate


def gaussian_smoothed_quadratic(beta: float, c: float, x: float):
    """Value/gradient/Hessian of -log(gamma_c * exp(-beta y^2/2)) at x.

    Closed form: V(x) = beta x^2 / (2 (1 + beta c)) + log(1 + beta c) / 2.
    """
    den = 1.0 + beta * c
    value = beta * x * x / (2.0 * den) + 0.5 * math.log(den)
    grad = beta * x / den
    hess = beta / den
    return value, grad, hess


def quartic_site_value(g: float, nu: float, h: float, c: float, x: float,
                       tol: float = 1e-12) -> float:
    """-log E_{z~N(0,c)}[exp(-V0(x+z))] by adaptive quadrature, 1D.

    V0(y) = g y^4/4 + nu y^2/2 - h y.  The integrand is shifted by its
    maximum exponent before integrating so the result is stable for large x.
    """
    if c <= 0:
        return 0.25 * g * x**4 + 0.5 * nu * x**2 - h * x
    sig = math.sqrt(c)

    def neg_exponent(y):
        return (0.25 * g * y**4 + 0.5 * nu * y**2 - h * y
                + (y - x) ** 2 / (2.0 * c))

    ys = np.linspace(x - 12 * sig, x + 12 * sig, 4001)
    shift = float(np.min(neg_exponent(ys)))

    def integrand(y):
        return math.exp(-(neg_exponent(y) - shift))

    total, _ = integrate.quad(integrand, x - 14 * sig, x + 14 * sig,
                              epsabs=tol, epsrel=tol, limit=400)
    return -(math.log(total) - math.log(math.sqrt(2.0 * math.pi) * sig) - shift)


def quartic_site_moments(g: float, nu: float, h: float, c: float, x: float,
                         tol: float = 1e-12):
    """Mean and variance of psi ~ exp(-V0(psi)) N(psi; x, c) by adaptive quad."""
    sig = math.sqrt(c)

    def neg_exponent(y):
        return (0.25 * g * y**4 + 0.5 * nu * y**2 - h * y
                + (y - x) ** 2 / (2.0 * c))

    ys = np.linspace(x - 12 * sig, x + 12 * sig, 4001)
    shift = float(np.min(neg_exponent(ys)))

    def moment(power):
        f = lambda y: y**power * math.exp(-(neg_exponent(y) - shift))
        val, _ = integrate.quad(f, x - 14 * sig, x + 14 * sig,
                                epsabs=tol, epsrel=tol, limit=400)
        return val

    z0 = moment(0)
    m1 = moment(1) / z0
    m2 = moment(2) / z0
    return m1, m2 - m1 * m1


def quartic_lattice_moments(a_matrix, g: float, nu: float, h, tol: float = 1e-10):
    """Mean vector and covariance of exp(-S) on R^n, n <= 2, by nested quad.

    S(phi) = phi.A phi/2 + sum(g phi^4/4 + nu phi^2/2) - h.phi.  Slow and
    simple on purpose; this is the reference for the fast tensor rules.
    """
    a = np.atleast_2d(np.asarray(a_matrix, dtype=float))
    n = a.shape[0]
    h = np.broadcast_to(np.atleast_1d(np.asarray(h, dtype=float)), (n,))

    def action(phi):
        phi = np.asarray(phi)
        return (0.5 * phi @ a @ phi
                + np.sum(0.25 * g * phi**4 + 0.5 * nu * phi**2) - h @ phi)

    lim = 1.5 * (abs(40.0 / max(g, 1e-9))) ** 0.25 + 3.0 * np.max(np.abs(h)) + 4.0
    if n == 1:
        shift = min(action([y]) for y in np.linspace(-lim, lim, 2001))

        def mom(p):
            f = lambda y: y**p * math.exp(-(action([y]) - shift))
            return integrate.quad(f, -lim, lim, epsabs=tol, epsrel=tol, limit=300)[0]

        z0 = mom(0)
        m1 = mom(1) / z0
        m2 = mom(2) / z0
        return np.array([m1]), np.array([[m2 - m1 * m1]])
    if n == 2:
        grid = np.linspace(-lim, lim, 201)
        shift = min(action([u, v]) for u in grid for v in grid)

        def mom(pu, pv):
            f = lambda v, u: (u**pu * v**pv
                              * math.exp(-(action([u, v]) - shift)))
            return integrate.dblquad(f, -lim, lim, -lim, lim,
                                     epsabs=tol, epsrel=tol)[0]

        z0 = mom(0, 0)
        m = np.array([mom(1, 0), mom(0, 1)]) / z0
        s = np.array([[mom(2, 0), mom(1, 1)], [mom(1, 1), mom(0, 2)]]) / z0
        return m, s - np.outer(m, m)
    raise ValueError("nested-quad oracle implemented for n <= 2 only")


def ou_spectrum(k: int) -> np.ndarray:
    """Eigenvalues 0, 1, ..., k of the unit Ornstein-Uhlenbeck generator."""
    return np.arange(k + 1, dtype=float)


def gaussian_chain_facts(t: float) -> dict:
    """Closed-form facts for the V0 = 0, C_inf = 1 heat-kernel chain."""
    return {
        "c": 1.0 - math.exp(-t),
        "c_prime": math.exp(-t),
        "c_second": -math.exp(-t),
        "lambda_prime": 0.5,
        "alpha_prime": 1.0,
        "poincare_weighted": 1.0,
        "poincare_unweighted": math.exp(-t),
        "nu_variance": math.exp(-t),
        "variance_integrand": math.exp(-t),
    }


def pauli_villars_facts(a: float, t: float) -> dict:
    """Closed-form facts for the scalar mass-a regularized Gaussian chain."""
    den = t * a + 1.0
    return {
        "c": t / den,
        "c_prime": 1.0 / den**2,
        "c_second": -2.0 * a / den**3,
        "chi": t / den,
        "lambda_prime": a / den,
        "alpha_prime": a / den,
        "alpha_prime_formula": 1.0 / t - 1.0 / (t * den) + a * den,
        "residual_inverse": a * den,
    }


def heatflow_gaussian_poincare(s: float) -> float:
    """Poincare constant of gamma * gamma_s: the variance 1 + s."""
    return 1.0 + s


ORACLE_TABLE = (
    ("smoothed-quadratic-value", lambda: gaussian_smoothed_quadratic(1.0, 1.0, 1.0)[0]),
    ("smoothed-quadratic-grad", lambda: gaussian_smoothed_quadratic(1.0, 1.0, 1.0)[1]),
    ("smoothed-quadratic-hess", lambda: gaussian_smoothed_quadratic(1.0, 1.0, 1.0)[2]),
    ("quartic-value-g1-t1-x0", lambda: quartic_site_value(1.0, 0.0, 0.0, 0.5, 0.0)),
    ("quartic-sigma-g1-t1-x0.7",
     lambda: quartic_site_moments(1.0, 0.0, 0.0, 0.5, 0.7)[1]),
    ("ou-mu-4", lambda: float(ou_spectrum(4)[4])),
    ("gaussian-chain-cp-weighted", lambda: gaussian_chain_facts(1.0)["poincare_weighted"]),
    ("pv-chi-a1-t1", lambda: pauli_villars_facts(1.0, 1.0)["chi"]),
    ("pv-lambda-prime-a1-t1", lambda: pauli_villars_facts(1.0, 1.0)["lambda_prime"]),
    ("heatflow-gaussian-cp-s2", lambda: heatflow_gaussian_poincare(2.0)),
)


def run_all() -> list[tuple[str, float]]:
    """Evaluate every registered oracle; used by the CLI ``oracle`` command."""
    return [(name, float(fn())) for name, fn in ORACLE_TABLE]
