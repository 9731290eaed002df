"""Independent oracle implementations used to cross-check the engine.

Everything here deliberately avoids the package's own evaluation paths:
brute-force quadrature, extended-precision summation, finite differences,
and direct root solving.
"""

import mpmath
import numpy as np
from scipy.optimize import fsolve


def fd_central(f, x, h=1e-6):
    """Central finite difference of a scalar function."""
    return (f(x + h) - f(x - h)) / (2.0 * h)


def maxwell_equal_area_psat(model, t, npts=100_000, iters=80):
    """Saturation pressure by equal-area construction on a dense density grid.

    Integrates (p - psat) dv between the outermost crossings; the net area
    vanishes at the coexistence pressure regardless of interior wiggles.
    """
    cap = getattr(model, "rho_max", None)
    top = 3.3 * model.rhoc if cap is None else min(3.3 * model.rhoc, cap)
    rho = np.linspace(1e-8, top, npts)
    p = np.asarray(model.pressure(t, rho), dtype=float)
    dp = np.diff(p)
    falling = np.nonzero(dp < 0.0)[0]
    if not falling.size:
        raise ValueError(f"no coexistence loop at t={t}")
    imax = int(falling[0])
    stop = int(falling[-1]) + 1
    hi = float(p[imax])
    lo = max(float(p[imax:stop + 1].min()), 1e-12)
    v = 1.0 / rho
    cand = 0.5 * (lo + hi)
    for _ in range(iters):
        cand = 0.5 * (lo + hi)
        diff = p - cand
        iv = int(np.argmax(diff[:imax + 1] > 0))
        negatives = np.nonzero(diff < 0.0)[0]
        il = int(negatives[-1]) + 1
        seg = slice(iv, il + 1)
        area = np.trapezoid(p[seg] - cand, v[seg])  # v descending flips the sign
        if area < 0:
            lo = cand
        else:
            hi = cand
    return float(cand)


def alpha_r_extended_precision(bank, tau, delta, dps=50):
    """Term-by-term residual Helmholtz summation in extended precision."""
    with mpmath.workdps(dps):
        tau = mpmath.mpf(tau)
        delta = mpmath.mpf(delta)
        total = mpmath.mpf(0)
        for n, t, d in bank.poly:
            total += mpmath.mpf(n) * tau ** mpmath.mpf(t) * delta ** d
        for n, t, d, l in bank.exp:
            total += mpmath.mpf(n) * tau ** mpmath.mpf(t) * delta ** d * mpmath.e ** (-delta ** l)
        for n, t, d, eta, beta, gamma, epsilon in bank.gauss:
            total += (mpmath.mpf(n) * tau ** mpmath.mpf(t) * delta ** d
                      * mpmath.e ** (-mpmath.mpf(eta) * (delta - mpmath.mpf(epsilon)) ** 2
                                     - mpmath.mpf(beta) * (tau - mpmath.mpf(gamma)) ** 2))
        return float(total)


def independent_aad_percent(ref, calc):
    """Plain-loop mean of relative errors, in percent."""
    total = 0.0
    count = 0
    for r, c in zip(ref, calc):
        total += abs((r - c) / r)
        count += 1
    return 100.0 * total / count


def pr_triple_root_zc():
    """Critical compressibility from the triple-root condition of the
    pressure cubic: match Z^3 coefficients against (Z - Zc)^3."""
    def equations(x):
        big_a, big_b, zc = x
        return [
            3.0 * zc - (1.0 - big_b),
            3.0 * zc * zc - (big_a - 3.0 * big_b * big_b - 2.0 * big_b),
            zc ** 3 - (big_a * big_b - big_b * big_b - big_b ** 3),
        ]

    solution = fsolve(equations, [0.45, 0.08, 0.31], full_output=False, xtol=1e-14)
    return float(solution[2])


def cosine_similarity_dot(a, b):
    """Ordinary cosine similarity via an explicit dot-product loop."""
    dot = 0.0
    na = 0.0
    nb = 0.0
    for x, y in zip(a, b):
        dot += x * y
        na += x * x
        nb += y * y
    return dot / np.sqrt(na) / np.sqrt(nb)


def directional_fd(loss, params, direction, eps=1e-5):
    """Directional derivative of a parameter-dict loss by central difference."""
    plus = {k: params[k] + eps * direction[k] for k in params}
    minus = {k: params[k] - eps * direction[k] for k in params}
    return (loss(plus) - loss(minus)) / (2.0 * eps)
