"""Semi-analytic prices for the pure stochastic-volatility index model.

``dI = I sqrt(v) dW``, ``dv = kappa (theta - v) dt + chi sqrt(v) dZ``,
``d<W, Z> = rho dt``. Calls are priced with the single-integral
characteristic-function representation using the numerically stable
branch of the complex logarithm.
"""

from __future__ import annotations

import math

import numpy as np
from scipy.integrate import quad_vec

from .market_data import black76_call

CHI_DEGENERATE = 1e-8


class PricingError(ArithmeticError):
    pass


def integrated_variance(kappa: float, theta: float, v0: float, T: float) -> float:
    """``E[int_0^T v dt]`` for the CIR variance."""
    if kappa * T < 1e-12:
        return v0 * T
    return theta * T + (v0 - theta) * (1.0 - math.exp(-kappa * T)) / kappa


def log_cf(u, T: float, kappa: float, theta: float, chi: float, rho: float, v0: float):
    """Characteristic function of ``ln(I_T / I_0)`` at (complex) ``u``."""
    u = np.asarray(u, dtype=complex)
    b = kappa - rho * chi * 1j * u
    d = np.sqrt(b * b + chi * chi * (1j * u + u * u))
    g = (b - d) / (b + d)
    e = np.exp(-d * T)
    C = kappa * theta / chi**2 * ((b - d) * T - 2.0 * np.log((1.0 - g * e) / (1.0 - g)))
    D = (b - d) / chi**2 * (1.0 - e) / (1.0 - g * e)
    return np.exp(C + D * v0)


def heston_calls(F: float, strikes, T: float, kappa: float, theta: float, chi: float, rho: float, v0: float,
                 df: float = 1.0) -> np.ndarray:
    """Discounted calls on the index with forward ``F`` for several strikes of one expiry.

    Raises
    ------
    PricingError
        When the integral fails to converge or the price leaves the
        no-arbitrage bounds.
    """
    K = np.atleast_1d(np.asarray(strikes, dtype=float))
    lower, upper = df * np.maximum(F - K, 0.0), df * F
    if T <= 0:
        return lower
    if chi < CHI_DEGENERATE:
        w = integrated_variance(kappa, theta, v0, T)
        return np.asarray(black76_call(F, K, math.sqrt(max(w, 0.0) / T), T, df), dtype=float)
    x = np.log(F / K)

    def integrand(u):
        phi = log_cf(u - 0.5j, T, kappa, theta, chi, rho, v0)
        return (np.exp(1j * u * x) * phi).real / (u * u + 0.25)

    val, err = quad_vec(integrand, 0.0, np.inf, epsabs=1e-10, epsrel=1e-8, limit=200)
    if not np.all(np.isfinite(val)) or err > 1e-8:
        raise PricingError(f"characteristic-function integral did not converge (T={T}, error {err:.2g})")
    price = df * (F - np.sqrt(F * K) / math.pi * val)
    if np.any(price < lower - 1e-9) or np.any(price > upper + 1e-9):
        raise PricingError(f"integrated price outside no-arbitrage bounds (T={T})")
    return np.minimum(np.maximum(price, lower), upper)


def heston_call(F: float, K: float, T: float, kappa: float, theta: float, chi: float, rho: float, v0: float,
                df: float = 1.0) -> float:
    """Discounted call on the index with forward ``F``."""
    return float(heston_calls(F, [K], T, kappa, theta, chi, rho, v0, df)[0])
