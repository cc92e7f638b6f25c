"""Closed-form rate predictions and log-log rate fits.

Bounds are order-of-magnitude diagnostics: absorbed constants are 1 and log
factors appear explicitly as log N. Only exponents are ever asserted.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np
from scipy.stats import linregress

from PyAnytimeLab.core.problem import ProblemSpec, build_spectrum


log = logging.getLogger(__name__)

BIAS_DOMINATED = "bias_dominated"
VARIANCE_DOMINATED = "variance_dominated"
BALANCED = "balanced"

_EXPONENT_TOL = 1e-12


class TheoryDomainError(ValueError):
    pass


def _check_exponents(a: float, b: float) -> None:
    if not (math.isfinite(a) and a > 1.0):
        raise TheoryDomainError(f"capacity a must be > 1 (got {a})")
    if not (math.isfinite(b) and b > 1.0):
        raise TheoryDomainError(f"source b must be > 1 (got {b})")


def regime(a: float, b: float) -> str:
    if abs(b - a) <= _EXPONENT_TOL:
        return BALANCED
    return VARIANCE_DOMINATED if b > a else BIAS_DOMINATED


def gamma_star(a: float, b: float) -> float:
    _check_exponents(float(a), float(b))
    return max(1.0 - float(a) / float(b), 0.0)


def predicted_rate(a: float, b: float) -> float:
    """Exponent p in excess risk ~ N^{−p} at the optimal polynomial decay.

    For b < a the decay guarantee does not apply; the bias term of the
    two-phase (WSD) analysis, (b−1)/a, is returned instead.
    """
    a = float(a)
    b = float(b)
    _check_exponents(a, b)
    if b >= a:
        return 1.0 - 1.0 / b
    log.warning("b=%g < a=%g: outside the polynomial-decay guarantee, using the two-phase bias exponent", b, a)
    return (b - 1.0) / a


def k_star_from_eigenvalues(eigenvalues: np.ndarray, eta: float, gamma: float, n_steps: int) -> int:
    n_steps = int(n_steps)
    if n_steps < 2:
        raise TheoryDomainError(f"k* needs N >= 2 (got {n_steps})")
    if eta <= 0.0:
        raise TheoryDomainError(f"k* needs eta > 0 (got {eta})")
    threshold = math.log(n_steps) / (eta * n_steps ** (1.0 - gamma))
    # eigenvalues are sorted nonincreasing, so the count is the largest qualifying index
    return int(np.count_nonzero(np.asarray(eigenvalues) >= threshold))


def k_star(spec: ProblemSpec, eta: float, gamma: float, n_steps: int) -> int:
    return k_star_from_eigenvalues(build_spectrum(spec).eigenvalues, float(eta), float(gamma), n_steps)


@dataclass(frozen=True)
class DecayBound:
    bias: float
    variance: float
    k_star: int

    @property
    def total(self) -> float:
        return self.bias + self.variance


def decay_bound(spec: ProblemSpec, eta: float, gamma: float, n_steps: int) -> DecayBound:
    gamma = float(gamma)
    eta = float(eta)
    if not (0.0 < gamma < 1.0):
        raise TheoryDomainError(f"gamma must be in (0, 1) (got {gamma})")
    spectrum = build_spectrum(spec)
    if eta > 1.0 / spectrum.trace_h:
        log.warning("eta=%.6g exceeds 1/Tr(H)=%.6g; the bound's step-size hypothesis fails", eta, 1.0 / spectrum.trace_h)

    n = int(n_steps)
    ks = k_star_from_eigenvalues(spectrum.eigenvalues, eta, gamma, n)
    signal = spectrum.signal
    lam_tail = spectrum.eigenvalues[ks:]
    sigma2 = float(spec.noise_var)

    bias = float(np.sum(signal[:ks])) / n + float(np.sum(signal[ks:]))
    tail_terms = eta * lam_tail * lam_tail * n ** (1.0 - 2.0 * gamma) + lam_tail * n ** (-gamma)
    variance = sigma2 * ks / (eta * n) + sigma2 * float(np.sum(tail_terms))
    return DecayBound(bias=bias, variance=variance, k_star=ks)


@dataclass(frozen=True)
class WsdBound:
    bias_term: float
    variance_term: float
    bias_exponent: float
    variance_exponent: float
    regime: str


def wsd_bound(a: float, b: float, n_steps: int, noise_var: float) -> WsdBound:
    a = float(a)
    b = float(b)
    if not (1.0 < a < 2.0):
        raise TheoryDomainError(f"the two-phase bound holds for capacity a in (1, 2) (got a={a})")
    if not b > 1.0:
        raise TheoryDomainError(f"source b must be > 1 (got {b})")
    n = float(n_steps)
    bias_exp = (b - 1.0) / a
    var_exp = (a - 1.0) / a
    return WsdBound(
        bias_term=n ** (-bias_exp),
        variance_term=float(noise_var) * n ** (-var_exp),
        bias_exponent=bias_exp,
        variance_exponent=var_exp,
        regime=regime(a, b),
    )


@dataclass(frozen=True)
class RateFit:
    slope: float
    intercept: float
    r2: float

    @property
    def exponent(self) -> float:
        return -self.slope


def fit_rate_exponent(horizons: Sequence[float], risks: Sequence[float]) -> RateFit:
    x = np.asarray(horizons, dtype=np.float64)
    y = np.asarray(risks, dtype=np.float64)
    if x.shape != y.shape:
        raise TheoryDomainError(f"horizons and risks differ in length ({x.size} vs {y.size})")
    if x.size < 4:
        raise TheoryDomainError(f"rate fit needs at least 4 points (got {x.size})")
    if np.any(~np.isfinite(y)) or np.any(y <= 0.0):
        raise TheoryDomainError("rate fit needs finite positive risks")
    if np.any(x <= 0.0):
        raise TheoryDomainError("rate fit needs positive horizons")

    res = linregress(np.log(x), np.log(y))
    return RateFit(slope=float(res.slope), intercept=float(res.intercept), r2=float(res.rvalue) ** 2)


@dataclass(frozen=True)
class RatePrediction:
    gamma_star: float
    predicted_exponent: float
    k_star: int
    regime: str


def rate_prediction(spec: ProblemSpec, eta: float, n_steps: int) -> RatePrediction:
    a = float(spec.capacity)
    b = float(spec.source)
    g = gamma_star(a, b)
    return RatePrediction(
        gamma_star=g,
        predicted_exponent=predicted_rate(a, b),
        k_star=k_star(spec, eta, g, n_steps),
        regime=regime(a, b),
    )


def mvt_sandwich_holds(alpha, i, j) -> np.ndarray:
    """(1−α) i^{−α}(i−j) ≤ i^{1−α} − j^{1−α} ≤ j^{−α}(i−j) for α ∈ (0, 1], 1 ≤ j ≤ i."""
    alpha = np.asarray(alpha, dtype=np.float64)
    i = np.asarray(i, dtype=np.float64)
    j = np.asarray(j, dtype=np.float64)
    if np.any((alpha <= 0.0) | (alpha > 1.0)):
        raise TheoryDomainError("alpha must be in (0, 1]")
    if np.any((j < 1.0) | (i < j)):
        raise TheoryDomainError("need 1 <= j <= i")

    power = 1.0 - alpha
    middle = j**power * np.expm1(power * np.log(i / j))
    lower = power * i ** (-alpha) * (i - j)
    upper = j ** (-alpha) * (i - j)
    slack = 1e-12 * np.maximum(1.0, upper)
    return (lower <= middle + slack) & (middle <= upper + slack)
