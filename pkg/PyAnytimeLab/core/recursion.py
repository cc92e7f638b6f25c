from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import TYPE_CHECKING

import numpy as np

from PyAnytimeLab.core.problem import Spectrum

if TYPE_CHECKING:
    from PyAnytimeLab.core.averaging import AveragedMoments


class DivergenceError(ArithmeticError):
    def __init__(self, message: str, *, step: int, lr: float) -> None:
        super().__init__(message)
        self.step = int(step)
        self.lr = float(lr)


@dataclass
class MomentState:
    """Per-coordinate second moments after `t` steps.

    `m[k]` is E[(w_t − w*)_k²] in the eigenbasis; `averaged` maps an
    averaging label to its (v, c) pair.
    """

    t: int
    m: np.ndarray
    averaged: dict[str, "AveragedMoments"] = field(default_factory=dict)

    def copy(self) -> "MomentState":
        return MomentState(
            t=self.t,
            m=self.m.copy(),
            averaged={k: v.copy() for k, v in self.averaged.items()},
        )


def initial_state(spectrum: Spectrum, *, start_at_optimum: bool = False) -> MomentState:
    m = np.zeros(spectrum.dimension) if start_at_optimum else np.array(spectrum.m0, dtype=np.float64)
    return MomentState(t=0, m=m)


def weighted_total(weights: np.ndarray, values: np.ndarray) -> float:
    # numpy's pairwise reduction keeps the summation tree fixed for a given length
    return float(np.sum(weights * values))


def advance_moments(m: np.ndarray, lam: np.ndarray, eta: float, noise_var: float) -> tuple[np.ndarray, float]:
    """One exact Gaussian-design step of the diagonal second-moment recursion.

    Returns (m', r) with r = Σ λ_k m_k taken before the step:
    m'_k = (1 − 2ηλ_k + 2η²λ_k²) m_k + η² λ_k (r + σ²).
    """
    lm = lam * m
    r = float(np.sum(lm))
    eta2 = eta * eta
    m_new = m + lm * (2.0 * eta2 * lam - 2.0 * eta) + (eta2 * (r + noise_var)) * lam
    return m_new, r


def step_moments(state: MomentState, spectrum: Spectrum, eta: float, noise_var: float) -> MomentState:
    if state.m.shape != spectrum.eigenvalues.shape:
        raise ValueError(f"moment dimension {state.m.shape} does not match spectrum {spectrum.eigenvalues.shape}")
    if eta < 0.0:
        raise ValueError(f"step size must be >= 0 (got {eta})")

    m_new, _r = advance_moments(state.m, spectrum.eigenvalues, float(eta), float(noise_var))
    if not np.all(np.isfinite(m_new)):
        raise DivergenceError(
            f"second moments became non-finite at step {state.t + 1} (lr={eta:.6g}); the step size is above the stable range",
            step=state.t + 1,
            lr=eta,
        )
    return MomentState(t=state.t + 1, m=m_new, averaged=state.averaged)


def excess_risk(state: MomentState, spectrum: Spectrum) -> float:
    return 0.5 * weighted_total(spectrum.eigenvalues, state.m)


def check_finite(value: float, *, step: int, lr: float) -> None:
    if not math.isfinite(value):
        raise DivergenceError(
            f"excess risk became non-finite at step {step} (lr={lr:.6g}); the step size is above the stable range",
            step=step,
            lr=lr,
        )
