import logging
import math
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from PyAnytimeLab.core.outputs import write_table


log = logging.getLogger(__name__)


class ProblemValidationError(ValueError):
    pass


@dataclass(frozen=True)
class ProblemSpec:
    """Diagonal linear-regression instance with power-law spectrum and signal.

    `capacity` is the eigenvalue decay exponent a, `source` the signal decay
    exponent b. Both must exceed 1 so the tail sums converge.
    """

    dimension: int
    capacity: float
    source: float
    noise_var: float = 0.0
    lambda_scale: float = 1.0
    signal_scale: float = 1.0

    def __post_init__(self) -> None:
        validate_problem(self)


@dataclass(frozen=True)
class Spectrum:
    eigenvalues: np.ndarray
    signal: np.ndarray
    m0: np.ndarray
    trace_h: float

    @property
    def dimension(self) -> int:
        return int(self.eigenvalues.shape[0])

    @property
    def target(self) -> np.ndarray:
        return np.sqrt(self.m0)


def validate_problem(spec: ProblemSpec) -> None:
    ctx = "problem"
    if isinstance(spec.dimension, bool) or not isinstance(spec.dimension, (int, np.integer)):
        raise ProblemValidationError(f"{ctx}.dimension must be an integer")
    if spec.dimension < 1:
        raise ProblemValidationError(f"{ctx}.dimension must be >= 1 (got {spec.dimension})")
    for key in ("capacity", "source"):
        value = float(getattr(spec, key))
        if not math.isfinite(value) or value <= 1.0:
            raise ProblemValidationError(f"{ctx}.{key} must be > 1 (got {value})")
    noise_var = float(spec.noise_var)
    if not math.isfinite(noise_var) or noise_var < 0.0:
        raise ProblemValidationError(f"{ctx}.noise_var must be >= 0 (got {noise_var})")
    for key in ("lambda_scale", "signal_scale"):
        value = float(getattr(spec, key))
        if not math.isfinite(value) or value <= 0.0:
            raise ProblemValidationError(f"{ctx}.{key} must be > 0 (got {value})")


def build_spectrum(spec: ProblemSpec) -> Spectrum:
    validate_problem(spec)
    index = np.arange(1, spec.dimension + 1, dtype=np.float64)
    eigenvalues = spec.lambda_scale * index ** (-float(spec.capacity))
    signal = spec.signal_scale * index ** (-float(spec.source))
    # (w*_i)^2 = s_i / λ_i, evaluated as one power to keep prefixes bit-stable under d -> 2d
    m0 = (spec.signal_scale / spec.lambda_scale) * index ** (float(spec.capacity) - float(spec.source))

    for arr in (eigenvalues, signal, m0):
        arr.setflags(write=False)

    trace_h = math.fsum(eigenvalues.tolist())
    return Spectrum(eigenvalues=eigenvalues, signal=signal, m0=m0, trace_h=trace_h)


def max_stable_lr(spec: ProblemSpec) -> float:
    return 1.0 / build_spectrum(spec).trace_h


def initial_excess_risk(spectrum: Spectrum) -> float:
    return 0.5 * float(np.sum(spectrum.signal))


def signal_tail(spectrum: Spectrum, k: int) -> float:
    k = max(0, min(int(k), spectrum.dimension))
    return float(np.sum(spectrum.signal[k:]))


def with_exponents(spec: ProblemSpec, capacity: float, source: float) -> ProblemSpec:
    return replace(spec, capacity=float(capacity), source=float(source))


def doubled(spec: ProblemSpec) -> ProblemSpec:
    return replace(spec, dimension=2 * spec.dimension)


def write_spectrum_csv(path: Path, spectrum: Spectrum) -> Path:
    rows = (
        [i + 1, float(spectrum.eigenvalues[i]), float(spectrum.signal[i]), float(spectrum.m0[i])]
        for i in range(spectrum.dimension)
    )
    write_table(path, ["index", "lambda", "signal", "m0"], rows)
    log.debug("spectrum written path=%s d=%d", path, spectrum.dimension)
    return path

