from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Any, Iterable

import numpy as np

from PyAnytimeLab.core.problem import Spectrum
from PyAnytimeLab.core.recursion import advance_moments, weighted_total
from PyAnytimeLab.core.schedule import Schedule, lr_values


NONE = "none"
TAIL_FRACTION = "tail_fraction"
TAIL_FROM_STEP = "tail_from_step"
EMA = "ema"

AVERAGING_KINDS = (NONE, TAIL_FRACTION, TAIL_FROM_STEP, EMA)

AFTER_STEP = "after_step"
BEFORE_STEP = "before_step"
UPDATE_ORDERS = (AFTER_STEP, BEFORE_STEP)

# windows used by the sweep tooling
DEFAULT_TAIL_FRACTIONS = (1.0, 0.5, 0.25, 0.125, 0.0625)
DEFAULT_EMA_FRACTIONS = (0.0, 6.25, 12.5, 25.0, 50.0, 100.0)


class AveragingError(ValueError):
    pass


@dataclass(frozen=True)
class AveragingConfig:
    kind: str = NONE
    value: float = 0.0
    update_order: str = AFTER_STEP

    def __post_init__(self) -> None:
        if self.kind not in AVERAGING_KINDS:
            raise AveragingError(f"averaging.kind must be one of {', '.join(AVERAGING_KINDS)} (got {self.kind!r})")
        if self.update_order not in UPDATE_ORDERS:
            raise AveragingError(f"averaging.update_order must be one of {', '.join(UPDATE_ORDERS)}")
        value = float(self.value)
        if self.kind == TAIL_FRACTION and not (0.0 < value <= 1.0):
            raise AveragingError(f"averaging.value (tail fraction) must be in (0, 1] (got {value})")
        if self.kind == TAIL_FROM_STEP and (value < 1.0 or value != int(value)):
            raise AveragingError(f"averaging.value (start step) must be an integer >= 1 (got {value})")
        if self.kind == EMA and (not math.isfinite(value) or value < 0.0):
            raise AveragingError(f"averaging.value (ema fraction f) must be >= 0 (got {value})")

    @property
    def label(self) -> str:
        if self.kind == TAIL_FRACTION:
            return f"tail{self.value:g}"
        if self.kind == TAIL_FROM_STEP:
            return f"from{int(self.value)}"
        if self.kind == EMA:
            suffix = "" if self.update_order == AFTER_STEP else "_pre"
            return f"ema{self.value:g}{suffix}"
        return "last"

    @property
    def is_last_iterate(self) -> bool:
        return self.kind == NONE or (self.kind == EMA and float(self.value) == 0.0)

    @property
    def is_tail(self) -> bool:
        return self.kind in (TAIL_FRACTION, TAIL_FROM_STEP)

    @property
    def is_ema(self) -> bool:
        return self.kind == EMA and float(self.value) > 0.0


def averaging_to_dict(config: AveragingConfig) -> dict[str, Any]:
    data: dict[str, Any] = {"kind": config.kind}
    if config.kind != NONE:
        data["value"] = float(config.value)
    if config.kind == EMA:
        data["update_order"] = config.update_order
    return data


def averaging_from_dict(data: dict[str, Any], *, ctx: str = "averaging") -> AveragingConfig:
    if not isinstance(data, dict):
        raise AveragingError(f"{ctx} must be an object")
    unknown = sorted(set(data) - {"kind", "value", "update_order"})
    if unknown:
        raise AveragingError(f"{ctx} has unknown keys: {', '.join(unknown)}")
    kind = data.get("kind", NONE)
    try:
        value = float(data.get("value", 0.0))
    except (TypeError, ValueError):
        raise AveragingError(f"{ctx}.value must be a number") from None
    try:
        return AveragingConfig(kind=kind, value=value, update_order=str(data.get("update_order", AFTER_STEP)))
    except AveragingError as exc:
        raise AveragingError(str(exc).replace("averaging.", f"{ctx}.", 1)) from None


def unique_configs(configs: Iterable[AveragingConfig]) -> list[AveragingConfig]:
    seen: dict[str, AveragingConfig] = {}
    for config in configs:
        seen.setdefault(config.label, config)
    return list(seen.values())


@dataclass
class AveragedMoments:
    v: np.ndarray
    c: np.ndarray

    def copy(self) -> "AveragedMoments":
        return AveragedMoments(v=self.v.copy(), c=self.c.copy())


def initial_averaged_moments(m0: np.ndarray) -> AveragedMoments:
    # w̄_0 = w_0
    return AveragedMoments(v=np.array(m0, dtype=np.float64), c=np.array(m0, dtype=np.float64))


def ema_retention(f: float, t: int) -> float:
    f = float(f)
    if not math.isfinite(f) or f < 0.0:
        raise AveragingError(f"ema fraction f must be >= 0 (got {f})")
    if int(t) < 1:
        raise AveragingError(f"ema retention needs t >= 1 (got {t})")
    return 0.5 ** (f / int(t))


def ema_update(
    v: np.ndarray,
    c: np.ndarray,
    m_old: np.ndarray,
    m_new: np.ndarray,
    contraction: np.ndarray,
    rho: float,
    update_order: str = AFTER_STEP,
) -> tuple[np.ndarray, np.ndarray]:
    keep = 1.0 - rho
    if update_order == AFTER_STEP:
        c_prop = contraction * c
        v_new = (rho * rho) * v + (2.0 * rho * keep) * c_prop + (keep * keep) * m_new
        c_new = rho * c_prop + keep * m_new
    else:
        v_new = (rho * rho) * v + (2.0 * rho * keep) * c + (keep * keep) * m_old
        c_new = contraction * (rho * c + keep * m_old)

    low = float(v_new.min()) if v_new.size else 0.0
    if low < -1e-14:
        raise AssertionError(f"averaged second moment went negative ({low:.3e})")
    return v_new, c_new


def step_ema_moments(
    m: np.ndarray,
    v: np.ndarray,
    c: np.ndarray,
    spectrum: Spectrum,
    eta: float,
    noise_var: float,
    rho: float,
    update_order: str = AFTER_STEP,
) -> tuple[np.ndarray, np.ndarray]:
    if not (0.0 <= rho <= 1.0):
        raise AveragingError(f"ema retention must be in [0, 1] (got {rho})")
    lam = spectrum.eigenvalues
    m_new, _r = advance_moments(m, lam, float(eta), float(noise_var))
    return ema_update(v, c, m, m_new, 1.0 - float(eta) * lam, float(rho), update_order)


def window_start(config: AveragingConfig, checkpoint: int) -> int | None:
    if checkpoint < 1:
        return None
    if config.kind == TAIL_FRACTION:
        length = max(1, math.ceil(float(config.value) * checkpoint - 1e-12))
        return checkpoint - min(length, checkpoint) + 1
    if config.kind == TAIL_FROM_STEP:
        start = int(config.value)
        return start if start <= checkpoint else None
    raise AveragingError(f"averaging kind {config.kind!r} has no tail window")


def tail_average_risk(moments: np.ndarray, spectrum: Spectrum, sched: Schedule, start: int) -> float:
    """Exact excess risk of the uniform average of w_start … w_{start+T−1}.

    `moments[i]` holds the diagonal second moments of w_{start+i}. Cross terms
    come from E[(w_j − w*)(w_i − w*)]_k = ∏_{t=i+1}^{j}(1 − η_t λ_k) m_{i,k},
    folded into A_j = (1 − η_j λ) A_{j−1} + m_j.
    """
    moments = np.asarray(moments, dtype=np.float64)
    if moments.ndim != 2 or moments.shape[0] == 0:
        raise AveragingError("tail window must be a non-empty (T, d) array of moments")
    if moments.shape[1] != spectrum.dimension:
        raise AveragingError(f"tail window dimension {moments.shape[1]} does not match spectrum {spectrum.dimension}")
    if int(start) < 1:
        raise AveragingError(f"tail window start must be >= 1 (got {start})")

    length = moments.shape[0]
    lam = spectrum.eigenvalues
    lrs = lr_values(sched, np.arange(int(start), int(start) + length, dtype=np.int64))

    acc = np.zeros_like(lam)
    total_acc = 0.0
    total_m = 0.0
    for j in range(length):
        acc = (1.0 - lrs[j] * lam) * acc + moments[j]
        total_acc += weighted_total(lam, acc)
        total_m += weighted_total(lam, moments[j])
    return 0.5 * (2.0 * total_acc - total_m) / float(length * length)


class _Accumulator:
    __slots__ = ("start", "acc", "total")

    def __init__(self, start: int, m: np.ndarray, r: float) -> None:
        self.start = start
        self.acc = m.copy()
        self.total = r


class TailWindowSet:
    def __init__(self, lam: np.ndarray, configs: Iterable[AveragingConfig], checkpoints: Iterable[int]) -> None:
        self._lam = lam
        self._reads_at: dict[int, list[tuple[str, int]]] = {}
        self._last_use: dict[int, int] = {}
        self._active: dict[int, _Accumulator] = {}
        self._prefix: list[float] = [0.0]
        self.results: dict[tuple[str, int], float] = {}

        for config in configs:
            if not config.is_tail:
                continue
            for c in checkpoints:
                s = window_start(config, int(c))
                if s is None:
                    continue
                self._reads_at.setdefault(int(c), []).append((config.label, s))
                self._last_use[s] = max(self._last_use.get(s, 0), int(c))

    @property
    def empty(self) -> bool:
        return not self._last_use

    def observe(self, t: int, m: np.ndarray, r: float, contraction: np.ndarray) -> None:
        self._prefix.append(self._prefix[-1] + r)
        for acc in self._active.values():
            acc.acc *= contraction
            acc.acc += m
            acc.total += weighted_total(self._lam, acc.acc)
        if t in self._last_use:
            self._active[t] = _Accumulator(t, m, r)

        for label, s in self._reads_at.get(t, ()):
            acc = self._active[s]
            length = t - s + 1
            window_m = self._prefix[t] - self._prefix[s - 1]
            self.results[(label, t)] = 0.5 * (2.0 * acc.total - window_m) / float(length * length)

        for s in [s for s, last in self._last_use.items() if last == t]:
            self._active.pop(s, None)


def average_sample_weights(eta: float, n_steps: int) -> np.ndarray:
    """Sample weights of (1/N) Σ_{t=0}^{N−1} w_t for w_t = (1−η) w_{t−1} + η x_t, w_0 = 0.

    Built by explicit expansion of every iterate, not by the closed form.
    """
    n_steps = int(n_steps)
    weights = np.zeros(n_steps)
    total = np.zeros(n_steps)
    for t in range(1, n_steps):
        weights *= 1.0 - eta
        weights[t - 1] += eta
        total += weights
    return total / n_steps


def last_iterate_sample_weights(lrs: np.ndarray) -> np.ndarray:
    lrs = np.asarray(lrs, dtype=np.float64)
    keep = 1.0 - lrs
    # suffix products ∏_{s>k}(1 − η_s)
    suffix = np.ones_like(lrs)
    if lrs.size > 1:
        suffix[:-1] = np.cumprod(keep[::-1])[::-1][1:]
    return lrs * suffix
