from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Any

import numpy as np


CONSTANT = "constant"
POLY_DECAY = "poly_decay"
SQRT_ALPHA = "sqrt_alpha"
COSINE = "cosine"
WSD = "wsd"
LINEAR_DECAY = "linear_decay"
EXPLICIT = "explicit"

SCHEDULE_KINDS = (CONSTANT, POLY_DECAY, SQRT_ALPHA, COSINE, WSD, LINEAR_DECAY, EXPLICIT)
HORIZON_KINDS = frozenset({COSINE, WSD, LINEAR_DECAY, EXPLICIT})

# keys allowed per kind in the run-config document, besides "kind" and "base_lr"/"lr_frac"
_PARAM_KEYS: dict[str, tuple[str, ...]] = {
    CONSTANT: (),
    POLY_DECAY: ("gamma",),
    SQRT_ALPHA: ("alpha",),
    COSINE: ("horizon", "warmup_frac", "floor_frac"),
    WSD: ("horizon", "decay_start_frac", "floor_frac"),
    LINEAR_DECAY: ("horizon", "floor_frac"),
    EXPLICIT: ("table",),
}

_CHUNK = 1 << 20


class ScheduleError(ValueError):
    pass


@dataclass(frozen=True)
class Schedule:
    kind: str
    base_lr: float
    gamma: float | None = None
    alpha: float | None = None
    horizon: int | None = None
    warmup_frac: float = 0.0
    floor_frac: float = 0.0
    decay_start_frac: float | None = None
    table: tuple[float, ...] | None = field(default=None, repr=False)

    def __post_init__(self) -> None:
        if self.kind == EXPLICIT and self.table is not None and self.horizon is None:
            object.__setattr__(self, "horizon", len(self.table))
        validate_schedule(self)

    @property
    def horizon_dependent(self) -> bool:
        return self.kind in HORIZON_KINDS

    @property
    def shape_param(self) -> float:
        if self.kind == POLY_DECAY:
            return float(self.gamma or 0.0)
        if self.kind == SQRT_ALPHA:
            return float(self.alpha or 0.0)
        return 0.0

    @property
    def label(self) -> str:
        lr = f"lr{self.base_lr:.6g}"
        if self.kind == POLY_DECAY:
            return f"poly_g{self.gamma:g}_{lr}"
        if self.kind == SQRT_ALPHA:
            return f"sqrt_a{self.alpha:g}_{lr}"
        if self.kind == COSINE:
            return f"cosine_T{self.horizon}_w{self.warmup_frac:g}_f{self.floor_frac:g}_{lr}"
        if self.kind == WSD:
            return f"wsd_T{self.horizon}_r{self.decay_start_frac:g}_f{self.floor_frac:g}_{lr}"
        if self.kind == LINEAR_DECAY:
            return f"linear_T{self.horizon}_f{self.floor_frac:g}_{lr}"
        if self.kind == EXPLICIT:
            return f"explicit_T{self.horizon}_{lr}"
        return f"constant_{lr}"


def _check_unit(value: float | None, key: str, *, lo_open: bool, hi_open: bool) -> None:
    lo = "(" if lo_open else "["
    hi = ")" if hi_open else "]"
    if value is None:
        raise ScheduleError(f"schedule.{key} is required")
    v = float(value)
    ok_lo = v > 0.0 if lo_open else v >= 0.0
    ok_hi = v < 1.0 if hi_open else v <= 1.0
    if not (math.isfinite(v) and ok_lo and ok_hi):
        raise ScheduleError(f"schedule.{key} must be in {lo}0, 1{hi} (got {v})")


def validate_schedule(sched: Schedule) -> None:
    if sched.kind not in SCHEDULE_KINDS:
        raise ScheduleError(f"schedule.kind must be one of {', '.join(SCHEDULE_KINDS)} (got {sched.kind!r})")

    base_lr = float(sched.base_lr)
    if not math.isfinite(base_lr) or base_lr <= 0.0:
        raise ScheduleError(f"schedule.base_lr must be > 0 (got {base_lr})")

    if sched.kind == POLY_DECAY:
        _check_unit(sched.gamma, "gamma", lo_open=True, hi_open=True)
    elif sched.kind == SQRT_ALPHA:
        if sched.alpha is None or not math.isfinite(float(sched.alpha)) or float(sched.alpha) <= 0.0:
            raise ScheduleError(f"schedule.alpha must be > 0 (got {sched.alpha})")

    if sched.kind in HORIZON_KINDS:
        if sched.horizon is None or isinstance(sched.horizon, bool) or int(sched.horizon) != sched.horizon:
            raise ScheduleError(f"schedule.horizon must be an integer for kind={sched.kind}")
        if int(sched.horizon) < 1:
            raise ScheduleError(f"schedule.horizon must be >= 1 (got {sched.horizon})")

    if sched.kind == COSINE:
        _check_unit(sched.warmup_frac, "warmup_frac", lo_open=False, hi_open=True)
    if sched.kind in (COSINE, WSD, LINEAR_DECAY):
        _check_unit(sched.floor_frac, "floor_frac", lo_open=False, hi_open=False)
    if sched.kind == WSD:
        _check_unit(sched.decay_start_frac, "decay_start_frac", lo_open=True, hi_open=True)

    if sched.kind == EXPLICIT:
        if not sched.table:
            raise ScheduleError("schedule.table must be a non-empty list of step sizes")
        values = np.asarray(sched.table, dtype=np.float64)
        if not np.all(np.isfinite(values)) or np.any(values < 0.0):
            raise ScheduleError("schedule.table entries must be finite and >= 0")
        if len(sched.table) != sched.horizon:
            raise ScheduleError("schedule.horizon must equal len(schedule.table)")


def _check_steps(sched: Schedule, steps: np.ndarray) -> None:
    if steps.size == 0:
        return
    lo = int(steps.min())
    if lo < 1:
        raise ScheduleError(f"step t={lo} is invalid; steps are 1-indexed")
    if sched.horizon_dependent:
        hi = int(steps.max())
        if hi > int(sched.horizon):
            raise ScheduleError(
                f"step t={hi} exceeds horizon T={sched.horizon} of non-anytime schedule kind={sched.kind}"
            )


def wsd_decay_start(sched: Schedule) -> float:
    # rounded so ρT lands on the integer step it names
    return round(float(sched.decay_start_frac) * int(sched.horizon), 9)


def lr_values(sched: Schedule, steps: np.ndarray) -> np.ndarray:
    t = np.asarray(steps, dtype=np.int64)
    _check_steps(sched, t)
    tf = t.astype(np.float64)
    eta = float(sched.base_lr)
    kind = sched.kind

    if kind == CONSTANT:
        return np.full(tf.shape, eta)

    if kind == POLY_DECAY:
        return eta * tf ** (-float(sched.gamma))

    if kind == SQRT_ALPHA:
        alpha = float(sched.alpha)
        return eta * np.sqrt(alpha / (tf + alpha))

    if kind == LINEAR_DECAY:
        floor = float(sched.floor_frac)
        return eta * np.maximum(floor, 1.0 - tf / float(sched.horizon) * (1.0 - floor))

    if kind == COSINE:
        horizon = float(sched.horizon)
        floor = float(sched.floor_frac)
        warm_end = float(sched.warmup_frac) * horizon
        span = max(horizon - warm_end, 1e-12)
        progress = np.clip((tf - warm_end) / span, 0.0, 1.0)
        out = eta * (floor + (1.0 - floor) * 0.5 * (1.0 + np.cos(np.pi * progress)))
        if warm_end > 0.0:
            warm = tf <= warm_end
            out = np.where(warm, eta * tf / warm_end, out)
        return out

    if kind == WSD:
        horizon = float(sched.horizon)
        floor = float(sched.floor_frac)
        t0 = wsd_decay_start(sched)
        span = max(horizon - t0, 1e-12)
        decay = eta * (1.0 - (1.0 - floor) * (tf - t0) / span)
        return np.where(tf <= t0, eta, decay)

    if kind == EXPLICIT:
        table = np.asarray(sched.table, dtype=np.float64)
        return table[t - 1]

    raise ScheduleError(f"unsupported schedule kind {kind!r}")


def lr_at(sched: Schedule, t: int) -> float:
    return float(lr_values(sched, np.array([int(t)], dtype=np.int64))[0])


def cumulative_lr(sched: Schedule, t_from: int, t_to: int) -> float:
    """Exact Σ_{s=t_from}^{t_to} η_s.

    Each chunk is summed pairwise by numpy, the chunk totals with math.fsum.
    """
    t_from = int(t_from)
    t_to = int(t_to)
    if t_from < 1:
        raise ScheduleError(f"cumulative_lr t_from={t_from} must be >= 1")
    if t_to < t_from:
        raise ScheduleError(f"cumulative_lr range inverted: t_from={t_from} > t_to={t_to}")

    partials: list[float] = []
    start = t_from
    while start <= t_to:
        stop = min(t_to, start + _CHUNK - 1)
        partials.append(float(np.sum(lr_values(sched, np.arange(start, stop + 1, dtype=np.int64)))))
        start = stop + 1
    return math.fsum(partials)


def derived_equivalent_schedule(eta: float, n_steps: int) -> Schedule:
    """Step-size table whose last iterate reproduces the averaged constant-η run.

    ã_k = (1 − (1−η)^{N−k})/N are the sample weights of the average of
    w_0 … w_{N−1} under constant η. The table is η_t = ã_t / (1 − Σ_{k>t} ã_k),
    so that η_k ∏_{s>k}(1 − η_s) = ã_k for every k.
    """
    eta = float(eta)
    n_steps = int(n_steps)
    if not (0.0 < eta < 1.0):
        raise ScheduleError(f"derived schedule eta must be in (0, 1) (got {eta})")
    if n_steps < 1:
        raise ScheduleError(f"derived schedule N must be >= 1 (got {n_steps})")

    k = np.arange(1, n_steps + 1, dtype=np.float64)
    weights = -np.expm1((n_steps - k) * math.log1p(-eta)) / n_steps

    # suffix[t-1] = Σ_{k>t} ã_k
    suffix = np.concatenate([np.cumsum(weights[::-1])[::-1][1:], [0.0]])
    denom = 1.0 - suffix
    bad = np.flatnonzero(denom <= 0.0)
    if bad.size:
        t = int(bad[0]) + 1
        raise AssertionError(f"derived schedule denominator <= 0 at t={t} (N={n_steps}, eta={eta})")

    table = weights / denom
    return Schedule(kind=EXPLICIT, base_lr=eta, table=tuple(float(x) for x in table))


def with_base_lr(sched: Schedule, base_lr: float) -> Schedule:
    return replace(sched, base_lr=float(base_lr))


def with_horizon(sched: Schedule, horizon: int) -> Schedule:
    if not sched.horizon_dependent:
        return sched
    if sched.kind == EXPLICIT:
        raise ScheduleError("explicit schedules have a fixed horizon")
    return replace(sched, horizon=int(horizon))


def schedule_to_dict(sched: Schedule) -> dict[str, Any]:
    data: dict[str, Any] = {"kind": sched.kind, "base_lr": float(sched.base_lr)}
    for key in _PARAM_KEYS[sched.kind]:
        value = getattr(sched, key)
        if key == "table":
            data[key] = [float(x) for x in value]
        elif value is not None:
            data[key] = value
    return data


def schedule_from_dict(data: dict[str, Any], *, ctx: str = "schedule", base_lr: float | None = None) -> Schedule:
    if not isinstance(data, dict):
        raise ScheduleError(f"{ctx} must be an object")
    kind = data.get("kind")
    if kind not in SCHEDULE_KINDS:
        raise ScheduleError(f"{ctx}.kind must be one of {', '.join(SCHEDULE_KINDS)} (got {kind!r})")

    allowed = {"kind", "base_lr", "lr_frac", *_PARAM_KEYS[kind]}
    unknown = sorted(set(data) - allowed)
    if unknown:
        raise ScheduleError(f"{ctx} has unknown keys: {', '.join(unknown)}")

    lr = base_lr if base_lr is not None else data.get("base_lr")
    if lr is None:
        raise ScheduleError(f"{ctx}.base_lr is required")

    kwargs: dict[str, Any] = {}
    try:
        for key in _PARAM_KEYS[kind]:
            if key not in data or data[key] is None:
                continue
            if key == "horizon":
                kwargs[key] = float(data[key])
            elif key == "table":
                kwargs[key] = tuple(float(x) for x in data[key])
            else:
                kwargs[key] = float(data[key])
        lr = float(lr)
    except (TypeError, ValueError) as exc:
        raise ScheduleError(f"{ctx} has a non-numeric parameter: {exc}") from None

    if "horizon" in kwargs:
        horizon = kwargs["horizon"]
        if isinstance(data["horizon"], bool) or not horizon.is_integer():
            raise ScheduleError(f"{ctx}.horizon must be an integer (got {data['horizon']!r})")
        kwargs["horizon"] = int(horizon)

    try:
        return Schedule(kind=kind, base_lr=lr, **kwargs)
    except ScheduleError as exc:
        raise ScheduleError(str(exc).replace("schedule.", f"{ctx}.", 1)) from None
