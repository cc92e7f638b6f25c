import hashlib
import json
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Any

from PyAnytimeLab.core.averaging import AveragingConfig, AveragingError, averaging_from_dict
from PyAnytimeLab.core.envelope import MIN_MEAN, SELECTION_RULES
from PyAnytimeLab.core.problem import ProblemSpec, ProblemValidationError, build_spectrum
from PyAnytimeLab.core.schedule import (
    CONSTANT,
    HORIZON_KINDS,
    POLY_DECAY,
    SQRT_ALPHA,
    WSD,
    Schedule,
    ScheduleError,
    schedule_from_dict,
)


SCHEMA_VERSION = 1

_TOP_KEYS = {
    "schema_version",
    "name",
    "problem",
    "steps",
    "checkpoints",
    "schedules",
    "averaging",
    "start_at_optimum",
    "seed",
    "jobs",
    "envelope",
    "rates",
    "validate",
}
_PROBLEM_KEYS = {"dimension", "capacity", "source", "noise_var", "lambda_scale", "signal_scale", "grid"}
_ENVELOPE_KEYS = {"horizons", "lr_fracs", "floor_fracs", "warmup_frac", "families", "rule", "clip_to_stability"}
_FAMILY_KEYS = {
    CONSTANT: set(),
    POLY_DECAY: {"gamma"},
    SQRT_ALPHA: {"alpha"},
    WSD: {"decay_fracs", "floor_frac"},
}
_RATES_KEYS = {"horizons", "exclude_smallest", "tolerance", "lr_frac", "cases"}
_CASE_KEYS = {"capacity", "source", "schedule", "tolerance", "decay_start_frac"}
RATE_SCHEDULES = ("optimal_poly", "constant", "wsd")
_VALIDATE_KEYS = {"seeds", "sigma_level", "recursion_noise_scale"}


class RunConfigError(ValueError):
    pass


def _require_int(obj: dict[str, Any], key: str, *, ctx: str, minimum: int | None = None) -> int:
    value = obj.get(key)
    if value is None:
        raise RunConfigError(f"{ctx}.{key} is required")
    if isinstance(value, bool) or (isinstance(value, float) and not value.is_integer()):
        raise RunConfigError(f"{ctx}.{key} must be an integer")
    try:
        out = int(value)
    except Exception:
        raise RunConfigError(f"{ctx}.{key} must be an integer")
    if minimum is not None and out < minimum:
        raise RunConfigError(f"{ctx}.{key} must be >= {minimum} (got {out})")
    return out


def _optional_int(obj: dict[str, Any], key: str, default: int, *, ctx: str, minimum: int | None = None) -> int:
    if key not in obj or obj.get(key) is None:
        return default
    return _require_int(obj, key, ctx=ctx, minimum=minimum)


def _optional_float(obj: dict[str, Any], key: str, default: float, *, ctx: str) -> float:
    if key not in obj or obj.get(key) is None:
        return default
    value = obj.get(key)
    if isinstance(value, bool):
        raise RunConfigError(f"{ctx}.{key} must be a number")
    try:
        return float(value)
    except Exception:
        raise RunConfigError(f"{ctx}.{key} must be a number")


def _optional_bool(obj: dict[str, Any], key: str, default: bool, *, ctx: str) -> bool:
    value = obj.get(key, default)
    if not isinstance(value, bool):
        raise RunConfigError(f"{ctx}.{key} must be true or false")
    return value


def _require_object(value: Any, *, ctx: str) -> dict[str, Any]:
    if not isinstance(value, dict):
        raise RunConfigError(f"{ctx} must be an object")
    return value


def _reject_unknown(obj: dict[str, Any], allowed: set[str], *, ctx: str) -> None:
    unknown = sorted(set(obj) - allowed)
    if unknown:
        raise RunConfigError(f"{ctx} has unknown keys: {', '.join(unknown)}")


def _number_list(value: Any, *, ctx: str, integer: bool = False, increasing: bool = False) -> tuple:
    if not isinstance(value, list) or not value:
        raise RunConfigError(f"{ctx} must be a non-empty list")
    out = []
    for i, item in enumerate(value):
        if isinstance(item, bool) or not isinstance(item, (int, float)):
            raise RunConfigError(f"{ctx}[{i}] must be a number")
        if integer:
            if isinstance(item, float) and not item.is_integer():
                raise RunConfigError(f"{ctx}[{i}] must be an integer")
            out.append(int(item))
        else:
            out.append(float(item))
    if increasing:
        for i in range(1, len(out)):
            if out[i] <= out[i - 1]:
                raise RunConfigError(f"{ctx} must be strictly increasing (got {out[i - 1]} then {out[i]})")
    return tuple(out)


@dataclass(frozen=True)
class EnvelopeSettings:
    horizons: tuple[int, ...]
    lr_fracs: tuple[float, ...]
    floor_fracs: tuple[float, ...] = (0.0,)
    warmup_frac: float = 0.0
    families: tuple[dict, ...] = ({"kind": CONSTANT},)
    rule: str = MIN_MEAN
    clip_to_stability: bool = True


@dataclass(frozen=True)
class RateCase:
    capacity: float
    source: float
    schedule: str = "optimal_poly"
    tolerance: float = 0.1
    decay_start_frac: float = 0.5


@dataclass(frozen=True)
class RatesSettings:
    horizons: tuple[int, ...]
    cases: tuple[RateCase, ...]
    exclude_smallest: int = 1
    lr_frac: float = 0.5


@dataclass(frozen=True)
class ValidateSettings:
    seeds: int = 200
    sigma_level: float = 3.0
    # test hook: scales σ² seen by the recursion only; 1.0 leaves it intact
    recursion_noise_scale: float = 1.0


@dataclass(frozen=True)
class RunConfig:
    name: str
    problem: ProblemSpec
    grid: tuple[tuple[float, float], ...]
    steps: int
    checkpoints: tuple[int, ...]
    schedules: tuple[dict, ...]
    averaging: tuple[AveragingConfig, ...]
    start_at_optimum: bool
    seed: int
    jobs: int | None
    envelope: EnvelopeSettings | None
    rates: RatesSettings | None
    validate: ValidateSettings
    document: dict

    def instances(self) -> list[ProblemSpec]:
        if not self.grid:
            return [self.problem]
        return [replace(self.problem, capacity=a, source=b) for a, b in self.grid]

    def schedules_for(self, spec: ProblemSpec, horizon: int | None = None) -> list[Schedule]:
        inv_trace = 1.0 / build_spectrum(spec).trace_h
        out = []
        for i, doc in enumerate(self.schedules):
            out.append(_build_schedule(doc, inv_trace, max(1, horizon or self.steps), ctx=f"run.schedules[{i}]"))
        return out

    @property
    def config_hash(self) -> str:
        return config_hash(self.document)


def config_hash(document: dict[str, Any]) -> str:
    canonical = json.dumps(document, sort_keys=True, separators=(",", ":"), ensure_ascii=False)
    return hashlib.sha256(canonical.encode("utf-8")).hexdigest()


def _build_schedule(doc: dict[str, Any], inv_trace: float, default_horizon: int, *, ctx: str) -> Schedule:
    data = dict(doc)
    has_abs = data.get("base_lr") is not None
    has_frac = data.get("lr_frac") is not None
    if has_abs == has_frac:
        raise RunConfigError(f"{ctx} needs exactly one of base_lr or lr_frac")
    base_lr = None
    if has_frac:
        try:
            frac = float(data["lr_frac"])
        except (TypeError, ValueError):
            raise RunConfigError(f"{ctx}.lr_frac must be a number") from None
        if not frac > 0.0:
            raise RunConfigError(f"{ctx}.lr_frac must be > 0 (got {frac})")
        base_lr = frac * inv_trace
    if data.get("kind") in HORIZON_KINDS and data.get("kind") != "explicit" and data.get("horizon") is None:
        data["horizon"] = default_horizon
    try:
        return schedule_from_dict(data, ctx=ctx, base_lr=base_lr)
    except ScheduleError as exc:
        raise RunConfigError(str(exc)) from None


def _parse_problem(doc: Any) -> tuple[ProblemSpec, tuple[tuple[float, float], ...]]:
    ctx = "run.problem"
    obj = _require_object(doc, ctx=ctx)
    _reject_unknown(obj, _PROBLEM_KEYS, ctx=ctx)
    try:
        spec = ProblemSpec(
            dimension=_require_int(obj, "dimension", ctx=ctx),
            capacity=_optional_float(obj, "capacity", float("nan"), ctx=ctx),
            source=_optional_float(obj, "source", float("nan"), ctx=ctx),
            noise_var=_optional_float(obj, "noise_var", 0.0, ctx=ctx),
            lambda_scale=_optional_float(obj, "lambda_scale", 1.0, ctx=ctx),
            signal_scale=_optional_float(obj, "signal_scale", 1.0, ctx=ctx),
        )
    except ProblemValidationError as exc:
        raise RunConfigError(f"run.{exc}") from None

    grid: list[tuple[float, float]] = []
    raw_grid = obj.get("grid")
    if raw_grid is not None:
        if not isinstance(raw_grid, list) or not raw_grid:
            raise RunConfigError(f"{ctx}.grid must be a non-empty list")
        for i, item in enumerate(raw_grid):
            item_ctx = f"{ctx}.grid[{i}]"
            cell = _require_object(item, ctx=item_ctx)
            _reject_unknown(cell, {"capacity", "source"}, ctx=item_ctx)
            a = _optional_float(cell, "capacity", float("nan"), ctx=item_ctx)
            b = _optional_float(cell, "source", float("nan"), ctx=item_ctx)
            try:
                replace(spec, capacity=a, source=b)
            except ProblemValidationError as exc:
                raise RunConfigError(f"{item_ctx}: {exc}") from None
            grid.append((a, b))
    return spec, tuple(grid)


def _parse_envelope(doc: Any) -> EnvelopeSettings:
    ctx = "run.envelope"
    obj = _require_object(doc, ctx=ctx)
    _reject_unknown(obj, _ENVELOPE_KEYS, ctx=ctx)
    horizons = _number_list(obj.get("horizons"), ctx=f"{ctx}.horizons", integer=True, increasing=True)
    if horizons[0] < 2:
        raise RunConfigError(f"{ctx}.horizons must be >= 2 (got {horizons[0]})")
    lr_fracs = _number_list(obj.get("lr_fracs"), ctx=f"{ctx}.lr_fracs")
    if min(lr_fracs) <= 0.0:
        raise RunConfigError(f"{ctx}.lr_fracs must be > 0")
    floors = _number_list(obj.get("floor_fracs", [0.0]), ctx=f"{ctx}.floor_fracs")
    if any(not (0.0 <= f <= 1.0) for f in floors):
        raise RunConfigError(f"{ctx}.floor_fracs must be in [0, 1]")
    warmup = _optional_float(obj, "warmup_frac", 0.0, ctx=ctx)
    if not (0.0 <= warmup < 1.0):
        raise RunConfigError(f"{ctx}.warmup_frac must be in [0, 1) (got {warmup})")
    rule = obj.get("rule", MIN_MEAN)
    if rule not in SELECTION_RULES:
        raise RunConfigError(f"{ctx}.rule must be one of {', '.join(SELECTION_RULES)} (got {rule!r})")

    families = obj.get("families", [{"kind": CONSTANT}])
    if not isinstance(families, list) or not families:
        raise RunConfigError(f"{ctx}.families must be a non-empty list")
    for i, fam in enumerate(families):
        fam_ctx = f"{ctx}.families[{i}]"
        fam = _require_object(fam, ctx=fam_ctx)
        kind = fam.get("kind")
        if kind not in _FAMILY_KEYS:
            raise RunConfigError(f"{fam_ctx}.kind must be one of {', '.join(_FAMILY_KEYS)} (got {kind!r})")
        _reject_unknown(fam, {"kind", *_FAMILY_KEYS[kind]}, ctx=fam_ctx)
        if kind == POLY_DECAY:
            gammas = _number_list(fam.get("gamma"), ctx=f"{fam_ctx}.gamma")
            if any(not (0.0 < g < 1.0) for g in gammas):
                raise RunConfigError(f"{fam_ctx}.gamma must be in (0, 1)")
        if kind == SQRT_ALPHA:
            alphas = _number_list(fam.get("alpha"), ctx=f"{fam_ctx}.alpha")
            if any(a <= 0.0 for a in alphas):
                raise RunConfigError(f"{fam_ctx}.alpha must be > 0")
        if kind == WSD:
            fracs = _number_list(fam.get("decay_fracs"), ctx=f"{fam_ctx}.decay_fracs")
            if any(not (0.0 < p < 1.0) for p in fracs):
                raise RunConfigError(f"{fam_ctx}.decay_fracs must be in (0, 1)")
            floor = _optional_float(fam, "floor_frac", 0.0, ctx=fam_ctx)
            if not (0.0 <= floor <= 1.0):
                raise RunConfigError(f"{fam_ctx}.floor_frac must be in [0, 1] (got {floor})")

    return EnvelopeSettings(
        horizons=horizons,
        lr_fracs=lr_fracs,
        floor_fracs=floors,
        warmup_frac=warmup,
        families=tuple(families),
        rule=rule,
        clip_to_stability=_optional_bool(obj, "clip_to_stability", True, ctx=ctx),
    )


def _parse_rates(doc: Any, problem: ProblemSpec) -> RatesSettings:
    ctx = "run.rates"
    obj = _require_object(doc, ctx=ctx)
    _reject_unknown(obj, _RATES_KEYS, ctx=ctx)
    horizons = _number_list(obj.get("horizons"), ctx=f"{ctx}.horizons", integer=True, increasing=True)
    if horizons[0] < 2:
        raise RunConfigError(f"{ctx}.horizons must be >= 2 (got {horizons[0]})")
    exclude = _optional_int(obj, "exclude_smallest", 1, ctx=ctx, minimum=0)
    if len(horizons) - exclude < 4:
        raise RunConfigError(f"{ctx}.horizons must leave at least 4 points after exclude_smallest={exclude}")
    tolerance = _optional_float(obj, "tolerance", 0.1, ctx=ctx)
    lr_frac = _optional_float(obj, "lr_frac", 0.5, ctx=ctx)
    if not lr_frac > 0.0:
        raise RunConfigError(f"{ctx}.lr_frac must be > 0 (got {lr_frac})")

    raw_cases = obj.get("cases")
    if not isinstance(raw_cases, list) or not raw_cases:
        raise RunConfigError(f"{ctx}.cases must be a non-empty list")
    cases = []
    for i, item in enumerate(raw_cases):
        case_ctx = f"{ctx}.cases[{i}]"
        case = _require_object(item, ctx=case_ctx)
        _reject_unknown(case, _CASE_KEYS, ctx=case_ctx)
        a = _optional_float(case, "capacity", problem.capacity, ctx=case_ctx)
        b = _optional_float(case, "source", problem.source, ctx=case_ctx)
        try:
            replace(problem, capacity=a, source=b)
        except ProblemValidationError as exc:
            raise RunConfigError(f"{case_ctx}: {exc}") from None
        kind = case.get("schedule", "optimal_poly")
        if kind not in RATE_SCHEDULES:
            raise RunConfigError(f"{case_ctx}.schedule must be one of {', '.join(RATE_SCHEDULES)} (got {kind!r})")
        if kind == "wsd" and not (1.0 < a < 2.0):
            raise RunConfigError(f"{case_ctx}.capacity must be in (1, 2) for the wsd rate (got {a})")
        rho = _optional_float(case, "decay_start_frac", 0.5, ctx=case_ctx)
        if not (0.0 < rho < 1.0):
            raise RunConfigError(f"{case_ctx}.decay_start_frac must be in (0, 1) (got {rho})")
        cases.append(
            RateCase(
                capacity=a,
                source=b,
                schedule=kind,
                tolerance=_optional_float(case, "tolerance", tolerance, ctx=case_ctx),
                decay_start_frac=rho,
            )
        )
    return RatesSettings(horizons=horizons, cases=tuple(cases), exclude_smallest=exclude, lr_frac=lr_frac)


def _parse_validate(doc: Any) -> ValidateSettings:
    ctx = "run.validate"
    if doc is None:
        return ValidateSettings()
    obj = _require_object(doc, ctx=ctx)
    _reject_unknown(obj, _VALIDATE_KEYS, ctx=ctx)
    level = _optional_float(obj, "sigma_level", 3.0, ctx=ctx)
    if not level > 0.0:
        raise RunConfigError(f"{ctx}.sigma_level must be > 0 (got {level})")
    scale = _optional_float(obj, "recursion_noise_scale", 1.0, ctx=ctx)
    if scale < 0.0:
        raise RunConfigError(f"{ctx}.recursion_noise_scale must be >= 0 (got {scale})")
    return ValidateSettings(
        seeds=_optional_int(obj, "seeds", 200, ctx=ctx, minimum=2),
        sigma_level=level,
        recursion_noise_scale=scale,
    )


def parse_run_config(document: Any) -> RunConfig:
    """Validate a run-config document; a run manifest is accepted and its `config` used."""
    if isinstance(document, dict) and "manifest_version" in document:
        document = document.get("config")
    doc = _require_object(document, ctx="run")
    if doc.get("schema_version") != SCHEMA_VERSION:
        raise RunConfigError(f"run.schema_version must be {SCHEMA_VERSION}")
    _reject_unknown(doc, _TOP_KEYS, ctx="run")

    name = doc.get("name", "run")
    if not isinstance(name, str) or not name.strip():
        raise RunConfigError("run.name must be a non-empty string")

    problem, grid = _parse_problem(doc.get("problem"))
    steps = _require_int(doc, "steps", ctx="run", minimum=0)

    if doc.get("checkpoints") is None:
        checkpoints: tuple[int, ...] = (steps,) if steps > 0 else ()
    else:
        checkpoints = _number_list(doc["checkpoints"], ctx="run.checkpoints", integer=True, increasing=True)
        if checkpoints[0] < 0 or checkpoints[-1] > steps:
            raise RunConfigError(f"run.checkpoints must lie in [0, {steps}]")

    raw_schedules = doc.get("schedules", [])
    if not isinstance(raw_schedules, list):
        raise RunConfigError("run.schedules must be a list")
    schedules = []
    for i, item in enumerate(raw_schedules):
        sched_doc = _require_object(item, ctx=f"run.schedules[{i}]")
        # parameters are checked now with Tr(H) of the base problem
        _build_schedule(sched_doc, 1.0, max(1, steps), ctx=f"run.schedules[{i}]")
        kind = sched_doc.get("kind")
        if kind in HORIZON_KINDS and sched_doc.get("horizon") is not None and int(sched_doc["horizon"]) < steps:
            raise RunConfigError(f"run.schedules[{i}].horizon must be >= run.steps ({steps}) for kind={kind}")
        if kind == "explicit" and len(sched_doc["table"]) < steps:
            raise RunConfigError(
                f"run.schedules[{i}].table has {len(sched_doc['table'])} entries; it must cover run.steps ({steps})"
            )
        schedules.append(dict(sched_doc))

    raw_avg = doc.get("averaging", [])
    if not isinstance(raw_avg, list):
        raise RunConfigError("run.averaging must be a list")
    averaging = []
    for i, item in enumerate(raw_avg):
        try:
            averaging.append(averaging_from_dict(item, ctx=f"run.averaging[{i}]"))
        except AveragingError as exc:
            raise RunConfigError(str(exc)) from None

    jobs = doc.get("jobs")
    if jobs is not None:
        jobs = _require_int(doc, "jobs", ctx="run", minimum=1)

    return RunConfig(
        name=name.strip(),
        problem=problem,
        grid=grid,
        steps=steps,
        checkpoints=checkpoints,
        schedules=tuple(schedules),
        averaging=tuple(averaging),
        start_at_optimum=_optional_bool(doc, "start_at_optimum", False, ctx="run"),
        seed=_optional_int(doc, "seed", 0, ctx="run", minimum=0),
        jobs=jobs,
        envelope=_parse_envelope(doc["envelope"]) if doc.get("envelope") is not None else None,
        rates=_parse_rates(doc["rates"], problem) if doc.get("rates") is not None else None,
        validate=_parse_validate(doc.get("validate")),
        document=doc,
    )


def load_run_config(path: Path) -> RunConfig:
    try:
        data = json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise RunConfigError(f"{path.name}: invalid JSON at line {exc.lineno} column {exc.colno}") from None
    return parse_run_config(data)


def save_run_config(path: Path, document: dict[str, Any]) -> None:
    parse_run_config(document)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(document, indent=2), encoding="utf-8")
