from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from typing import Callable, Iterable, Literal, Sequence

import numpy as np

from .config import IntegratorOptions
from .integrator import Trajectory, integrate, verify_integral_identity
from .problem import HenonSpec, ProblemSpec, monotonicity_bound
from .shooting import GammaScan

logger = logging.getLogger("henon_shooting")

CheckStatus = Literal["pass", "fail", "not_applicable"]

NOT_APPLICABLE_EARLY = "not applicable: trajectory terminated early"
CONCAVITY_SIGN_TOL = 1e-10
CONCAVITY_REL_TOL = 1e-6
TREND_MIN_GAMMA = 1e-2
TREND_MAX_GAMMA = 1e3
TREND_SMALL_R = 0.1
CROSSING_LIMIT = 2
IDENTITY_TOL = 1e-6
NEUMANN_TOL = 1e-6
# 驻点落在 1 之前超过该距离时视为内部驻点
UNIT_SLACK = 1e-6
DEPENDENCE_STEPS: tuple[float, ...] = (1e-3, 1e-4, 1e-5)
DEPENDENCE_RATIO_RANGE = (5.0, 20.0)
DEPENDENCE_EXTENT = 1.25
# 每项检查对应的理论结论，按检查名索引
ANCHORS: dict[str, str] = {
    "crossing_order": "barrier crossing precedes first maximum",
    "stationary_concavity": "strict maximum at first stationary point",
    "gamma_trend": "R above 1 for small gamma, vanishing for large gamma",
    "crossing_count": "at most two barrier crossings below the monotonicity bound",
    "integral_identity": "flux equals integrated source",
    "monotone_unit_interval": "strictly increasing solution on (0,1)",
    "neumann": "zero derivative at r=1",
    "continuous_dependence": "continuous dependence on initial value",
}


@dataclass(frozen=True)
class CheckResult:
    name: str
    status: CheckStatus
    measured: float | None
    tolerance: float | None
    anchor: str
    detail: str = ""

    @property
    def passed(self) -> bool:
        return self.status == "pass"

    def to_record(self) -> dict[str, object]:
        return {
            "name": self.name,
            "status": self.status,
            "measured": self.measured,
            "tolerance": self.tolerance,
            "anchor": self.anchor,
            "detail": self.detail,
        }


@dataclass(frozen=True)
class DiagnosticReport:
    subject: str
    checks: tuple[CheckResult, ...]

    @property
    def all_passed(self) -> bool:
        """所有适用的检查均通过。"""
        return all(check.status != "fail" for check in self.checks)

    def failed(self) -> list[str]:
        return [check.name for check in self.checks if check.status == "fail"]

    def get(self, name: str) -> CheckResult:
        for check in self.checks:
            if check.name == name:
                return check
        raise KeyError(name)

    def to_records(self) -> list[dict[str, object]]:
        return [check.to_record() for check in self.checks]


def _not_applicable(name: str, anchor: str, detail: str) -> CheckResult:
    return CheckResult(name, "not_applicable", None, None, anchor, detail)


def _status(passed: bool) -> CheckStatus:
    return "pass" if passed else "fail"


def _reaches_unit(traj: Trajectory) -> bool:
    return traj.r_end >= 1.0


def check_crossing_order(traj: Trajectory) -> CheckResult:
    """首次障碍穿越 r_γ 严格早于首个驻点 R_γ。"""
    name = "crossing_order"
    anchor = ANCHORS[name]
    stationary = traj.first("stationary")
    if stationary is None:
        return _not_applicable(name, anchor, NOT_APPLICABLE_EARLY)
    crossing = traj.first("barrier_crossing")
    if crossing is None:
        return CheckResult(
            name, "fail", None, 0.0, anchor,
            f"no barrier crossing before stationary point at r={stationary.r:.6g}",
        )
    gap = stationary.r - crossing.r
    passed = math.isfinite(crossing.r) and math.isfinite(stationary.r) and gap > 0
    return CheckResult(
        name,
        _status(passed),
        gap,
        0.0,
        anchor,
        f"r_cross={crossing.r:.12g} R={stationary.r:.12g}",
    )


def concavity_closed_form(spec: ProblemSpec, r: float, u: float) -> float:
    """驻点处 u″ = u − φ(R) f(u)；Hénon 情形为 u(1 − R^α u^{p−1})。"""
    if isinstance(spec, HenonSpec):
        if u <= 0:
            return u
        scaled = math.exp(
            min(spec.alpha * math.log(r) + (spec.p - 1.0) * math.log(u), 700.0)
        )
        return u * (1.0 - scaled)
    return u - spec.forcing(r, u)


def check_stationary_concavity(
    traj: Trajectory,
    spec: ProblemSpec | None = None,
) -> CheckResult:
    name = "stationary_concavity"
    anchor = ANCHORS[name]
    spec = spec or traj.spec
    event = traj.first("stationary")
    if event is None:
        return _not_applicable(name, anchor, NOT_APPLICABLE_EARLY)

    expected = concavity_closed_form(spec, event.r, event.u_value)
    measured = event.second_derivative if event.second_derivative is not None else expected
    if event.degenerate:
        return CheckResult(
            name, "fail", measured, CONCAVITY_SIGN_TOL, anchor,
            f"degenerate stationary point at r={event.r:.12g} (|u''|={abs(measured):.3e})",
        )
    mismatch = abs(measured - expected) / max(abs(expected), CONCAVITY_SIGN_TOL)
    passed = measured < -CONCAVITY_SIGN_TOL and mismatch <= CONCAVITY_REL_TOL
    return CheckResult(
        name,
        _status(passed),
        measured,
        CONCAVITY_SIGN_TOL,
        anchor,
        f"u''={measured:.12g} closed form={expected:.12g} rel mismatch={mismatch:.3e}",
    )


def check_gamma_trend(scan_result: GammaScan) -> CheckResult:
    """小 γ 时 R¹ > 1，大 γ 时 R¹ 趋于 0。"""
    name = "gamma_trend"
    anchor = ANCHORS[name]
    gammas = scan_result.gammas
    if (
        not gammas
        or gammas[0] > TREND_MIN_GAMMA * (1 + 1e-12)
        or gammas[-1] < TREND_MAX_GAMMA * (1 - 1e-12)
    ):
        return _not_applicable(
            name, anchor, f"scan does not cover [{TREND_MIN_GAMMA:g}, {TREND_MAX_GAMMA:g}]"
        )

    first = scan_result.records[0]
    small = first.value(1)
    if small is None:
        if first.termination != "reached_r_max":
            return CheckResult(
                name, "fail", None, TREND_SMALL_R, anchor,
                f"smallest gamma terminated by {first.termination}",
            )
        small = math.inf

    large_record = next(
        (record for record in reversed(scan_result.records) if record.value(1) is not None),
        None,
    )
    if large_record is None:
        return CheckResult(name, "fail", None, TREND_SMALL_R, anchor, "no stationary point in scan")
    large = large_record.value(1)
    passed = small > 1.0 and large < TREND_SMALL_R and large < small
    return CheckResult(
        name,
        _status(passed),
        large,
        TREND_SMALL_R,
        anchor,
        f"R(gamma={first.gamma:.3g})={small:.6g} R(gamma={large_record.gamma:.3g})={large:.6g}",
    )


def check_crossing_count(
    traj: Trajectory,
    spec: ProblemSpec | None = None,
) -> CheckResult:
    name = "crossing_count"
    anchor = ANCHORS[name]
    spec = spec or traj.spec
    if not isinstance(spec, HenonSpec):
        return _not_applicable(name, anchor, "crossing bound is stated for the power weight only")
    bound = monotonicity_bound(spec.N, spec.alpha)
    if spec.p - 1.0 >= bound:
        return _not_applicable(
            name, anchor, f"p-1={spec.p - 1.0:.6g} not below bound {bound:.6g}"
        )
    if not _reaches_unit(traj):
        return _not_applicable(name, anchor, NOT_APPLICABLE_EARLY)
    crossings = [event for event in traj.events_of("barrier_crossing") if event.r <= 1.0]
    tangential = sum(1 for event in crossings if event.degenerate)
    detail = f"{len(crossings)} crossings in (0,1]"
    if tangential:
        detail += f", {tangential} tangential"
    return CheckResult(
        name,
        _status(len(crossings) <= CROSSING_LIMIT),
        float(len(crossings)),
        float(CROSSING_LIMIT),
        anchor,
        detail,
    )


def check_integral_identity(traj: Trajectory, tol: float = IDENTITY_TOL) -> CheckResult:
    name = "integral_identity"
    anchor = ANCHORS[name]
    if traj.termination == "step_failure":
        return _not_applicable(name, anchor, "trajectory terminated by step failure")
    residual = verify_integral_identity(traj)
    return CheckResult(
        name, _status(residual < tol), residual, tol, anchor, f"max residual {residual:.3e}"
    )


def check_monotone_unit_interval(traj: Trajectory) -> CheckResult:
    name = "monotone_unit_interval"
    anchor = ANCHORS[name]
    if not _reaches_unit(traj):
        return _not_applicable(name, anchor, NOT_APPLICABLE_EARLY)
    upper = 1.0
    first = traj.first("stationary")
    if first is not None:
        if first.r < 1.0 - UNIT_SLACK:
            return _not_applicable(
                name, anchor, f"interior stationary point at r={first.r:.6g}"
            )
        upper = min(upper, first.r)
    mask = traj.r < upper
    values = traj.u[mask]
    if len(values) < 2:
        return _not_applicable(name, anchor, "too few nodes in (0,1)")
    steps = np.diff(values)
    smallest = float(np.min(steps))
    return CheckResult(
        name,
        _status(smallest > 0),
        smallest,
        0.0,
        anchor,
        f"{len(values)} nodes, min increment {smallest:.3e}",
    )


def check_neumann(traj: Trajectory, tol: float = NEUMANN_TOL) -> CheckResult:
    name = "neumann"
    anchor = ANCHORS[name]
    if not _reaches_unit(traj):
        return _not_applicable(name, anchor, NOT_APPLICABLE_EARLY)
    u_values, uprime_values = traj.evaluate(np.array([1.0]))
    u1, du1 = float(u_values[0]), float(uprime_values[0])
    bound = tol * max(1.0, abs(u1))
    return CheckResult(
        name, _status(abs(du1) < bound), abs(du1), bound, anchor, f"u(1)={u1:.12g} u'(1)={du1:.3e}"
    )


def _value_at_unit(
    spec: ProblemSpec,
    gamma: float,
    options: IntegratorOptions,
) -> float | None:
    trajectory = integrate(spec, gamma, DEPENDENCE_EXTENT, options)
    if not _reaches_unit(trajectory):
        return None
    u_values, _ = trajectory.evaluate(np.array([1.0]))
    return float(u_values[0])


def check_continuous_dependence(
    traj: Trajectory,
    steps: Sequence[float] = DEPENDENCE_STEPS,
    options: IntegratorOptions | None = None,
) -> CheckResult:
    """|u_{γ+h}(1) − u_γ(1)| 随 h 一阶衰减。"""
    name = "continuous_dependence"
    anchor = ANCHORS[name]
    options = (options or IntegratorOptions()).model_copy(
        update={"stop_after_stationary": None, "min_extent": 0.0}
    )
    base = _value_at_unit(traj.spec, traj.gamma, options)
    if base is None:
        return _not_applicable(name, anchor, NOT_APPLICABLE_EARLY)
    deviations = []
    for h in steps:
        shifted = _value_at_unit(traj.spec, traj.gamma + h, options)
        if shifted is None:
            return _not_applicable(name, anchor, f"gamma+{h:g} terminated before r=1")
        deviations.append(abs(shifted - base))

    low, high = DEPENDENCE_RATIO_RANGE
    ratios = []
    for (h_big, d_big), (h_small, d_small) in zip(
        zip(steps, deviations), zip(steps[1:], deviations[1:])
    ):
        if d_small == 0.0:
            ratios.append(math.inf)
            continue
        # 按步长比归一化，一阶趋势时为 1
        ratios.append((d_big / d_small) / (h_big / h_small) * 10.0)
    passed = bool(ratios) and all(low <= ratio <= high for ratio in ratios)
    return CheckResult(
        name,
        _status(passed),
        min(ratios) if ratios else None,
        low,
        anchor,
        "deviations " + ", ".join(f"{d:.3e}" for d in deviations),
    )


TRAJECTORY_CHECKS: dict[str, Callable[[Trajectory], CheckResult]] = {
    "ordering": check_crossing_order,
    "concavity": check_stationary_concavity,
    "crossings": check_crossing_count,
    "identity": check_integral_identity,
    "monotone": check_monotone_unit_interval,
    "neumann": check_neumann,
    "dependence": check_continuous_dependence,
}
CHECK_NAMES: tuple[str, ...] = (*TRAJECTORY_CHECKS, "trend")


def run_diagnostics(
    traj: Trajectory,
    checks: Iterable[str] | None = None,
    scan_result: GammaScan | None = None,
    subject: str | None = None,
) -> DiagnosticReport:
    selected = list(checks) if checks is not None else list(TRAJECTORY_CHECKS)
    if checks is None and scan_result is not None:
        selected.append("trend")
    unknown = [name for name in selected if name not in CHECK_NAMES]
    if unknown:
        raise ValueError(f"unknown check: {', '.join(unknown)}")

    results = []
    for name in selected:
        if name == "trend":
            if scan_result is None:
                results.append(
                    _not_applicable("gamma_trend", ANCHORS["gamma_trend"], "no scan supplied")
                )
            else:
                results.append(check_gamma_trend(scan_result))
            continue
        results.append(TRAJECTORY_CHECKS[name](traj))

    report = DiagnosticReport(
        subject=subject or f"{traj.spec.describe()} gamma={traj.gamma!r}",
        checks=tuple(results),
    )
    if not report.all_passed:
        logger.warning("诊断未通过: %s", ", ".join(report.failed()))
    return report
