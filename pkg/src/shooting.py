from __future__ import annotations

import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .config import IntegratorOptions, ShootingOptions
from .integrator import Termination, Trajectory, integrate
from .problem import ProblemSpec

logger = logging.getLogger("henon_shooting")

MIN_SHOOTING_TOL = 1e-9
_EPS = float(np.finfo(float).eps)


class ShootingError(RuntimeError):
    """打靶求解的数值失败"""


class NoBracketError(ShootingError):
    def __init__(self, message: str | None = None) -> None:
        super().__init__(
            message or "no bracket: target index may not be attainable for these parameters"
        )


class TargetLostError(ShootingError):
    def __init__(self, gamma: float, n: int, bracket: tuple[float, float], termination: str) -> None:
        super().__init__("target index lost inside bracket")
        self.gamma = gamma
        self.n = n
        self.bracket = bracket
        self.termination = termination

    def diagnostics(self) -> dict[str, object]:
        return {
            "gamma": self.gamma,
            "n": self.n,
            "bracket": list(self.bracket),
            "termination": self.termination,
        }


class UndeterminedError(ShootingError):
    def __init__(self, gamma: float, message: str) -> None:
        super().__init__(f"undetermined outcome at gamma={gamma!r}: {message}")
        self.gamma = gamma


@dataclass(frozen=True)
class ScanRecord:
    gamma: float
    stationary: tuple[float, ...]
    termination: Termination

    @property
    def determined(self) -> bool:
        return self.termination != "step_failure"

    def value(self, n: int) -> float | None:
        if len(self.stationary) >= n:
            return self.stationary[n - 1]
        return None


@dataclass(frozen=True)
class GammaScan:
    spec: ProblemSpec
    gammas: tuple[float, ...]
    records: tuple[ScanRecord, ...]
    r_max: float = 10.0

    def values(self, n: int) -> list[float | None]:
        return [record.value(n) for record in self.records]

    def max_index(self) -> int:
        return max((len(record.stationary) for record in self.records), default=0)


@dataclass(frozen=True)
class ShootingResult:
    spec: ProblemSpec
    n: int
    gamma_star: float
    achieved_R: float
    residual: float
    trajectory: Trajectory
    bracket: tuple[float, float]
    iterations: int
    u_at_1: float
    uprime_at_1: float
    a_posteriori_shift: float = 0.0
    scan: GammaScan | None = field(default=None, repr=False, compare=False)

    def to_record(self) -> dict[str, object]:
        return {
            "spec": self.spec.describe(),
            "n": self.n,
            "gamma_star": self.gamma_star,
            "achieved_R": self.achieved_R,
            "residual": self.residual,
            "bracket": list(self.bracket),
            "iterations": self.iterations,
            "u_at_1": self.u_at_1,
            "uprime_at_1": self.uprime_at_1,
            "a_posteriori_shift": self.a_posteriori_shift,
        }


def _with_stop(
    options: IntegratorOptions,
    n: int | None,
    min_extent: float = 0.0,
) -> IntegratorOptions:
    return options.model_copy(
        update={"stop_after_stationary": n, "min_extent": min_extent}
    )


def first_stationary_map(
    spec: ProblemSpec,
    gamma: float,
    options: IntegratorOptions | None = None,
    shooting: ShootingOptions | None = None,
) -> float | None:
    """R_γ：首个驻点半径，r_max 从 10 倍增至上限。"""
    options = _with_stop(options or IntegratorOptions(), 1)
    shooting = shooting or ShootingOptions()
    r_max = shooting.r_max
    while True:
        trajectory = integrate(spec, gamma, r_max, options)
        if trajectory.termination == "step_failure":
            raise UndeterminedError(gamma, trajectory.message)
        radii = trajectory.stationary_radii()
        if radii:
            return radii[0]
        if trajectory.termination in ("blow_up", "positivity_loss"):
            return None
        if r_max >= shooting.r_max_cap:
            logger.info("未找到驻点: gamma=%s r_max=%s", gamma, r_max)
            return None
        r_max = min(2.0 * r_max, shooting.r_max_cap)


def nth_stationary_map(
    spec: ProblemSpec,
    gamma: float,
    n: int,
    r_max: float = 10.0,
    options: IntegratorOptions | None = None,
) -> float | None:
    if n < 1:
        raise ValueError("n must be at least 1")
    trajectory = integrate(spec, gamma, r_max, _with_stop(options or IntegratorOptions(), n))
    if trajectory.termination == "step_failure":
        raise UndeterminedError(gamma, trajectory.message)
    radii = trajectory.stationary_radii()
    return radii[n - 1] if len(radii) >= n else None


def _scan_one(
    spec: ProblemSpec,
    gamma: float,
    r_max: float,
    options: IntegratorOptions,
) -> ScanRecord:
    trajectory = integrate(spec, gamma, r_max, options)
    if trajectory.termination == "step_failure":
        logger.warning("扫描点无法判定: gamma=%s (%s)", gamma, trajectory.message)
    return ScanRecord(
        gamma=gamma,
        stationary=trajectory.stationary_radii(),
        termination=trajectory.termination,
    )


def scan(
    spec: ProblemSpec,
    gamma_min: float,
    gamma_max: float,
    points: int,
    r_max: float = 10.0,
    options: IntegratorOptions | None = None,
    workers: int = 1,
    stop_after_stationary: int | None = None,
) -> GammaScan:
    """对数等距 γ 网格上记录全部驻点半径与终止类别。"""
    if not 0 < gamma_min < gamma_max:
        raise ValueError("scan requires 0 < gamma_min < gamma_max")
    if points < 2:
        raise ValueError("scan requires at least 2 points")
    if workers < 1:
        raise ValueError("workers must be at least 1")
    options = _with_stop(options or IntegratorOptions(), stop_after_stationary)
    gammas = tuple(float(g) for g in np.geomspace(gamma_min, gamma_max, points))

    if workers == 1:
        records = [_scan_one(spec, gamma, r_max, options) for gamma in gammas]
    else:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            records = list(
                pool.map(lambda gamma: _scan_one(spec, gamma, r_max, options), gammas)
            )
    logger.info(
        "扫描完成: %d 点, gamma ∈ [%g, %g], r_max=%g",
        points,
        gamma_min,
        gamma_max,
        r_max,
    )
    return GammaScan(spec=spec, gammas=gammas, records=tuple(records), r_max=r_max)


def _side(value: float | None, n: int) -> float | None:
    # R^n − 1 的符号；n=1 时缺失驻点视为 +∞
    if value is None:
        return 1.0 if n == 1 else None
    return float(np.sign(value - 1.0))


def _extend(
    spec: ProblemSpec,
    start: float,
    limit: float,
    factor: float,
    inside_side: float,
    options: IntegratorOptions,
    shooting: ShootingOptions,
) -> tuple[float, float] | None:
    previous = start
    gamma = start * factor
    while (gamma <= limit) if factor > 1 else (gamma >= limit):
        try:
            side = _side(first_stationary_map(spec, gamma, options, shooting), 1)
        except UndeterminedError:
            logger.warning("扩展区间时遇到无法判定的点: gamma=%s", gamma)
            return None
        if side is not None and side != inside_side:
            return (previous, gamma) if factor > 1 else (gamma, previous)
        previous = gamma
        gamma *= factor
    return None


def bracket_target(
    spec: ProblemSpec,
    n: int,
    scan_result: GammaScan,
    options: IntegratorOptions | None = None,
    shooting: ShootingOptions | None = None,
) -> tuple[float, float]:
    options = options or IntegratorOptions()
    shooting = shooting or ShootingOptions()
    records = scan_result.records

    for left, right in zip(records, records[1:]):
        if not (left.determined and right.determined):
            continue
        a, b = _side(left.value(n), n), _side(right.value(n), n)
        if a is None or b is None:
            continue
        if a == 0.0:
            return (left.gamma, left.gamma)
        if a * b < 0 or b == 0.0:
            logger.info("找到括号: n=%d [%s, %s]", n, left.gamma, right.gamma)
            return (left.gamma, right.gamma)

    if n == 1:
        sides = [
            _side(record.value(1), 1) for record in records if record.determined
        ]
        if sides and all(side > 0 for side in sides):
            found = _extend(
                spec,
                scan_result.gammas[-1],
                shooting.extension_max,
                10.0,
                1.0,
                options,
                shooting,
            )
        elif sides and all(side < 0 for side in sides):
            found = _extend(
                spec,
                scan_result.gammas[0],
                shooting.extension_min,
                0.1,
                -1.0,
                options,
                shooting,
            )
        else:
            found = None
        if found is not None:
            logger.info("扩展后找到括号: [%s, %s]", *found)
            return found

    raise NoBracketError()


def _stationary_radius(trajectory: Trajectory, n: int) -> float | None:
    radii = trajectory.stationary_radii()
    return radii[n - 1] if len(radii) >= n else None


def _neumann_ok(trajectory: Trajectory, tol: float) -> tuple[bool, float, float]:
    u_values, uprime_values = trajectory.evaluate(np.array([1.0]))
    u1, du1 = float(u_values[0]), float(uprime_values[0])
    return abs(du1) < tol * max(1.0, abs(u1)), u1, du1


def shoot(
    spec: ProblemSpec,
    n: int = 1,
    tol: float = 1e-6,
    options: IntegratorOptions | None = None,
    shooting: ShootingOptions | None = None,
) -> ShootingResult:
    """在扫描得到的括号内对 γ ↦ R^n_γ − 1 二分，返回第 n 个驻点位于 r=1 的解。"""
    if n < 1:
        raise ValueError("n must be at least 1")
    if tol < MIN_SHOOTING_TOL:
        raise ValueError("tol must be at least 1e-9")
    options = options or IntegratorOptions()
    shooting = shooting or ShootingOptions()

    grid = scan(
        spec,
        shooting.gamma_min,
        shooting.gamma_max,
        shooting.scan_points,
        r_max=shooting.r_max,
        options=options,
        workers=shooting.workers,
        stop_after_stationary=n,
    )
    lo, hi = bracket_target(spec, n, grid, options, shooting)
    extent = 1.0 + shooting.margin
    bisection_options = _with_stop(options, n, extent)

    def evaluate(gamma: float) -> tuple[Trajectory, float | None]:
        trajectory = integrate(spec, gamma, max(shooting.r_max, extent), bisection_options)
        if trajectory.termination == "step_failure":
            raise UndeterminedError(gamma, trajectory.message)
        radius = _stationary_radius(trajectory, n)
        if radius is None and n > 1:
            raise TargetLostError(gamma, n, (lo, hi), trajectory.termination)
        return trajectory, radius

    gamma = lo
    trajectory, radius = evaluate(lo)
    lo_side = _side(radius, n)
    iterations = 0
    converged = False
    while iterations < shooting.max_iterations:
        if radius is not None and abs(radius - 1.0) < tol:
            ok, _, _ = _neumann_ok(trajectory, tol)
            if ok:
                converged = True
                break
        if hi - lo <= 4 * _EPS * hi:
            break
        gamma = math.sqrt(lo * hi)
        iterations += 1
        trajectory, radius = evaluate(gamma)
        side = _side(radius, n)
        logger.debug("二分 %d: gamma=%.17g R=%s", iterations, gamma, radius)
        if side == 0.0:
            lo = hi = gamma
        elif side == lo_side:
            lo = gamma
        else:
            hi = gamma

    if not converged:
        raise ShootingError(
            f"bisection stalled before reaching tol={tol:g} "
            f"(gamma={gamma!r}, R={radius!r}, bracket=[{lo!r}, {hi!r}])"
        )

    final_options = _with_stop(
        options.model_copy(
            update={
                "rel_tol": shooting.final_rel_tol,
                "abs_tol": shooting.final_rel_tol,
            }
        ),
        n,
        extent,
    )
    final = integrate(spec, gamma, max(shooting.r_max, extent), final_options)
    final_radius = _stationary_radius(final, n)
    if final.termination == "step_failure" or final_radius is None:
        raise TargetLostError(gamma, n, (lo, hi), final.termination)
    residual = abs(final_radius - 1.0)
    if residual >= tol:
        raise ShootingError(
            f"final residual {residual:.3e} exceeds tol={tol:g} after re-integration (gamma={gamma!r})"
        )
    _, u1, du1 = _neumann_ok(final, tol)
    logger.info(
        "收敛: n=%d gamma*=%.10g R=%.12g 迭代=%d",
        n,
        gamma,
        final_radius,
        iterations,
    )
    return ShootingResult(
        spec=spec,
        n=n,
        gamma_star=gamma,
        achieved_R=final_radius,
        residual=residual,
        trajectory=final,
        bracket=(lo, hi),
        iterations=iterations,
        u_at_1=u1,
        uprime_at_1=du1,
        a_posteriori_shift=abs(final_radius - radius) if radius is not None else math.inf,
        scan=grid,
    )
