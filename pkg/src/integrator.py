from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from functools import cached_property
from typing import Callable, Literal

import numpy as np
from scipy.integrate import DOP853, RK23, RK45, OdeSolution, cumulative_simpson
from scipy.interpolate import CubicHermiteSpline
from scipy.optimize import brentq

from .config import IntegratorOptions
from .problem import HenonSpec, ProblemSpec, _exp_clipped, _power

logger = logging.getLogger("henon_shooting")

EventKind = Literal["stationary", "barrier_crossing", "blow_up", "positivity_loss"]
Termination = Literal[
    "reached_r_max",
    "blow_up",
    "positivity_loss",
    "step_failure",
    "stationary_limit",
]

EVENT_KINDS: tuple[EventKind, ...] = (
    "stationary",
    "barrier_crossing",
    "blow_up",
    "positivity_loss",
)
START_SCALE_FACTOR = 1e-3
MIN_START_RADIUS = 1e-280
_SOLVERS = {"DOP853": DOP853, "RK45": RK45, "RK23": RK23}
_EPS = float(np.finfo(float).eps)


@dataclass(frozen=True)
class Event:
    kind: EventKind
    r: float
    index: int
    u_value: float
    second_derivative: float | None = None
    degenerate: bool = False


@dataclass(frozen=True)
class Trajectory:
    """r_start 起的数值解 (r, u, u′)，附事件表与终止类别。"""

    spec: ProblemSpec
    gamma: float
    r: np.ndarray
    u: np.ndarray
    uprime: np.ndarray
    events: tuple[Event, ...]
    termination: Termination
    message: str = ""
    dense: OdeSolution | None = field(default=None, repr=False, compare=False)

    def __post_init__(self) -> None:
        if not (len(self.r) == len(self.u) == len(self.uprime)) or len(self.r) == 0:
            raise ValueError("trajectory columns must be non-empty and of equal length")
        if np.any(np.diff(self.r) <= 0):
            raise ValueError("nodes not strictly increasing")
        for column in (self.r, self.u, self.uprime):
            column.setflags(write=False)

    @property
    def r_start(self) -> float:
        return float(self.r[0])

    @property
    def r_end(self) -> float:
        return float(self.r[-1])

    def events_of(self, kind: EventKind) -> tuple[Event, ...]:
        return tuple(event for event in self.events if event.kind == kind)

    def first(self, kind: EventKind) -> Event | None:
        matched = self.events_of(kind)
        return matched[0] if matched else None

    def stationary_radii(self) -> tuple[float, ...]:
        return tuple(event.r for event in self.events_of("stationary"))

    def flux(self) -> np.ndarray:
        """A(r) = r^{N−1} u′(r)。"""
        return np.power(self.r, self.spec.N - 1) * self.uprime

    @cached_property
    def _spline(self) -> CubicHermiteSpline:
        return CubicHermiteSpline(self.r, self.u, self.uprime)

    def evaluate(self, radii: np.ndarray | float) -> tuple[np.ndarray, np.ndarray]:
        points = np.clip(np.asarray(radii, dtype=float), self.r_start, self.r_end)
        if self.dense is not None:
            values = self.dense(points)
            return values[0], values[1]
        if len(self.r) < 2:
            return np.full_like(points, self.u[0]), np.full_like(points, self.uprime[0])
        spline = self._spline
        return spline(points), spline(points, 1)


@dataclass(frozen=True)
class _EventFunction:
    kind: EventKind
    func: Callable[[float, np.ndarray], float]
    direction: int = 0
    terminal: bool = False

    def __call__(self, r: float, y: np.ndarray) -> float:
        return float(self.func(r, y))


def _make_rhs(spec: ProblemSpec) -> Callable[[float, np.ndarray], np.ndarray]:
    bend = spec.N - 1
    forcing = spec.forcing

    def rhs(r: float, y: np.ndarray) -> np.ndarray:
        u, v = y[0], y[1]
        return np.array([v, -bend * v / r + u - forcing(r, u)])

    return rhs


def start_radius(spec: ProblemSpec, gamma: float, default: float) -> float:
    """起点半径随 γ 缩小，使级数展开保持在其有效范围内。"""
    scale = spec.barrier_scale(gamma)
    if scale is None:
        return default
    return max(min(default, START_SCALE_FACTOR * scale), MIN_START_RADIUS)


def series_start(
    spec: ProblemSpec,
    gamma: float,
    r_start: float,
) -> tuple[float, float]:
    """原点处两项级数：u = γ + γr²/(2N) − φ₀ f(γ) r^{2+a}/((2+a)(N+a))。"""
    N = spec.N
    quadratic = gamma * r_start * r_start / (2 * N)
    linear = gamma * r_start / N

    if isinstance(spec, HenonSpec):
        a = spec.alpha
        # γ^p r^{1+α}/(N+α)，对数域避免溢出
        tail = _exp_clipped(
            spec.p * math.log(gamma) + (1 + a) * math.log(r_start)
        ) / (N + a)
        return gamma + quadratic - tail * r_start / (2 + a), linear - tail

    a = spec.weight_exponent
    if a is not None:
        weight = spec.weight(r_start)
        scale = _power(r_start, a)
        coefficient = weight / scale if weight > 0 and scale > 0 else 1.0
        tail = coefficient * spec.nonlinearity(gamma) * _power(r_start, 1 + a) / (N + a)
        return gamma + quadratic - tail * r_start / (2 + a), linear - tail

    drift = gamma - spec.weight(0.0) * spec.nonlinearity(gamma)
    return gamma + drift * r_start * r_start / (2 * N), drift * r_start / N


def _crossed(g_old: float, g_new: float, direction: int) -> bool:
    if math.isnan(g_old) or math.isnan(g_new):
        return False
    s_old, s_new = np.sign(g_old), np.sign(g_new)
    if s_old == 0 or s_old == s_new:
        return False
    upward = s_new > s_old
    if direction > 0:
        return upward
    if direction < 0:
        return not upward
    return True


def _refine(
    event: _EventFunction,
    interp: Callable[[float], np.ndarray],
    r_old: float,
    r_new: float,
    g_new: float,
    event_tol: float,
) -> float:
    if g_new == 0:
        return r_new

    def scalar(r: float) -> float:
        return event(r, interp(r))

    try:
        return float(
            brentq(
                scalar,
                r_old,
                r_new,
                xtol=event_tol * min(1.0, r_new),
                rtol=4 * _EPS,
                maxiter=200,
            )
        )
    except (ValueError, RuntimeError):
        logger.debug("事件细化失败，取步末: kind=%s r=%s", event.kind, r_new)
        return r_new


def _build_event(
    event: _EventFunction,
    root: float,
    index: int,
    interp: Callable[[float], np.ndarray],
    rhs: Callable[[float, np.ndarray], np.ndarray],
    span: tuple[float, float],
    options: IntegratorOptions,
) -> Event:
    state = interp(root)
    u_value = float(state[0])
    if event.kind == "stationary":
        second = float(rhs(root, state)[1])
        return Event(
            kind="stationary",
            r=root,
            index=index,
            u_value=u_value,
            second_derivative=second,
            degenerate=abs(second) < options.degenerate_tol,
        )
    degenerate = False
    if event.kind == "barrier_crossing":
        lo, hi = span
        h = max((hi - lo) * 1e-6, root * 1e-12)
        left, right = max(lo, root - h), min(hi, root + h)
        if right > left:
            slope = (event(right, interp(right)) - event(left, interp(left))) / (
                right - left
            )
            # 切触：穿越处斜率几乎为零
            degenerate = bool(abs(slope) < options.degenerate_tol)
    return Event(kind=event.kind, r=root, index=index, u_value=u_value, degenerate=degenerate)


def _event_functions(spec: ProblemSpec, options: IntegratorOptions) -> list[_EventFunction]:
    cap = options.u_blow_up_cap
    return [
        _EventFunction("stationary", lambda r, y: y[1]),
        _EventFunction("barrier_crossing", lambda r, y: spec.barrier_gap(r, y[0])),
        _EventFunction("blow_up", lambda r, y: y[0] - cap, direction=1, terminal=True),
        _EventFunction("positivity_loss", lambda r, y: y[0], direction=-1, terminal=True),
    ]


def integrate(
    spec: ProblemSpec,
    gamma: float,
    r_max: float,
    options: IntegratorOptions | None = None,
) -> Trajectory:
    """自适应显式 RK 积分 (u, v)′ = (v, −(N−1)v/r + u − φ f(u))，逐步检测事件。"""
    options = options or IntegratorOptions()
    if not gamma > 0:
        raise ValueError("gamma must be positive")
    if not r_max > 0:
        raise ValueError("r_max must be positive")

    r0 = start_radius(spec, gamma, options.r_start)
    if r0 >= r_max:
        raise ValueError("r_max must exceed the start radius")
    u0, v0 = series_start(spec, gamma, r0)
    if not (math.isfinite(u0) and math.isfinite(v0)):
        logger.warning("级数起点溢出: gamma=%s", gamma)
        return Trajectory(
            spec=spec,
            gamma=gamma,
            r=np.array([r0]),
            u=np.array([gamma]),
            uprime=np.array([0.0]),
            events=(),
            termination="step_failure",
            message="series start is not finite",
        )

    rhs = _make_rhs(spec)
    events = _event_functions(spec, options)
    y0 = np.array([u0, v0])
    solver = _SOLVERS[options.method](
        rhs,
        r0,
        y0,
        r_max,
        rtol=options.rel_tol,
        atol=options.abs_tol,
    )

    radii: list[float] = [r0]
    states: list[np.ndarray] = [y0]
    breakpoints: list[float] = [r0]
    interpolants: list = []
    found: list[Event] = []
    counts = {kind: 0 for kind in EVENT_KINDS}
    previous = [event(r0, y0) for event in events]
    limit = options.stop_after_stationary
    termination: Termination = "reached_r_max"
    message = ""
    steps = 0

    while solver.status == "running":
        if steps >= options.max_steps:
            termination = "step_failure"
            message = "step limit reached"
            break
        step_message = solver.step()
        steps += 1
        if solver.status == "failed" or not np.all(np.isfinite(solver.y)):
            termination = "step_failure"
            message = step_message or "non-finite state"
            break

        r_old, r_new = solver.t_old, solver.t
        interp = solver.dense_output()
        current = [event(r_new, solver.y) for event in events]

        hits: list[tuple[float, _EventFunction]] = []
        for event, g_old, g_new in zip(events, previous, current):
            if _crossed(g_old, g_new, event.direction):
                root = _refine(event, interp, r_old, r_new, g_new, options.event_tol)
                hits.append((root, event))
        hits.sort(key=lambda item: item[0])

        stop_at: float | None = None
        step_roots: list[float] = []
        for root, event in hits:
            if stop_at is not None and root > stop_at:
                break
            counts[event.kind] += 1
            found.append(
                _build_event(
                    event, root, counts[event.kind], interp, rhs, (r_old, r_new), options
                )
            )
            step_roots.append(root)
            if event.terminal:
                stop_at = root
                termination = event.kind
                break
            if event.kind == "stationary" and limit is not None and counts["stationary"] >= limit:
                hold = max(root, options.min_extent)
                if hold <= r_new and stop_at is None:
                    stop_at = hold
                    termination = "stationary_limit"
        if (
            stop_at is None
            and limit is not None
            and counts["stationary"] >= limit
            and r_new >= options.min_extent
        ):
            stop_at = max(options.min_extent, r_old)
            termination = "stationary_limit"
        if stop_at is not None:
            # 本步中位于截断点之后的事件不属于轨迹
            found = [item for item in found if item.r <= stop_at]

        samples = r_old + (r_new - r_old) * np.arange(1, options.samples_per_step) / options.samples_per_step
        points = sorted(set(samples.tolist()) | set(step_roots) | {r_new})
        if stop_at is not None:
            points = [point for point in points if point < stop_at] + [stop_at]
        for point in points:
            if point <= radii[-1]:
                continue
            radii.append(point)
            states.append(solver.y.copy() if point == r_new else interp(point))

        breakpoints.append(r_new)
        interpolants.append(interp)
        previous = current
        if stop_at is not None:
            break

    stacked = np.array(states)
    dense = OdeSolution(breakpoints, interpolants) if interpolants else None
    logger.debug(
        "积分结束: gamma=%s termination=%s steps=%d events=%d",
        gamma,
        termination,
        steps,
        len(found),
    )
    return Trajectory(
        spec=spec,
        gamma=gamma,
        r=np.array(radii),
        u=stacked[:, 0].copy(),
        uprime=stacked[:, 1].copy(),
        events=tuple(found),
        termination=termination,
        message=message,
        dense=dense,
    )


def _refined_grid(nodes: np.ndarray, refine: int) -> np.ndarray:
    fractions = np.arange(refine) / refine
    starts = nodes[:-1, None] + np.diff(nodes)[:, None] * fractions[None, :]
    return np.append(starts.ravel(), nodes[-1])


def verify_integral_identity(traj: Trajectory, quad_tol: float = 1e-10) -> float:
    """max |r^{N−1}u′ − ∫₀^r s^{N−1}(u − φ f(u)) ds| / (1 + |r^{N−1}u′|)。"""
    if traj.termination == "step_failure":
        raise ValueError("trajectory terminated by step failure")
    if len(traj.r) < 2:
        return 0.0

    spec = traj.spec
    flux = traj.flux()
    refine = 4
    previous: np.ndarray | None = None
    while True:
        grid = _refined_grid(traj.r, refine)
        values, _ = traj.evaluate(grid)
        forcing = np.array([spec.forcing(r, u) for r, u in zip(grid, values)])
        integrand = np.power(grid, spec.N - 1) * (values - forcing)
        cumulative = cumulative_simpson(integrand, x=grid, initial=0.0)
        at_nodes = cumulative[::refine]
        if previous is not None:
            change = np.max(np.abs(at_nodes - previous) / (1.0 + np.abs(flux)))
            if change < quad_tol or refine >= 64:
                break
        previous = at_nodes
        refine *= 2

    # [0, r_start] 上的积分由级数起点给出：A(r_start)
    integral = flux[0] + at_nodes
    residual = np.abs(flux - integral) / (1.0 + np.abs(flux))
    return float(np.max(residual))
