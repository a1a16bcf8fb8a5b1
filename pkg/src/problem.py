from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from fractions import Fraction
from typing import Callable, Literal, Sequence, Union

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, field_validator
from scipy.optimize import bisect

logger = logging.getLogger("henon_shooting")

UNBOUNDED: Literal["unbounded"] = "unbounded"

XI_RESIDUAL_TOL = 1e-12
XI_SEARCH_LIMIT = 1e300
LIMIT_TOL = 1e-2
LIMIT_TREND_TOL = 1e-3
DEFAULT_SAMPLE_GRID: tuple[float, ...] = tuple(
    float(value) for value in np.logspace(-6, 6, 121)
)


class BarrierEvaluationError(RuntimeError):
    """ξ(r) 无法求得（括号扩展失败）"""


def _power(base: float, exponent: float) -> float:
    try:
        return math.pow(base, exponent)
    except OverflowError:
        return math.inf


def _exp_clipped(value: float) -> float:
    try:
        return math.exp(value)
    except OverflowError:
        return math.inf


def _evaluate(func: Callable[[float], float], x: float) -> float:
    try:
        with np.errstate(over="ignore", invalid="ignore", divide="ignore"):
            return float(func(x))
    except OverflowError:
        return math.inf


def _coerce_rational(value: object) -> object:
    # 允许 "25/3" 这类有理数写法
    if isinstance(value, Fraction):
        return float(value)
    if isinstance(value, str) and "/" in value:
        return float(Fraction(value.strip()))
    return value


class HenonSpec(BaseModel):
    """−u″ − (N−1)u′/r + u = r^α u^p 的径向问题参数。"""

    model_config = ConfigDict(frozen=True)

    N: int
    alpha: float
    p: float

    @field_validator("alpha", "p", mode="before")
    @classmethod
    def _parse_rational(cls, value: object) -> object:
        return _coerce_rational(value)

    @field_validator("N")
    @classmethod
    def _validate_dimension(cls, value: int) -> int:
        if value < 2:
            raise ValueError("N must be at least 2")
        return value

    @field_validator("alpha")
    @classmethod
    def _validate_alpha(cls, value: float) -> float:
        if not value > 0:
            raise ValueError("alpha must be positive")
        return value

    @field_validator("p")
    @classmethod
    def _validate_p(cls, value: float) -> float:
        if not value > 1:
            raise ValueError("p must exceed 1")
        return value

    @property
    def ell(self) -> float:
        return 0.0

    @property
    def weight_exponent(self) -> float:
        return self.alpha

    def weight(self, r: float) -> float:
        return _power(r, self.alpha)

    def nonlinearity(self, s: float) -> float:
        return _power(s, self.p)

    def forcing(self, r: float, u: float) -> float:
        """φ(r) f(u)，u ≤ 0 时按 f(0)=0 延拓。"""
        if u <= 0.0 or r <= 0.0:
            return 0.0
        return _exp_clipped(self.alpha * math.log(r) + self.p * math.log(u))

    def barrier(self, r: float) -> float:
        return barrier_c(self, r)

    def barrier_gap(self, r: float, u: float) -> float:
        # log c(r) − log u：u 位于曲线下方时为正
        if u <= 0.0:
            return math.inf
        return -(self.alpha / (self.p - 1.0)) * math.log(r) - math.log(u)

    def barrier_scale(self, gamma: float) -> float:
        return _exp_clipped(-(self.p - 1.0) / self.alpha * math.log(gamma))

    def describe(self) -> dict[str, object]:
        return {"N": self.N, "alpha": self.alpha, "p": self.p}


class GeneralSpec(BaseModel):
    """−Δu + u = φ(|x|) f(u) 的径向问题，φ、f 为不透明的可调用对象。"""

    model_config = ConfigDict(frozen=True, arbitrary_types_allowed=True)

    N: int
    phi: Callable[[float], float]
    f: Callable[[float], float]
    ell: float = 0.0
    kappa: Union[float, Literal["unbounded"]] = UNBOUNDED
    weight_exponent: float | None = None
    label: str = "custom"
    params: dict[str, float] = Field(default_factory=dict)

    @field_validator("N")
    @classmethod
    def _validate_dimension(cls, value: int) -> int:
        if value < 2:
            raise ValueError("N must be at least 2")
        return value

    @field_validator("weight_exponent")
    @classmethod
    def _validate_weight_exponent(cls, value: float | None) -> float | None:
        if value is not None and not value > 0:
            raise ValueError("weight_exponent must be positive")
        return value

    def weight(self, r: float) -> float:
        return _evaluate(self.phi, r)

    def nonlinearity(self, s: float) -> float:
        return _evaluate(self.f, s)

    def forcing(self, r: float, u: float) -> float:
        if u <= 0.0:
            return 0.0
        weight = self.weight(r)
        if weight == 0.0:
            return 0.0
        return weight * self.nonlinearity(u)

    def ratio_inverse(self, u: float) -> float:
        """H(u) = u / f(u)。"""
        value = self.nonlinearity(u)
        if value == 0.0:
            return math.inf
        return u / value

    def barrier(self, r: float) -> float:
        return barrier_xi(self, r)

    def barrier_gap(self, r: float, u: float) -> float:
        # H 严格递减：H(u) > φ(r) 当且仅当 u < ξ(r)
        if u <= 0.0:
            return math.inf
        return self.ratio_inverse(u) - self.weight(r)

    def barrier_scale(self, gamma: float) -> float | None:
        if self.weight_exponent is None:
            return None
        value = self.nonlinearity(gamma)
        if not math.isfinite(value) or value <= 0.0:
            return 0.0
        return _power(gamma / value, 1.0 / self.weight_exponent)

    def describe(self) -> dict[str, object]:
        return {"N": self.N, "nonlinearity": self.label, **self.params}


ProblemSpec = Union[HenonSpec, GeneralSpec]


@dataclass(frozen=True)
class PowerSumWeight:
    alpha: float
    beta: float | None = None

    def __call__(self, r: float) -> float:
        value = np.power(r, self.alpha)
        if self.beta is not None:
            value = value + np.power(r, self.beta)
        return value


@dataclass(frozen=True)
class PowerNonlinearity:
    p: float

    def __call__(self, s: float) -> float:
        return np.power(s, self.p)


@dataclass(frozen=True)
class ExpNonlinearity:
    """exp(γ s^q) − 1，expm1 保证 s→0 时 f(s)/s 的精度。"""

    gamma: float = 1.0
    q: float = 1.0

    def __call__(self, s: float) -> float:
        return np.expm1(self.gamma * np.power(s, self.q))


def make_general_spec(
    N: int,
    nonlinearity: Literal["power", "exp"],
    alpha: float,
    p: float | None = None,
    gamma: float = 1.0,
    q: float = 1.0,
    beta: float | None = None,
) -> GeneralSpec:
    if not alpha > 0:
        raise ValueError("alpha must be positive")
    if beta is not None and not beta > 0:
        raise ValueError("beta must be positive")

    params: dict[str, float] = {"alpha": alpha}
    if beta is not None:
        params["beta"] = beta

    if nonlinearity == "power":
        if p is None or not p > 1:
            raise ValueError("p must exceed 1")
        f: Callable[[float], float] = PowerNonlinearity(p)
        params["p"] = p
    elif nonlinearity == "exp":
        if not gamma > 0:
            raise ValueError("gamma must be positive")
        if not q >= 1:
            raise ValueError("q must be at least 1")
        f = ExpNonlinearity(gamma, q)
        params["gamma"] = gamma
        params["q"] = q
    else:
        raise ValueError(f"unknown nonlinearity family: {nonlinearity}")

    exponent = alpha if beta is None else min(alpha, beta)
    return GeneralSpec(
        N=N,
        phi=PowerSumWeight(alpha, beta),
        f=f,
        ell=0.0,
        kappa=UNBOUNDED,
        weight_exponent=exponent,
        label=nonlinearity,
        params=params,
    )


def henon_as_general(spec: HenonSpec) -> GeneralSpec:
    return make_general_spec(spec.N, "power", alpha=spec.alpha, p=spec.p)


def critical_exponent(N: int, alpha: float | Fraction | str) -> Fraction:
    """Dirichlet 问题可解性阈值 p_α − 1 = (N + 2 + 2α)/(N − 2)，精确有理数。"""
    if N <= 2:
        raise ValueError("critical exponent undefined in this dimension")
    alpha_exact = Fraction(alpha)
    if alpha_exact < 0:
        raise ValueError("alpha must be non-negative")
    return (Fraction(N + 2) + 2 * alpha_exact) / (N - 2)


def barrier_c(spec: HenonSpec, r: float) -> float:
    if not r > 0:
        raise ValueError("barrier is defined for r > 0")
    return _power(r, -spec.alpha / (spec.p - 1.0))


def barrier_xi(spec: GeneralSpec, r: float) -> float:
    """ξ(r) = H⁻¹(φ(r))，在严格递减的 H 上做几何扩展括号 + 二分。"""
    if not r > 0:
        raise ValueError("barrier is defined for r > 0")
    target = spec.weight(r)
    if not (target > 0 and math.isfinite(target)):
        raise BarrierEvaluationError(
            "xi evaluation failed: hypotheses likely violated"
        )

    def gap(u: float) -> float:
        return spec.ratio_inverse(u) - target

    start = gap(1.0)
    if start == 0.0:
        return 1.0

    if start > 0:
        lo, hi = 1.0, 2.0
        while gap(hi) > 0:
            lo, hi = hi, hi * 2.0
            if hi > XI_SEARCH_LIMIT:
                raise BarrierEvaluationError(
                    "xi evaluation failed: hypotheses likely violated"
                )
    else:
        lo, hi = 0.5, 1.0
        while True:
            value = gap(lo)
            if value >= 0:
                break
            if abs(value) <= XI_RESIDUAL_TOL * target:
                # H(0+) 恰为 φ(r)：可去奇点处的极限
                return lo
            lo, hi = lo * 0.5, lo
            if lo < 1.0 / XI_SEARCH_LIMIT:
                raise BarrierEvaluationError(
                    "xi evaluation failed: hypotheses likely violated"
                )

    root = bisect(gap, lo, hi, xtol=1e-300, rtol=4 * np.finfo(float).eps, maxiter=400)
    residual = abs(gap(root)) / target
    if residual >= XI_RESIDUAL_TOL:
        logger.warning("ξ 残差偏大: r=%s residual=%.3e", r, residual)
    return float(root)


@dataclass(frozen=True)
class HypothesisCheck:
    name: str
    passed: bool
    detail: str
    violation: tuple[float, float] | None = None


@dataclass(frozen=True)
class HypothesisReport:
    checks: tuple[HypothesisCheck, ...]

    @property
    def passed(self) -> bool:
        return all(check.passed for check in self.checks)

    def failed(self) -> list[str]:
        return [check.name for check in self.checks if not check.passed]

    def get(self, name: str) -> HypothesisCheck:
        for check in self.checks:
            if check.name == name:
                return check
        raise KeyError(name)


def _first_violation(
    grid: np.ndarray,
    values: np.ndarray,
    strict: bool,
) -> tuple[float, float] | None:
    diffs = np.diff(values)
    bad = diffs <= 0 if strict else diffs < 0
    if not np.any(bad):
        return None
    index = int(np.argmax(bad))
    return (float(grid[index]), float(grid[index + 1]))


def _check_weight(spec: GeneralSpec, grid: np.ndarray) -> HypothesisCheck:
    name = "weight_monotone"
    if spec.ell < 0:
        return HypothesisCheck(name, False, f"ell={spec.ell} is negative")
    at_zero = spec.weight(0.0)
    if abs(at_zero - spec.ell) > 1e-12 * max(1.0, abs(spec.ell)):
        return HypothesisCheck(
            name, False, f"phi(0)={at_zero} differs from ell={spec.ell}"
        )
    values = np.array([spec.weight(r) for r in grid])
    if values[0] < at_zero:
        return HypothesisCheck(
            name, False, "phi decreases near 0", (0.0, float(grid[0]))
        )
    violation = _first_violation(grid, values, strict=False)
    if violation is not None:
        return HypothesisCheck(name, False, "phi is not increasing", violation)
    if spec.kappa != UNBOUNDED:
        kappa = float(spec.kappa)
        if kappa < spec.ell:
            return HypothesisCheck(name, False, f"kappa={kappa} below ell")
        if np.any(values > kappa * (1 + 1e-12)):
            return HypothesisCheck(name, False, f"phi exceeds kappa={kappa}")
    return HypothesisCheck(name, True, "phi increasing with phi(0)=ell")


def _ratio_samples(
    spec: GeneralSpec,
    grid: np.ndarray,
) -> tuple[np.ndarray, np.ndarray, bool]:
    ratios = np.array([spec.nonlinearity(s) / s for s in grid])
    finite = np.isfinite(ratios)
    if np.all(finite):
        return grid, ratios, False
    cut = int(np.argmin(finite))
    return grid[:cut], ratios[:cut], True


def _check_ratio_increasing(
    grid: np.ndarray,
    ratios: np.ndarray,
) -> HypothesisCheck:
    name = "ratio_increasing"
    if len(ratios) < 2:
        return HypothesisCheck(name, False, "too few finite samples")
    violation = _first_violation(grid, ratios, strict=True)
    if violation is not None:
        return HypothesisCheck(
            name, False, "f(s)/s is not strictly increasing", violation
        )
    return HypothesisCheck(name, True, "f(s)/s strictly increasing")


def _decade_ratio(grid: np.ndarray, ratios: np.ndarray, index: int) -> float | None:
    # index 与其相距一个数量级的样本之比
    if index == len(grid) - 1:
        partners = np.nonzero(grid <= grid[index] / 10.0)[0]
        if len(partners) == 0:
            return None
        partner = int(partners[-1])
        return float(ratios[index] / ratios[partner])
    partners = np.nonzero(grid >= grid[index] * 10.0)[0]
    if len(partners) == 0:
        return None
    partner = int(partners[0])
    if ratios[index] == 0.0:
        return math.inf
    return float(ratios[partner] / ratios[index])


def _check_limit_at_infinity(
    spec: GeneralSpec,
    grid: np.ndarray,
    ratios: np.ndarray,
    overflowed: bool,
) -> HypothesisCheck:
    name = "ratio_limit_infinity"
    if len(ratios) == 0:
        return HypothesisCheck(name, False, "no finite samples")
    if spec.ell == 0.0:
        if overflowed:
            return HypothesisCheck(name, True, "f(s)/s overflows to +inf")
        growth = _decade_ratio(grid, ratios, len(grid) - 1)
        if growth is None:
            return HypothesisCheck(name, False, "sample grid spans less than a decade")
        passed = growth > 1.0 + LIMIT_TREND_TOL
        return HypothesisCheck(
            name,
            passed,
            f"last-decade growth of f(s)/s is {growth:.6g}",
            None if passed else (float(grid[-1] / 10.0), float(grid[-1])),
        )
    target = 1.0 / spec.ell
    measured = math.inf if overflowed else float(ratios[-1])
    passed = abs(measured - target) <= LIMIT_TOL * max(1.0, target)
    return HypothesisCheck(
        name,
        passed,
        f"f(s)/s at s={grid[-1]:.3g} is {measured:.6g}, expected {target:.6g}",
        None if passed else (float(grid[-1]), measured),
    )


def _check_limit_at_zero(
    spec: GeneralSpec,
    grid: np.ndarray,
    ratios: np.ndarray,
) -> HypothesisCheck:
    name = "ratio_limit_zero"
    if len(ratios) == 0:
        return HypothesisCheck(name, False, "no finite samples")
    if spec.kappa == UNBOUNDED:
        if ratios[0] == 0.0:
            return HypothesisCheck(name, True, "f(s)/s underflows to 0")
        decay = _decade_ratio(grid, ratios, 0)
        if decay is None:
            return HypothesisCheck(name, False, "sample grid spans less than a decade")
        passed = decay > 1.0 + LIMIT_TREND_TOL
        return HypothesisCheck(
            name,
            passed,
            f"first-decade decay of f(s)/s is {decay:.6g}",
            None if passed else (float(grid[0]), float(grid[0] * 10.0)),
        )
    target = 1.0 / float(spec.kappa)
    measured = float(ratios[0])
    passed = abs(measured - target) <= LIMIT_TOL * max(1.0, target)
    return HypothesisCheck(
        name,
        passed,
        f"f(s)/s at s={grid[0]:.3g} is {measured:.6g}, expected {target:.6g}",
        None if passed else (float(grid[0]), measured),
    )


def validate_hypotheses(
    spec: ProblemSpec,
    sample_grid: Sequence[float] = DEFAULT_SAMPLE_GRID,
) -> HypothesisReport:
    """在采样网格上数值检验 φ、f 的结构假设，不做符号证明。"""
    if isinstance(spec, HenonSpec):
        spec = henon_as_general(spec)
    grid = np.unique(np.asarray(sample_grid, dtype=float))
    grid = grid[grid > 0]

    grid_f, ratios, overflowed = _ratio_samples(spec, grid)
    checks = (
        _check_weight(spec, grid),
        _check_ratio_increasing(grid_f, ratios),
        _check_limit_at_infinity(spec, grid_f, ratios, overflowed),
        _check_limit_at_zero(spec, grid_f, ratios),
    )
    report = HypothesisReport(checks)
    if not report.passed:
        logger.info("结构假设未通过: %s", ", ".join(report.failed()))
    return report


def monotonicity_bound(N: int, alpha: float) -> float:
    """p − 1 低于该阈值时，解与障碍曲线至多相交两次。"""
    shift = N - 2
    return alpha * (math.sqrt(shift * shift + 4) - shift) / 2.0


def subsolution_residual(spec: HenonSpec, r: float) -> float:
    """−c″ − (N−1)c′/r + c 的精确值 r^{−2−k}[r² + k(N−2−k)]，k = α/(p−1)。"""
    if not r > 0:
        raise ValueError("residual is defined for r > 0")
    k = spec.alpha / (spec.p - 1.0)
    return _power(r, -2.0 - k) * (r * r + k * (spec.N - 2 - k))
