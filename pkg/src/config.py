from __future__ import annotations

import importlib
from copy import deepcopy
from pathlib import Path
from typing import Any, Callable, Literal, Union

import yaml
from pydantic import BaseModel, ValidationError, field_validator, model_validator
from pydantic_settings import BaseSettings, SettingsConfigDict

from .problem import (
    UNBOUNDED,
    GeneralSpec,
    HenonSpec,
    ProblemSpec,
    _coerce_rational,
    make_general_spec,
)

DEFAULT_CONFIG_PATH = Path("config.yaml")
DEFAULT_ENV_PATH = Path(".env")


def _deep_merge(base: dict, override: dict) -> dict:
    result = deepcopy(base)
    for key, value in override.items():
        if (
            isinstance(value, dict)
            and isinstance(result.get(key), dict)
        ):
            result[key] = _deep_merge(result[key], value)
        else:
            result[key] = value
    return result


def _resolve_reference(reference: str) -> Callable[[float], float]:
    module_name, _, attr = reference.partition(":")
    if not module_name or not attr:
        raise ValueError(f"引用格式应为 module:attr: {reference}")
    try:
        target = getattr(importlib.import_module(module_name), attr)
    except (ImportError, AttributeError) as exc:
        raise ValueError(f"无法解析引用: {reference}") from exc
    if not callable(target):
        raise ValueError(f"引用对象不可调用: {reference}")
    return target


class ProblemConfig(BaseModel):
    """扁平键值形式的问题描述，nonlinearity 缺省时为 Hénon 问题。"""

    N: int
    alpha: float | None = None
    p: float | None = None
    nonlinearity: Literal["henon", "power", "exp", "custom"] = "henon"
    gamma: float = 1.0
    q: float = 1.0
    beta: float | None = None
    phi_ref: str | None = None
    f_ref: str | None = None
    ell: float = 0.0
    kappa: Union[float, Literal["unbounded"]] = UNBOUNDED
    weight_exponent: float | None = None

    @field_validator("alpha", "p", "beta", mode="before")
    @classmethod
    def _parse_rational(cls, value: object) -> object:
        return _coerce_rational(value)

    @model_validator(mode="after")
    def _validate_family(self) -> "ProblemConfig":
        if self.nonlinearity in ("henon", "power", "exp") and self.alpha is None:
            raise ValueError("alpha is required for this nonlinearity")
        if self.nonlinearity in ("henon", "power") and self.p is None:
            raise ValueError("p is required for this nonlinearity")
        if self.nonlinearity == "custom" and not (self.phi_ref and self.f_ref):
            raise ValueError("custom nonlinearity requires phi_ref and f_ref")
        return self

    def to_spec(self) -> ProblemSpec:
        if self.nonlinearity == "henon":
            return HenonSpec(N=self.N, alpha=self.alpha, p=self.p)
        if self.nonlinearity == "custom":
            return GeneralSpec(
                N=self.N,
                phi=_resolve_reference(self.phi_ref),
                f=_resolve_reference(self.f_ref),
                ell=self.ell,
                kappa=self.kappa,
                weight_exponent=self.weight_exponent,
                label="custom",
                params={},
            )
        return make_general_spec(
            self.N,
            self.nonlinearity,
            alpha=self.alpha,
            p=self.p,
            gamma=self.gamma,
            q=self.q,
            beta=self.beta,
        )


class IntegratorOptions(BaseModel):
    rel_tol: float = 1e-10
    abs_tol: float = 1e-10
    r_start: float = 1e-6
    u_blow_up_cap: float = 1e8
    event_tol: float = 1e-12
    degenerate_tol: float = 1e-8
    method: Literal["DOP853", "RK45", "RK23"] = "DOP853"
    samples_per_step: int = 4
    max_steps: int = 200000
    stop_after_stationary: int | None = None
    min_extent: float = 0.0

    @field_validator(
        "rel_tol",
        "abs_tol",
        "r_start",
        "u_blow_up_cap",
        "event_tol",
        "degenerate_tol",
    )
    @classmethod
    def _validate_positive(cls, value: float) -> float:
        if not value > 0:
            raise ValueError("数值必须大于 0")
        return value

    @field_validator("r_start")
    @classmethod
    def _validate_r_start(cls, value: float) -> float:
        if value >= 1e-2:
            raise ValueError("r_start 必须远小于 1")
        return value

    @field_validator("samples_per_step", "max_steps")
    @classmethod
    def _validate_positive_int(cls, value: int) -> int:
        if value <= 0:
            raise ValueError("数值必须大于 0")
        return value

    @field_validator("stop_after_stationary")
    @classmethod
    def _validate_stop_after(cls, value: int | None) -> int | None:
        if value is not None and value <= 0:
            raise ValueError("stop_after_stationary 必须大于 0")
        return value

    @field_validator("min_extent")
    @classmethod
    def _validate_min_extent(cls, value: float) -> float:
        if value < 0:
            raise ValueError("min_extent 不能小于 0")
        return value


class ShootingOptions(BaseModel):
    gamma_min: float = 1e-2
    gamma_max: float = 1e4
    scan_points: int = 64
    r_max: float = 10.0
    r_max_cap: float = 1e4
    extension_min: float = 1e-8
    extension_max: float = 1e8
    max_iterations: int = 200
    final_rel_tol: float = 1e-12
    margin: float = 0.25
    workers: int = 1

    @field_validator(
        "gamma_min",
        "gamma_max",
        "r_max",
        "r_max_cap",
        "extension_min",
        "extension_max",
        "final_rel_tol",
        "margin",
    )
    @classmethod
    def _validate_positive(cls, value: float) -> float:
        if not value > 0:
            raise ValueError("数值必须大于 0")
        return value

    @field_validator("scan_points")
    @classmethod
    def _validate_points(cls, value: int) -> int:
        if value < 2:
            raise ValueError("scan_points 至少为 2")
        return value

    @field_validator("max_iterations", "workers")
    @classmethod
    def _validate_positive_int(cls, value: int) -> int:
        if value <= 0:
            raise ValueError("数值必须大于 0")
        return value

    @model_validator(mode="after")
    def _validate_ranges(self) -> "ShootingOptions":
        if self.gamma_min >= self.gamma_max:
            raise ValueError("gamma_min 必须小于 gamma_max")
        if self.extension_min > self.gamma_min or self.extension_max < self.gamma_max:
            raise ValueError("扩展区间必须覆盖扫描区间")
        if self.r_max_cap < self.r_max:
            raise ValueError("r_max_cap 不能小于 r_max")
        return self


class OutputConfig(BaseModel):
    dir: Path = Path("output")
    format: Literal["csv", "json"] = "csv"


class AppConfig(BaseModel):
    problem: ProblemConfig | None = None
    integrator: IntegratorOptions = IntegratorOptions()
    shooting: ShootingOptions = ShootingOptions()
    output: OutputConfig = OutputConfig()


class EnvSettings(BaseSettings):
    model_config = SettingsConfigDict(
        env_file=str(DEFAULT_ENV_PATH),
        env_nested_delimiter="__",
        extra="ignore",
    )

    problem: dict[str, Any] | None = None
    integrator: dict[str, Any] | None = None
    shooting: dict[str, Any] | None = None
    output: dict[str, Any] | None = None


def load_config(
    config_path: Path | str | None = DEFAULT_CONFIG_PATH,
    env_path: Path | str = DEFAULT_ENV_PATH,
    overrides: dict | None = None,
) -> AppConfig:
    data: dict = {}
    if config_path is not None:
        config_path = Path(config_path)
        if not config_path.is_file():
            raise FileNotFoundError(f"配置文件不存在: {config_path}")
        data = yaml.safe_load(config_path.read_text(encoding="utf-8")) or {}
        if not isinstance(data, dict):
            raise ValueError(f"配置文件必须是键值映射: {config_path}")

    env_path = Path(env_path)
    env_settings = EnvSettings(
        _env_file=str(env_path) if env_path.is_file() else None,
    )
    merged = _deep_merge(data, env_settings.model_dump(exclude_none=True))
    if overrides:
        merged = _deep_merge(merged, overrides)

    try:
        return AppConfig.model_validate(merged)
    except ValidationError as exc:
        raise ValueError(f"配置校验失败: {exc}") from exc
