from __future__ import annotations

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Literal

import numpy as np
import yaml
from pydantic import BaseModel, ValidationError, field_validator, model_validator

from .analysis import CHECK_NAMES, run_diagnostics
from .config import IntegratorOptions, ProblemConfig, ShootingOptions
from .export import write_json, write_records_csv, write_table_csv, write_trajectory
from .integrator import integrate
from .problem import HenonSpec, _coerce_rational, henon_as_general
from .shooting import NoBracketError, ShootingError, ShootingResult, shoot

logger = logging.getLogger("henon_shooting")

DEFAULT_MANIFEST_DIR = Path(__file__).resolve().parent.parent / "manifests"
EXPERIMENT_IDS = ("table", "oscillations", "threshold", "general")

RowStatus = Literal["pass", "warn", "fail"]
Provenance = Literal["published", "derived", "trivial", "not_reproduced"]

COMPARISON_HEADER = (
    "N",
    "alpha",
    "p",
    "nonlinearity",
    "n",
    "expected",
    "gamma_star",
    "rel_error",
    "rel_tol",
    "reference",
    "reference_rel_error",
    "outcome",
    "residual",
    "status",
    "provenance",
    "anchor",
    "checks",
    "error",
)


class ManifestRow(BaseModel):
    N: int
    alpha: float
    p: float | None = None
    nonlinearity: Literal["henon", "power", "exp"] = "henon"
    gamma: float = 1.0
    q: float = 1.0
    n: int = 1
    expected: float | None = None
    rel_tol: float | None = None
    provenance: Provenance
    anchor: str
    skip_below: float | None = None
    # 已发表但未能复现的值，只记录偏差不参与判定
    reference: float | None = None
    outcome: Literal["solve", "no_bracket"] = "solve"

    @field_validator("alpha", "p", mode="before")
    @classmethod
    def _parse_rational(cls, value: object) -> object:
        return _coerce_rational(value)

    @model_validator(mode="after")
    def _validate_expectation(self) -> "ManifestRow":
        if self.expected is not None and self.rel_tol is None:
            raise ValueError("expected value requires rel_tol")
        if not self.anchor.strip():
            raise ValueError("anchor must not be empty")
        if self.outcome == "no_bracket" and self.expected is not None:
            raise ValueError("no_bracket rows must not carry an expected value")
        return self

    def to_spec(self):
        return ProblemConfig(
            N=self.N,
            alpha=self.alpha,
            p=self.p,
            nonlinearity=self.nonlinearity,
            gamma=self.gamma,
            q=self.q,
        ).to_spec()

    def describe(self) -> dict[str, object]:
        return {
            "N": self.N,
            "alpha": self.alpha,
            "p": self.p,
            "nonlinearity": self.nonlinearity,
            "n": self.n,
            "expected": self.expected,
            "rel_tol": self.rel_tol,
            "provenance": self.provenance,
            "anchor": self.anchor,
            "reference": self.reference,
            "outcome": self.outcome,
        }


class ThresholdSweep(BaseModel):
    N: int = 4
    alpha: float = 5.0
    gamma: float = 1.034
    p_min: float = 8.0
    p_max: float = 20.0
    p_step: float = 0.5
    r_max: float = 10.0
    window_min: float = 0.2
    min_stationary: int = 2
    expected_min: float = 14.0
    expected_max: float = 18.0
    provenance: Provenance = "published"
    anchor: str = "oscillations disappear above a threshold exponent"
    trace_p: list[float] = []

    @model_validator(mode="after")
    def _validate_sweep(self) -> "ThresholdSweep":
        if not (1.0 < self.p_min < self.p_max):
            raise ValueError("sweep requires 1 < p_min < p_max")
        if self.p_step <= 0:
            raise ValueError("p_step must be positive")
        if self.expected_min > self.expected_max:
            raise ValueError("expected_min must not exceed expected_max")
        return self

    def exponents(self) -> list[float]:
        count = int(round((self.p_max - self.p_min) / self.p_step)) + 1
        return [float(p) for p in np.linspace(self.p_min, self.p_min + (count - 1) * self.p_step, count)]


class ExperimentManifest(BaseModel):
    id: Literal["table", "oscillations", "threshold", "general"]
    description: str = ""
    tol: float = 1e-6
    workers: int = 1
    checks: list[str] = []
    rows: list[ManifestRow] = []
    sweep: ThresholdSweep | None = None
    pathway_check: ManifestRow | None = None
    pathway_tol: float = 1e-8
    integrator: IntegratorOptions = IntegratorOptions()
    shooting: ShootingOptions = ShootingOptions()

    @field_validator("checks")
    @classmethod
    def _validate_checks(cls, value: list[str]) -> list[str]:
        unknown = [name for name in value if name not in CHECK_NAMES]
        if unknown:
            raise ValueError(f"unknown check: {', '.join(unknown)}")
        return value

    @field_validator("workers")
    @classmethod
    def _validate_workers(cls, value: int) -> int:
        if value <= 0:
            raise ValueError("workers 必须大于 0")
        return value

    @model_validator(mode="after")
    def _validate_payload(self) -> "ExperimentManifest":
        if self.id == "threshold" and self.sweep is None:
            raise ValueError("threshold manifest requires a sweep section")
        if self.id in ("table", "oscillations", "general") and not self.rows:
            raise ValueError(f"{self.id} manifest requires rows")
        return self


@dataclass
class ExperimentReport:
    experiment_id: str
    rows: list[dict[str, object]]
    passed: bool
    summary: dict[str, object] = field(default_factory=dict)
    outputs: list[Path] = field(default_factory=list)

    def to_record(self) -> dict[str, object]:
        return {
            "experiment": self.experiment_id,
            "passed": self.passed,
            "summary": self.summary,
            "rows": self.rows,
            "outputs": [str(path) for path in self.outputs],
        }


def load_manifest(
    experiment_id: str,
    manifest_dir: Path | None = None,
) -> ExperimentManifest:
    if experiment_id not in EXPERIMENT_IDS:
        raise ValueError(f"unknown experiment: {experiment_id}")
    path = Path(manifest_dir or DEFAULT_MANIFEST_DIR) / f"{experiment_id}.yaml"
    if not path.is_file():
        raise FileNotFoundError(f"清单文件不存在: {path}")
    data = yaml.safe_load(path.read_text(encoding="utf-8")) or {}
    try:
        return ExperimentManifest.model_validate(data)
    except ValidationError as exc:
        raise ValueError(f"清单校验失败: {exc}") from exc


def compare_value(computed: float, expected: float | None, rel_tol: float | None) -> tuple[RowStatus, float | None]:
    """相对误差在容差内为 pass，两倍容差内为 warn。"""
    if expected is None or rel_tol is None:
        return "pass", None
    rel_error = abs(computed - expected) / abs(expected)
    if rel_error <= rel_tol:
        return "pass", rel_error
    if rel_error <= 2 * rel_tol:
        return "warn", rel_error
    return "fail", rel_error


def _solve_row(
    manifest: ExperimentManifest,
    row: ManifestRow,
) -> tuple[dict[str, object], ShootingResult | None]:
    record: dict[str, object] = {key: None for key in COMPARISON_HEADER}
    record.update(row.describe())
    try:
        result = shoot(row.to_spec(), row.n, manifest.tol, manifest.integrator, manifest.shooting)
    except NoBracketError as exc:
        if row.outcome == "no_bracket":
            logger.info("按预期找不到括号: %s", row.describe())
            record.update(status="pass", error=str(exc))
        else:
            logger.warning("行求解失败: %s (%s)", row.describe(), exc)
            record.update(status="fail", error=str(exc))
        return record, None
    except (ShootingError, ValueError) as exc:
        logger.warning("行求解失败: %s (%s)", row.describe(), exc)
        record.update(status="fail", error=str(exc))
        return record, None

    status, rel_error = compare_value(result.gamma_star, row.expected, row.rel_tol)
    record.update(
        gamma_star=result.gamma_star,
        residual=result.residual,
        rel_error=rel_error,
        status=status,
    )
    if row.reference is not None:
        record["reference_rel_error"] = abs(result.gamma_star - row.reference) / abs(row.reference)
    if row.outcome == "no_bracket":
        logger.warning("预期无解的行收敛了: %s gamma*=%s", row.describe(), result.gamma_star)
        record.update(status="warn", error="converged where no bracket was expected")
    if manifest.checks:
        report = run_diagnostics(result.trajectory, manifest.checks)
        record["checks"] = ";".join(f"{check.name}={check.status}" for check in report.checks)
        if not report.all_passed:
            record["status"] = "fail"
    if result.residual >= manifest.tol:
        record["status"] = "fail"
    return record, result


def _map_rows(
    manifest: ExperimentManifest,
    worker: Callable,
    items: list,
) -> list:
    if manifest.workers == 1:
        return [worker(item) for item in items]
    with ThreadPoolExecutor(max_workers=manifest.workers) as pool:
        return list(pool.map(worker, items))


def _status_counts(rows: list[dict[str, object]]) -> dict[str, int]:
    counts = {"pass": 0, "warn": 0, "fail": 0}
    for row in rows:
        counts[str(row["status"])] += 1
    return counts


def _label(row: dict[str, object]) -> str:
    return f"N={row['N']} alpha={row['alpha']:g} p={row['p']:g} n={row['n']}"


def _deviations(rows: list[dict[str, object]]) -> dict[str, list[str]]:
    """已发表值与计算值不一致的行，单独列出。"""
    discrepant = [
        _label(row)
        for row in rows
        if row["reference"] is not None and row["outcome"] == "solve"
    ]
    not_reproduced = [_label(row) for row in rows if row["outcome"] == "no_bracket"]
    return {"discrepant": discrepant, "not_reproduced": not_reproduced}


def exp_table(
    manifest: ExperimentManifest,
    out_dir: Path,
    fmt: Literal["csv", "json"] = "csv",
) -> ExperimentReport:
    """复现 γ* 表：逐行打靶并与已发表值比对。"""
    out_dir = Path(out_dir)
    solved = _map_rows(manifest, lambda row: _solve_row(manifest, row), manifest.rows)
    rows = [record for record, _ in solved]
    outputs = [
        write_table_csv(rows, out_dir / "table.csv"),
        write_records_csv(COMPARISON_HEADER, rows, out_dir / "table_comparison.csv"),
    ]
    counts = _status_counts(rows)
    summary = {**counts, **_deviations(rows)}
    report = ExperimentReport("table", rows, counts["fail"] == 0, summary, outputs)
    logger.info("table 实验完成: %s", counts)
    return report


def exp_oscillations(
    manifest: ExperimentManifest,
    out_dir: Path,
    fmt: Literal["csv", "json"] = "csv",
) -> ExperimentReport:
    """第 n = 1, 2, 3 个驻点落在 r=1 的振荡解，并输出整段轨迹。"""
    out_dir = Path(out_dir)
    solved = _map_rows(manifest, lambda row: _solve_row(manifest, row), manifest.rows)
    rows = []
    outputs: list[Path] = []
    for (record, result), row in zip(solved, manifest.rows):
        rows.append(record)
        if result is None:
            continue
        profile = integrate(
            result.spec, result.gamma_star, manifest.shooting.r_max, manifest.integrator
        )
        outputs.extend(
            write_trajectory(profile, out_dir, f"oscillation_n{row.n}", fmt, row.skip_below)
        )
    outputs.append(
        write_records_csv(COMPARISON_HEADER, rows, out_dir / "oscillations_comparison.csv")
    )
    counts = _status_counts(rows)
    logger.info("oscillations 实验完成: %s", counts)
    summary = {**counts, **_deviations(rows)}
    return ExperimentReport("oscillations", rows, counts["fail"] == 0, summary, outputs)


def _format_exponent(p: float) -> str:
    return format(p, "g").replace(".", "_")


def exp_threshold(
    manifest: ExperimentManifest,
    out_dir: Path,
    fmt: Literal["csv", "json"] = "csv",
) -> ExperimentReport:
    """固定 γ 扫描 p，统计 [window_min, r_max] 内的驻点数，估计振荡消失的阈值。"""
    out_dir = Path(out_dir)
    sweep = manifest.sweep
    options = manifest.integrator.model_copy(
        update={"stop_after_stationary": None, "min_extent": 0.0}
    )

    def count(p: float):
        spec = HenonSpec(N=sweep.N, alpha=sweep.alpha, p=p)
        trajectory = integrate(spec, sweep.gamma, sweep.r_max, options)
        inside = [
            radius
            for radius in trajectory.stationary_radii()
            if sweep.window_min <= radius <= sweep.r_max
        ]
        return {"p": p, "stationary_count": len(inside), "termination": trajectory.termination}, trajectory

    sampled = _map_rows(manifest, count, sweep.exponents())
    rows = [record for record, _ in sampled]
    oscillating = [row["p"] for row in rows if row["stationary_count"] >= sweep.min_stationary]
    estimate = max(oscillating) if oscillating else None
    passed = estimate is not None and sweep.expected_min <= estimate <= sweep.expected_max

    outputs = [
        write_records_csv(("p", "stationary_count", "termination"), rows, out_dir / "threshold.csv")
    ]
    traced = {round(p, 9) for p in sweep.trace_p}
    for record, trajectory in sampled:
        if round(record["p"], 9) in traced:
            outputs.extend(
                write_trajectory(
                    trajectory,
                    out_dir,
                    f"threshold_p{_format_exponent(record['p'])}",
                    fmt,
                    sweep.window_min,
                )
            )
    summary = {
        "estimate": estimate,
        "expected_min": sweep.expected_min,
        "expected_max": sweep.expected_max,
        "provenance": sweep.provenance,
        "anchor": sweep.anchor,
    }
    logger.info("threshold 实验完成: 估计值=%s", estimate)
    return ExperimentReport("threshold", rows, passed, summary, outputs)


def exp_general(
    manifest: ExperimentManifest,
    out_dir: Path,
    fmt: Literal["csv", "json"] = "csv",
) -> ExperimentReport:
    """一般非线性项的打靶，外加 Hénon 问题两条计算路径的一致性比对。"""
    out_dir = Path(out_dir)
    solved = _map_rows(manifest, lambda row: _solve_row(manifest, row), manifest.rows)
    rows = []
    outputs: list[Path] = []
    for index, ((record, result), row) in enumerate(zip(solved, manifest.rows), start=1):
        rows.append(record)
        if result is not None:
            outputs.extend(write_trajectory(result.trajectory, out_dir, f"general_{index}", fmt))

    summary: dict[str, object] = {}
    pathways_agree = True
    if manifest.pathway_check is not None:
        check_row = manifest.pathway_check
        spec = check_row.to_spec()
        try:
            direct = shoot(spec, check_row.n, manifest.tol, manifest.integrator, manifest.shooting)
            general = shoot(
                henon_as_general(spec), check_row.n, manifest.tol, manifest.integrator, manifest.shooting
            )
            difference = abs(direct.gamma_star - general.gamma_star)
            pathways_agree = difference <= manifest.pathway_tol
            summary.update(
                pathway_gamma_henon=direct.gamma_star,
                pathway_gamma_general=general.gamma_star,
                pathway_difference=difference,
                pathway_tol=manifest.pathway_tol,
            )
        except (ShootingError, ValueError) as exc:
            pathways_agree = False
            summary["pathway_error"] = str(exc)

    outputs.append(write_records_csv(COMPARISON_HEADER, rows, out_dir / "general_comparison.csv"))
    counts = _status_counts(rows)
    summary.update(counts)
    passed = counts["fail"] == 0 and pathways_agree
    logger.info("general 实验完成: %s", summary)
    return ExperimentReport("general", rows, passed, summary, outputs)


RUNNERS: dict[str, Callable[..., ExperimentReport]] = {
    "table": exp_table,
    "oscillations": exp_oscillations,
    "threshold": exp_threshold,
    "general": exp_general,
}


def run_experiment(
    experiment_id: str,
    out_dir: Path,
    manifest_dir: Path | None = None,
    fmt: Literal["csv", "json"] = "csv",
) -> ExperimentReport:
    manifest = load_manifest(experiment_id, manifest_dir)
    out_dir = Path(out_dir)
    report = RUNNERS[experiment_id](manifest, out_dir, fmt)
    report.outputs.append(write_json(report.to_record(), out_dir / f"{experiment_id}_report.json"))
    return report
