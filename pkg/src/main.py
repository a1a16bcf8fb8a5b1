from __future__ import annotations

import argparse
import csv
import sys
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

from pydantic import ValidationError

from .analysis import CHECK_NAMES, DiagnosticReport, run_diagnostics
from .config import AppConfig, ProblemConfig, load_config
from .experiments import EXPERIMENT_IDS, load_manifest, run_experiment
from .export import (
    read_trajectory_csv,
    write_json,
    write_result,
    write_scan_csv,
    write_table_csv,
    write_trajectory,
)
from .integrator import integrate
from .logger import setup_logging
from .problem import BarrierEvaluationError, HenonSpec, ProblemSpec
from .shooting import NoBracketError, ShootingError, scan, shoot

EXIT_OK = 0
EXIT_INVALID = 1
EXIT_NO_BRACKET = 2
EXIT_NUMERICAL = 3


def _add_common(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--config", default=None, help="配置文件路径（默认 base-dir 下的 config.yaml）")
    parser.add_argument("--env", default=".env", help="环境变量文件路径")
    parser.add_argument("--base-dir", default=".", help="项目根目录")
    parser.add_argument("--N", type=int, default=None, help="空间维数")
    parser.add_argument("--alpha", default=None, help="权重指数，可写作有理数")
    parser.add_argument("--p", default=None, help="非线性指数，可写作有理数，如 25/3")
    parser.add_argument(
        "--nonlinearity",
        choices=["henon", "power", "exp"],
        default=None,
        help="非线性项族",
    )
    parser.add_argument("--exp-gamma", type=float, default=None, help="exp 族的系数 γ")
    parser.add_argument("--q", type=float, default=None, help="exp 族的指数 q")
    parser.add_argument("--beta", default=None, help="权重第二项指数 r^β")
    parser.add_argument("--n", type=int, default=1, help="目标驻点序号")
    parser.add_argument("--tol", type=float, default=1e-6, help="|R − 1| 容差")
    parser.add_argument("--rmax", type=float, default=None, help="积分区间右端")
    parser.add_argument("--workers", type=int, default=None, help="并发线程数")
    parser.add_argument("--format", choices=["csv", "json"], default=None, help="输出格式")
    parser.add_argument("--out", default=None, help="输出目录")


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(description="Neumann 径向解打靶求解器")
    commands = parser.add_subparsers(dest="command", required=True)

    solve = commands.add_parser("solve", help="打靶求第 n 个驻点位于 r=1 的解")
    _add_common(solve)

    trace = commands.add_parser("trace", help="给定 γ 输出轨迹与事件")
    _add_common(trace)
    trace.add_argument("--gamma", type=float, required=True, help="初值 u(0)")
    trace.add_argument("--skip-below", type=float, default=None, help="只输出 r 大于该值的节点")
    trace.add_argument("--sweep-p", nargs="+", default=None, help="对多个 p 依次积分")

    scan_parser = commands.add_parser("scan", help="扫描 γ 网格上的驻点半径")
    _add_common(scan_parser)
    scan_parser.add_argument("--gamma-min", type=float, default=None)
    scan_parser.add_argument("--gamma-max", type=float, default=None)
    scan_parser.add_argument("--points", type=int, default=None)

    table = commands.add_parser("table", help="批量打靶并输出 γ* 表")
    _add_common(table)
    table.add_argument("--rows", default=None, help="行文件 CSV: N,alpha,p[,n]")

    verify = commands.add_parser("verify", help="对解运行诊断")
    _add_common(verify)
    verify.add_argument("--gamma", type=float, default=None, help="直接积分的初值")
    verify.add_argument("--trajectory", default=None, help="已保存的轨迹 CSV")
    verify.add_argument("--events", default=None, help="轨迹对应的事件 CSV")
    verify.add_argument(
        "--check",
        action="append",
        choices=list(CHECK_NAMES),
        default=None,
        help="只运行指定检查，可重复",
    )

    experiments = commands.add_parser("experiments", help="运行数值实验清单")
    actions = experiments.add_subparsers(dest="action", required=True)
    run = actions.add_parser("run", help="运行单个实验")
    run.add_argument("experiment", choices=list(EXPERIMENT_IDS))
    run.add_argument("--out", required=True, help="输出目录")
    run.add_argument("--base-dir", default=".", help="项目根目录")
    run.add_argument("--manifests", default=None, help="清单目录")
    run.add_argument("--format", choices=["csv", "json"], default="csv")
    return parser


def _overrides(args: argparse.Namespace) -> dict:
    problem = {
        key: value
        for key, value in (
            ("N", args.N),
            ("alpha", args.alpha),
            ("p", args.p),
            ("nonlinearity", args.nonlinearity),
            ("gamma", args.exp_gamma),
            ("q", args.q),
            ("beta", args.beta),
        )
        if value is not None
    }
    shooting = {
        key: value
        for key, value in (
            ("r_max", args.rmax),
            ("workers", args.workers),
            ("gamma_min", getattr(args, "gamma_min", None)),
            ("gamma_max", getattr(args, "gamma_max", None)),
            ("scan_points", getattr(args, "points", None)),
        )
        if value is not None
    }
    output = {
        key: value
        for key, value in (("dir", args.out), ("format", args.format))
        if value is not None
    }
    overrides: dict = {}
    if problem:
        overrides["problem"] = problem
    if shooting:
        overrides["shooting"] = shooting
    if output:
        overrides["output"] = output
    return overrides


def _load(args: argparse.Namespace, base_dir: Path) -> AppConfig:
    if args.config is not None:
        config_path: Path | None = base_dir / args.config
    else:
        default_path = base_dir / "config.yaml"
        config_path = default_path if default_path.is_file() else None
    return load_config(
        config_path=config_path,
        env_path=base_dir / args.env,
        overrides=_overrides(args),
    )


def _require_spec(config: AppConfig) -> ProblemSpec:
    if config.problem is None:
        raise ValueError("problem parameters missing: pass --N/--alpha/--p or a config file")
    return config.problem.to_spec()


def _slug(spec: ProblemSpec) -> str:
    parts = [
        f"{key}{value:g}" if isinstance(value, float) else f"{key}{value}"
        for key, value in spec.describe().items()
    ]
    return "_".join(parts).replace(".", "d")


def _out_dir(config: AppConfig, base_dir: Path) -> Path:
    directory = config.output.dir
    return directory if directory.is_absolute() else base_dir / directory


def cmd_solve(args: argparse.Namespace, config: AppConfig, base_dir: Path) -> int:
    spec = _require_spec(config)
    if args.n < 1:
        raise ValueError("n must be at least 1")
    result = shoot(spec, args.n, args.tol, config.integrator, config.shooting)
    write_result(result, _out_dir(config, base_dir), f"solve_{_slug(spec)}_n{args.n}", config.output.format)
    print(f"gamma*   = {result.gamma_star:.10g}")
    print(f"R        = {result.achieved_R:.12g}")
    print(f"residual = {result.residual:.3e}")
    return EXIT_OK


def cmd_trace(args: argparse.Namespace, config: AppConfig, base_dir: Path) -> int:
    spec = _require_spec(config)
    if not args.gamma > 0:
        raise ValueError("gamma must be positive")
    specs = [spec]
    if args.sweep_p:
        if not isinstance(spec, HenonSpec):
            raise ValueError("--sweep-p requires the henon problem")
        specs = [HenonSpec(N=spec.N, alpha=spec.alpha, p=p) for p in args.sweep_p]
    options = config.integrator.model_copy(update={"stop_after_stationary": None, "min_extent": 0.0})
    r_max = config.shooting.r_max

    with ThreadPoolExecutor(max_workers=config.shooting.workers) as pool:
        trajectories = list(pool.map(lambda item: integrate(item, args.gamma, r_max, options), specs))

    out_dir = _out_dir(config, base_dir)
    for item, trajectory in zip(specs, trajectories):
        write_trajectory(
            trajectory,
            out_dir,
            f"trace_{_slug(item)}_gamma{args.gamma:g}".replace(".", "d"),
            config.output.format,
            args.skip_below,
        )
        print(
            f"{_slug(item)}: termination={trajectory.termination} "
            f"stationary={len(trajectory.stationary_radii())} "
            f"crossings={len(trajectory.events_of('barrier_crossing'))}"
        )
    return EXIT_OK


def cmd_scan(args: argparse.Namespace, config: AppConfig, base_dir: Path) -> int:
    spec = _require_spec(config)
    options = config.shooting
    result = scan(
        spec,
        options.gamma_min,
        options.gamma_max,
        options.scan_points,
        r_max=options.r_max,
        options=config.integrator,
        workers=options.workers,
    )
    out_dir = _out_dir(config, base_dir)
    if config.output.format == "json":
        write_json(
            [
                {"gamma": record.gamma, "stationary": list(record.stationary), "termination": record.termination}
                for record in result.records
            ],
            out_dir / f"scan_{_slug(spec)}.json",
        )
    else:
        write_scan_csv(result, out_dir / f"scan_{_slug(spec)}.csv")
    for index in range(1, result.max_index() + 1):
        values = result.values(index)
        changes = sum(
            1
            for a, b in zip(values, values[1:])
            if a is not None and b is not None and (a - 1.0) * (b - 1.0) < 0
        )
        print(f"R{index}: {changes} sign change(s) of R-1")
    return EXIT_OK


def _read_table_rows(path: Path) -> list[tuple[ProblemConfig, int]]:
    rows = []
    with path.open(encoding="utf-8", newline="") as handle:
        reader = csv.DictReader(handle)
        missing = {"N", "alpha", "p"} - set(reader.fieldnames or [])
        if missing:
            raise ValueError(f"{path}: missing columns {', '.join(sorted(missing))}")
        for row in reader:
            problem = ProblemConfig(N=int(row["N"]), alpha=row["alpha"], p=row["p"])
            rows.append((problem, int(row.get("n") or 1)))
    return rows


def _default_table_rows(base_dir: Path) -> list[tuple[ProblemConfig, int]]:
    manifest = load_manifest("table", base_dir / "manifests" if (base_dir / "manifests").is_dir() else None)
    return [
        (ProblemConfig(N=row.N, alpha=row.alpha, p=row.p), row.n)
        for row in manifest.rows
    ]


def cmd_table(args: argparse.Namespace, config: AppConfig, base_dir: Path) -> int:
    rows = _read_table_rows(base_dir / args.rows) if args.rows else _default_table_rows(base_dir)
    if not rows:
        raise ValueError("table requires at least one row")
    specs = [(problem.to_spec(), n) for problem, n in rows]

    def solve(item: tuple[ProblemSpec, int]) -> dict[str, object]:
        spec, n = item
        record: dict[str, object] = {**spec.describe(), "n": n, "gamma_star": None, "residual": None}
        try:
            result = shoot(spec, n, args.tol, config.integrator, config.shooting)
        except ShootingError as exc:
            record["error"] = str(exc)
            return record
        record.update(gamma_star=result.gamma_star, residual=result.residual)
        return record

    with ThreadPoolExecutor(max_workers=config.shooting.workers) as pool:
        records = list(pool.map(solve, specs))

    out_dir = _out_dir(config, base_dir)
    if config.output.format == "json":
        write_json(records, out_dir / "table.json")
    else:
        write_table_csv(records, out_dir / "table.csv")
    failures = 0
    for record in records:
        if record["gamma_star"] is None:
            failures += 1
            print(f"N={record['N']} alpha={record['alpha']} p={record['p']} n={record['n']}: {record['error']}")
        else:
            print(
                f"N={record['N']} alpha={record['alpha']:g} p={record['p']:g} n={record['n']}: "
                f"gamma*={record['gamma_star']:.6g}"
            )
    return EXIT_NUMERICAL if failures else EXIT_OK


def _print_report(report: DiagnosticReport) -> None:
    print(report.subject)
    for check in report.checks:
        measured = "-" if check.measured is None else f"{check.measured:.6g}"
        print(f"  {check.name:<24} {check.status:<15} {measured:>14}  {check.detail}")


def cmd_verify(args: argparse.Namespace, config: AppConfig, base_dir: Path) -> int:
    spec = _require_spec(config)
    if args.gamma is not None and not args.gamma > 0:
        raise ValueError("gamma must be positive")

    if args.trajectory:
        events_path = base_dir / args.events if args.events else None
        trajectory = read_trajectory_csv(
            base_dir / args.trajectory, spec, gamma=args.gamma, events_path=events_path
        )
    elif args.gamma is not None:
        options = config.integrator.model_copy(update={"stop_after_stationary": None, "min_extent": 0.0})
        trajectory = integrate(spec, args.gamma, config.shooting.r_max, options)
    else:
        trajectory = shoot(spec, args.n, args.tol, config.integrator, config.shooting).trajectory

    scan_result = None
    if args.check and "trend" in args.check:
        shooting = config.shooting
        scan_result = scan(
            spec,
            shooting.gamma_min,
            shooting.gamma_max,
            shooting.scan_points,
            r_max=shooting.r_max,
            options=config.integrator,
            workers=shooting.workers,
            stop_after_stationary=1,
        )

    report = run_diagnostics(trajectory, args.check, scan_result)
    write_json(
        {"subject": report.subject, "checks": report.to_records()},
        _out_dir(config, base_dir) / f"verify_{_slug(spec)}.json",
    )
    _print_report(report)
    return EXIT_OK if report.all_passed else EXIT_NUMERICAL


def cmd_experiments(args: argparse.Namespace, base_dir: Path) -> int:
    manifest_dir = base_dir / args.manifests if args.manifests else None
    out_dir = Path(args.out)
    if not out_dir.is_absolute():
        out_dir = base_dir / out_dir
    report = run_experiment(args.experiment, out_dir, manifest_dir, args.format)
    print(f"{args.experiment}: {'passed' if report.passed else 'FAILED'} {report.summary}")
    return EXIT_OK if report.passed else EXIT_NUMERICAL


COMMANDS = {
    "solve": cmd_solve,
    "trace": cmd_trace,
    "scan": cmd_scan,
    "table": cmd_table,
    "verify": cmd_verify,
}


def main(argv: list[str] | None = None) -> int:
    parser = _build_parser()
    args = parser.parse_args(argv)

    base_dir = Path(args.base_dir).resolve()
    logger = setup_logging(base_dir / "logs")

    try:
        if args.command == "experiments":
            return cmd_experiments(args, base_dir)
        config = _load(args, base_dir)
        logger.info("配置加载成功: %s", args.command)
        return COMMANDS[args.command](args, config, base_dir)
    except NoBracketError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_NO_BRACKET
    except (ValidationError, ValueError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID
    except (ShootingError, BarrierEvaluationError) as exc:
        logger.error("数值失败: %s", exc)
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL


if __name__ == "__main__":
    raise SystemExit(main())
