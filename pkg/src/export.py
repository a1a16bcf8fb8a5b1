from __future__ import annotations

import csv
import io
import json
import logging
import os
import tempfile
from pathlib import Path
from typing import Iterable, Literal, Sequence

import numpy as np

from .integrator import EVENT_KINDS, Event, Trajectory
from .problem import ProblemSpec
from .shooting import GammaScan, ShootingResult

logger = logging.getLogger("henon_shooting")

TRAJECTORY_HEADER = ("r", "u", "uprime")
EVENTS_HEADER = ("kind", "index", "r", "u", "second_derivative")
TABLE_HEADER = ("N", "alpha", "p", "n", "gamma_star", "residual")
DEGENERATE_TOL = 1e-8


def format_float(value: float | None) -> str:
    if value is None:
        return ""
    return format(float(value), ".17g")


def atomic_write_text(path: Path, text: str) -> Path:
    """先写同目录临时文件再替换，避免留下半截输出。"""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp_name = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "w", encoding="utf-8", newline="") as handle:
            handle.write(text)
        os.replace(tmp_name, path)
    except BaseException:
        Path(tmp_name).unlink(missing_ok=True)
        raise
    return path


def _csv_text(header: Sequence[str], rows: Iterable[Sequence[object]]) -> str:
    buffer = io.StringIO()
    writer = csv.writer(buffer, lineterminator="\n")
    writer.writerow(header)
    for row in rows:
        writer.writerow(
            [format_float(cell) if isinstance(cell, (float, np.floating)) else cell for cell in row]
        )
    return buffer.getvalue()


def _node_mask(traj: Trajectory, skip_below: float | None) -> np.ndarray:
    if skip_below is None:
        return np.ones(len(traj.r), dtype=bool)
    return traj.r > skip_below


def write_trajectory_csv(
    traj: Trajectory,
    path: Path,
    skip_below: float | None = None,
) -> Path:
    mask = _node_mask(traj, skip_below)
    rows = zip(traj.r[mask].tolist(), traj.u[mask].tolist(), traj.uprime[mask].tolist())
    return atomic_write_text(path, _csv_text(TRAJECTORY_HEADER, rows))


def _event_row(event: Event) -> tuple[object, ...]:
    return (event.kind, event.index, event.r, event.u_value, event.second_derivative)


def write_events_csv(
    traj: Trajectory,
    path: Path,
    skip_below: float | None = None,
) -> Path:
    events = [
        event for event in traj.events if skip_below is None or event.r > skip_below
    ]
    return atomic_write_text(path, _csv_text(EVENTS_HEADER, map(_event_row, events)))


def trajectory_record(traj: Trajectory, skip_below: float | None = None) -> dict[str, object]:
    mask = _node_mask(traj, skip_below)
    return {
        "spec": traj.spec.describe(),
        "gamma": traj.gamma,
        "termination": traj.termination,
        "nodes": [
            {"r": r, "u": u, "uprime": du}
            for r, u, du in zip(
                traj.r[mask].tolist(), traj.u[mask].tolist(), traj.uprime[mask].tolist()
            )
        ],
        "events": [
            dict(zip(EVENTS_HEADER, _event_row(event)))
            for event in traj.events
            if skip_below is None or event.r > skip_below
        ],
    }


def write_json(record: object, path: Path) -> Path:
    # json 默认 repr 输出浮点，可无损往返
    return atomic_write_text(path, json.dumps(record, ensure_ascii=False, indent=2) + "\n")


def write_trajectory(
    traj: Trajectory,
    out_dir: Path,
    stem: str,
    fmt: Literal["csv", "json"] = "csv",
    skip_below: float | None = None,
) -> list[Path]:
    out_dir = Path(out_dir)
    if fmt == "json":
        return [write_json(trajectory_record(traj, skip_below), out_dir / f"{stem}.json")]
    return [
        write_trajectory_csv(traj, out_dir / f"{stem}.csv", skip_below),
        write_events_csv(traj, out_dir / f"{stem}_events.csv", skip_below),
    ]


def write_result(
    result: ShootingResult,
    out_dir: Path,
    stem: str,
    fmt: Literal["csv", "json"] = "csv",
) -> list[Path]:
    out_dir = Path(out_dir)
    paths = [write_json(result.to_record(), out_dir / f"{stem}_result.json")]
    paths.extend(write_trajectory(result.trajectory, out_dir, f"{stem}_trajectory", fmt))
    return paths


def write_scan_csv(scan_result: GammaScan, path: Path) -> Path:
    width = max(scan_result.max_index(), 1)
    header = ("gamma", *(f"R{index}" for index in range(1, width + 1)), "termination")
    rows = []
    for record in scan_result.records:
        radii = [record.value(index) for index in range(1, width + 1)]
        rows.append((record.gamma, *(format_float(radius) for radius in radii), record.termination))
    return atomic_write_text(path, _csv_text(header, rows))


def write_records_csv(
    header: Sequence[str],
    rows: Iterable[dict[str, object]],
    path: Path,
) -> Path:
    ordered = [tuple(row.get(key) for key in header) for row in rows]
    return atomic_write_text(path, _csv_text(header, ordered))


def write_table_csv(rows: Iterable[dict[str, object]], path: Path) -> Path:
    return write_records_csv(TABLE_HEADER, rows, path)


def _read_rows(path: Path, header: Sequence[str]) -> list[dict[str, str]]:
    with Path(path).open(encoding="utf-8", newline="") as handle:
        reader = csv.DictReader(handle)
        missing = [name for name in header if name not in (reader.fieldnames or [])]
        if missing:
            raise ValueError(f"{path}: missing columns {', '.join(missing)}")
        return list(reader)


def _optional_float(text: str | None) -> float | None:
    if text is None or text.strip() == "":
        return None
    return float(text)


def read_events_csv(path: Path) -> tuple[Event, ...]:
    events = []
    for row in _read_rows(path, EVENTS_HEADER):
        kind = row["kind"].strip()
        if kind not in EVENT_KINDS:
            raise ValueError(f"{path}: unknown event kind {kind!r}")
        second = _optional_float(row["second_derivative"])
        events.append(
            Event(
                kind=kind,
                r=float(row["r"]),
                index=int(row["index"]),
                u_value=float(row["u"]),
                second_derivative=second,
                degenerate=second is not None and abs(second) < DEGENERATE_TOL,
            )
        )
    return tuple(sorted(events, key=lambda event: event.r))


def read_trajectory_csv(
    path: Path,
    spec: ProblemSpec,
    gamma: float | None = None,
    events_path: Path | None = None,
) -> Trajectory:
    """读回 r,u,uprime 轨迹；节点顺序由 Trajectory 校验。"""
    rows = _read_rows(path, TRAJECTORY_HEADER)
    if not rows:
        raise ValueError(f"{path}: no nodes")
    r = np.array([float(row["r"]) for row in rows])
    u = np.array([float(row["u"]) for row in rows])
    uprime = np.array([float(row["uprime"]) for row in rows])
    events = read_events_csv(events_path) if events_path is not None else ()
    logger.info("读取轨迹: %s (%d 节点, %d 事件)", path, len(r), len(events))
    return Trajectory(
        spec=spec,
        gamma=float(u[0]) if gamma is None else gamma,
        r=r,
        u=u,
        uprime=uprime,
        events=events,
        termination="reached_r_max",
        message=f"loaded from {path}",
    )
