from __future__ import annotations

from types import SimpleNamespace

import numpy as np
import pytest

import src.shooting as shooting
from src.config import ShootingOptions
from src.problem import HenonSpec
from src.shooting import (
    GammaScan,
    NoBracketError,
    ScanRecord,
    ShootingError,
    TargetLostError,
    UndeterminedError,
    bracket_target,
    first_stationary_map,
    nth_stationary_map,
    scan,
    shoot,
)

HENON_335 = HenonSpec(N=3, alpha=3, p=5)


def _scan(*entries: tuple[float, tuple[float, ...], str]) -> GammaScan:
    records = tuple(
        ScanRecord(gamma=gamma, stationary=stationary, termination=termination)
        for gamma, stationary, termination in entries
    )
    return GammaScan(
        spec=HENON_335,
        gammas=tuple(record.gamma for record in records),
        records=records,
    )


def _fake_trajectory(termination: str, radii: tuple[float, ...] = ()) -> SimpleNamespace:
    return SimpleNamespace(
        termination=termination,
        message="mock",
        stationary_radii=lambda: radii,
    )


def test_scan_rejects_invalid_range() -> None:
    with pytest.raises(ValueError):
        scan(HENON_335, 10.0, 1.0, 8)
    with pytest.raises(ValueError):
        scan(HENON_335, 0.1, 1.0, 1)


def test_scan_records_are_ordered() -> None:
    result = scan(HENON_335, 1e-2, 1e3, 6, r_max=10.0, workers=2)

    assert list(result.gammas) == sorted(result.gammas)
    assert result.gammas[0] == pytest.approx(1e-2)
    for record in result.records:
        assert list(record.stationary) == sorted(record.stationary)
    smallest = result.records[0].value(1)
    assert smallest is None or smallest > 1.0
    assert result.records[-1].value(1) < 1.0


def test_bracket_target_finds_sign_change() -> None:
    grid = _scan(
        (0.01, (5.0,), "reached_r_max"),
        (0.1, (2.0,), "reached_r_max"),
        (1.0, (0.9,), "reached_r_max"),
        (10.0, (0.2,), "reached_r_max"),
    )

    assert bracket_target(HENON_335, 1, grid) == (0.1, 1.0)


def test_bracket_target_treats_missing_first_point_as_infinite() -> None:
    grid = _scan((0.01, (), "reached_r_max"), (1.0, (0.5,), "reached_r_max"))

    assert bracket_target(HENON_335, 1, grid) == (0.01, 1.0)


def test_bracket_target_skips_undetermined_records() -> None:
    grid = _scan(
        (0.1, (2.0,), "reached_r_max"),
        (1.0, (0.5,), "step_failure"),
        (2.0, (1.5,), "reached_r_max"),
        (3.0, (0.5,), "reached_r_max"),
    )

    assert bracket_target(HENON_335, 1, grid) == (2.0, 3.0)


def test_bracket_target_missing_higher_index_invalidates_pair() -> None:
    grid = _scan(
        (1.0, (0.5,), "reached_r_max"),
        (10.0, (0.3, 0.8), "reached_r_max"),
        (100.0, (0.1, 0.5), "reached_r_max"),
    )

    with pytest.raises(NoBracketError, match="no bracket: target index may not be attainable"):
        bracket_target(HENON_335, 2, grid)


def test_bracket_target_extends_upward(monkeypatch) -> None:
    monkeypatch.setattr(
        shooting,
        "first_stationary_map",
        lambda spec, gamma, *_args, **_kwargs: 2.0 if gamma < 50 else 0.5,
    )
    grid = _scan((1.0, (3.0,), "reached_r_max"), (10.0, (2.0,), "reached_r_max"))

    lo, hi = bracket_target(HENON_335, 1, grid)

    assert lo == pytest.approx(10.0)
    assert hi == pytest.approx(100.0)


def test_bracket_target_extends_downward(monkeypatch) -> None:
    monkeypatch.setattr(
        shooting,
        "first_stationary_map",
        lambda spec, gamma, *_args, **_kwargs: None if gamma < 1e-3 else 0.5,
    )
    grid = _scan((0.01, (0.8,), "reached_r_max"), (0.1, (0.5,), "reached_r_max"))

    lo, hi = bracket_target(HENON_335, 1, grid)

    assert lo == pytest.approx(1e-4)
    assert hi == pytest.approx(1e-3)


def test_bracket_target_gives_up_at_extension_limit(monkeypatch) -> None:
    calls: list[float] = []

    def fake_map(spec, gamma, *_args, **_kwargs):
        calls.append(gamma)
        return 2.0

    monkeypatch.setattr(shooting, "first_stationary_map", fake_map)
    grid = _scan((1.0, (3.0,), "reached_r_max"), (10.0, (2.0,), "reached_r_max"))

    with pytest.raises(NoBracketError):
        bracket_target(HENON_335, 1, grid)
    assert max(calls) <= ShootingOptions().extension_max * (1 + 1e-12)


def test_first_stationary_map_propagates_step_failure(monkeypatch) -> None:
    monkeypatch.setattr(
        shooting,
        "integrate",
        lambda *_args, **_kwargs: _fake_trajectory("step_failure"),
    )

    with pytest.raises(UndeterminedError):
        first_stationary_map(HENON_335, 1.0)


def test_first_stationary_map_returns_none_on_blow_up(monkeypatch) -> None:
    monkeypatch.setattr(
        shooting,
        "integrate",
        lambda *_args, **_kwargs: _fake_trajectory("blow_up"),
    )

    assert first_stationary_map(HENON_335, 1.0) is None


def test_first_stationary_map_doubles_r_max(monkeypatch) -> None:
    seen: list[float] = []

    def fake_integrate(spec, gamma, r_max, options):
        seen.append(r_max)
        if r_max < 40:
            return _fake_trajectory("reached_r_max")
        return _fake_trajectory("stationary_limit", (33.0,))

    monkeypatch.setattr(shooting, "integrate", fake_integrate)

    assert first_stationary_map(HENON_335, 1e-3) == 33.0
    assert seen == [10.0, 20.0, 40.0]


def test_first_stationary_map_on_henon() -> None:
    small = first_stationary_map(HENON_335, 0.05)
    large = first_stationary_map(HENON_335, 50.0)

    assert small is None or small > 1.0
    assert large is not None and large < 1.0


def test_nth_stationary_map_validates_index() -> None:
    with pytest.raises(ValueError):
        nth_stationary_map(HENON_335, 1.0, 0)


def test_nth_stationary_map_missing_index(monkeypatch) -> None:
    monkeypatch.setattr(
        shooting,
        "integrate",
        lambda *_args, **_kwargs: _fake_trajectory("reached_r_max", (0.4,)),
    )

    assert nth_stationary_map(HENON_335, 1.0, 2) is None
    assert nth_stationary_map(HENON_335, 1.0, 1) == 0.4


def test_shoot_rejects_tolerance_below_noise_floor() -> None:
    with pytest.raises(ValueError):
        shoot(HENON_335, 1, tol=1e-10)
    with pytest.raises(ValueError):
        shoot(HENON_335, 0)


def test_target_lost_error_carries_diagnostics() -> None:
    error = TargetLostError(150.0, 2, (140.0, 160.0), "blow_up")

    assert str(error) == "target index lost inside bracket"
    assert error.diagnostics() == {
        "gamma": 150.0,
        "n": 2,
        "bracket": [140.0, 160.0],
        "termination": "blow_up",
    }
    assert isinstance(error, ShootingError)


def _stub_bracket(monkeypatch, radius_of) -> list[float]:
    seen: list[float] = []

    def fake_integrate(spec, gamma, r_max, options):
        seen.append(gamma)
        radius = radius_of(gamma, options)
        return SimpleNamespace(
            termination="stationary_limit",
            message="",
            stationary_radii=lambda: (radius,),
            evaluate=lambda radii: (np.array([1.0]), np.array([0.0])),
        )

    monkeypatch.setattr(shooting, "scan", lambda *_args, **_kwargs: None)
    monkeypatch.setattr(shooting, "bracket_target", lambda *_args, **_kwargs: (1.0, 100.0))
    monkeypatch.setattr(shooting, "integrate", fake_integrate)
    return seen


def test_shoot_bisects_in_log_gamma(monkeypatch) -> None:
    seen = _stub_bracket(monkeypatch, lambda gamma, _options: (10.0 / gamma) ** 0.5)

    result = shoot(HENON_335, 1, 1e-6)

    assert seen[1] == pytest.approx(10.0, rel=1e-15)
    assert result.gamma_star == pytest.approx(10.0, rel=1e-15)
    assert result.iterations == 1


def test_shoot_rejects_final_residual_above_tol(monkeypatch) -> None:
    def radius_of(gamma, options):
        if options.rel_tol <= ShootingOptions().final_rel_tol:
            return 1.0 + 1e-3
        return (10.0 / gamma) ** 0.5

    _stub_bracket(monkeypatch, radius_of)

    with pytest.raises(ShootingError, match="final residual"):
        shoot(HENON_335, 1, 1e-6)


def test_shoot_first_solution_on_small_grid() -> None:
    options = ShootingOptions(gamma_min=0.1, gamma_max=100.0, scan_points=8)
    result = shoot(HENON_335, 1, 1e-6, shooting=options)

    assert result.gamma_star == pytest.approx(1.0816, rel=5e-3)
    assert result.residual < 1e-6
    assert abs(result.uprime_at_1) < 1e-6 * max(1.0, abs(result.u_at_1))
    assert result.trajectory.r_end == pytest.approx(1.25)
    assert result.bracket[0] <= result.gamma_star <= result.bracket[1]
    inside = result.trajectory.r < 1.0 - 1e-6
    assert np.all(np.diff(result.trajectory.u[inside]) > 0)
    assert result.to_record()["spec"] == {"N": 3, "alpha": 3.0, "p": 5.0}


@pytest.mark.slow
@pytest.mark.parametrize(
    ("N", "alpha", "p", "expected"),
    [(4, 5, 8, 1.0306), (10, 200, 50, 1.0135)],
)
def test_shoot_reproduces_published_values(N: int, alpha: float, p: float, expected: float) -> None:
    result = shoot(HenonSpec(N=N, alpha=alpha, p=p), 1, 1e-6)

    assert result.gamma_star == pytest.approx(expected, rel=5e-3)
    assert result.a_posteriori_shift < 1e-6


@pytest.mark.slow
@pytest.mark.parametrize("n", [2, 3])
def test_shoot_higher_index_has_no_bracket_on_default_range(n: int) -> None:
    with pytest.raises(NoBracketError):
        shoot(HenonSpec(N=4, alpha=5, p=8), n, 1e-6)


@pytest.mark.slow
def test_second_stationary_point_decreases_toward_unit_radius() -> None:
    spec = HenonSpec(N=4, alpha=5, p=8)
    values = [nth_stationary_map(spec, gamma, 2) for gamma in (155.0, 2584.0, 1e4)]

    assert values[0] == pytest.approx(1.2403, rel=1e-3)
    assert values[1] == pytest.approx(1.1167, rel=1e-3)
    assert values[0] > values[1] > values[2] > 1.0
