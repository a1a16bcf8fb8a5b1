from __future__ import annotations

import math

import numpy as np
import pytest

from src.config import IntegratorOptions
from src.integrator import (
    Event,
    Trajectory,
    integrate,
    series_start,
    start_radius,
    verify_integral_identity,
)
from src.problem import GeneralSpec, HenonSpec

HENON_335 = HenonSpec(N=3, alpha=3, p=5)
GAMMA_335 = 1.0816


def _linear_spec() -> GeneralSpec:
    # φ ≡ 0：u″ + 2u′/r = u，解为 γ sinh(r)/r
    return GeneralSpec(N=3, phi=lambda r: 0.0, f=lambda s: s * s)


def test_series_start_leading_terms() -> None:
    u, du = series_start(HENON_335, 1.0, 1e-6)

    assert du == pytest.approx(1e-6 / 3, rel=1e-12)
    assert (u - 1.0) * 2 / 1e-12 == pytest.approx(1.0 / 3, rel=1e-6)


def test_series_start_flat_when_forcing_balances() -> None:
    spec = GeneralSpec(N=3, phi=lambda r: 2.0, f=lambda s: s / 2.0, ell=2.0)

    assert series_start(spec, 1.5, 1e-6) == (1.5, 0.0)


def test_series_start_general_power_matches_henon() -> None:
    from src.problem import henon_as_general

    general = henon_as_general(HENON_335)
    for gamma in (0.5, 2.0, 40.0):
        expected = series_start(HENON_335, gamma, 1e-4)
        actual = series_start(general, gamma, 1e-4)
        assert actual[0] == pytest.approx(expected[0], rel=1e-13)
        assert actual[1] == pytest.approx(expected[1], rel=1e-9)


def test_start_radius_shrinks_for_large_gamma() -> None:
    assert start_radius(HENON_335, 1.0, 1e-6) == 1e-6
    small = start_radius(HENON_335, 1e8, 1e-6)
    assert small == pytest.approx(1e-3 * 1e8 ** (-4 / 3), rel=1e-10)


def test_integrate_linear_case_matches_closed_form() -> None:
    gamma = 0.7
    trajectory = integrate(_linear_spec(), gamma, 2.0)
    u, _ = trajectory.evaluate(np.array([1.0, 2.0]))

    assert trajectory.termination == "reached_r_max"
    assert trajectory.events == ()
    assert u[0] == pytest.approx(gamma * math.sinh(1.0), rel=1e-8)
    assert u[1] == pytest.approx(gamma * math.sinh(2.0) / 2.0, rel=1e-8)
    assert verify_integral_identity(trajectory) < 1e-8


def test_integrate_henon_orders_events() -> None:
    trajectory = integrate(HENON_335, GAMMA_335, 2.0)

    assert np.all(np.diff(trajectory.r) > 0)
    assert trajectory.r[0] == pytest.approx(1e-6)
    assert trajectory.uprime[0] >= 0
    crossing = trajectory.first("barrier_crossing")
    stationary = trajectory.first("stationary")
    assert crossing is not None and stationary is not None
    assert crossing.r < stationary.r
    assert stationary.second_derivative < 0
    _, du = trajectory.evaluate(np.array([stationary.r]))
    assert abs(du[0]) < 1e-8


def test_event_indices_count_per_kind() -> None:
    trajectory = integrate(HenonSpec(N=4, alpha=5, p=8), 1.034, 10.0)

    for kind in ("stationary", "barrier_crossing"):
        events = trajectory.events_of(kind)
        assert [event.index for event in events] == list(range(1, len(events) + 1))
    radii = [event.r for event in trajectory.events]
    assert radii == sorted(radii)


def test_integrate_detects_oscillations() -> None:
    trajectory = integrate(HenonSpec(N=4, alpha=5, p=8), 1.034, 10.0)
    inside = [r for r in trajectory.stationary_radii() if 0.2 <= r <= 10.0]

    assert len(inside) >= 2


def test_integrate_stops_on_positivity_loss() -> None:
    spec = GeneralSpec(N=3, phi=lambda r: 50.0, f=lambda s: 1.0)
    trajectory = integrate(spec, 1.0, 5.0)

    assert trajectory.termination == "positivity_loss"
    assert trajectory.u[-1] == pytest.approx(0.0, abs=1e-9)
    assert trajectory.events[-1].kind == "positivity_loss"


def test_integrate_stops_on_blow_up() -> None:
    spec = GeneralSpec(N=3, phi=lambda r: -1.0, f=lambda s: s * s)
    options = IntegratorOptions(u_blow_up_cap=1e6)
    trajectory = integrate(spec, 10.0, 5.0, options)

    assert trajectory.termination == "blow_up"
    assert trajectory.u[-1] == pytest.approx(1e6, rel=1e-6)
    assert trajectory.r_end < 5.0


def test_integrate_reports_step_failure() -> None:
    trajectory = integrate(HENON_335, GAMMA_335, 2.0, IntegratorOptions(max_steps=3))

    assert trajectory.termination == "step_failure"
    assert trajectory.message == "step limit reached"
    with pytest.raises(ValueError):
        verify_integral_identity(trajectory)


def test_integrate_holds_until_min_extent() -> None:
    options = IntegratorOptions(stop_after_stationary=1, min_extent=1.25)
    trajectory = integrate(HENON_335, GAMMA_335, 10.0, options)

    assert trajectory.termination == "stationary_limit"
    assert trajectory.r_end == pytest.approx(1.25)
    assert len(trajectory.stationary_radii()) >= 1


@pytest.mark.parametrize("gamma", [5.0, 50.0])
@pytest.mark.parametrize("rel_tol", [1e-10, 1e-4])
def test_events_stay_inside_truncated_trajectory(gamma: float, rel_tol: float) -> None:
    options = IntegratorOptions(
        stop_after_stationary=1, min_extent=1.25, rel_tol=rel_tol, abs_tol=rel_tol
    )
    trajectory = integrate(HenonSpec(N=4, alpha=5, p=8), gamma, 10.0, options)

    assert trajectory.termination == "stationary_limit"
    assert trajectory.r_end == pytest.approx(1.25)
    assert all(event.r <= trajectory.r_end for event in trajectory.events)
    stationary = [event.index for event in trajectory.events_of("stationary")]
    assert stationary == list(range(1, len(stationary) + 1))


def test_integrate_rejects_invalid_input() -> None:
    with pytest.raises(ValueError, match="gamma must be positive"):
        integrate(HENON_335, 0.0, 2.0)
    with pytest.raises(ValueError, match="r_max must be positive"):
        integrate(HENON_335, 1.0, -1.0)


def test_integral_identity_on_henon_trajectory() -> None:
    trajectory = integrate(HENON_335, GAMMA_335, 2.0)

    assert verify_integral_identity(trajectory) < 1e-6


def test_halving_start_radius_changes_little() -> None:
    tight = {"rel_tol": 1e-12, "abs_tol": 1e-12}
    coarse = integrate(HENON_335, GAMMA_335, 1.5, IntegratorOptions(r_start=1e-6, **tight))
    fine = integrate(HENON_335, GAMMA_335, 1.5, IntegratorOptions(r_start=5e-7, **tight))
    u_coarse, _ = coarse.evaluate(np.array([1.0]))
    u_fine, _ = fine.evaluate(np.array([1.0]))

    assert abs(u_coarse[0] - u_fine[0]) < 1e-10


def test_trajectory_columns_are_read_only() -> None:
    trajectory = integrate(_linear_spec(), 1.0, 1.0)

    with pytest.raises(ValueError):
        trajectory.u[0] = 2.0


def test_trajectory_rejects_unordered_nodes() -> None:
    with pytest.raises(ValueError, match="nodes not strictly increasing"):
        Trajectory(
            spec=HENON_335,
            gamma=1.0,
            r=np.array([0.1, 0.3, 0.2]),
            u=np.ones(3),
            uprime=np.zeros(3),
            events=(),
            termination="reached_r_max",
        )


def test_trajectory_without_dense_output_uses_hermite() -> None:
    r = np.linspace(0.1, 1.0, 5)
    trajectory = Trajectory(
        spec=HENON_335,
        gamma=0.0,
        r=r,
        u=r**2,
        uprime=2 * r,
        events=(Event(kind="stationary", r=0.5, index=1, u_value=0.25),),
        termination="reached_r_max",
    )
    u, du = trajectory.evaluate(np.array([0.33, 0.9]))

    assert u == pytest.approx([0.33**2, 0.81], rel=1e-12)
    assert du == pytest.approx([0.66, 1.8], rel=1e-12)
    assert trajectory.stationary_radii() == (0.5,)
