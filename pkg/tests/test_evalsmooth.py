import math

import pytest
from hypothesis import given
from hypothesis import strategies as st

from muloco.evalsmooth import (LossTrajectory, NoBoundaryPointsError, adaptive_coefficient, smoothed_final_loss,
                               smoothed_sequence)


def test_coefficient_at_sync_interval():
    assert adaptive_coefficient(0.2, 30, 30) == pytest.approx(1 - math.exp(-0.2), rel=1e-15)
    assert round(adaptive_coefficient(0.2, 30, 30), 3) == 0.181


def test_two_points_by_hand():
    traj = LossTrajectory((30, 60), (2.0, 1.0))
    assert smoothed_final_loss(traj, 0.2, 30) == pytest.approx(0.18127 * 1.0 + 0.81873 * 2.0, abs=1e-5)


def test_filters_to_boundaries():
    traj = LossTrajectory.from_pairs([(10, 9.0), (30, 2.0), (45, 7.0), (60, 1.0)])
    assert [t for t, _ in smoothed_sequence(traj)] == [30, 60]


def test_irregular_gap_uses_elapsed_steps():
    traj = LossTrajectory((30, 120), (2.0, 1.0))
    a = 1 - math.exp(-0.2 * 3)
    assert smoothed_final_loss(traj) == pytest.approx(a * 1.0 + (1 - a) * 2.0, rel=1e-15)


def test_no_boundary_points():
    with pytest.raises(NoBoundaryPointsError):
        smoothed_final_loss(LossTrajectory((1, 2), (1.0, 1.0)))


@pytest.mark.parametrize("steps,losses", [((2, 1), (1.0, 1.0)), ((1,), (1.0, 2.0)), ((30,), (math.nan,))])
def test_trajectory_validation(steps, losses):
    with pytest.raises(ValueError):
        LossTrajectory(steps, losses)


def test_parameter_validation():
    traj = LossTrajectory((30,), (1.0,))
    with pytest.raises(ValueError):
        smoothed_final_loss(traj, alpha=0.0)
    with pytest.raises(ValueError):
        smoothed_final_loss(traj, sync_interval=0)


@given(st.floats(-100, 100), st.integers(1, 30), st.floats(0.01, 2.0))
def test_constant_fixed_point(c, n, alpha):
    traj = LossTrajectory(tuple(30 * (i + 1) for i in range(n)), (c,) * n)
    assert smoothed_final_loss(traj, alpha) == pytest.approx(c, rel=1e-12, abs=1e-12)


@given(st.lists(st.floats(0.1, 10.0), min_size=2, max_size=20), st.integers(1, 5))
def test_stays_within_range(losses, gap):
    traj = LossTrajectory(tuple(30 * gap * (i + 1) for i in range(len(losses))), tuple(losses))
    s = smoothed_final_loss(traj)
    assert min(losses) - 1e-12 <= s <= max(losses) + 1e-12


@given(st.floats(0.1, 100.0), st.floats(0.1, 100.0), st.floats(0.01, 1.0))
def test_split_interval_semigroup(dt1, dt2, alpha):
    a1, a2 = adaptive_coefficient(alpha, dt1, 30), adaptive_coefficient(alpha, dt2, 30)
    assert (1 - a1) * (1 - a2) == pytest.approx(1 - adaptive_coefficient(alpha, dt1 + dt2, 30), rel=1e-12)
