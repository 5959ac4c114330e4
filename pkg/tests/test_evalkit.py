import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from egoplan.errors import ShapeError
from egoplan.evalkit import (MethodRow, ObbPose, PlanningReport, aggregate_report, clearance_scenario,
                             collision_rate_grid, collision_rate_obb, divergence_scenario,
                             evaluate_method, format_table, l2_error, obb_overlap,
                             relative_improvement, write_report_csv, write_report_json, yaw_from_traj)
from egoplan.scene import Trajectory, ego_future, gen_scenario, make_agent

from oracles import boxes_overlap_sampled

GT = ego_future(5.0, 0.1)


def test_l2_zero_and_constant_offset():
    assert l2_error(GT, GT) == (0.0, 0.0, 0.0)
    shifted = Trajectory(GT.waypoints + [0.3, 0.4])
    np.testing.assert_allclose(l2_error(shifted, GT), (0.5, 0.5, 0.5), atol=1e-12)


def test_l2_uses_horizon_waypoint():
    plan = GT.waypoints.copy()
    plan[0] += [1.0, 0.0]  # 0.5 s, not a horizon waypoint
    plan[3] += [0.0, 2.0]  # 2 s
    assert l2_error(plan, GT) == (0.0, 2.0, 0.0)


def test_l2_shape_error():
    with pytest.raises(ShapeError):
        l2_error(GT.waypoints[:4], GT.waypoints[:4])
    with pytest.raises(ShapeError):
        l2_error(GT.waypoints, GT.waypoints[:5])


@given(st.floats(-50, 50), st.floats(-50, 50))
def test_l2_translation_equivariant(dx, dy):
    plan = Trajectory(GT.waypoints + [0.2, -0.1])
    a = l2_error(plan, GT)
    b = l2_error(plan.waypoints + [dx, dy], GT.waypoints + [dx, dy])
    np.testing.assert_allclose(a, b, atol=1e-9)


def test_uniad_row_average():
    rep = aggregate_report([MethodRow("UniAD", (0.48, 0.96, 1.65), (0.05, 0.17, 0.71))])[0]
    assert rep.l2_avg == pytest.approx(1.03, abs=1e-9)


def test_yaw_straight_motion():
    xs = np.arange(1, 7.0)
    assert np.all(yaw_from_traj(np.c_[xs, np.zeros(6)]) == 0.0)
    np.testing.assert_allclose(yaw_from_traj(np.c_[np.zeros(6), xs]), math.pi / 2)


def test_yaw_on_circle():
    R, v, dt = 10.0, 1.0, 0.5
    th = v / R * dt * np.arange(1, 7)
    wp = np.c_[R * np.sin(th), R - R * np.cos(th)]
    assert np.max(np.abs(yaw_from_traj(wp) - th)) <= 0.03


def test_yaw_stationary_inherits():
    wp = np.array([[0.0, 0.0], [0.01, 0.0], [0.01, 1.0], [0.01, 1.02]])
    np.testing.assert_allclose(yaw_from_traj(wp, 0.7), [0.7, 0.7, math.pi / 2, math.pi / 2])


def test_obb_trivial_cases():
    a = ObbPose(0, 0, 0.3, 2.0, 1.0)
    assert obb_overlap(a, a)
    assert not obb_overlap(a, ObbPose(100, 0, 0, 2.0, 1.0))
    # touching edges count
    assert obb_overlap(ObbPose(0, 0, 0, 1, 1), ObbPose(2, 0, 0, 1, 1))
    with pytest.raises(ValueError):
        ObbPose(0, 0, 0, 0.0, 1.0)


def test_rotated_squares_contact_distance():
    # unit square rotated 45 deg touches an axis-aligned unit square at 0.5 + sqrt(2)/2
    d = 0.5 + math.sqrt(2) / 2
    sq = ObbPose(0, 0, 0, 0.5, 0.5)
    assert obb_overlap(sq, ObbPose(d - 1e-6, 0, math.pi / 4, 0.5, 0.5))
    assert not obb_overlap(sq, ObbPose(d + 1e-6, 0, math.pi / 4, 0.5, 0.5))


def _random_pose(draw_rng, center_scale=4.0):
    return ObbPose(*draw_rng.uniform(-center_scale, center_scale, 2), draw_rng.uniform(-math.pi, math.pi),
                   draw_rng.uniform(0.2, 2.5), draw_rng.uniform(0.2, 1.5))


def test_obb_matches_sampling_oracle_small():
    rng = np.random.default_rng(11)
    for _ in range(100):
        a, b = _random_pose(rng), _random_pose(rng)
        lo = boxes_overlap_sampled(a.row(), b.row(), 2000, -1e-3)
        hi = boxes_overlap_sampled(a.row(), b.row(), 2000, 1e-3)
        if lo == hi:
            assert obb_overlap(a, b) == lo


@given(st.integers(0, 10_000))
def test_obb_symmetric_and_rigid_invariant(seed):
    rng = np.random.default_rng(seed)
    a, b = _random_pose(rng), _random_pose(rng)
    assert obb_overlap(a, b) == obb_overlap(b, a)
    th, tx, ty = rng.uniform(-math.pi, math.pi), *rng.uniform(-100, 100, 2)
    c, s = math.cos(th), math.sin(th)
    move = lambda p: ObbPose(c * p.x - s * p.y + tx, s * p.x + c * p.y + ty, p.yaw + th, p.half_length,
                             p.half_width)
    grow = lambda p, e: ObbPose(p.x, p.y, p.yaw, p.half_length + e, p.half_width + e)
    if obb_overlap(grow(a, -1e-9), grow(b, -1e-9)) == obb_overlap(grow(a, 1e-9), grow(b, 1e-9)):
        assert obb_overlap(move(a), move(b)) == obb_overlap(a, b)


def _head_on():
    # ego at 5 m/s; oncoming car meets it at t = 2 s
    plan = ego_future(5.0, 0.0)
    other = make_agent(1, 20.0 + 4.08, 0.0, math.pi, 5.0, "car")
    return plan, other


def test_head_on_collision_at_two_seconds():
    plan, other = _head_on()
    res = collision_rate_obb([plan], [[other]])
    assert res.first[0] is not None and 1 < (res.first[0] + 1) * 0.5 <= 2
    assert res.rates == (0.0, 100.0, 100.0)


def test_empty_scene_no_collision():
    assert collision_rate_obb([GT], [[]]).rates == (0.0, 0.0, 0.0)
    assert collision_rate_grid([GT], [[]]).rates == (0.0, 0.0, 0.0)


@pytest.mark.parametrize("tpl", ["straight_traffic", "cut_in", "intersection_left", "ped_crossing"])
def test_gt_plans_are_collision_free(tpl):
    scens = [gen_scenario(tpl, k) for k in range(5)]
    res = collision_rate_obb([s.ego_gt_future for s in scens], [s.agents for s in scens])
    assert res.rates == (0.0, 0.0, 0.0)


def test_missing_future_is_shape_error():
    plan, other = _head_on()
    with pytest.raises(ShapeError):
        collision_rate_obb([plan], [[(other.box, None)]])
    with pytest.raises(ShapeError):
        collision_rate_obb([plan], [[(other.box, other.gt_future.waypoints[:3])]])


def test_rates_monotone_in_horizon():
    plans, sets = [], []
    for k in range(10):
        s = gen_scenario("cut_in", k)
        plans.append(Trajectory(s.ego_gt_future.waypoints + [0.0, 1.5 * (k % 3)]))
        sets.append(s.agents)
    for res in (collision_rate_obb(plans, sets), collision_rate_grid(plans, sets)):
        assert res.rates[0] <= res.rates[1] <= res.rates[2]


def test_divergence_case():
    scen, plan = divergence_scenario(0)
    assert collision_rate_grid([plan], [scen.agents]).rates[2] == 100.0
    assert collision_rate_obb([plan], [scen.agents]).rates[2] == 0.0


def test_clearance_batch_agrees():
    pairs = [clearance_scenario(k) for k in range(5)]
    plans = [p for _, p in pairs]
    sets = [s.agents for s, _ in pairs]
    assert collision_rate_grid(plans, sets).first == collision_rate_obb(plans, sets).first


def test_report_arithmetic():
    uniad = MethodRow("UniAD", (0.48, 0.96, 1.65), (0.05, 0.17, 0.71))
    ours = MethodRow("ours", (0.16, 0.33, 0.59), (0.00, 0.04, 0.18))
    base, rep = aggregate_report([uniad, ours])
    assert base.l2_improvement == 0.0 and base.collision_improvement == 0.0
    assert rep.l2_avg == pytest.approx(0.36, abs=1e-9)
    assert rep.collision_avg == pytest.approx(0.22 / 3, abs=1e-12)
    assert abs(rep.l2_improvement - 0.66) <= 0.01
    assert abs(rep.collision_improvement - 0.77) <= 0.02
    # the table's rounded averages give the abstract's figures
    assert 100 * relative_improvement(1.03, 0.35) == pytest.approx(66.0, abs=0.5)
    assert 100 * relative_improvement(0.31, 0.07) == pytest.approx(77.4, abs=0.1)


def test_report_zero_baseline_and_bounds(tmp_path):
    rows = aggregate_report([MethodRow("a", (1, 1, 1), (0, 0, 0)), MethodRow("b", (1, 1, 1), (0, 0, 0))])
    assert rows[1].collision_improvement is None and rows[1].l2_improvement == 0.0
    with pytest.raises(ValueError):
        PlanningReport("x", (1, 1, 1), 1, (0, 0, 101), 0)
    write_report_csv(rows, tmp_path / "r.csv")
    write_report_json(rows, tmp_path / "r.json")
    assert (tmp_path / "r.csv").read_text().splitlines()[0].startswith("method,protocol,l2_1s")
    assert "undefined" in format_table(rows)


def test_evaluate_method_gt_plans():
    scens = [gen_scenario("straight_traffic", k) for k in range(3)]
    row, _ = evaluate_method("gt", [s.ego_gt_future for s in scens], scens, "grid")
    assert row.l2 == (0.0, 0.0, 0.0)
    with pytest.raises(ValueError):
        evaluate_method("gt", [], [], "lidar")
