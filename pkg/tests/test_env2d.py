from __future__ import annotations

import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from btadapt import kernels
from btadapt.env2d import (Context, EnvConfig, ObstacleEnv, State2D, Terminal, collides, completion_reward,
                           execute_motion, in_forbidden_zone, n_waypoints, obstacle_distance, reset,
                           validate_context, waypoint_reward)

CFG = EnvConfig()
C = Context(0.2, 0.1, 0.4)


def _segment_distance(px, pz, ax, az, bx, bz):
    vx, vz = bx - ax, bz - az
    t = ((px - ax) * vx + (pz - az) * vz) / (vx * vx + vz * vz)
    t = min(1.0, max(0.0, t))
    return math.hypot(px - (ax + t * vx), pz - (az + t * vz))


def _oracle_distance(c: Context, x: float, z: float) -> float:
    """Distance to the closed rectangle: 0 inside, else the nearest of the four edges."""
    x0, x1, h = c.x_o, c.x_o + c.w_o, c.h_o
    if x0 <= x <= x1 and 0.0 <= z <= h:
        return 0.0
    corners = [(x0, 0.0), (x1, 0.0), (x1, h), (x0, h)]
    return min(_segment_distance(x, z, *corners[k], *corners[(k + 1) % 4]) for k in range(4))


def _random_context(rng) -> Context:
    return Context(rng.uniform(*CFG.h_range), rng.uniform(*CFG.w_range), rng.uniform(*CFG.x_range))


# -- geometry ------------------------------------------------------------------


def test_collides_center_corner_above():
    assert collides(C, State2D(0.45, 0.1))
    assert collides(C, State2D(C.x_o, C.h_o))
    assert not collides(C, State2D(0.45, 0.21))


def test_forbidden_band():
    assert in_forbidden_zone(C, State2D(C.x_o + C.w_o / 2, C.h_o + 0.05))
    assert not in_forbidden_zone(C, State2D(C.x_o + C.w_o / 2, C.h_o + 0.15))
    for z in (0.0, 0.1, 0.25, 0.5):
        assert not in_forbidden_zone(C, State2D(C.x_o - 0.01, z))
    # the obstacle top belongs to the obstacle, not the band
    assert not in_forbidden_zone(C, State2D(0.45, C.h_o))


def test_distance_matches_segment_oracle_on_random_pairs():
    rng = np.random.default_rng(11)
    worst = 0.0
    for _ in range(10_000):
        c = _random_context(rng)
        x, z = rng.uniform(0, 1), rng.uniform(0, 0.8)
        d = obstacle_distance(c, State2D(x, z))
        worst = max(worst, abs(d - _oracle_distance(c, x, z)))
        assert (d == 0.0) == collides(c, State2D(x, z))
    assert worst < 1e-9


def test_distance_grid_search_upper_bounds():
    # brute-force nearest point on a fine grid over the rectangle: never closer than the exact value,
    # and within one grid cell of it
    rng = np.random.default_rng(3)
    for _ in range(50):
        c = _random_context(rng)
        xs = np.linspace(c.x_o, c.x_o + c.w_o, 201)
        zs = np.linspace(0.0, c.h_o, 201)
        gx, gz = np.meshgrid(xs, zs)
        x, z = rng.uniform(0, 1), rng.uniform(0, 0.8)
        grid = float(np.min(np.hypot(gx - x, gz - z)))
        exact = obstacle_distance(c, State2D(x, z))
        cell = math.hypot(c.w_o / 200, c.h_o / 200)
        assert exact <= grid + 1e-12
        assert grid - exact <= cell


def test_inside_point_has_zero_distance_on_grid():
    c = C
    for x in np.linspace(c.x_o, c.x_o + c.w_o, 7):
        for z in np.linspace(0, c.h_o, 7):
            assert obstacle_distance(c, State2D(x, z)) == 0.0
            _, r_c = waypoint_reward(CFG, c, State2D(x, z))
            assert r_c == -1.0


def test_waypoint_reward_cases():
    r_g, _ = waypoint_reward(CFG, C, State2D(*CFG.goal))
    assert r_g == 0.0
    _, r_c = waypoint_reward(CFG, C, State2D(0.1, 0.7))
    assert r_c == 0.0
    r_g, r_c = waypoint_reward(CFG, C, State2D(0.525, 0.1))  # 0.025 m right of the obstacle
    assert r_g == pytest.approx(-math.hypot(0.425, 0.05))
    assert r_c == pytest.approx(-0.5)


# -- motion --------------------------------------------------------------------


def test_fifty_waypoints_for_half_meter():
    cfg = EnvConfig(max_steps=1000)
    far = Context(0.1, 0.05, 0.55)
    out = execute_motion(cfg, far, State2D(0.0, 0.6), (0.5, 0.0), bounded=False)
    assert len(out.trace) == 50
    assert n_waypoints(0.5, 0.01) == 50
    steps = np.diff(np.vstack([[0.0, 0.6], out.waypoints]), axis=0)
    assert np.all(np.hypot(steps[:, 0], steps[:, 1]) <= 0.01 + 1e-12)
    assert out.terminal is Terminal.IN_PROGRESS


def test_collision_stops_at_first_inside_waypoint():
    out = execute_motion(CFG, C, State2D(0.3, 0.1), (0.3, 0.0))
    assert out.terminal is Terminal.COLLISION
    assert collides(C, out.end)
    assert all(not collides(C, State2D(x, z)) for x, z in out.waypoints[:-1])
    assert C.x_o <= out.end.x <= C.x_o + CFG.resolution + 1e-12


def test_goal_bonus_is_budget_minus_steps():
    cfg = EnvConfig()
    start = State2D(0.455, 0.05)
    out = execute_motion(cfg, Context(0.1, 0.05, 0.3), start, (0.5, 0.0), steps_so_far=2, bounded=False)
    assert out.terminal is Terminal.GOAL_REACHED
    assert out.n_steps_so_far == 50  # within goal_eps at the 48th waypoint, plus 2 earlier steps
    assert math.hypot(out.end.x - cfg.goal[0], out.end.z - cfg.goal[1]) <= cfg.goal_eps
    shaped = sum(cfg.w_g * r_g + cfg.w_c * r_c for r_g, r_c in out.trace[:, 2:])
    assert out.reward - shaped == pytest.approx(completion_reward(cfg, 50)) == 150.0


def test_step_budget_cuts_motion():
    cfg = EnvConfig(max_steps=20)
    out = execute_motion(cfg, C, State2D(0.05, 0.6), (0.4, 0.0))
    assert out.terminal is Terminal.STEP_BUDGET
    assert out.n_steps_so_far == 20


def test_delta_clamped_to_bound():
    a = execute_motion(CFG, C, State2D(0.05, 0.6), (0.9, 0.0))
    b = execute_motion(CFG, C, State2D(0.05, 0.6), (0.4, 0.0))
    np.testing.assert_array_equal(a.trace, b.trace)


def test_reset_validates_context():
    assert reset(CFG, C) == State2D(*CFG.start)
    with pytest.raises(ValueError):
        reset(CFG, Context(0.2, 0.1, 0.01))
    with pytest.raises(ValueError):
        validate_context(CFG, Context(0.9, 0.1, 0.4))


def test_backends_bit_identical():
    py = kernels.get_backend("python")
    rng = np.random.default_rng(5)
    try:
        compiled = kernels.get_backend("compiled")
    except ImportError:
        pytest.skip("compiled extension not built")
    for _ in range(300):
        c = _random_context(rng)
        start = State2D(rng.uniform(0, 1), rng.uniform(0, 0.8))
        delta = rng.uniform(-0.4, 0.4, 2)
        cfg = EnvConfig(forbidden=bool(rng.integers(2)))
        steps = int(rng.integers(0, 200))
        a = execute_motion(cfg, c, start, delta, steps, backend=py)
        b = execute_motion(cfg, c, start, delta, steps, backend=compiled)
        assert a.terminal == b.terminal
        assert a.reward == b.reward
        np.testing.assert_array_equal(a.trace, b.trace)


# -- invariants ----------------------------------------------------------------


def test_collision_dominance_with_defaults():
    # the worst collision-free success still beats the best collision
    best_collision = CFG.collision_penalty  # shaping terms are all <= 0
    assert CFG.worst_success_reward() > best_collision


@settings(max_examples=60, deadline=None)
@given(st.lists(st.tuples(st.floats(-0.4, 0.4), st.floats(-0.4, 0.4)), min_size=1, max_size=8),
       st.integers(0, 2**31 - 1))
def test_reward_telescopes_over_motions(deltas, seed):
    rng = np.random.default_rng(seed)
    c = _random_context(rng)
    env = ObstacleEnv(CFG)
    env.reset(c)
    parts = []
    for d in deltas:
        if env.done:
            break
        parts.append(env.step(d).reward)
    assert env.total_reward == pytest.approx(sum(parts), abs=1e-9)
    # no waypoint is counted twice: cumulative steps equal the traversed waypoints
    env2 = ObstacleEnv(CFG, record=True)
    env2.reset(c)
    for d in deltas:
        if env2.done:
            break
        env2.step(d)
    assert len(env2.trace_rows) == env2.n_steps


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 150), st.integers(0, 150))
def test_completion_reward_strictly_decreasing(a, b):
    if a < b:
        assert completion_reward(CFG, a) > completion_reward(CFG, b)


@settings(max_examples=100, deadline=None)
@given(st.floats(0.0, 1.0), st.floats(0.0, 0.8))
def test_forbidden_and_collision_disjoint(x, z):
    p = State2D(x, z)
    assert not (collides(C, p) and in_forbidden_zone(C, p))


def test_forbidden_motion_terminates():
    cfg = EnvConfig(forbidden=True)
    out = execute_motion(cfg, C, State2D(0.3, 0.25), (0.2, 0.0))
    assert out.terminal is Terminal.FORBIDDEN_ZONE
    assert out.terminal.failed
    assert out.reward <= cfg.collision_penalty


def test_trace_csv_rows_match_motion():
    env = ObstacleEnv(EnvConfig(), record=True)
    env.reset(Context(0.2, 0.1, 0.4))
    out = env.step((0.1, 0.0))
    lines = env.trace_csv(3).splitlines()
    assert lines[0] == "episode,step,x,z,r_g,r_c,terminal"
    assert len(lines) == 1 + len(out.trace)
    first = lines[1].split(",")
    assert first[:2] == ["3", "1"] and float(first[2]) == out.trace[0, 0]
    assert env.trace_csv(3, header=False).splitlines() == lines[1:]
