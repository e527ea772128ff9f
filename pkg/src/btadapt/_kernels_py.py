"""Pure-Python waypoint kernels (fallback for ``_kernels``)."""
from __future__ import annotations

from math import sqrt

IN_PROGRESS = 0
GOAL_REACHED = 1
COLLISION = 2
FORBIDDEN_ZONE = 3
STEP_BUDGET = 4


def _max3(a: float, b: float, c: float) -> float:
    m = a
    if b > m:
        m = b
    if c > m:
        m = c
    return m


def rect_distance(x: float, z: float, xo: float, wo: float, ho: float) -> float:
    dx = _max3(xo - x, 0.0, x - (xo + wo))
    dz = _max3(0.0 - z, 0.0, z - ho)
    return sqrt(dx * dx + dz * dz)


def trace_motion(
    x0, z0, tx, tz, n_points,
    xo, wo, ho,
    forbidden, forbidden_height,
    gx, gz, goal_eps,
    max_steps, steps_so_far,
    w_g, w_c, d_safe,
    out,
):
    """Walk ``n_points`` waypoints from (x0, z0) to (tx, tz).

    Writes ``x, z, r_g, r_c`` rows into ``out`` and stops at the first terminal
    waypoint. Returns ``(terminal_code, n_traversed, weighted_reward_sum)``.
    """
    x0 = float(x0)
    z0 = float(z0)
    dx = float(tx) - x0
    dz = float(tz) - z0
    x_hi = xo + wo
    reward = 0.0
    code = IN_PROGRESS
    j = 0
    while j < n_points:
        j += 1
        t = j / n_points
        x = x0 + t * dx
        z = z0 + t * dz
        steps = steps_so_far + j
        gdx = x - gx
        gdz = z - gz
        dg = sqrt(gdx * gdx + gdz * gdz)
        r_g = -dg
        d = rect_distance(x, z, xo, wo, ho)
        v = 1.0 - d / d_safe
        if v < 0.0:
            v = 0.0
        r_c = -v
        reward = reward + (w_g * r_g + w_c * r_c)
        row = out[j - 1]
        row[0] = x
        row[1] = z
        row[2] = r_g
        row[3] = r_c
        if xo <= x <= x_hi and 0.0 <= z <= ho:
            code = COLLISION
            break
        if forbidden and xo <= x <= x_hi and ho < z <= ho + forbidden_height:
            code = FORBIDDEN_ZONE
            break
        if dg <= goal_eps:
            code = GOAL_REACHED
            break
        if steps >= max_steps:
            code = STEP_BUDGET
            break
    return code, j, reward
