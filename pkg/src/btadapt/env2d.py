"""2D point-robot obstacle-avoidance environment.

The robot moves between a fixed start ``S`` and goal ``G`` by straight-line
motions that are discretized into waypoints. A rectangular obstacle stands on
the floor; its height, width and left edge form the episodic context.
"""
from __future__ import annotations

import csv
import enum
import io
import logging
import math
from dataclasses import dataclass, field

import numpy as np

from . import kernels

log = logging.getLogger(__name__)

TRACE_HEADER = ("episode", "step", "x", "z", "r_g", "r_c", "terminal")


class Terminal(enum.IntEnum):
    IN_PROGRESS = kernels.IN_PROGRESS
    GOAL_REACHED = kernels.GOAL_REACHED
    COLLISION = kernels.COLLISION
    FORBIDDEN_ZONE = kernels.FORBIDDEN_ZONE
    STEP_BUDGET = kernels.STEP_BUDGET

    @property
    def done(self) -> bool:
        return self is not Terminal.IN_PROGRESS

    @property
    def failed(self) -> bool:
        return self in (Terminal.COLLISION, Terminal.FORBIDDEN_ZONE)


@dataclass(frozen=True)
class Context:
    """Obstacle height, width and x of the bottom-left corner (meters)."""

    h_o: float
    w_o: float
    x_o: float

    def as_array(self) -> np.ndarray:
        return np.array([self.h_o, self.w_o, self.x_o], dtype=float)

    @classmethod
    def from_array(cls, values) -> "Context":
        h, w, x = (float(v) for v in values)
        return cls(h, w, x)


@dataclass(frozen=True)
class State2D:
    x: float
    z: float

    def as_array(self) -> np.ndarray:
        return np.array([self.x, self.z], dtype=float)


CONTEXT_FIELDS = ("h_o", "w_o", "x_o")


@dataclass
class EnvConfig:
    x_bounds: tuple[float, float] = (0.0, 1.0)
    z_bounds: tuple[float, float] = (0.0, 0.8)
    start: tuple[float, float] = (0.05, 0.05)
    goal: tuple[float, float] = (0.95, 0.05)
    resolution: float = 0.01
    goal_eps: float = 0.02
    max_steps: int = 200
    w_g: float = 0.1
    w_c: float = 0.3
    d_safe: float = 0.05
    collision_penalty: float = -100.0
    forbidden: bool = False
    forbidden_height: float = 0.10
    action_bound: float = 0.4
    h_range: tuple[float, float] = (0.10, 0.40)
    w_range: tuple[float, float] = (0.05, 0.30)
    x_range: tuple[float, float] = (0.25, 0.55)

    def __post_init__(self) -> None:
        if self.resolution <= 0:
            raise ValueError("resolution must be positive")
        if self.max_steps < 1:
            raise ValueError("max_steps must be >= 1")
        if self.d_safe <= 0:
            raise ValueError("d_safe must be positive")
        for name in ("x_bounds", "z_bounds", "h_range", "w_range", "x_range"):
            lo, hi = getattr(self, name)
            if not lo <= hi:
                raise ValueError(f"{name} must satisfy lo <= hi, got {(lo, hi)}")
            setattr(self, name, (float(lo), float(hi)))
        self.start = (float(self.start[0]), float(self.start[1]))
        self.goal = (float(self.goal[0]), float(self.goal[1]))

    @property
    def context_ranges(self) -> list[tuple[float, float]]:
        return [self.h_range, self.w_range, self.x_range]

    def worst_success_reward(self) -> float:
        """Lower bound on the return of any collision-free episode reaching G."""
        (x0, x1), (z0, z1) = self.x_bounds, self.z_bounds
        diag = math.hypot(x1 - x0, z1 - z0)
        return -self.max_steps * (self.w_g * diag + self.w_c)


def validate_context(cfg: EnvConfig, c: Context) -> None:
    for name, (lo, hi) in zip(CONTEXT_FIELDS, cfg.context_ranges):
        v = getattr(c, name)
        if not lo - 1e-12 <= v <= hi + 1e-12:
            raise ValueError(f"context {name}={v} outside range [{lo}, {hi}]")
    if c.h_o <= 0 or c.w_o <= 0:
        raise ValueError("obstacle must have positive height and width")
    sx, gx = cfg.start[0], cfg.goal[0]
    if not (sx < c.x_o and c.x_o + c.w_o < gx):
        raise ValueError(
            f"obstacle [{c.x_o}, {c.x_o + c.w_o}] must lie strictly between start x={sx} and goal x={gx}"
        )


def collides(c: Context, p: State2D) -> bool:
    """Closed-rectangle membership: boundary points count as collision."""
    return c.x_o <= p.x <= c.x_o + c.w_o and 0.0 <= p.z <= c.h_o


def in_forbidden_zone(c: Context, p: State2D, height: float = 0.10) -> bool:
    return c.x_o <= p.x <= c.x_o + c.w_o and c.h_o < p.z <= c.h_o + height


def obstacle_distance(c: Context, p: State2D) -> float:
    """Euclidean distance from ``p`` to the obstacle rectangle (0 inside)."""
    return kernels.rect_distance(p.x, p.z, c.x_o, c.w_o, c.h_o)


def waypoint_reward(cfg: EnvConfig, c: Context, p: State2D) -> tuple[float, float]:
    """Unweighted ``(r_g, r_c)`` for one waypoint."""
    gdx = p.x - cfg.goal[0]
    gdz = p.z - cfg.goal[1]
    r_g = -math.sqrt(gdx * gdx + gdz * gdz)
    v = 1.0 - obstacle_distance(c, p) / cfg.d_safe
    if v < 0.0:
        v = 0.0
    return r_g, -v


def completion_reward(cfg: EnvConfig, n_steps: int) -> float:
    return float(cfg.max_steps - n_steps)


@dataclass
class MotionOutcome:
    """Result of one linear motion.

    ``trace`` has one row per traversed waypoint: ``x, z, r_g, r_c``.
    """

    trace: np.ndarray
    terminal: Terminal
    reward: float
    n_steps_so_far: int

    @property
    def waypoints(self) -> np.ndarray:
        return self.trace[:, :2]

    @property
    def end(self) -> State2D:
        if len(self.trace) == 0:
            raise ValueError("empty motion")
        return State2D(float(self.trace[-1, 0]), float(self.trace[-1, 1]))


def n_waypoints(length: float, resolution: float) -> int:
    return max(1, math.ceil(length / resolution - 1e-9))


def _clamp(v: float, lo: float, hi: float) -> float:
    return lo if v < lo else hi if v > hi else v


def execute_motion(
    cfg: EnvConfig,
    c: Context,
    start: State2D,
    delta,
    steps_so_far: int = 0,
    bounded: bool = True,
    backend=None,
) -> MotionOutcome:
    """Move from ``start`` by ``delta`` = (dx, dz), waypoint by waypoint.

    ``bounded`` clips each delta component to the configured action bound;
    the unparameterized final motion passes ``bounded=False``.
    """
    dx, dz = float(delta[0]), float(delta[1])
    if bounded:
        b = cfg.action_bound
        if abs(dx) > b or abs(dz) > b:
            log.debug("clamping motion delta (%g, %g) to +-%g", dx, dz, b)
            dx, dz = _clamp(dx, -b, b), _clamp(dz, -b, b)
    tx = _clamp(start.x + dx, *cfg.x_bounds)
    tz = _clamp(start.z + dz, *cfg.z_bounds)
    k = n_waypoints(math.hypot(tx - start.x, tz - start.z), cfg.resolution)
    out = np.empty((k, 4), dtype=float)
    impl = kernels if backend is None else backend
    code, n, reward = impl.trace_motion(
        start.x, start.z, tx, tz, k,
        c.x_o, c.w_o, c.h_o,
        cfg.forbidden, cfg.forbidden_height,
        cfg.goal[0], cfg.goal[1], cfg.goal_eps,
        cfg.max_steps, steps_so_far,
        cfg.w_g, cfg.w_c, cfg.d_safe,
        out,
    )
    terminal = Terminal(code)
    steps = steps_so_far + n
    if terminal is Terminal.GOAL_REACHED:
        reward += completion_reward(cfg, steps)
    elif terminal.failed:
        reward += cfg.collision_penalty
    return MotionOutcome(out[:n], terminal, reward, steps)


def reset(cfg: EnvConfig, c: Context) -> State2D:
    validate_context(cfg, c)
    return State2D(*cfg.start)


@dataclass
class ObstacleEnv:
    """Stateful wrapper: one episode at a time, cumulative step count."""

    cfg: EnvConfig
    context: Context | None = None
    state: State2D | None = None
    n_steps: int = 0
    terminal: Terminal = Terminal.IN_PROGRESS
    total_reward: float = 0.0
    record: bool = False
    trace_rows: list = field(default_factory=list)

    def reset(self, c: Context) -> State2D:
        self.state = reset(self.cfg, c)
        self.context = c
        self.n_steps = 0
        self.terminal = Terminal.IN_PROGRESS
        self.total_reward = 0.0
        self.trace_rows = []
        return self.state

    @property
    def done(self) -> bool:
        return self.terminal.done

    def step(self, delta, bounded: bool = True) -> MotionOutcome:
        if self.state is None or self.context is None:
            raise RuntimeError("reset() must be called before step()")
        if self.done:
            raise RuntimeError("episode already finished")
        out = execute_motion(self.cfg, self.context, self.state, delta, self.n_steps, bounded)
        if self.record:
            first = self.n_steps + 1
            for j, (x, z, r_g, r_c) in enumerate(out.trace):
                last = j == len(out.trace) - 1
                term = out.terminal if last else Terminal.IN_PROGRESS
                self.trace_rows.append((first + j, x, z, r_g, r_c, term.name))
        self.state = out.end
        self.n_steps = out.n_steps_so_far
        self.terminal = out.terminal
        self.total_reward += out.reward
        return out

    def trace_csv(self, episode: int, header: bool = True) -> str:
        """Recorded waypoints of the current episode as CSV rows."""
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        if header:
            w.writerow(TRACE_HEADER)
        for step, x, z, r_g, r_c, term in self.trace_rows:
            w.writerow([episode, step, repr(float(x)), repr(float(z)), repr(float(r_g)), repr(float(r_c)), term])
        return buf.getvalue()

    def move_to(self, target) -> MotionOutcome:
        """Unbounded motion to an absolute target (the final, fixed motion)."""
        return self.step((target[0] - self.state.x, target[1] - self.state.z), bounded=False)

    def in_collision(self) -> bool:
        return collides(self.context, self.state)

    def in_forbidden(self) -> bool:
        return self.cfg.forbidden and in_forbidden_zone(self.context, self.state, self.cfg.forbidden_height)
