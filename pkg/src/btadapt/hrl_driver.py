"""Step-based upper-level parameter selection for a Behavior-Tree lower-level policy.

Each time the tree starts an Action Node the upper-level SAC policy is queried
with ``(context, node index, robot state)`` and returns a fixed-size parameter
vector; the node consumes its prefix and runs its motion to completion or until
the tree's guard halts it. One replay transition is stored per Action Node.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .bt_engine import (COLLISION_FREE, GOAL_MOTION, OUTSIDE_FORBIDDEN, RELATIVE_MOTION, ActionSlot,
                        BehaviorTree, NodeStatus, build_chain_bt)
from .env2d import Context, EnvConfig, MotionOutcome, ObstacleEnv, State2D, Terminal
from .sac_learner import DivergenceError, SacAgent, SacConfig, Transition
from .sampling_eval import EvalPoint, LearningCurve

log = logging.getLogger(__name__)

INDEX_NONE = -1.5

Observer = Callable[..., None]


def compute_p(slot_dims) -> int:
    """Size of the upper-level action: the largest per-node parameter count."""
    dims = list(slot_dims)
    if not dims:
        raise ValueError("slot_dims must be non-empty")
    return max(int(d) for d in dims)


def _norm(v, lo, hi):
    return 2.0 * (v - lo) / (hi - lo) - 1.0 if hi > lo else 0.0


@dataclass
class ObsEncoder:
    """Maps context, node index and state to a normalized observation vector."""

    cfg: EnvConfig
    n_actions: int
    index_encoding: str = "scalar"

    def __post_init__(self) -> None:
        if self.index_encoding not in ("scalar", "onehot"):
            raise ValueError(f"index_encoding must be 'scalar' or 'onehot', got {self.index_encoding!r}")

    @property
    def index_dim(self) -> int:
        return 1 if self.index_encoding == "scalar" else self.n_actions

    @property
    def dim(self) -> int:
        return 3 + self.index_dim + 2

    def context(self, c: Context) -> np.ndarray:
        return np.array([_norm(v, lo, hi) for v, (lo, hi) in zip((c.h_o, c.w_o, c.x_o), self.cfg.context_ranges)])

    def state(self, x: State2D) -> np.ndarray:
        return np.array([_norm(x.x, *self.cfg.x_bounds), _norm(x.z, *self.cfg.z_bounds)])

    def index(self, i: int | None) -> np.ndarray:
        if self.index_encoding == "onehot":
            v = np.zeros(self.n_actions)
            if i is not None:
                v[i - 1] = 1.0
            return v
        if i is None:
            return np.array([INDEX_NONE])
        if self.n_actions == 1:
            return np.array([0.0])
        return np.array([_norm(float(i), 1.0, float(self.n_actions))])

    def upper(self, c: Context, i: int | None, x: State2D) -> np.ndarray:
        return np.concatenate([self.context(c), self.index(i), self.state(x)])


def make_upper_obs(c_e: Context, an_index: int | None, x: State2D, encoder: ObsEncoder) -> np.ndarray:
    return encoder.upper(c_e, an_index, x)


class BtWorld:
    """Environment view handed to the tree: guard predicates and motion feedback."""

    def __init__(self, env: ObstacleEnv) -> None:
        self.env = env
        self.feedback: dict[int, NodeStatus] = {}

    def check(self, predicate_id: str) -> bool:
        if predicate_id == COLLISION_FREE:
            return not self.env.in_collision()
        if predicate_id == OUTSIDE_FORBIDDEN:
            return not self.env.in_forbidden()
        raise KeyError(predicate_id)

    def action_started(self, slot: ActionSlot) -> None:
        self.feedback[slot.index] = NodeStatus.RUNNING

    def action_feedback(self, slot: ActionSlot) -> NodeStatus:
        return self.feedback.get(slot.index, NodeStatus.RUNNING)

    def complete(self, index: int, outcome: MotionOutcome) -> None:
        ok = outcome.terminal in (Terminal.IN_PROGRESS, Terminal.GOAL_REACHED)
        self.feedback[index] = NodeStatus.SUCCESS if ok else NodeStatus.FAILURE


def execute_slot(env: ObstacleEnv, slot: ActionSlot) -> MotionOutcome:
    if slot.motion_spec == GOAL_MOTION:
        return env.move_to(slot.target)
    if slot.motion_spec == RELATIVE_MOTION:
        return env.step(slot.params)
    raise ValueError(f"unsupported motion spec {slot.motion_spec!r}")


@dataclass
class EpisodeRecord:
    context: Context
    total_reward: float = 0.0
    success: bool = False
    collision: bool = False
    n_steps: int = 0
    terminal: Terminal = Terminal.IN_PROGRESS
    theta_log: list[tuple[int, np.ndarray]] = field(default_factory=list)
    n_transitions: int = 0
    structural_failure: bool = False


def _finish(rec: EpisodeRecord, env: ObstacleEnv) -> EpisodeRecord:
    rec.total_reward = env.total_reward
    rec.n_steps = env.n_steps
    rec.terminal = env.terminal
    rec.success = env.terminal is Terminal.GOAL_REACHED
    rec.collision = env.terminal.failed
    return rec


def _advance(tree: BehaviorTree, world: BtWorld, outcome: MotionOutcome, rec: EpisodeRecord,
             observer: Observer | None) -> tuple[bool, int | None]:
    """Choose the next Action Node after a motion. Returns ``(done, next_index)``."""
    if outcome.terminal.failed:
        # the guard fails on this tick and halts the running motion
        status, _ = tree.tick(world)
        if observer:
            observer("tick", status=status, active=None)
        return True, None
    if outcome.terminal.done:
        tree.halt()
        return True, None
    status, nxt = tree.tick(world)
    if observer:
        observer("tick", status=status, active=nxt)
    if status is NodeStatus.RUNNING:
        return False, nxt
    if status is NodeStatus.FAILURE:
        rec.structural_failure = True
        log.warning("tree failed without a collision cause (context %s)", rec.context)
    return True, None


def run_episode(env: ObstacleEnv, tree: BehaviorTree, agent: SacAgent, c_e: Context, train: bool,
                rng: np.random.Generator, encoder: ObsEncoder, observer: Observer | None = None) -> EpisodeRecord:
    """One episode of step-based parameter selection; stores and learns from transitions when ``train``."""
    tree.halt()
    world = BtWorld(env)
    x = env.reset(c_e)
    if observer:
        observer("context", context=c_e, state=x)
    rec = EpisodeRecord(c_e)
    status, a_t = tree.tick(world)
    if observer:
        observer("tick", status=status, active=a_t)
    done = status is not NodeStatus.RUNNING
    if done:
        rec.structural_failure = True
    while not done:
        s = encoder.upper(c_e, a_t, x)
        if train and agent.buffer.n_pushed < agent.cfg.warmup:
            theta_hat = agent.random_action(rng)
        else:
            theta_hat = agent.act(s, deterministic=not train, rng=rng)
        if observer:
            observer("query", index=a_t, obs=s, theta_hat=theta_hat)
        tree.set_slot_params(a_t, theta_hat)
        rec.theta_log.append((a_t, theta_hat))
        outcome = execute_slot(env, tree.slots[a_t])
        world.complete(a_t, outcome)
        x = env.state
        if observer:
            observer("execute", index=a_t, outcome=outcome)
        done, a_next = _advance(tree, world, outcome, rec, observer)
        t = Transition(s, theta_hat, outcome.reward, encoder.upper(c_e, a_next, x), done, a_next is None)
        rec.n_transitions += 1
        if train:
            agent.buffer.push(t)
            if observer:
                observer("push", transition=t)
            info = agent.maybe_update(rng)
            if observer and info is not None:
                observer("update", info=info)
        a_t = a_next
    return _finish(rec, env)


def run_fixed_params(env: ObstacleEnv, tree: BehaviorTree, theta, c_e: Context) -> EpisodeRecord:
    """Execute the tree with the full stacked parameter vector fixed up front."""
    tree.halt()
    tree.set_stacked_params(theta)
    world = BtWorld(env)
    env.reset(c_e)
    rec = EpisodeRecord(c_e)
    status, a_t = tree.tick(world)
    done = status is not NodeStatus.RUNNING
    while not done:
        outcome = execute_slot(env, tree.slots[a_t])
        world.complete(a_t, outcome)
        done, a_t = _advance(tree, world, outcome, rec, None)
    return _finish(rec, env)


class BtSacLearner:
    """The step-based upper-level policy together with its tree and environment."""

    method = "bt-sac"

    def __init__(self, env_cfg: EnvConfig, sac_cfg: SacConfig | None = None, n_goals: int = 3,
                 seed: int = 0, index_encoding: str = "scalar") -> None:
        self.env_cfg = env_cfg
        self.sac_cfg = sac_cfg or SacConfig()
        self.n_goals = n_goals
        self.tree = build_chain_bt(n_goals, env_cfg.goal, forbidden=env_cfg.forbidden)
        self.p = compute_p(self.tree.slot_dims())
        self.encoder = ObsEncoder(env_cfg, len(self.tree.action_indices), index_encoding)
        b = env_cfg.action_bound
        self.agent = SacAgent(self.encoder.dim, [-b] * self.p, [b] * self.p, self.sac_cfg,
                              np.random.default_rng(seed))
        self.env = ObstacleEnv(env_cfg)

    @property
    def action_dim(self) -> int:
        return self.agent.act_dim

    def episode(self, c: Context, train: bool, rng: np.random.Generator,
                observer: Observer | None = None) -> EpisodeRecord:
        return run_episode(self.env, self.tree, self.agent, c, train, rng, self.encoder, observer)

    def describe(self) -> dict:
        return {"method": self.method, "n_goals": self.n_goals, "obs_dim": self.encoder.dim,
                "action_dim": self.action_dim, "index_encoding": self.encoder.index_encoding}

    def save(self, path) -> None:
        self.agent.save(path, {"learner": self.describe()})


class TrainingAborted(RuntimeError):
    def __init__(self, message: str, curve: LearningCurve) -> None:
        super().__init__(message)
        self.curve = curve


def evaluate_on(learner, contexts, rng: np.random.Generator) -> EvalPoint:
    recs = [learner.episode(c, train=False, rng=rng) for c in contexts]
    rewards = np.array([r.total_reward for r in recs])
    return EvalPoint(0, float(rewards.mean()), float(rewards.std()),
                     float(np.mean([r.success for r in recs])), float(np.mean([r.collision for r in recs])))


def train_run(learner, contexts, episodes: int, eval_period: int, rng: np.random.Generator,
              progress: Callable[[EvalPoint], None] | None = None) -> LearningCurve:
    """Train ``learner`` cycling through ``contexts``; evaluate on all of them every ``eval_period`` episodes.

    Contexts are visited round-robin, reshuffled at the start of every pass.
    Evaluation episodes are deterministic and never enter the replay buffer.
    """
    contexts = list(contexts)
    if not contexts:
        raise ValueError("need at least one training context")
    if eval_period < 1:
        raise ValueError("eval_period must be >= 1")
    curve = LearningCurve()
    order: list[int] = []
    eval_rng = np.random.default_rng(rng.integers(2**63))
    try:
        for ep in range(1, episodes + 1):
            if not order:
                order = list(rng.permutation(len(contexts)))
            c = contexts[order.pop(0)]
            rec = learner.episode(c, train=True, rng=rng)
            curve.train_rewards.append(rec.total_reward)
            if ep % eval_period == 0:
                point = evaluate_on(learner, contexts, eval_rng)
                point.episode = ep
                curve.points.append(point)
                if progress:
                    progress(point)
    except (DivergenceError, FloatingPointError) as exc:
        curve.aborted = str(exc)
        raise TrainingAborted(f"training diverged at episode {len(curve.train_rewards) + 1}: {exc}", curve) from exc
    return curve
