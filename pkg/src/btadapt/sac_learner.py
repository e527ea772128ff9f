"""Soft Actor-Critic with twin critics, Polyak targets and automatic temperature."""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from typing import NamedTuple

import numpy as np

from .policy_nn import Adam, GaussianHead, Mlp, load_checkpoint, save_checkpoint


class BufferNotReady(RuntimeError):
    pass


class DivergenceError(FloatingPointError):
    """Raised when a loss turns non-finite; carries the offending minibatch."""

    def __init__(self, message: str, batch: "Batch | None" = None) -> None:
        super().__init__(message)
        self.batch = batch


@dataclass
class SacConfig:
    gamma: float = 0.99
    tau: float = 0.005
    lr: float = 1e-3
    batch_size: int = 128
    buffer_capacity: int = 1_000_000
    hidden: tuple[int, ...] = (64, 64)
    target_entropy: float | None = None  # None -> -act_dim, measured on the [-1, 1]-normalized action
    warmup: int = 500
    updates_per_step: int = 4
    init_alpha: float = 1.0

    def __post_init__(self) -> None:
        self.hidden = tuple(int(h) for h in self.hidden)
        if not 0.0 <= self.gamma <= 1.0:
            raise ValueError("gamma must lie in [0, 1]")
        if not 0.0 < self.tau <= 1.0:
            raise ValueError("tau must lie in (0, 1]")
        if self.batch_size < 1 or self.buffer_capacity < 1:
            raise ValueError("batch_size and buffer_capacity must be positive")
        if self.init_alpha <= 0:
            raise ValueError("init_alpha must be positive")


@dataclass
class Transition:
    """One replay entry ``(s, a, r, s_next, done)``.

    For the upper-level policy ``s`` is ``(context, action-node index, state)``
    and ``next_index_none`` marks that no Action Node follows.
    """

    s: np.ndarray
    a: np.ndarray
    r: float
    s_next: np.ndarray
    done: bool
    next_index_none: bool = False

    def to_dict(self) -> dict:
        return {"s": [float(v) for v in self.s], "a": [float(v) for v in self.a], "r": float(self.r),
                "s_next": [float(v) for v in self.s_next], "done": bool(self.done),
                "next_index_none": bool(self.next_index_none)}

    @classmethod
    def from_dict(cls, d: dict) -> "Transition":
        return cls(np.array(d["s"], dtype=float), np.array(d["a"], dtype=float), float(d["r"]),
                   np.array(d["s_next"], dtype=float), bool(d["done"]), bool(d.get("next_index_none", False)))

    def to_json(self) -> str:
        return json.dumps(self.to_dict())

    @classmethod
    def from_json(cls, text: str) -> "Transition":
        return cls.from_dict(json.loads(text))


class Batch(NamedTuple):
    s: np.ndarray
    a: np.ndarray
    r: np.ndarray
    s_next: np.ndarray
    done: np.ndarray

    def transitions(self) -> list[Transition]:
        return [Transition(self.s[i], self.a[i], float(self.r[i]), self.s_next[i], bool(self.done[i]))
                for i in range(len(self.r))]


class ReplayBuffer:
    """Fixed-capacity ring buffer with uniform sampling (with replacement)."""

    def __init__(self, capacity: int, obs_dim: int, act_dim: int) -> None:
        self.capacity = int(capacity)
        self.obs_dim = obs_dim
        self.act_dim = act_dim
        self.s = np.zeros((self.capacity, obs_dim))
        self.a = np.zeros((self.capacity, act_dim))
        self.r = np.zeros(self.capacity)
        self.s_next = np.zeros((self.capacity, obs_dim))
        self.done = np.zeros(self.capacity)
        self.next_none = np.zeros(self.capacity, dtype=bool)
        self.pos = 0
        self.size = 0
        self.n_pushed = 0

    def __len__(self) -> int:
        return self.size

    def push(self, t: Transition) -> None:
        if len(t.s) != self.obs_dim or len(t.s_next) != self.obs_dim:
            raise ValueError(f"state dim must be {self.obs_dim}")
        if len(t.a) != self.act_dim:
            raise ValueError(f"action dim must be {self.act_dim}, got {len(t.a)}")
        i = self.pos
        self.s[i] = t.s
        self.a[i] = t.a
        self.r[i] = t.r
        self.s_next[i] = t.s_next
        self.done[i] = float(t.done)
        self.next_none[i] = t.next_index_none
        self.pos = (self.pos + 1) % self.capacity
        self.size = min(self.size + 1, self.capacity)
        self.n_pushed += 1

    def ready(self, batch_size: int) -> bool:
        return self.size >= batch_size

    def sample(self, batch_size: int, rng: np.random.Generator) -> Batch:
        if not self.ready(batch_size):
            raise BufferNotReady(f"buffer holds {self.size} < {batch_size} transitions")
        idx = rng.integers(0, self.size, size=batch_size)
        return Batch(self.s[idx], self.a[idx], self.r[idx], self.s_next[idx], self.done[idx])

    def get(self, i: int) -> Transition:
        """Transition at logical position ``i`` (0 = oldest retained)."""
        if not 0 <= i < self.size:
            raise IndexError(i)
        j = (self.pos - self.size + i) % self.capacity
        return Transition(self.s[j].copy(), self.a[j].copy(), float(self.r[j]), self.s_next[j].copy(),
                          bool(self.done[j]), bool(self.next_none[j]))

    def summary(self) -> dict:
        n = self.size
        return {
            "capacity": self.capacity,
            "size": n,
            "pushed": self.n_pushed,
            "reward_mean": float(self.r[:n].mean()) if n else None,
            "reward_min": float(self.r[:n].min()) if n else None,
            "reward_max": float(self.r[:n].max()) if n else None,
            "done_fraction": float(self.done[:n].mean()) if n else None,
        }


@dataclass
class UpdateInfo:
    critic_loss: float
    actor_loss: float
    temperature_loss: float
    alpha: float
    entropy: float
    targets: np.ndarray = field(repr=False)


class SacAgent:
    def __init__(self, obs_dim: int, act_low, act_high, cfg: SacConfig | None = None,
                 rng: np.random.Generator | None = None) -> None:
        self.cfg = cfg or SacConfig()
        rng = rng if rng is not None else np.random.default_rng(0)
        self.obs_dim = obs_dim
        act_low = np.asarray(act_low, dtype=float)
        act_high = np.asarray(act_high, dtype=float)
        self.act_dim = len(act_low)
        h = list(self.cfg.hidden)
        self.actor = GaussianHead(Mlp([obs_dim, *h, 2 * self.act_dim], rng), act_low, act_high)
        self.q1 = Mlp([obs_dim + self.act_dim, *h, 1], rng)
        self.q2 = Mlp([obs_dim + self.act_dim, *h, 1], rng)
        self.q1_target = self.q1.clone()
        self.q2_target = self.q2.clone()
        self.log_alpha = np.array([np.log(self.cfg.init_alpha)])
        self.target_entropy = (-float(self.act_dim) if self.cfg.target_entropy is None
                               else float(self.cfg.target_entropy))
        lr = self.cfg.lr
        self.actor_opt = Adam(self.actor.net.params, lr)
        self.q1_opt = Adam(self.q1.params, lr)
        self.q2_opt = Adam(self.q2.params, lr)
        self.alpha_opt = Adam([self.log_alpha], lr)
        self.buffer = ReplayBuffer(self.cfg.buffer_capacity, obs_dim, self.act_dim)
        self.n_updates = 0

    @property
    def alpha(self) -> float:
        return float(np.exp(self.log_alpha[0]))

    # acting -----------------------------------------------------------------

    def act(self, s, deterministic: bool = False, rng: np.random.Generator | None = None) -> np.ndarray:
        s = np.asarray(s, dtype=float)
        if len(s) != self.obs_dim:
            raise ValueError(f"observation dim must be {self.obs_dim}, got {len(s)}")
        if deterministic:
            a_unit = np.tanh(self.actor._mean_logstd(s)[0])
        else:
            _, a_unit, _ = self.actor.sample(s, rng)
        # keep inside the open box even when tanh saturates to +-1
        return self.actor.scale(np.clip(a_unit, -1.0 + 1e-12, 1.0 - 1e-12))

    def random_action(self, rng: np.random.Generator) -> np.ndarray:
        return rng.uniform(self.actor.low, self.actor.high)

    # losses -----------------------------------------------------------------

    def _q_input(self, s, a_unit):
        return np.concatenate([s, a_unit], axis=-1)

    def critic_targets(self, batch: Batch, noise_next: np.ndarray) -> np.ndarray:
        _, a_next, logp_next = self.actor.sample(batch.s_next, noise=noise_next)
        logp_next = logp_next + self.actor._log_half
        x_next = self._q_input(batch.s_next, a_next)
        q_next = np.minimum(self.q1_target(x_next)[:, 0], self.q2_target(x_next)[:, 0])
        soft_v = q_next - self.alpha * logp_next
        return batch.r + self.cfg.gamma * (1.0 - batch.done) * soft_v

    def critic_loss_and_grads(self, batch: Batch, noise_next: np.ndarray):
        """``0.5*mean((Q1-y)^2) + 0.5*mean((Q2-y)^2)`` and grads for both critics."""
        y = self.critic_targets(batch, noise_next)
        x = self._q_input(batch.s, self.actor.unscale(batch.a))
        n = len(y)
        q1 = self.q1(x)[:, 0]
        g1, _ = self.q1.backward(((q1 - y) / n)[:, None])
        q2 = self.q2(x)[:, 0]
        g2, _ = self.q2.backward(((q2 - y) / n)[:, None])
        loss = 0.5 * np.mean((q1 - y) ** 2) + 0.5 * np.mean((q2 - y) ** 2)
        return float(loss), g1, g2, y

    def actor_loss_and_grads(self, s: np.ndarray, noise: np.ndarray):
        """``mean(alpha*logpi - min(Q1, Q2))`` with reparameterized actions."""
        _, a, logp = self.actor.sample(s, noise=noise)
        logp = logp + self.actor._log_half
        x = self._q_input(s, a)
        n = len(logp)
        q1 = self.q1(x)[:, 0]
        _, dx1 = self.q1.backward(np.ones((n, 1)))
        q2 = self.q2(x)[:, 0]
        _, dx2 = self.q2.backward(np.ones((n, 1)))
        use1 = (q1 <= q2)[:, None]
        dq_da = np.where(use1, dx1[:, self.obs_dim:], dx2[:, self.obs_dim:])
        alpha = self.alpha
        loss = float(np.mean(alpha * logp - np.minimum(q1, q2)))
        # actor.sample's cache is still the one for ``a``: the critics have their own caches
        grads = self.actor.backward(-dq_da / n, np.full(n, alpha / n))
        return loss, grads, logp

    def temperature_loss_and_grad(self, logp: np.ndarray):
        """``-mean(log_alpha * (logp + target_entropy))`` and its gradient."""
        term = logp + self.target_entropy
        loss = float(-np.mean(self.log_alpha[0] * term))
        return loss, np.array([-np.mean(term)])

    # update -----------------------------------------------------------------

    def update(self, batch: Batch, rng: np.random.Generator) -> UpdateInfo:
        n = len(batch.r)
        if n == 0:
            raise ValueError("empty batch")
        noise = rng.standard_normal((n, self.act_dim))
        noise_next = rng.standard_normal((n, self.act_dim))

        _, _, logp = self.actor.sample(batch.s, noise=noise)
        t_loss, t_grad = self.temperature_loss_and_grad(logp + self.actor._log_half)
        c_loss, g1, g2, y = self.critic_loss_and_grads(batch, noise_next)
        if not (np.isfinite(c_loss) and np.isfinite(t_loss)):
            raise DivergenceError(f"non-finite loss (critic={c_loss}, temperature={t_loss})", batch)
        self.q1_opt.step(g1)
        self.q2_opt.step(g2)
        a_loss, a_grads, logp = self.actor_loss_and_grads(batch.s, noise)
        if not np.isfinite(a_loss):
            raise DivergenceError(f"non-finite actor loss {a_loss}", batch)
        self.actor_opt.step(a_grads)
        self.alpha_opt.step([t_grad])

        tau = self.cfg.tau
        self.q1_target.polyak_from(self.q1, tau)
        self.q2_target.polyak_from(self.q2, tau)
        self.n_updates += 1
        return UpdateInfo(c_loss, a_loss, t_loss, self.alpha, float(-np.mean(logp)), y)

    def maybe_update(self, rng: np.random.Generator) -> UpdateInfo | None:
        info = None
        if self.buffer.ready(self.cfg.batch_size):
            for _ in range(self.cfg.updates_per_step):
                info = self.update(self.buffer.sample(self.cfg.batch_size, rng), rng)
        return info

    # checkpointing ----------------------------------------------------------

    def state(self) -> dict[str, np.ndarray]:
        d: dict[str, np.ndarray] = {}
        d.update(self.actor.net.state("actor"))
        d.update(self.q1.state("q1"))
        d.update(self.q2.state("q2"))
        d.update(self.q1_target.state("q1_target"))
        d.update(self.q2_target.state("q2_target"))
        d["log_alpha"] = self.log_alpha.copy()
        d["act_low"] = self.actor.low
        d["act_high"] = self.actor.high
        d.update(self.actor_opt.state("actor_opt"))
        d.update(self.q1_opt.state("q1_opt"))
        d.update(self.q2_opt.state("q2_opt"))
        d.update(self.alpha_opt.state("alpha_opt"))
        return d

    def save(self, path, meta: dict | None = None) -> None:
        info = {"sac": asdict(self.cfg), "obs_dim": self.obs_dim, "act_dim": self.act_dim,
                "buffer": self.buffer.summary(), "n_updates": self.n_updates}
        if meta:
            info.update(meta)
        save_checkpoint(path, self.state(), json.dumps(info, sort_keys=True))

    @classmethod
    def load(cls, path) -> tuple["SacAgent", dict]:
        arrays, meta_text = load_checkpoint(path)
        meta = json.loads(meta_text)
        sac = dict(meta["sac"])
        sac["hidden"] = tuple(sac["hidden"])
        agent = cls(int(meta["obs_dim"]), arrays["act_low"], arrays["act_high"], SacConfig(**sac))
        agent.actor.net = Mlp.from_state(arrays, "actor")
        agent.q1 = Mlp.from_state(arrays, "q1")
        agent.q2 = Mlp.from_state(arrays, "q2")
        agent.q1_target = Mlp.from_state(arrays, "q1_target")
        agent.q2_target = Mlp.from_state(arrays, "q2_target")
        agent.log_alpha = arrays["log_alpha"].copy()
        agent.actor_opt = Adam(agent.actor.net.params, agent.cfg.lr)
        agent.q1_opt = Adam(agent.q1.params, agent.cfg.lr)
        agent.q2_opt = Adam(agent.q2.params, agent.cfg.lr)
        agent.alpha_opt = Adam([agent.log_alpha], agent.cfg.lr)
        agent.actor_opt.load_state(arrays, "actor_opt")
        agent.q1_opt.load_state(arrays, "q1_opt")
        agent.q2_opt.load_state(arrays, "q2_opt")
        agent.alpha_opt.load_state(arrays, "alpha_opt")
        agent.n_updates = int(meta.get("n_updates", 0))
        return agent, meta
