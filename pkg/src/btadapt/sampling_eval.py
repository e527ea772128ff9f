"""Context sampling, learning-curve bookkeeping, convergence detection and evaluation reports."""
from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field

import numpy as np

from .env2d import CONTEXT_FIELDS, Context


@dataclass
class ContextSet:
    contexts: list[Context]
    seed: int | None
    ranges: list[tuple[float, float]]

    def __len__(self) -> int:
        return len(self.contexts)

    def __iter__(self):
        return iter(self.contexts)

    def __getitem__(self, i):
        return self.contexts[i]

    def as_array(self) -> np.ndarray:
        return np.array([c.as_array() for c in self.contexts]).reshape(-1, 3)

    def to_csv(self) -> str:
        buf = io.StringIO()
        buf.write(f"# seed={self.seed}\n")
        buf.write("# ranges=" + ";".join(f"{lo!r},{hi!r}" for lo, hi in self.ranges) + "\n")
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["index", *CONTEXT_FIELDS])
        for i, c in enumerate(self.contexts):
            w.writerow([i, repr(c.h_o), repr(c.w_o), repr(c.x_o)])
        return buf.getvalue()

    @classmethod
    def from_csv(cls, text: str) -> "ContextSet":
        seed = None
        ranges: list[tuple[float, float]] = []
        rows = []
        for line in text.splitlines():
            if line.startswith("# seed="):
                v = line.split("=", 1)[1]
                seed = None if v == "None" else int(v)
            elif line.startswith("# ranges="):
                parts = line.split("=", 1)[1].split(";")
                ranges = [tuple(float(x) for x in p.split(",")) for p in parts if p]
            elif line and not line.startswith("#"):
                rows.append(line)
        reader = csv.DictReader(rows)
        contexts = [Context(float(r["h_o"]), float(r["w_o"]), float(r["x_o"])) for r in reader]
        return cls(contexts, seed, ranges)


def lhs_unit(n: int, d: int, rng: np.random.Generator) -> np.ndarray:
    """``n`` points in the unit cube, one per stratum of width 1/n in every dimension."""
    unit = np.empty((n, d))
    for j in range(d):
        strata = rng.permutation(n)
        unit[:, j] = (strata + rng.uniform(size=n)) / n
    return unit


def latin_hypercube(n: int, ranges, seed: int | None = None) -> ContextSet:
    """Latin hypercube sample of ``n`` contexts.

    Each dimension is cut into ``n`` equal strata; every stratum receives exactly
    one sample, placed uniformly at random inside it.
    """
    if n < 1:
        raise ValueError("n must be >= 1")
    ranges = [(float(lo), float(hi)) for lo, hi in ranges]
    for lo, hi in ranges:
        if not hi > lo:
            raise ValueError(f"empty range [{lo}, {hi}]")
    unit = lhs_unit(n, len(ranges), np.random.default_rng(seed))
    lo = np.array([r[0] for r in ranges])
    hi = np.array([r[1] for r in ranges])
    pts = lo + unit * (hi - lo)
    return ContextSet([Context.from_array(p) for p in pts], seed, ranges)


@dataclass
class EvalPoint:
    episode: int
    mean_reward: float
    std_reward: float
    success_rate: float
    collision_rate: float


@dataclass
class LearningCurve:
    points: list[EvalPoint] = field(default_factory=list)
    train_rewards: list[float] = field(default_factory=list)
    aborted: str | None = None

    def __len__(self) -> int:
        return len(self.points)

    @property
    def episodes(self) -> np.ndarray:
        return np.array([p.episode for p in self.points], dtype=float)

    @property
    def rewards(self) -> np.ndarray:
        return np.array([p.mean_reward for p in self.points], dtype=float)

    def per_episode(self) -> tuple[np.ndarray, np.ndarray]:
        """Evaluation reward linearly interpolated to every integer episode."""
        if not self.points:
            return np.zeros(0, dtype=int), np.zeros(0)
        ep = self.episodes
        grid = np.arange(int(ep[0]), int(ep[-1]) + 1)
        return grid, np.interp(grid, ep, self.rewards)

    def value_at(self, episode: float) -> float:
        return float(np.interp(episode, self.episodes, self.rewards))

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["episode", "mean_eval_reward", "std", "success_rate", "collision_rate"])
        for p in self.points:
            w.writerow([p.episode, repr(p.mean_reward), repr(p.std_reward), repr(p.success_rate),
                        repr(p.collision_rate)])
        return buf.getvalue()

    @classmethod
    def from_csv(cls, text: str) -> "LearningCurve":
        rows = csv.DictReader(io.StringIO(text))
        return cls([EvalPoint(int(r["episode"]), float(r["mean_eval_reward"]), float(r["std"]),
                              float(r["success_rate"]), float(r["collision_rate"])) for r in rows])


def convergence_episode(episodes, rewards, window: int = 150, threshold: float = 0.02) -> int | None:
    """Earliest episode E where the mean over (E-w, E] beats the mean over (E-2w, E-w] by < threshold (relative).

    ``episodes`` must be consecutive integers.
    """
    r = np.asarray(rewards, dtype=float)
    if len(r) < 2 * window:
        return None
    c = np.concatenate([[0.0], np.cumsum(r)])
    # window ending at position k (exclusive) covers r[k-window:k]
    ends = np.arange(2 * window, len(r) + 1)
    recent = (c[ends] - c[ends - window]) / window
    prior = (c[ends - window] - c[ends - 2 * window]) / window
    improvement = recent - prior
    ok = improvement < threshold * np.abs(prior)
    hits = np.flatnonzero(ok)
    if len(hits) == 0:
        return None
    return int(episodes[ends[hits[0]] - 1])


def detect_convergence(curve: LearningCurve, window: int = 150, threshold: float = 0.02) -> int | None:
    ep, r = curve.per_episode()
    return convergence_episode(ep, r, window, threshold)


@dataclass
class ContextRow:
    index: int
    context: Context
    mean_reward: float
    std_reward: float
    successes: int
    collisions: int
    episodes: int


@dataclass
class EvalReport:
    rows: list[ContextRow]
    policy_id: str = ""
    context_set_id: str = ""

    @property
    def mean_reward(self) -> float:
        return float(np.mean([r.mean_reward for r in self.rows]))

    @property
    def std_reward(self) -> float:
        return float(np.std([r.mean_reward for r in self.rows]))

    @property
    def success_rate(self) -> float:
        return sum(r.successes for r in self.rows) / sum(r.episodes for r in self.rows)

    @property
    def collisions_per_pass(self) -> float:
        """Collisions in one pass over the context set (averaged over repeats)."""
        return float(sum(r.collisions / r.episodes for r in self.rows))

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["policy", "context_set", "index", *CONTEXT_FIELDS, "mean_reward", "std_reward",
                    "successes", "collisions", "episodes"])
        for r in self.rows:
            c = r.context
            w.writerow([self.policy_id, self.context_set_id, r.index, repr(c.h_o), repr(c.w_o), repr(c.x_o),
                        repr(r.mean_reward), repr(r.std_reward), r.successes, r.collisions, r.episodes])
        return buf.getvalue()

    def summary(self) -> str:
        return (f"{self.policy_id or 'policy'} on {self.context_set_id or 'contexts'}: "
                f"reward {self.mean_reward:.2f} +- {self.std_reward:.2f}, "
                f"success {100 * self.success_rate:.1f}%, collisions/pass {self.collisions_per_pass:.2f}")


def evaluate(policy, context_set, episodes_per_context: int = 1, rng: np.random.Generator | None = None,
             policy_id: str = "", context_set_id: str = "") -> EvalReport:
    """Run ``policy.episode(c, train=False, rng=...)`` on every context.

    ``policy`` is any object exposing that method and returning an EpisodeRecord.
    """
    rng = rng if rng is not None else np.random.default_rng(0)
    rows = []
    for i, c in enumerate(context_set):
        recs = [policy.episode(c, train=False, rng=rng) for _ in range(episodes_per_context)]
        rewards = np.array([r.total_reward for r in recs])
        rows.append(ContextRow(i, c, float(rewards.mean()), float(rewards.std()),
                               sum(r.success for r in recs), sum(r.collision for r in recs), len(recs)))
    return EvalReport(rows, policy_id, context_set_id)
