"""Comparison systems: flat SAC, episode-based parameter selection, and GP-based Bayesian optimization."""
from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
from scipy import linalg, optimize
from scipy.stats import norm

from .bt_engine import build_chain_bt
from .env2d import Context, EnvConfig, ObstacleEnv
from .hrl_driver import EpisodeRecord, ObsEncoder, _finish, run_fixed_params
from .sac_learner import SacAgent, SacConfig, Transition
from .sampling_eval import lhs_unit

log = logging.getLogger(__name__)


# -- flat SAC ------------------------------------------------------------------


def flat_episode(env: ObstacleEnv, agent: SacAgent, c_e: Context, train: bool, rng: np.random.Generator,
                 encoder: ObsEncoder) -> EpisodeRecord:
    """Per-motion SAC without a tree: every action is one bounded (dx, dz) motion."""
    x = env.reset(c_e)
    rec = EpisodeRecord(c_e)
    c_vec = encoder.context(c_e)
    while not env.done:
        s = np.concatenate([c_vec, encoder.state(x)])
        if train and agent.buffer.n_pushed < agent.cfg.warmup:
            a = agent.random_action(rng)
        else:
            a = agent.act(s, deterministic=not train, rng=rng)
        outcome = env.step(a)
        x = env.state
        s_next = np.concatenate([c_vec, encoder.state(x)])
        rec.n_transitions += 1
        if train:
            agent.buffer.push(Transition(s, a, outcome.reward, s_next, env.done))
            agent.maybe_update(rng)
    return _finish(rec, env)


class FlatSacLearner:
    method = "sac-flat"

    def __init__(self, env_cfg: EnvConfig, sac_cfg: SacConfig | None = None, seed: int = 0) -> None:
        self.env_cfg = env_cfg
        self.sac_cfg = sac_cfg or SacConfig()
        self.encoder = ObsEncoder(env_cfg, 1)
        b = env_cfg.action_bound
        self.agent = SacAgent(5, [-b, -b], [b, b], self.sac_cfg, np.random.default_rng(seed))
        self.env = ObstacleEnv(env_cfg)

    @property
    def action_dim(self) -> int:
        return self.agent.act_dim

    def episode(self, c: Context, train: bool, rng: np.random.Generator, observer=None) -> EpisodeRecord:
        return flat_episode(self.env, self.agent, c, train, rng, self.encoder)

    def describe(self) -> dict:
        return {"method": self.method, "obs_dim": 5, "action_dim": self.action_dim}

    def save(self, path) -> None:
        self.agent.save(path, {"learner": self.describe()})


# -- episode-based selection ---------------------------------------------------


def episode_based_run(env: ObstacleEnv, tree, agent: SacAgent, c_e: Context, train: bool,
                      rng: np.random.Generator, encoder: ObsEncoder) -> EpisodeRecord:
    """Pick the whole stacked parameter vector from the context once, then run the tree to the end."""
    s = encoder.context(c_e)
    if train and agent.buffer.n_pushed < agent.cfg.warmup:
        theta = agent.random_action(rng)
    else:
        theta = agent.act(s, deterministic=not train, rng=rng)
    rec = run_fixed_params(env, tree, theta, c_e)
    rec.theta_log.append((0, theta))
    rec.n_transitions = 1
    if train:
        agent.buffer.push(Transition(s, theta, rec.total_reward, s, True, True))
        agent.maybe_update(rng)
    return rec


class EpisodeBasedLearner:
    method = "bt-episode"

    def __init__(self, env_cfg: EnvConfig, sac_cfg: SacConfig | None = None, n_goals: int = 3,
                 seed: int = 0) -> None:
        self.env_cfg = env_cfg
        self.sac_cfg = sac_cfg or SacConfig()
        self.n_goals = n_goals
        self.tree = build_chain_bt(n_goals, env_cfg.goal, forbidden=env_cfg.forbidden)
        self.encoder = ObsEncoder(env_cfg, len(self.tree.action_indices))
        m = self.tree.param_dim
        b = env_cfg.action_bound
        self.agent = SacAgent(3, [-b] * m, [b] * m, self.sac_cfg, np.random.default_rng(seed))
        self.env = ObstacleEnv(env_cfg)

    @property
    def action_dim(self) -> int:
        return self.agent.act_dim

    def episode(self, c: Context, train: bool, rng: np.random.Generator, observer=None) -> EpisodeRecord:
        return episode_based_run(self.env, self.tree, self.agent, c, train, rng, self.encoder)

    def describe(self) -> dict:
        return {"method": self.method, "n_goals": self.n_goals, "obs_dim": 3, "action_dim": self.action_dim}

    def save(self, path) -> None:
        self.agent.save(path, {"learner": self.describe()})


# -- Gaussian process surrogate ------------------------------------------------

JITTERS = (0.0, 1e-8, 1e-7, 1e-6, 1e-5, 1e-4)
LOG_BOUNDS = {"length": (np.log(1e-2), np.log(1e1)), "signal": (np.log(1e-2), np.log(1e2)),
              "noise": (np.log(1e-10), np.log(1e0))}


def se_kernel(A: np.ndarray, B: np.ndarray, length_scale: float, signal_var: float) -> np.ndarray:
    d2 = (np.sum(A * A, axis=1)[:, None] + np.sum(B * B, axis=1)[None, :] - 2.0 * A @ B.T)
    np.maximum(d2, 0.0, out=d2)
    return signal_var * np.exp(-0.5 * d2 / length_scale**2)


def _cholesky(K: np.ndarray):
    n = len(K)
    for jitter in JITTERS:
        try:
            return linalg.cho_factor(K + jitter * np.eye(n), lower=True), jitter
        except linalg.LinAlgError:
            continue
    raise linalg.LinAlgError("kernel matrix not positive definite even with 1e-4 jitter")


@dataclass
class GpSurrogate:
    """Exact GP regression with a squared-exponential kernel on standardized targets.

    The prior mean is the sample mean of the observed targets.
    """

    length_scale: float = 0.3
    signal_var: float = 1.0
    noise_var: float = 1e-6
    optimize_hyper: bool = True
    n_restarts: int = 3
    X: np.ndarray = field(default=None, repr=False)
    y: np.ndarray = field(default=None, repr=False)
    y_mean: float = 0.0
    y_std: float = 1.0
    jitter: float = 0.0
    _chol: tuple = field(default=None, repr=False)
    _alpha: np.ndarray = field(default=None, repr=False)

    def _lml(self, Xn, yn, log_params) -> float:
        ell, sig, noise = np.exp(log_params)
        K = se_kernel(Xn, Xn, ell, sig) + noise * np.eye(len(Xn))
        try:
            L = np.linalg.cholesky(K + 1e-10 * np.eye(len(Xn)))
        except np.linalg.LinAlgError:
            return -np.inf
        a = linalg.cho_solve((L, True), yn)
        return float(-0.5 * yn @ a - np.sum(np.log(np.diag(L))) - 0.5 * len(yn) * np.log(2 * np.pi))

    def log_marginal_likelihood(self, log_params=None) -> float:
        if log_params is None:
            log_params = np.log([self.length_scale, self.signal_var, self.noise_var])
        return self._lml(self.X, (self.y - self.y_mean) / self.y_std, np.asarray(log_params, float))

    def _coordinate_search(self, Xn, yn, start) -> tuple[np.ndarray, float]:
        bounds = [LOG_BOUNDS["length"], LOG_BOUNDS["signal"], LOG_BOUNDS["noise"]]
        x = np.array(start, dtype=float)
        best = self._lml(Xn, yn, x)
        step = 1.0
        while step > 1e-2:
            improved = False
            for k in range(3):
                for sgn in (1.0, -1.0):
                    cand = x.copy()
                    cand[k] = np.clip(cand[k] + sgn * step, *bounds[k])
                    val = self._lml(Xn, yn, cand)
                    if val > best:
                        x, best, improved = cand, val, True
                        break
            if not improved:
                step *= 0.5
        return x, best

    def fit(self, X, y, rng: np.random.Generator | None = None) -> "GpSurrogate":
        X = np.atleast_2d(np.asarray(X, dtype=float))
        y = np.asarray(y, dtype=float).ravel()
        if len(X) != len(y) or len(y) == 0:
            raise ValueError("need matching, non-empty X and y")
        self.X, self.y = X, y
        self.y_mean = float(y.mean())
        sd = float(y.std())
        self.y_std = sd if sd > 0 else 1.0
        yn = (y - self.y_mean) / self.y_std
        if self.optimize_hyper and len(y) >= 3:
            rng = rng if rng is not None else np.random.default_rng(0)
            starts = [np.log([self.length_scale, self.signal_var, self.noise_var])]
            for _ in range(self.n_restarts - 1):
                starts.append(np.array([rng.uniform(*LOG_BOUNDS[k]) for k in ("length", "signal", "noise")]))
            results = [self._coordinate_search(X, yn, s) for s in starts]
            best = max(results, key=lambda r: r[1])
            if np.isfinite(best[1]):
                self.length_scale, self.signal_var, self.noise_var = np.exp(best[0])
        K = se_kernel(X, X, self.length_scale, self.signal_var) + self.noise_var * np.eye(len(X))
        self._chol, self.jitter = _cholesky(K)
        self._alpha = linalg.cho_solve(self._chol, yn)
        return self

    def posterior(self, Xs) -> tuple[np.ndarray, np.ndarray]:
        """Posterior mean and standard deviation of the latent function, in target units."""
        if self.X is None:
            raise RuntimeError("posterior() needs at least one observation; call fit() first")
        Xs = np.atleast_2d(np.asarray(Xs, dtype=float))
        Ks = se_kernel(Xs, self.X, self.length_scale, self.signal_var)
        mean = Ks @ self._alpha
        v = linalg.solve_triangular(self._chol[0], Ks.T, lower=True)
        var = self.signal_var - np.sum(v * v, axis=0)
        var = np.maximum(var, 0.0)
        return self.y_mean + self.y_std * mean, self.y_std * np.sqrt(var)


def gp_fit(surrogate: GpSurrogate, X, y, rng=None) -> GpSurrogate:
    return surrogate.fit(X, y, rng)


def gp_posterior(surrogate: GpSurrogate, X):
    return surrogate.posterior(X)


def expected_improvement(mean, std, best: float, xi: float = 0.0) -> np.ndarray:
    """Closed-form EI for maximization."""
    mean = np.asarray(mean, dtype=float)
    std = np.asarray(std, dtype=float)
    imp = mean - best - xi
    with np.errstate(divide="ignore", invalid="ignore"):
        z = np.where(std > 0, imp / std, 0.0)
    ei = np.where(std > 0, imp * norm.cdf(z) + std * norm.pdf(z), np.maximum(imp, 0.0))
    return np.maximum(ei, 0.0)


def bo_suggest(surrogate: GpSurrogate | None, bounds, rng: np.random.Generator,
               n_random: int = 2000, n_local: int = 5) -> np.ndarray:
    """Maximize EI over the box: random candidates, then L-BFGS-B from the best few."""
    bounds = np.asarray(bounds, dtype=float)
    lo, hi = bounds[:, 0], bounds[:, 1]
    if surrogate is None or surrogate.X is None:
        return rng.uniform(lo, hi)
    best = float(surrogate.y.max())
    cand = rng.uniform(lo, hi, size=(n_random, len(lo)))
    mu, sd = surrogate.posterior(cand)
    ei = expected_improvement(mu, sd, best)
    order = np.argsort(-ei)[:n_local]
    best_x, best_ei = cand[order[0]], ei[order[0]]

    def neg_ei(x):
        m, s = surrogate.posterior(x[None, :])
        return -float(expected_improvement(m, s, best)[0])

    for i in order:
        res = optimize.minimize(neg_ei, cand[i], method="L-BFGS-B", bounds=list(zip(lo, hi)),
                                options={"maxiter": 50})
        if -res.fun > best_ei:
            best_x, best_ei = np.clip(res.x, lo, hi), -res.fun
    return best_x


@dataclass
class BoResult:
    best_x: np.ndarray
    best_y: float
    trace: list[tuple[int, float]]
    X: np.ndarray
    y: np.ndarray


def bayes_opt(objective, bounds, budget: int, rng: np.random.Generator, n_init: int = 10,
              refit_every: int = 5, init: str = "lhs") -> BoResult:
    """Maximize ``objective`` with a GP surrogate and expected improvement.

    The first ``min(n_init, budget)`` points come from a Latin hypercube
    (``init="lhs"``) or are uniform random (``init="uniform"``). Kernel
    hyperparameters are re-estimated every ``refit_every`` iterations.
    """
    if budget < 1:
        raise ValueError("budget must be >= 1")
    if init not in ("lhs", "uniform"):
        raise ValueError(f"unknown initial design {init!r}")
    bounds = np.asarray(bounds, dtype=float)
    lo, hi = bounds[:, 0], bounds[:, 1]
    span = hi - lo
    unit_bounds = np.column_stack([np.zeros(len(lo)), np.ones(len(lo))])
    X: list[np.ndarray] = []
    y: list[float] = []
    trace: list[tuple[int, float]] = []
    gp = GpSurrogate()
    n0 = min(n_init, budget)
    design = lhs_unit(n0, len(lo), rng) if init == "lhs" else rng.uniform(0.0, 1.0, (n0, len(lo)))
    for it in range(1, budget + 1):
        if it <= n0:
            u = design[it - 1]
        else:
            gp.optimize_hyper = (it - n_init - 1) % refit_every == 0
            gp.fit(np.array(X), np.array(y), rng)
            u = bo_suggest(gp, unit_bounds, rng)
        X.append(u)
        y.append(float(objective(lo + u * span)))
        trace.append((it, max(y)))
    k = int(np.argmax(y))
    Xa = np.array(X)
    return BoResult(lo + Xa[k] * span, y[k], trace, lo + Xa * span, np.array(y))


def bo_optimize(env_cfg: EnvConfig, tree, contexts, budget: int, rng: np.random.Generator,
                shared: bool = False, n_init: int = 10, init: str = "lhs"):
    """Optimize the stacked tree parameters by BO.

    Default: one optimization per context. ``shared``: one vector maximizing
    the mean episodic reward over all contexts. Returns ``(thetas, traces)``
    with one entry per context (per-context) or a single entry (shared).
    """
    tree = tree.clone()
    env = ObstacleEnv(env_cfg)
    b = env_cfg.action_bound
    bounds = [(-b, b)] * tree.param_dim
    contexts = list(contexts)

    def reward(theta, c):
        return run_fixed_params(env, tree, theta, c).total_reward

    if shared:
        res = bayes_opt(lambda th: np.mean([reward(th, c) for c in contexts]), bounds, budget, rng, n_init,
                        init=init)
        return [res.best_x], [res.trace]
    thetas, traces = [], []
    for c in contexts:
        res = bayes_opt(lambda th, c=c: reward(th, c), bounds, budget, rng, n_init, init=init)
        thetas.append(res.best_x)
        traces.append(res.trace)
    return thetas, traces


class BtBoPolicy:
    """Fixed tree parameters found by BO, looked up per context (or shared)."""

    method = "bt-bo"

    def __init__(self, env_cfg: EnvConfig, n_goals: int, contexts, thetas, shared: bool = False) -> None:
        self.env_cfg = env_cfg
        self.n_goals = n_goals
        self.shared = shared
        self.tree = build_chain_bt(n_goals, env_cfg.goal, forbidden=env_cfg.forbidden)
        self.env = ObstacleEnv(env_cfg)
        self.contexts = list(contexts)
        self.thetas = [np.asarray(t, dtype=float) for t in thetas]
        if not shared and len(self.thetas) != len(self.contexts):
            raise ValueError("per-context BO needs one parameter vector per context")

    @property
    def action_dim(self) -> int:
        return self.tree.param_dim

    def theta_for(self, c: Context) -> np.ndarray:
        if self.shared:
            return self.thetas[0]
        for known, th in zip(self.contexts, self.thetas):
            if np.allclose(known.as_array(), c.as_array(), rtol=0, atol=1e-12):
                return th
        raise KeyError(f"no BO solution for context {c}")

    def episode(self, c: Context, train: bool = False, rng=None, observer=None) -> EpisodeRecord:
        return run_fixed_params(self.env, self.tree, self.theta_for(c), c)

    def describe(self) -> dict:
        return {"method": self.method, "n_goals": self.n_goals, "action_dim": self.action_dim,
                "shared": self.shared}
