"""Small numpy networks with hand-written backprop, Adam, and a tanh-squashed Gaussian head."""
from __future__ import annotations

import math

import numpy as np

LOG_STD_MIN = -20.0
LOG_STD_MAX = 2.0
TANH_EPS = 1e-6
CHECKPOINT_VERSION = 1


class Mlp:
    """Fully connected net: tanh hidden layers, linear output, float64.

    ``forward`` caches the activations of the most recent call; ``backward``
    consumes them. Inputs may be a single vector or a batch of rows.
    """

    def __init__(self, sizes, rng: np.random.Generator | None = None, zero: bool = False) -> None:
        self.sizes = [int(s) for s in sizes]
        if len(self.sizes) < 2 or min(self.sizes) < 1:
            raise ValueError(f"bad layer sizes {sizes}")
        self.params: list[np.ndarray] = []
        rng = rng if rng is not None else np.random.default_rng(0)
        for fan_in, fan_out in zip(self.sizes[:-1], self.sizes[1:]):
            if zero:
                W = np.zeros((fan_in, fan_out))
                b = np.zeros(fan_out)
            else:
                bound = 1.0 / math.sqrt(fan_in)
                W = rng.uniform(-bound, bound, size=(fan_in, fan_out))
                b = rng.uniform(-bound, bound, size=fan_out)
            self.params += [W, b]
        self._cache: list[np.ndarray] | None = None
        self._squeeze = False

    @property
    def n_layers(self) -> int:
        return len(self.sizes) - 1

    @property
    def in_dim(self) -> int:
        return self.sizes[0]

    @property
    def out_dim(self) -> int:
        return self.sizes[-1]

    def forward(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        squeeze = x.ndim == 1
        if squeeze:
            x = x[None, :]
        if x.shape[-1] != self.in_dim:
            raise ValueError(f"expected input dim {self.in_dim}, got {x.shape[-1]}")
        acts = [x]
        h = x
        last = self.n_layers - 1
        for k in range(self.n_layers):
            h = h @ self.params[2 * k] + self.params[2 * k + 1]
            if k < last:
                h = np.tanh(h)
            acts.append(h)
        self._cache = acts
        self._squeeze = squeeze
        return h[0] if squeeze else h

    __call__ = forward

    def backward(self, output_grad) -> tuple[list[np.ndarray], np.ndarray]:
        """Gradients of ``sum(output * output_grad)`` w.r.t. params and input."""
        if self._cache is None:
            raise RuntimeError("backward() called without a cached forward pass")
        acts = self._cache
        g = np.asarray(output_grad, dtype=float)
        if self._squeeze:
            g = g[None, :]
        grads: list[np.ndarray] = [None] * len(self.params)  # type: ignore[list-item]
        for k in range(self.n_layers - 1, -1, -1):
            if k < self.n_layers - 1:
                g = g * (1.0 - acts[k + 1] ** 2)
            grads[2 * k] = acts[k].T @ g
            grads[2 * k + 1] = g.sum(axis=0)
            g = g @ self.params[2 * k].T
        return grads, (g[0] if self._squeeze else g)

    def copy_from(self, other: "Mlp") -> None:
        for p, q in zip(self.params, other.params):
            p[...] = q

    def polyak_from(self, other: "Mlp", tau: float) -> None:
        for p, q in zip(self.params, other.params):
            p *= 1.0 - tau
            p += tau * q

    def clone(self) -> "Mlp":
        net = Mlp(self.sizes, zero=True)
        net.copy_from(self)
        return net

    def get_flat(self) -> np.ndarray:
        return np.concatenate([p.ravel() for p in self.params])

    def set_flat(self, flat) -> None:
        flat = np.asarray(flat, dtype=float)
        i = 0
        for p in self.params:
            p[...] = flat[i:i + p.size].reshape(p.shape)
            i += p.size

    def state(self, prefix: str) -> dict[str, np.ndarray]:
        d = {f"{prefix}.sizes": np.array(self.sizes, dtype=np.int64)}
        for k in range(self.n_layers):
            d[f"{prefix}.W{k}"] = self.params[2 * k]
            d[f"{prefix}.b{k}"] = self.params[2 * k + 1]
        return d

    @classmethod
    def from_state(cls, data, prefix: str) -> "Mlp":
        net = cls(data[f"{prefix}.sizes"].tolist(), zero=True)
        for k in range(net.n_layers):
            net.params[2 * k][...] = data[f"{prefix}.W{k}"]
            net.params[2 * k + 1][...] = data[f"{prefix}.b{k}"]
        return net


class Adam:
    def __init__(self, params: list[np.ndarray], lr: float = 3e-4,
                 betas=(0.9, 0.999), eps: float = 1e-8) -> None:
        self.params = params
        self.lr = lr
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.m = [np.zeros_like(p) for p in params]
        self.v = [np.zeros_like(p) for p in params]
        self.t = 0

    def step(self, grads: list[np.ndarray]) -> None:
        if len(grads) != len(self.params):
            raise ValueError("gradient list does not match parameter list")
        for i, (p, g) in enumerate(zip(self.params, grads)):
            if g.shape != p.shape:
                raise ValueError(f"grad {i} has shape {g.shape}, param has {p.shape}")
            if not np.all(np.isfinite(g)):
                bad = int(np.size(g) - np.count_nonzero(np.isfinite(g)))
                raise FloatingPointError(
                    f"non-finite gradient in tensor {i} (shape {g.shape}, {bad} bad entries) at step {self.t + 1}"
                )
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        c1 = 1.0 - b1 ** self.t
        c2 = 1.0 - b2 ** self.t
        for p, g, m, v in zip(self.params, grads, self.m, self.v):
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * g * g
            p -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)

    def state(self, prefix: str) -> dict[str, np.ndarray]:
        d = {f"{prefix}.t": np.array(self.t, dtype=np.int64), f"{prefix}.lr": np.array(self.lr)}
        for i, (m, v) in enumerate(zip(self.m, self.v)):
            d[f"{prefix}.m{i}"] = m
            d[f"{prefix}.v{i}"] = v
        return d

    def load_state(self, data, prefix: str) -> None:
        self.t = int(data[f"{prefix}.t"])
        self.lr = float(data[f"{prefix}.lr"])
        for i in range(len(self.m)):
            self.m[i][...] = data[f"{prefix}.m{i}"]
            self.v[i][...] = data[f"{prefix}.v{i}"]


class GaussianHead:
    """Tanh-squashed diagonal Gaussian policy over a box ``[low, high]``.

    The wrapped net outputs ``[mean, log_std]``. ``log_prob`` is the density of
    the scaled action inside the box, including the tanh and affine Jacobians.
    """

    def __init__(self, net: Mlp, low, high) -> None:
        self.net = net
        self.low = np.asarray(low, dtype=float)
        self.high = np.asarray(high, dtype=float)
        self.act_dim = len(self.low)
        if net.out_dim != 2 * self.act_dim:
            raise ValueError("actor net must output 2 * act_dim values")
        self.center = 0.5 * (self.high + self.low)
        self.half = 0.5 * (self.high - self.low)
        self._log_half = float(np.sum(np.log(self.half)))
        self._cache = None

    def scale(self, a_unit):
        return self.center + self.half * a_unit

    def unscale(self, action):
        return (np.asarray(action, dtype=float) - self.center) / self.half

    def _mean_logstd(self, obs):
        out = self.net.forward(obs)
        mean = out[..., : self.act_dim]
        raw = out[..., self.act_dim:]
        return mean, raw, np.clip(raw, LOG_STD_MIN, LOG_STD_MAX)

    def deterministic(self, obs) -> np.ndarray:
        mean, _, _ = self._mean_logstd(obs)
        return self.scale(np.tanh(mean))

    def sample(self, obs, rng: np.random.Generator | None = None, noise=None):
        """Reparameterized sample. Returns ``(action, a_unit, log_prob)``.

        ``noise`` (standard normal, same shape as the action) overrides ``rng``.
        The intermediate values are cached for ``backward``.
        """
        mean, raw, log_std = self._mean_logstd(obs)
        if noise is None:
            noise = rng.standard_normal(mean.shape)
        std = np.exp(log_std)
        u = mean + std * noise
        a = np.tanh(u)
        one_minus = 1.0 - a * a
        logp = (-0.5 * noise * noise - log_std - 0.5 * math.log(2 * math.pi)
                - np.log(one_minus + TANH_EPS)).sum(axis=-1) - self._log_half
        self._cache = (raw, std, noise, a, one_minus)
        return self.scale(a), a, logp

    def backward(self, grad_a_unit, grad_logp) -> list[np.ndarray]:
        """Param grads given dL/d(a_unit) and dL/d(log_prob) for the cached sample."""
        if self._cache is None:
            raise RuntimeError("backward() called without a cached sample")
        raw, std, noise, a, one_minus = self._cache
        grad_logp = np.asarray(grad_logp, dtype=float)[..., None]
        dlogp_du = 2.0 * a * one_minus / (one_minus + TANH_EPS)
        g_u = np.asarray(grad_a_unit, dtype=float) * one_minus + grad_logp * dlogp_du
        g_mean = g_u
        g_logstd = g_u * std * noise - grad_logp
        g_logstd = np.where((raw < LOG_STD_MIN) | (raw > LOG_STD_MAX), 0.0, g_logstd)
        grads, _ = self.net.backward(np.concatenate([g_mean, g_logstd], axis=-1))
        return grads

    def log_prob(self, obs, action) -> np.ndarray:
        """Density of given (scaled) actions; actions must lie strictly inside the box."""
        mean, _, log_std = self._mean_logstd(obs)
        a = self.unscale(action)
        u = np.arctanh(a)
        z = (u - mean) / np.exp(log_std)
        return (-0.5 * z * z - log_std - 0.5 * math.log(2 * math.pi)
                - np.log(1.0 - a * a + TANH_EPS)).sum(axis=-1) - self._log_half


def sample_squashed(head: GaussianHead, obs, rng: np.random.Generator, deterministic: bool = False):
    """``(action, log_prob)``; the deterministic mode returns the squashed mean and NaN log-prob."""
    if deterministic:
        return head.deterministic(obs), float("nan")
    action, _, logp = head.sample(obs, rng)
    return action, logp


def save_checkpoint(path, arrays: dict[str, np.ndarray], meta: str = "") -> None:
    payload = {"format_version": np.array(CHECKPOINT_VERSION, dtype=np.int64), "meta": np.array(meta)}
    payload.update(arrays)
    with open(path, "wb") as fh:
        np.savez(fh, **payload)


def load_checkpoint(path) -> tuple[dict[str, np.ndarray], str]:
    with np.load(path, allow_pickle=False) as data:
        version = int(data["format_version"])
        if version != CHECKPOINT_VERSION:
            raise ValueError(f"unsupported checkpoint version {version}")
        arrays = {k: data[k].copy() for k in data.files if k not in ("format_version", "meta")}
        return arrays, str(data["meta"])
