"""Command-line front end: ``train``, ``eval``, ``sweep`` and ``report``.

Exit codes: 0 success, 1 configuration error, 2 runtime failure.
"""
from __future__ import annotations

import argparse
import configparser
import csv
import io
import itertools
import json
import logging
import os
import sys
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from . import __version__, kernels
from .baselines import BtBoPolicy, EpisodeBasedLearner, FlatSacLearner, bo_optimize
from .bt_engine import build_chain_bt
from .env2d import TRACE_HEADER, Context, EnvConfig, validate_context
from .hrl_driver import BtSacLearner, TrainingAborted, train_run
from .policy_nn import load_checkpoint, save_checkpoint
from .sac_learner import SacAgent, SacConfig
from .sampling_eval import ContextSet, LearningCurve, detect_convergence, evaluate, latin_hypercube

log = logging.getLogger("btadapt")

METHODS = ("bt-sac", "sac-flat", "bt-episode", "bt-bo")
OUTPUT_ROOT_ENV = "BTADAPT_OUTPUT_ROOT"
EXIT_OK, EXIT_CONFIG, EXIT_RUNTIME = 0, 1, 2


class ConfigError(ValueError):
    pass


@dataclass
class BoConfig:
    budget: int = 100
    n_init: int = 10
    shared: bool = False
    init: str = "lhs"


@dataclass
class ExperimentConfig:
    method: str = "bt-sac"
    n_contexts: int = 20
    n_goals: int = 3
    forbidden: bool = False
    seed: int = 0
    context_seed: int | None = None  # None -> derived from seed
    contexts_file: str | None = None
    episodes: int = 1500
    eval_period: int = 10
    index_encoding: str = "scalar"
    validation_seed: int = 10_000
    n_validation: int = 20
    env: EnvConfig = field(default_factory=EnvConfig)
    sac: SacConfig = field(default_factory=SacConfig)
    bo: BoConfig = field(default_factory=BoConfig)

    def validate(self) -> None:
        if self.method not in METHODS:
            raise ConfigError(f"unknown method {self.method!r}; choose from {', '.join(METHODS)}")
        if self.n_contexts < 1:
            raise ConfigError("n_contexts must be >= 1")
        if not 1 <= self.n_goals <= 16:
            raise ConfigError("n_goals must lie in [1, 16]")
        if self.episodes < 1 or self.eval_period < 1:
            raise ConfigError("episodes and eval_period must be >= 1")
        if self.bo.budget < 1:
            raise ConfigError("bo budget must be >= 1")
        if self.bo.init not in ("lhs", "uniform"):
            raise ConfigError("bo init must be 'lhs' or 'uniform'")
        if self.index_encoding not in ("scalar", "onehot"):
            raise ConfigError("index_encoding must be 'scalar' or 'onehot'")
        if self.env.forbidden != self.forbidden:
            self.env.forbidden = self.forbidden

    @property
    def train_context_seed(self) -> int:
        return self.context_seed if self.context_seed is not None else 1000 + self.seed

    def run_name(self) -> str:
        fz = "-fz" if self.forbidden else ""
        return f"{self.method}-c{self.n_contexts}-g{self.n_goals}{fz}-s{self.seed}"

    def to_dict(self) -> dict:
        d = asdict(self)
        return json.loads(json.dumps(d))

    def to_ini(self) -> str:
        cp = configparser.ConfigParser()
        cp["run"] = {f.name: _fmt(getattr(self, f.name)) for f in fields(self) if f.name not in ("env", "sac", "bo")}
        cp["env"] = {k: _fmt(v) for k, v in asdict(self.env).items()}
        cp["sac"] = {k: _fmt(v) for k, v in asdict(self.sac).items()}
        cp["bo"] = {k: _fmt(v) for k, v in asdict(self.bo).items()}
        buf = io.StringIO()
        cp.write(buf)
        return buf.getvalue()


def _fmt(v) -> str:
    if v is None:
        return "none"
    if isinstance(v, (tuple, list)):
        return ", ".join(_fmt(x) for x in v)
    if isinstance(v, bool):
        return "true" if v else "false"
    return repr(v) if isinstance(v, float) else str(v)


def _parse_value(text: str, default):
    text = text.strip()
    if text.lower() == "none":
        return None
    if isinstance(default, bool):
        if text.lower() in ("1", "true", "yes", "on"):
            return True
        if text.lower() in ("0", "false", "no", "off"):
            return False
        raise ConfigError(f"not a boolean: {text!r}")
    if isinstance(default, tuple):
        parts = [p for p in text.split(",") if p.strip()]
        sub = default[0] if default else 0.0
        return tuple(_parse_value(p, sub) for p in parts)
    try:
        if isinstance(default, int):
            return int(text)
        if isinstance(default, float) or default is None:
            return float(text) if default is not None or _is_number(text) else text
    except ValueError as exc:
        raise ConfigError(f"bad value {text!r}: {exc}") from exc
    return text


def _is_number(text: str) -> bool:
    try:
        float(text)
    except ValueError:
        return False
    return True


def _apply_section(obj, section, name: str) -> None:
    known = {f.name for f in fields(obj)}
    for key, text in section.items():
        if key not in known:
            raise ConfigError(f"unknown key {key!r} in section [{name}]")
        default = getattr(obj, key)
        if key in ("context_seed",):
            value = None if text.strip().lower() == "none" else int(text)
        elif key == "contexts_file":
            value = None if text.strip().lower() == "none" else text.strip()
        else:
            value = _parse_value(text, default)
        setattr(obj, key, value)


def load_config(path: str | None, base: ExperimentConfig | None = None) -> ExperimentConfig:
    """Read an INI config (sections ``run``, ``env``, ``sac``, ``bo``) over the defaults."""
    cfg = base or ExperimentConfig()
    if path is None:
        return cfg
    cp = configparser.ConfigParser()
    try:
        with open(path) as fh:
            cp.read_file(fh)
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    except configparser.Error as exc:
        raise ConfigError(f"malformed config {path}: {exc}") from exc
    targets = {"run": cfg, "env": cfg.env, "sac": cfg.sac, "bo": cfg.bo}
    for name in cp.sections():
        if name == "sweep":
            continue
        if name not in targets:
            raise ConfigError(f"unknown section [{name}] in {path}")
        _apply_section(targets[name], cp[name], name)
    return rebuild(cfg)


def rebuild(cfg: ExperimentConfig) -> ExperimentConfig:
    """Re-run dataclass validation after field edits."""
    try:
        cfg.env = EnvConfig(**asdict(cfg.env))
        cfg.sac = SacConfig(**asdict(cfg.sac))
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from exc
    cfg.env.forbidden = cfg.forbidden = bool(cfg.forbidden or cfg.env.forbidden)
    cfg.validate()
    return cfg


def config_from_dict(d: dict) -> ExperimentConfig:
    d = dict(d)
    env = dict(d.pop("env"))
    for k in ("x_bounds", "z_bounds", "start", "goal", "h_range", "w_range", "x_range"):
        env[k] = tuple(env[k])
    sac = dict(d.pop("sac"))
    sac["hidden"] = tuple(sac["hidden"])
    bo = d.pop("bo")
    return rebuild(ExperimentConfig(env=EnvConfig(**env), sac=SacConfig(**sac), bo=BoConfig(**bo), **d))


def output_root(arg: str | None) -> Path:
    return Path(arg or os.environ.get(OUTPUT_ROOT_ENV, "runs"))


# -- learners ------------------------------------------------------------------


def make_learner(cfg: ExperimentConfig):
    if cfg.method == "bt-sac":
        return BtSacLearner(cfg.env, cfg.sac, cfg.n_goals, cfg.seed, cfg.index_encoding)
    if cfg.method == "sac-flat":
        return FlatSacLearner(cfg.env, cfg.sac, cfg.seed)
    if cfg.method == "bt-episode":
        return EpisodeBasedLearner(cfg.env, cfg.sac, cfg.n_goals, cfg.seed)
    raise ConfigError(f"method {cfg.method!r} has no SAC learner")


def training_contexts(cfg: ExperimentConfig) -> ContextSet:
    if cfg.contexts_file:
        cs = ContextSet.from_csv(Path(cfg.contexts_file).read_text())
        if not cs.contexts:
            raise ConfigError(f"no contexts in {cfg.contexts_file}")
    else:
        cs = latin_hypercube(cfg.n_contexts, cfg.env.context_ranges, cfg.train_context_seed)
    for c in cs:
        try:
            validate_context(cfg.env, c)
        except ValueError as exc:
            raise ConfigError(f"invalid training context: {exc}") from exc
    return cs


def validation_contexts(cfg: ExperimentConfig) -> ContextSet:
    return latin_hypercube(cfg.n_validation, cfg.env.context_ranges, cfg.validation_seed)


def _write(path: Path, text: str) -> None:
    path.write_text(text, encoding="utf-8", newline="")


def bo_trace_csv(traces) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["context_index", "iteration", "best_reward"])
    for i, tr in enumerate(traces):
        for it, best in tr:
            w.writerow([i, it, repr(float(best))])
    return buf.getvalue()


def run_training(cfg: ExperimentConfig, run_dir: Path, quiet: bool = True) -> dict:
    """Train (or optimize, for bt-bo) and write every run artifact into ``run_dir``."""
    run_dir.mkdir(parents=True, exist_ok=True)
    contexts = training_contexts(cfg)
    _write(run_dir / "config.ini", cfg.to_ini())
    _write(run_dir / "contexts.csv", contexts.to_csv())
    manifest = {"version": __version__, "config": cfg.to_dict(), "seed": cfg.seed, "method": cfg.method,
                "kernel_backend": kernels.BACKEND, "n_contexts": len(contexts), "status": "running"}
    rng = np.random.default_rng(cfg.seed)
    t0 = time.perf_counter()
    if cfg.method == "bt-bo":
        tree = build_chain_bt(cfg.n_goals, cfg.env.goal, forbidden=cfg.env.forbidden)
        thetas, traces = bo_optimize(cfg.env, tree, contexts, cfg.bo.budget, rng, cfg.bo.shared, cfg.bo.n_init,
                                     cfg.bo.init)
        _write(run_dir / "bo_trace.csv", bo_trace_csv(traces))
        meta = {"learner": {"method": "bt-bo", "n_goals": cfg.n_goals, "shared": cfg.bo.shared,
                            "action_dim": tree.param_dim}}
        save_checkpoint(run_dir / "checkpoint.npz",
                        {"thetas": np.array(thetas), "contexts": contexts.as_array()},
                        json.dumps(meta, sort_keys=True))
        manifest.update(convergence_episode=None, best_rewards=[float(t[-1][1]) for t in traces])
    else:
        learner = make_learner(cfg)

        def progress(p):
            if not quiet:
                print(f"episode {p.episode}: eval reward {p.mean_reward:.2f} "
                      f"success {p.success_rate:.2f} collisions {p.collision_rate:.2f}", flush=True)

        try:
            curve = train_run(learner, contexts, cfg.episodes, cfg.eval_period, rng, progress)
        except TrainingAborted as exc:
            _write(run_dir / "curve.csv", exc.curve.to_csv())
            manifest.update(status="aborted", error=str(exc), wall_time_s=time.perf_counter() - t0)
            _write(run_dir / "manifest.json", json.dumps(manifest, indent=2, sort_keys=True))
            raise
        _write(run_dir / "curve.csv", curve.to_csv())
        learner.save(run_dir / "checkpoint.npz")
        manifest.update(convergence_episode=detect_convergence(curve), buffer=learner.agent.buffer.summary(),
                        final_eval_reward=curve.points[-1].mean_reward if curve.points else None,
                        learner=learner.describe())
    manifest.update(status="complete", wall_time_s=time.perf_counter() - t0)
    _write(run_dir / "manifest.json", json.dumps(manifest, indent=2, sort_keys=True))
    return manifest


def load_policy(run_dir: Path, cfg: ExperimentConfig | None = None):
    """Rebuild the frozen policy stored in ``run_dir``; returns ``(policy, config)``."""
    manifest = json.loads((run_dir / "manifest.json").read_text())
    cfg = cfg or config_from_dict(manifest["config"])
    ckpt = run_dir / "checkpoint.npz"
    if cfg.method == "bt-bo":
        arrays, meta = load_checkpoint(ckpt)
        ctx = [Context.from_array(r) for r in arrays["contexts"]]
        return BtBoPolicy(cfg.env, cfg.n_goals, ctx, list(arrays["thetas"]), cfg.bo.shared), cfg
    learner = make_learner(cfg)
    agent, meta = SacAgent.load(ckpt)
    if agent.obs_dim != learner.agent.obs_dim or agent.act_dim != learner.agent.act_dim:
        raise ConfigError(f"checkpoint dims (obs {agent.obs_dim}, act {agent.act_dim}) do not match config "
                          f"(obs {learner.agent.obs_dim}, act {learner.agent.act_dim})")
    learner.agent = agent
    return learner, cfg


class _Tracing:
    """Forwards episodes to ``policy`` and collects the waypoint trace of each."""

    def __init__(self, policy) -> None:
        self.policy = policy
        self.policy.env.record = True
        self.parts = [",".join(TRACE_HEADER) + "\n"]

    def episode(self, c, train, rng):
        rec = self.policy.episode(c, train=train, rng=rng)
        self.parts.append(self.policy.env.trace_csv(len(self.parts), header=False))
        return rec


def run_eval(run_dir: Path, contexts: ContextSet, context_set_id: str, episodes_per_context: int = 1,
             goals: int | None = None, out: Path | None = None, trace: Path | None = None):
    manifest = json.loads((run_dir / "manifest.json").read_text())
    cfg = config_from_dict(manifest["config"])
    if goals is not None and goals != cfg.n_goals:
        raise ConfigError(f"checkpoint was trained with {cfg.n_goals} intermediate goals, not {goals}")
    policy, cfg = load_policy(run_dir, cfg)
    runner = _Tracing(policy) if trace else policy
    report = evaluate(runner, contexts, episodes_per_context, np.random.default_rng(cfg.seed),
                      policy_id=cfg.run_name(), context_set_id=context_set_id)
    _write(out or run_dir / "eval_report.csv", report.to_csv())
    if trace:
        _write(trace, "".join(runner.parts))
    return report


# -- plots ---------------------------------------------------------------------

PALETTE = ("#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b")


def svg_band_plot(series: dict[str, tuple[np.ndarray, np.ndarray, np.ndarray]], title: str,
                  width: int = 640, height: int = 400) -> str:
    """Mean line with a shaded +-std band per series, as a standalone SVG."""
    ml, mr, mt, mb = 60, 20, 30, 40
    xs = np.concatenate([s[0] for s in series.values()]) if series else np.array([0.0, 1.0])
    lo = np.concatenate([s[1] - s[2] for s in series.values()]) if series else np.array([0.0])
    hi = np.concatenate([s[1] + s[2] for s in series.values()]) if series else np.array([1.0])
    x0, x1 = float(xs.min()), float(xs.max())
    y0, y1 = float(lo.min()), float(hi.max())
    if x1 == x0:
        x1 = x0 + 1.0
    if y1 == y0:
        y1 = y0 + 1.0

    def px(x):
        return ml + (x - x0) / (x1 - x0) * (width - ml - mr)

    def py(y):
        return height - mb - (y - y0) / (y1 - y0) * (height - mt - mb)

    out = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" '
           f'viewBox="0 0 {width} {height}">',
           f'<rect width="{width}" height="{height}" fill="white"/>',
           f'<text x="{width / 2:.1f}" y="18" text-anchor="middle" font-size="14">{title}</text>',
           f'<line x1="{ml}" y1="{height - mb}" x2="{width - mr}" y2="{height - mb}" stroke="black"/>',
           f'<line x1="{ml}" y1="{mt}" x2="{ml}" y2="{height - mb}" stroke="black"/>',
           f'<text x="{width / 2:.1f}" y="{height - 8}" text-anchor="middle" font-size="12">episode</text>',
           f'<text x="14" y="{height / 2:.1f}" text-anchor="middle" font-size="12" '
           f'transform="rotate(-90 14 {height / 2:.1f})">mean eval reward</text>']
    for v in np.linspace(y0, y1, 5):
        out.append(f'<text x="{ml - 4}" y="{py(v) + 4:.1f}" text-anchor="end" font-size="10">{v:.0f}</text>')
    for v in np.linspace(x0, x1, 5):
        out.append(f'<text x="{px(v):.1f}" y="{height - mb + 14}" text-anchor="middle" font-size="10">{v:.0f}</text>')
    for k, (name, (x, m, s)) in enumerate(series.items()):
        color = PALETTE[k % len(PALETTE)]
        upper = " ".join(f"{px(a):.1f},{py(b):.1f}" for a, b in zip(x, m + s))
        lower = " ".join(f"{px(a):.1f},{py(b):.1f}" for a, b in zip(x[::-1], (m - s)[::-1]))
        out.append(f'<polygon points="{upper} {lower}" fill="{color}" fill-opacity="0.2" stroke="none"/>')
        line = " ".join(f"{px(a):.1f},{py(b):.1f}" for a, b in zip(x, m))
        out.append(f'<polyline points="{line}" fill="none" stroke="{color}" stroke-width="1.5"/>')
        out.append(f'<text x="{width - mr - 4}" y="{mt + 14 * (k + 1)}" text-anchor="end" font-size="11" '
                   f'fill="{color}">{name}</text>')
    out.append("</svg>")
    return "\n".join(out) + "\n"


# -- sweep ---------------------------------------------------------------------


@dataclass
class SweepSpec:
    methods: list[str]
    contexts: list[int]
    seeds: list[int]
    goals: list[int]
    validate: bool = True

    def cells(self, base: ExperimentConfig) -> list[ExperimentConfig]:
        out = []
        for method, n, g, seed in itertools.product(self.methods, self.contexts, self.goals, self.seeds):
            d = base.to_dict()
            d.update(method=method, n_contexts=n, n_goals=g, seed=seed)
            out.append(config_from_dict(d))
        return out


def _int_list(text: str) -> list[int]:
    try:
        return [int(v) for v in text.replace(" ", "").split(",") if v]
    except ValueError as exc:
        raise ConfigError(f"expected a comma-separated integer list, got {text!r}") from exc


def load_sweep(path: str) -> tuple[SweepSpec, ExperimentConfig]:
    cp = configparser.ConfigParser()
    try:
        with open(path) as fh:
            cp.read_file(fh)
    except (OSError, configparser.Error) as exc:
        raise ConfigError(f"cannot read sweep spec {path}: {exc}") from exc
    if "sweep" not in cp:
        raise ConfigError(f"{path} has no [sweep] section")
    s = cp["sweep"]
    unknown = set(s) - {"methods", "contexts", "seeds", "goals", "validate"}
    if unknown:
        raise ConfigError(f"unknown keys in [sweep]: {sorted(unknown)}")
    methods = [m.strip() for m in s.get("methods", "bt-sac").split(",") if m.strip()]
    for m in methods:
        if m not in METHODS:
            raise ConfigError(f"unknown method {m!r} in sweep")
    spec = SweepSpec(methods, _int_list(s.get("contexts", "20")), _int_list(s.get("seeds", "0")),
                     _int_list(s.get("goals", "3")), s.getboolean("validate", True))
    return spec, load_config(path)


def _run_cell(cfg_dict: dict, run_dir: str, validate: bool) -> tuple[str, str, str]:
    cfg = config_from_dict(cfg_dict)
    rd = Path(run_dir)
    try:
        if cfg.method == "bt-bo":
            # BO optimizes directly on the validation set
            vc = validation_contexts(cfg)
            rd.mkdir(parents=True, exist_ok=True)
            _write(rd / "validation_contexts.csv", vc.to_csv())
            cfg.contexts_file = str(rd / "validation_contexts.csv")
        run_training(cfg, rd)
        if validate:
            run_eval(rd, validation_contexts(cfg), f"validation-seed{cfg.validation_seed}")
        return run_dir, "complete", ""
    except Exception as exc:  # recorded, sweep continues
        return run_dir, "failed", f"{type(exc).__name__}: {exc}"


def _is_complete(run_dir: Path, validate: bool) -> bool:
    m = run_dir / "manifest.json"
    if not m.exists():
        return False
    try:
        done = json.loads(m.read_text()).get("status") == "complete"
    except json.JSONDecodeError:
        return False
    return done and (not validate or (run_dir / "eval_report.csv").exists())


def run_sweep(spec: SweepSpec, base: ExperimentConfig, out_dir: Path, workers: int = 1,
              progress=print) -> list[tuple[str, str, str]]:
    out_dir.mkdir(parents=True, exist_ok=True)
    cells = spec.cells(base)
    todo, results = [], []
    for cfg in cells:
        rd = out_dir / cfg.run_name()
        if _is_complete(rd, spec.validate):
            results.append((str(rd), "skipped", ""))
        else:
            todo.append((cfg.to_dict(), str(rd), spec.validate))
    progress(f"{len(cells)} cells, {len(cells) - len(todo)} already complete")
    if workers <= 1:
        for args in todo:
            results.append(_run_cell(*args))
            progress(f"{results[-1][1]}: {results[-1][0]}")
    else:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            for res in pool.map(_run_cell, *zip(*todo)) if todo else []:
                results.append(res)
                progress(f"{res[1]}: {res[0]}")
    with open(out_dir / "sweep_status.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["run_dir", "status", "error"])
        for r in sorted(results):
            w.writerow(r)
    aggregate_sweep(out_dir, cells)
    return results


def aggregate_sweep(out_dir: Path, cells: list[ExperimentConfig]) -> Path:
    """Mean and std of the evaluation curve across seeds, per (method, contexts, goals)."""
    groups: dict[tuple, list[LearningCurve]] = {}
    for cfg in cells:
        f = out_dir / cfg.run_name() / "curve.csv"
        if cfg.method == "bt-bo" or not f.exists():
            continue
        curve = LearningCurve.from_csv(f.read_text())
        if curve.points:
            groups.setdefault((cfg.method, cfg.n_contexts, cfg.n_goals, cfg.forbidden), []).append(curve)
    path = out_dir / "aggregate.csv"
    plots: dict[tuple, dict] = {}
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["method", "n_contexts", "n_goals", "forbidden", "n_seeds", "episode", "mean_reward",
                    "std_reward", "mean_success_rate"])
        for key in sorted(groups):
            curves = groups[key]
            n = min(len(c.points) for c in curves)
            ep = curves[0].episodes[:n]
            r = np.array([c.rewards[:n] for c in curves])
            s = np.array([[p.success_rate for p in c.points[:n]] for c in curves])
            for j in range(n):
                w.writerow([*key[:3], int(key[3]), len(curves), int(ep[j]), repr(float(r[:, j].mean())),
                            repr(float(r[:, j].std())), repr(float(s[:, j].mean()))])
            plots.setdefault((key[1], key[2], key[3]), {})[key[0]] = (ep, r.mean(axis=0), r.std(axis=0))
    for (n, g, fz), series in sorted(plots.items()):
        name = f"curves-c{n}-g{g}{'-fz' if fz else ''}.svg"
        _write(out_dir / name, svg_band_plot(series, f"{n} contexts, {g} goals{' (forbidden zone)' if fz else ''}"))
    return path


# -- report --------------------------------------------------------------------


def build_report(run_dirs: list[Path]) -> str:
    """Reward and collision summary across seeds, one row per (method, contexts, goals)."""
    groups: dict[tuple, list[tuple[float, float, float]]] = {}
    for rd in run_dirs:
        ev, man = rd / "eval_report.csv", rd / "manifest.json"
        if not (ev.exists() and man.exists()):
            continue
        cfg = json.loads(man.read_text())["config"]
        rows = list(csv.DictReader(io.StringIO(ev.read_text())))
        rewards = [float(r["mean_reward"]) for r in rows]
        coll = sum(int(r["collisions"]) / int(r["episodes"]) for r in rows)
        succ = sum(int(r["successes"]) for r in rows) / sum(int(r["episodes"]) for r in rows)
        key = (cfg["method"], cfg["n_contexts"], cfg["n_goals"], cfg["forbidden"])
        groups.setdefault(key, []).append((float(np.mean(rewards)), coll, succ))
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["method", "n_contexts", "n_goals", "forbidden", "n_seeds", "reward_mean", "reward_std",
                "collisions_mean", "collisions_std", "success_rate"])
    for key in sorted(groups):
        a = np.array(groups[key])
        w.writerow([key[0], key[1], key[2], int(key[3]), len(a), f"{a[:, 0].mean():.4f}", f"{a[:, 0].std():.4f}",
                    f"{a[:, 1].mean():.4f}", f"{a[:, 1].std():.4f}", f"{a[:, 2].mean():.4f}"])
    return buf.getvalue()


# -- argument parsing ----------------------------------------------------------


def _add_run_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="INI file with [run], [env], [sac], [bo] sections")
    p.add_argument("--method", choices=METHODS)
    p.add_argument("--contexts", type=int, dest="n_contexts", help="number of LHS training contexts")
    p.add_argument("--contexts-file", help="train on the contexts in this CSV instead of sampling")
    p.add_argument("--goals", type=int, dest="n_goals", help="number of intermediate goals")
    p.add_argument("--forbidden", action="store_true", default=None, help="enable the forbidden zone")
    p.add_argument("--seed", type=int)
    p.add_argument("--context-seed", type=int)
    p.add_argument("--episodes", type=int)
    p.add_argument("--eval-period", type=int)
    p.add_argument("--bo-budget", type=int)
    p.add_argument("--bo-shared", action="store_true", default=None)
    p.add_argument("--index-encoding", choices=("scalar", "onehot"))


def config_from_args(args) -> ExperimentConfig:
    cfg = load_config(args.config)
    for name in ("method", "n_contexts", "contexts_file", "n_goals", "forbidden", "seed", "context_seed",
                 "episodes", "eval_period", "index_encoding"):
        v = getattr(args, name, None)
        if v is not None:
            setattr(cfg, name, v)
    if getattr(args, "bo_budget", None) is not None:
        cfg.bo.budget = args.bo_budget
    if getattr(args, "bo_shared", None):
        cfg.bo.shared = True
    if args.forbidden:
        cfg.env.forbidden = True
    return rebuild(cfg)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="btadapt", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=__version__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train one configuration and write a run directory")
    _add_run_flags(p)
    p.add_argument("--out", help=f"output root (default: ${OUTPUT_ROOT_ENV} or ./runs)")
    p.add_argument("--run-dir", help="explicit run directory (overrides --out)")
    p.add_argument("--quiet", action="store_true")

    p = sub.add_parser("eval", help="evaluate a trained run on a context set")
    p.add_argument("run_dir")
    p.add_argument("--contexts", help="context CSV; default is a fresh LHS validation set")
    p.add_argument("--n-validation", type=int, default=20)
    p.add_argument("--validation-seed", type=int, default=10_000)
    p.add_argument("--goals", type=int, help="expected number of intermediate goals (checked)")
    p.add_argument("--episodes-per-context", type=int, default=1)
    p.add_argument("--out", help="report path (default: RUN_DIR/eval_report.csv)")
    p.add_argument("--trace", help="also write every evaluated waypoint to this CSV")

    p = sub.add_parser("sweep", help="run methods x contexts x goals x seeds, resumable")
    p.add_argument("spec", help="INI file with a [sweep] section plus optional base sections")
    p.add_argument("--out", help=f"sweep directory (default: $({OUTPUT_ROOT_ENV} or ./runs)/sweep)")
    p.add_argument("--workers", type=int, default=1)

    p = sub.add_parser("report", help="summarize evaluated runs into a table CSV")
    p.add_argument("paths", nargs="+", help="run directories or sweep directories")
    p.add_argument("--out", help="output CSV (default: stdout)")
    return parser


def _collect_runs(paths: list[str]) -> list[Path]:
    out = []
    for p in map(Path, paths):
        if (p / "manifest.json").exists():
            out.append(p)
        elif p.is_dir():
            out.extend(sorted(d for d in p.iterdir() if (d / "manifest.json").exists()))
        else:
            raise ConfigError(f"{p} is neither a run nor a sweep directory")
    return out


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        # argparse uses 2 for usage errors; here that is a configuration error
        return EXIT_CONFIG if exc.code not in (0, None) else EXIT_OK
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.command == "train":
            cfg = config_from_args(args)
            run_dir = Path(args.run_dir) if args.run_dir else output_root(args.out) / cfg.run_name()
            m = run_training(cfg, run_dir, quiet=args.quiet)
            print(f"run directory: {run_dir}")
            print(f"convergence episode: {m.get('convergence_episode')}  wall time: {m['wall_time_s']:.1f}s")
        elif args.command == "eval":
            run_dir = Path(args.run_dir)
            if not (run_dir / "manifest.json").exists():
                raise ConfigError(f"{run_dir} has no manifest.json")
            if args.contexts:
                cs, cs_id = ContextSet.from_csv(Path(args.contexts).read_text()), Path(args.contexts).name
            else:
                cfg = config_from_dict(json.loads((run_dir / "manifest.json").read_text())["config"])
                cs = latin_hypercube(args.n_validation, cfg.env.context_ranges, args.validation_seed)
                cs_id = f"validation-seed{args.validation_seed}"
            report = run_eval(run_dir, cs, cs_id, args.episodes_per_context, args.goals,
                              Path(args.out) if args.out else None, Path(args.trace) if args.trace else None)
            print(report.summary())
        elif args.command == "sweep":
            spec, base = load_sweep(args.spec)
            out = Path(args.out) if args.out else output_root(None) / "sweep"
            results = run_sweep(spec, base, out, args.workers)
            failed = [r for r in results if r[1] == "failed"]
            for r in failed:
                print(f"FAILED {r[0]}: {r[2]}", file=sys.stderr)
            print(f"sweep written to {out}")
            if failed:
                return EXIT_RUNTIME
        elif args.command == "report":
            text = build_report(_collect_runs(args.paths))
            if args.out:
                _write(Path(args.out), text)
            else:
                sys.stdout.write(text)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (TrainingAborted, FloatingPointError, OSError, KeyError, RuntimeError) as exc:
        print(f"runtime failure: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
