"""Experiment configuration, evaluation reports and plot-ready tables."""
from __future__ import annotations

import configparser
import csv
import dataclasses
import json
import math
import os
import time
from dataclasses import dataclass, field
from io import StringIO
from pathlib import Path

import numpy as np

from . import numerics as nx
from .baseline import IndependentBaseline
from .envs import make_env
from .model import MATNAHT, ModelConfig
from .sampler import sample_composition
from .teammates import TeammatePool, build_pools, load_pools, save_pools
from .training import PPOConfig, run_episodes, train

VARIANTS = ("mat_naht", "mat_naht_no_history", "independent_baseline")
Z95 = 1.96


class ConfigError(ValueError):
    pass


# ---------------------------------------------------------------- config


@dataclass
class EnvConfig:
    name: str = "signal"
    num_agents: int = 3
    num_types: int = 5
    horizon: int = 4
    size: int = 5
    num_goals: int = 3
    fov: int = 2
    gamma: float = 0.99

    def build(self):
        if self.name == "signal":
            return make_env("signal", num_agents=self.num_agents, num_types=self.num_types, horizon=self.horizon, gamma=self.gamma)
        if self.name == "gridworld":
            return make_env(
                "gridworld",
                size=self.size,
                num_agents=self.num_agents,
                num_goals=self.num_goals,
                horizon=self.horizon,
                fov=self.fov,
                gamma=self.gamma,
            )
        raise ConfigError(f"unknown env name {self.name!r} (expected signal or gridworld)")


@dataclass
class ModelSection:
    k: int = 4
    d_model: int = 64
    n_heads: int = 2
    n_layers_enc: int = 2
    n_layers_dec: int = 2
    ff_dim: int = 128
    baseline_hidden: int = 64


@dataclass
class PoolConfig:
    num_families: int = 5
    instances_per_family_train: int = 8
    instances_per_family_test: int = 4
    seed: int = 0

    def build(self):
        return build_pools(
            self.num_families, self.instances_per_family_train, self.instances_per_family_test, self.seed
        )


@dataclass
class ExperimentConfig:
    env: EnvConfig = field(default_factory=EnvConfig)
    model: ModelSection = field(default_factory=ModelSection)
    ppo: PPOConfig = field(default_factory=PPOConfig)
    pools: PoolConfig = field(default_factory=PoolConfig)
    seeds: list[int] = field(default_factory=lambda: [0, 1, 2, 3, 4])
    variant: str = "mat_naht"
    output_dir: str = "runs/default"
    eval_episodes: int = 50
    source_text: str | None = field(default=None, repr=False, compare=False)

    def validate(self) -> "ExperimentConfig":
        if self.variant not in VARIANTS:
            raise ConfigError(f"variant must be one of {VARIANTS}, got {self.variant!r}")
        if not self.seeds:
            raise ConfigError("at least one seed is required")
        if self.eval_episodes < 1:
            raise ConfigError("eval_episodes must be >= 1")
        if self.env.name == "signal" and self.env.num_types != self.pools.num_families:
            raise ConfigError("signal game needs num_types == pools.num_families")
        try:
            env = self.env.build()
            self.model_config(env.spec, self.variant)
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc
        return self

    def model_config(self, spec, variant: str | None = None) -> ModelConfig:
        variant = variant or self.variant
        m = self.model
        return ModelConfig(
            obs_dim=spec.obs_dim,
            num_actions=spec.num_actions,
            max_agents=spec.num_agents - 1,
            k=0 if variant == "mat_naht_no_history" else m.k,
            d_model=m.d_model,
            n_heads=m.n_heads,
            n_layers_enc=m.n_layers_enc,
            n_layers_dec=m.n_layers_dec,
            ff_dim=m.ff_dim,
        )

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d.pop("source_text")
        return d

    def to_ini(self) -> str:
        cp = configparser.ConfigParser()
        cp["experiment"] = {
            "variant": self.variant,
            "seeds": ", ".join(str(s) for s in self.seeds),
            "output_dir": self.output_dir,
            "eval_episodes": str(self.eval_episodes),
        }
        for name in ("env", "model", "ppo", "pools"):
            cp[name] = {k: str(v) for k, v in dataclasses.asdict(getattr(self, name)).items()}
        buf = StringIO()
        cp.write(buf)
        return buf.getvalue()


def _coerce(raw: str, default, where: str):
    try:
        if isinstance(default, bool):
            low = raw.strip().lower()
            if low not in ("true", "false", "1", "0", "yes", "no"):
                raise ValueError(raw)
            return low in ("true", "1", "yes")
        if isinstance(default, int):
            return int(raw.replace("_", ""))
        if isinstance(default, float):
            return float(raw)
        return raw.strip()
    except ValueError as exc:
        raise ConfigError(f"{where}: cannot parse {raw!r} as {type(default).__name__}") from exc


def _section(cp, name: str, cls):
    base = cls()
    if not cp.has_section(name):
        return base
    known = {f.name for f in dataclasses.fields(cls)}
    values = {}
    for key, raw in cp.items(name):
        if key not in known:
            raise ConfigError(f"unknown key [{name}] {key}")
        values[key] = _coerce(raw, getattr(base, key), f"[{name}] {key}")
    try:
        return dataclasses.replace(base, **values)
    except ValueError as exc:
        raise ConfigError(f"[{name}]: {exc}") from exc


def parse_config(text: str) -> ExperimentConfig:
    cp = configparser.ConfigParser()
    try:
        cp.read_string(text)
    except configparser.Error as exc:
        raise ConfigError(f"malformed config: {exc}") from exc
    allowed = {"experiment", "env", "model", "ppo", "pools"}
    extra = set(cp.sections()) - allowed
    if extra:
        raise ConfigError(f"unknown config sections: {sorted(extra)}")
    cfg = ExperimentConfig(
        env=_section(cp, "env", EnvConfig),
        model=_section(cp, "model", ModelSection),
        ppo=_section(cp, "ppo", PPOConfig),
        pools=_section(cp, "pools", PoolConfig),
        source_text=text,
    )
    if cp.has_section("experiment"):
        ex = dict(cp.items("experiment"))
        unknown = set(ex) - {"variant", "seeds", "output_dir", "eval_episodes"}
        if unknown:
            raise ConfigError(f"unknown key(s) in [experiment]: {sorted(unknown)}")
        if "seeds" in ex:
            try:
                cfg.seeds = [int(s) for s in ex["seeds"].replace(",", " ").split()]
            except ValueError as exc:
                raise ConfigError(f"[experiment] seeds: {ex['seeds']!r}") from exc
        cfg.variant = ex.get("variant", cfg.variant).strip()
        cfg.output_dir = ex.get("output_dir", cfg.output_dir).strip()
        if "eval_episodes" in ex:
            cfg.eval_episodes = _coerce(ex["eval_episodes"], 1, "[experiment] eval_episodes")
    return cfg.validate()


def load_config(path) -> ExperimentConfig:
    p = Path(path)
    if not p.is_file():
        raise ConfigError(f"config file {path} not found")
    return parse_config(p.read_text())


def make_policy(cfg: ExperimentConfig, spec, variant: str, seed: int):
    mc = cfg.model_config(spec, variant)
    if variant == "independent_baseline":
        return IndependentBaseline(mc, seed, cfg.model.baseline_hidden)
    policy = MATNAHT(mc, seed)
    policy.label = variant
    return policy


# ---------------------------------------------------------------- evaluation


def ci95(values) -> tuple[float, float, float]:
    """Mean and normal-approximation 95% interval, mean ± 1.96·s/√n (s with ddof=1)."""
    v = np.asarray(values, dtype=np.float64)
    mu = float(v.mean())
    if len(v) < 2:
        return mu, mu, mu
    half = Z95 * float(v.std(ddof=1)) / math.sqrt(len(v))
    return mu, mu - half, mu + half


@dataclass
class Cell:
    mean: float
    lo: float
    hi: float
    n_groups: int
    n_episodes: int

    @property
    def degenerate(self) -> bool:
        return self.n_groups < 2

    def to_dict(self) -> dict:
        return {**dataclasses.asdict(self), "degenerate": self.degenerate}


def _cell(groups: list[list[float]]) -> Cell | None:
    present = [g for g in groups if g]
    if not present:
        return None
    mu, lo, hi = ci95([np.mean(g) for g in present])
    return Cell(mu, lo, hi, len(present), sum(len(g) for g in present))


@dataclass
class EvalReport:
    """Returns per teammate family and per controlled count N for one pool role.

    Each group is one seed; intervals are taken over per-group means. A family
    or N never sampled is ``None`` (absent), never zero.
    """

    role: str
    overall: Cell
    per_family: dict[int, Cell | None]
    per_n: dict[int, Cell | None]

    @classmethod
    def from_groups(cls, role: str, groups, families, ns) -> "EvalReport":
        """``groups``: list (per seed) of (family, N, return) tuples."""
        overall = _cell([[r for _, _, r in g] for g in groups])
        per_family = {f: _cell([[r for fam, _, r in g if fam == f] for g in groups]) for f in families}
        per_n = {n: _cell([[r for _, nn, r in g if nn == n] for g in groups]) for n in ns}
        return cls(role, overall, per_family, per_n)

    def to_dict(self) -> dict:
        def cells(d):
            return {str(k): (None if v is None else v.to_dict()) for k, v in d.items()}

        return {
            "role": self.role,
            "overall": self.overall.to_dict(),
            "per_family": cells(self.per_family),
            "per_n": cells(self.per_n),
        }


def episode_results(policy, pool: TeammatePool, env, n_episodes: int, seed: int, greedy: bool = True):
    rng = np.random.default_rng(seed)
    comps = [sample_composition(env.spec.num_agents, pool, rng) for _ in range(n_episodes)]
    eps = run_episodes(policy, env, comps, rng, greedy=greedy)
    return [(ep.composition.teammate_instance.family_id, ep.composition.N, ep.total_return) for ep in eps]


def evaluate(policy, pool: TeammatePool, env, n_episodes: int, seeds, greedy: bool = True) -> EvalReport:
    """Compositions sampled as in training; greedy decoding unless ``greedy=False``."""
    groups = [episode_results(policy, pool, env, n_episodes, s, greedy) for s in seeds]
    families = pool.family_ids
    ns = list(range(1, env.spec.num_agents))
    return EvalReport.from_groups(pool.role, groups, families, ns)


# ---------------------------------------------------------------- plot tables


def read_metrics(path) -> list[dict]:
    with open(path) as fh:
        return [json.loads(line) for line in fh if line.strip()]


def emit_plot_data(files, out_csv=None, metric: str = "mean_train_return") -> list[dict]:
    """Mean and 95% CI across seeds per variant, on a shared env-step grid.

    Streams are grouped by their ``variant`` field; a file mixing variants, or
    a (variant, seed) stream given twice, is an error. Each stream contributes
    its evaluated record nearest to every grid point.
    """
    streams: dict[str, list[list[dict]]] = {}
    seen = set()
    for path in files:
        recs = [r for r in read_metrics(path) if r.get(metric) is not None]
        variants = {r.get("variant") for r in recs}
        if len(variants) != 1 or None in variants:
            raise ValueError(f"{path}: expected records of exactly one variant, found {sorted(map(str, variants))}")
        variant = variants.pop()
        key = (variant, recs[0].get("seed"))
        if key in seen:
            raise ValueError(f"{path}: duplicate stream for variant {variant!r} seed {key[1]!r}")
        seen.add(key)
        streams.setdefault(variant, []).append(recs)
    if not streams:
        raise ValueError("no metrics streams given")
    grid = sorted({r["env_steps"] for runs in streams.values() for recs in runs for r in recs})
    rows = []
    for step in grid:
        row = {"env_steps": step}
        for variant in sorted(streams):
            vals = []
            for recs in streams[variant]:
                near = min(recs, key=lambda r: (abs(r["env_steps"] - step), r["env_steps"]))
                vals.append(near[metric])
            mu, lo, hi = ci95(vals)
            row[f"{variant}_mean"] = mu
            row[f"{variant}_ci_lo"] = lo
            row[f"{variant}_ci_hi"] = hi
            row[f"{variant}_n"] = len(vals)
            row[f"{variant}_degenerate"] = len(vals) < 2
        rows.append(row)
    if out_csv is not None:
        with open(out_csv, "w", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=list(rows[0]))
            w.writeheader()
            w.writerows(rows)
    return rows


# ---------------------------------------------------------------- runs


def _write_config_copy(cfg: ExperimentConfig, run_dir: Path) -> None:
    text = cfg.source_text if cfg.source_text is not None else cfg.to_ini()
    (run_dir / "config.ini").write_text(text)
    (run_dir / "config.resolved.json").write_text(json.dumps(cfg.to_dict(), indent=1, sort_keys=True))


def run_variant(cfg: ExperimentConfig, variant: str, out_dir, pools=None, seeds=None) -> dict:
    """Train one variant on every seed, then evaluate on both pools.

    Layout: ``out_dir/config.ini``, ``pools.json``, ``seed_<s>/`` (metrics,
    checkpoints, per-seed eval reports) and ``eval_report.json`` aggregated
    over seeds.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    env = cfg.env.build()
    if pools is None:
        train_pool, test_pool = cfg.pools.build()
        pools = {"train": train_pool, "test": test_pool}
    save_pools(out / "pools.json", pools)
    _write_config_copy(cfg, out)
    seeds = list(seeds if seeds is not None else cfg.seeds)
    groups = {"train": [], "test": []}
    for seed in seeds:
        run = out / f"seed_{seed}"
        policy = make_policy(cfg, env.spec, variant, seed)
        t0 = time.perf_counter()
        train(policy, env, pools, cfg.ppo, seed, out_dir=run, variant=variant)
        # kept apart from metrics.jsonl so that file stays byte-reproducible
        (run / "runtime.json").write_text(json.dumps({"train_seconds": time.perf_counter() - t0}))
        for role in ("train", "test"):
            res = episode_results(policy, pools[role], env, cfg.eval_episodes * len(pools[role].family_ids), seed + 7919)
            groups[role].append(res)
            rep = EvalReport.from_groups(role, [res], pools[role].family_ids, range(1, env.spec.num_agents))
            (run / f"eval_{role}.json").write_text(json.dumps(rep.to_dict(), indent=1, sort_keys=True))
    summary = {}
    for role in ("train", "test"):
        rep = EvalReport.from_groups(role, groups[role], pools[role].family_ids, range(1, env.spec.num_agents))
        summary[role] = rep.to_dict()
    summary["variant"] = variant
    summary["seeds"] = seeds
    (out / "eval_report.json").write_text(json.dumps(summary, indent=1, sort_keys=True))
    return summary


def _run_variant_job(args):
    cfg, variant, out_dir, pools = args
    return variant, run_variant(cfg, variant, out_dir, pools)


def ablate(cfg: ExperimentConfig, out_dir, parallel: bool = False) -> dict:
    """All three variants with shared pools and seeds, plus the sample-efficiency table."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    train_pool, test_pool = cfg.pools.build()
    pools = {"train": train_pool, "test": test_pool}
    jobs = [(cfg, v, out / v, pools) for v in VARIANTS]
    workers = max(1, int(os.environ.get("NAHT_MAT_THREADS", "1")))
    if parallel and workers > 1:
        from concurrent.futures import ProcessPoolExecutor

        with ProcessPoolExecutor(max_workers=min(workers, len(jobs))) as ex:
            results = dict(ex.map(_run_variant_job, jobs))
    else:
        results = dict(_run_variant_job(j) for j in jobs)
    files = [out / v / f"seed_{s}" / "metrics.jsonl" for v in VARIANTS for s in cfg.seeds]
    emit_plot_data(files, out / "plot_data.csv")
    (out / "summary.json").write_text(json.dumps(results, indent=1, sort_keys=True))
    return results


def load_policy(cfg: ExperimentConfig, ckpt, variant: str | None = None):
    """Fresh policy of the checkpoint's variant with its weights loaded."""
    path = Path(ckpt)
    if not path.is_file():
        raise FileNotFoundError(f"checkpoint {ckpt} not found")
    env = cfg.env.build()
    meta = _peek_meta(path)
    variant = variant or meta.get("variant") or cfg.variant
    policy = make_policy(cfg, env.spec, variant, 0)
    nx.load_checkpoint(path, policy.store)
    return policy, env


def _peek_meta(path: Path) -> dict:
    with open(path, "rb") as fh:
        header = fh.readline().decode().strip()
        if header != nx.CKPT_HEADER:
            raise ValueError(f"{path}: not a {nx.CKPT_HEADER} checkpoint")
        return json.loads(fh.readline())["meta"]


__all__ = [
    "ConfigError",
    "EnvConfig",
    "ExperimentConfig",
    "EvalReport",
    "ModelSection",
    "PoolConfig",
    "VARIANTS",
    "ablate",
    "ci95",
    "emit_plot_data",
    "evaluate",
    "load_config",
    "load_policy",
    "parse_config",
    "run_variant",
]
