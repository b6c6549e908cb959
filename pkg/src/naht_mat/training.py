"""PPO with GAE on the joint value, over per-episode team compositions."""
from __future__ import annotations

import json
import math
import time
from collections import Counter
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import numerics as nx
from .envs import Binding
from .model import HistoryBuffer
from .sampler import TeamComposition, sample_composition
from .teammates import TeammatePool, teammate_act


@dataclass
class PPOConfig:
    gamma: float = 0.99
    gae_lambda: float = 0.95
    clip: float = 0.2
    epochs: int = 4
    minibatch_episodes: int = 16
    value_coef: float = 0.5
    entropy_coef: float = 0.01
    max_grad_norm: float = 0.5
    batch_episodes: int = 32
    total_env_steps: int = 300_000
    lr: float = 3e-4
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    eval_interval: int = 10
    eval_episodes: int = 100
    eval_seed: int = 12345
    log_wall_time: bool = False

    def __post_init__(self):
        if not (0.0 <= self.gamma <= 1.0 and 0.0 <= self.gae_lambda <= 1.0):
            raise ValueError("gamma and gae_lambda must lie in [0, 1]")
        if self.clip <= 0:
            raise ValueError("clip must be > 0")
        if min(self.epochs, self.minibatch_episodes, self.batch_episodes, self.eval_interval) < 1:
            raise ValueError("epochs, batch sizes and eval interval must be >= 1")


class TrainingDiverged(FloatingPointError):
    pass


@dataclass
class Episode:
    """Controlled-agent data for one episode; uncontrolled agents never enter."""

    composition: TeamComposition
    obs: np.ndarray  # [T, N, obs_dim]
    actions: np.ndarray  # [T, N]
    log_probs: np.ndarray  # [T, N]
    values: np.ndarray  # [T]
    rewards: np.ndarray  # [T]
    dones: np.ndarray  # [T]
    advantages: np.ndarray | None = None
    returns: np.ndarray | None = None

    @property
    def length(self) -> int:
        return len(self.rewards)

    @property
    def total_return(self) -> float:
        return float(self.rewards.sum())


@dataclass
class RolloutBuffer:
    episodes: list[Episode] = field(default_factory=list)
    advantages_ready: bool = False

    def __len__(self):
        return len(self.episodes)

    @property
    def env_steps(self) -> int:
        return sum(ep.length for ep in self.episodes)

    def n_histogram(self) -> dict[str, int]:
        c = Counter(ep.composition.N for ep in self.episodes)
        return {str(n): c[n] for n in sorted(c)}


# ---------------------------------------------------------------- rollouts


def teammate_rng(comp: TeamComposition) -> np.random.Generator:
    return np.random.default_rng([comp.teammate_instance.instance_seed, comp.episode_seed])


def uncontrolled_actions(env, comp: TeamComposition, obs: np.ndarray, t: int, rng) -> dict[int, int]:
    inst = comp.teammate_instance
    return {
        slot: teammate_act(inst, obs[slot], t, rng, env, member=m) for m, slot in enumerate(comp.uncontrolled_slots)
    }


def run_episodes(policy, env, compositions, rng, greedy: bool = False) -> list[Episode]:
    """Play the given compositions in lockstep; controlled actions from ``policy``."""
    k = policy.config.k
    m = env.spec.num_agents
    states, hists, tm_rngs, logs = [], [], [], []
    for comp in compositions:
        if comp.M != m:
            raise ValueError(f"composition has M={comp.M}, env has {m} agents")
        st = env.initial_state(comp.episode_seed, _binding(comp))
        h = HistoryBuffer(comp.controlled_slots, k)
        h.observe(env.observe(st))
        states.append(st)
        hists.append(h)
        tm_rngs.append(teammate_rng(comp))
        logs.append({"obs": [], "actions": [], "log_probs": [], "values": [], "rewards": [], "dones": []})
    active = list(range(len(compositions)))
    while active:
        batch = policy.tokens([hists[e] for e in active])
        dec, values = policy.act(batch, rng, greedy)
        still = []
        for row, e in enumerate(active):
            comp, st = compositions[e], states[e]
            n = comp.N
            acts = dec.actions[row, :n]
            obs_all = env.observe(st)
            joint = [0] * m
            for slot, a in zip(comp.controlled_slots, acts):
                joint[slot] = int(a)
            for slot, a in uncontrolled_actions(env, comp, obs_all, st.t, tm_rngs[e]).items():
                joint[slot] = a
            nst, reward, done = env.transition(st, tuple(joint))
            if env.trace is not None:
                env.trace.write(
                    json.dumps({"episode": e, "t": st.t, "state": env.state_dict(nst), "actions": joint, "reward": reward})
                    + "\n"
                )
            log = logs[e]
            log["obs"].append(hists[e].current)
            log["actions"].append(acts.copy())
            log["log_probs"].append(dec.log_probs[row, :n].copy())
            log["values"].append(values[row])
            log["rewards"].append(reward)
            log["dones"].append(done)
            states[e] = nst
            hists[e].record(acts)
            if not done:
                hists[e].observe(env.observe(nst))
                still.append(e)
        active = still
    out = []
    for comp, log in zip(compositions, logs):
        out.append(
            Episode(
                comp,
                np.array(log["obs"]),
                np.array(log["actions"], dtype=np.int64),
                np.array(log["log_probs"]),
                np.array(log["values"], dtype=np.float64),
                np.array(log["rewards"], dtype=np.float64),
                np.array(log["dones"], dtype=bool),
            )
        )
    return out


def controlled_view(comp: TeamComposition, full_obs: np.ndarray, full_actions: np.ndarray):
    """Slice [T, M, ...] team arrays down to the controlled slots, the only data the learner keeps."""
    slots = list(comp.controlled_slots)
    return np.array(full_obs[:, slots], dtype=np.float64), np.array(full_actions[:, slots], dtype=np.int64)


def _binding(comp: TeamComposition):
    return Binding(tuple(comp.controlled_slots), comp.teammate_instance.family_id)


def collect_rollouts(policy, pool: TeammatePool, env, n_episodes: int, rng) -> RolloutBuffer:
    if policy.config.obs_dim != env.spec.obs_dim or policy.config.num_actions != env.spec.num_actions:
        raise ValueError("policy and environment dimensions disagree")
    comps = [sample_composition(env.spec.num_agents, pool, rng) for _ in range(n_episodes)]
    return RolloutBuffer(run_episodes(policy, env, comps, rng))


def replay_episode(env, episode: Episode) -> np.ndarray:
    """Re-run an episode from its composition and logged controlled actions.

    Uncontrolled actions are regenerated from the teammate instance and the
    episode seed. Returns the reward sequence.
    """
    comp = episode.composition
    env.reset(comp.episode_seed, comp)
    rng = teammate_rng(comp)
    rewards = []
    for t in range(episode.length):
        obs = env.observe(env.state)
        joint = [0] * comp.M
        for slot, a in zip(comp.controlled_slots, episode.actions[t]):
            joint[slot] = int(a)
        for slot, a in uncontrolled_actions(env, comp, obs, env.state.t, rng).items():
            joint[slot] = a
        rewards.append(env.step(joint).reward)
    return np.array(rewards)


# ---------------------------------------------------------------- advantages


def gae(rewards, values, dones, gamma: float, lam: float):
    """Backward GAE recursion for one episode; terminal bootstrap value is 0."""
    T = len(rewards)
    adv = np.zeros(T)
    nxt_adv, nxt_val = 0.0, 0.0
    for t in range(T - 1, -1, -1):
        live = 0.0 if dones[t] else 1.0
        delta = rewards[t] + gamma * nxt_val * live - values[t]
        nxt_adv = delta + gamma * lam * live * nxt_adv
        adv[t] = nxt_adv
        nxt_val = values[t]
    return adv, adv + values


def compute_gae(buffer: RolloutBuffer, gamma: float, lam: float, normalize: bool = True) -> None:
    """Fill advantages and return targets; advantages normalised over the batch."""
    for ep in buffer.episodes:
        ep.advantages, ep.returns = gae(ep.rewards, ep.values, ep.dones, gamma, lam)
    if normalize:
        flat = np.concatenate([ep.advantages for ep in buffer.episodes])
        mu, sd = flat.mean(), flat.std()
        for ep in buffer.episodes:
            ep.advantages = (ep.advantages - mu) / max(sd, 1e-8)
    buffer.advantages_ready = True


# ---------------------------------------------------------------- update


@dataclass
class LossReport:
    policy_loss: float
    value_loss: float
    entropy: float
    grad_norm: float
    max_ratio_dev_first: float
    n_updates: int


def clipped_surrogate(ratio, adv, clip: float):
    return np.minimum(ratio * adv, np.clip(ratio, 1 - clip, 1 + clip) * adv)


def ppo_loss(policy, episodes, cfg: PPOConfig):
    """Total loss node plus its parts for a minibatch of episodes."""
    batch = policy.tokens_from_episodes(episodes)
    nmax = policy.config.max_agents
    S = batch.batch_size
    actions = np.zeros((S, nmax), dtype=np.int64)
    old = np.zeros((S, nmax))
    adv = np.concatenate([ep.advantages for ep in episodes])
    ret = np.concatenate([ep.returns for ep in episodes])
    row = 0
    for ep in episodes:
        n = ep.actions.shape[1]
        actions[row : row + ep.length, :n] = ep.actions
        old[row : row + ep.length, :n] = ep.log_probs
        row += ep.length
    valid = batch.agent_valid.astype(np.float64)
    logp, ent, value = policy.evaluate_actions(batch, actions)
    ratio = nx.exp(nx.mul(nx.sub(logp, old), valid))
    a = adv[:, None]
    surr = nx.minimum(nx.mul(ratio, a), nx.mul(nx.clip(ratio, 1 - cfg.clip, 1 + cfg.clip), a))
    count = valid.sum()
    policy_loss = nx.mul(nx.sum_(nx.mul(surr, valid)), -1.0 / count)
    value_loss = nx.mean(nx.square(nx.sub(value, ret)))
    entropy = nx.mul(nx.sum_(ent), 1.0 / count)
    total = policy_loss + nx.mul(value_loss, cfg.value_coef) - nx.mul(entropy, cfg.entropy_coef)
    ratio_dev = float(np.abs((ratio.value - 1.0) * valid).max())
    return total, policy_loss, value_loss, entropy, ratio_dev


def ppo_update(policy, buffer: RolloutBuffer, cfg: PPOConfig, rng, dump_dir=None) -> LossReport:
    if not buffer.advantages_ready:
        raise RuntimeError("compute_gae must run before ppo_update")
    store = policy.store
    eps = buffer.episodes
    pl, vl, en, gn, first_dev, n = 0.0, 0.0, 0.0, 0.0, 0.0, 0
    for epoch in range(cfg.epochs):
        order = rng.permutation(len(eps))
        for start in range(0, len(eps), cfg.minibatch_episodes):
            mb = [eps[i] for i in order[start : start + cfg.minibatch_episodes]]
            total, p_loss, v_loss, ent, dev = ppo_loss(policy, mb, cfg)
            if not math.isfinite(float(total.value)):
                _dump(dump_dir, mb, total, p_loss, v_loss, ent)
                raise TrainingDiverged(
                    f"non-finite loss: policy={p_loss.value} value={v_loss.value} entropy={ent.value}"
                )
            if epoch == 0 and start == 0:
                first_dev = dev
            store.zero_grad()
            nx.backward(total)
            gn = store.clip_grad_norm(cfg.max_grad_norm)
            nx.adam_step(store, cfg.lr, cfg.adam_beta1, cfg.adam_beta2, cfg.adam_eps)
            pl += float(p_loss.value)
            vl += float(v_loss.value)
            en += float(ent.value)
            n += 1
    store.zero_grad()
    return LossReport(pl / n, vl / n, en / n, gn, first_dev, n)


def _dump(dump_dir, episodes, total, p_loss, v_loss, ent):
    if dump_dir is None:
        return
    rec = {
        "total": repr(float(total.value)),
        "policy_loss": repr(float(p_loss.value)),
        "value_loss": repr(float(v_loss.value)),
        "entropy": repr(float(ent.value)),
        "compositions": [ep.composition.to_dict() for ep in episodes],
        "rewards": [ep.rewards.tolist() for ep in episodes],
        "advantages": [ep.advantages.tolist() for ep in episodes],
    }
    Path(dump_dir).mkdir(parents=True, exist_ok=True)
    (Path(dump_dir) / "divergence_dump.json").write_text(json.dumps(rec, indent=1))


# ---------------------------------------------------------------- training loop


def greedy_eval(policy, env, pool: TeammatePool, n_episodes: int, seed: int):
    """Mean greedy return and per-family means over ``n_episodes`` sampled compositions."""
    rng = np.random.default_rng(seed)
    comps = [sample_composition(env.spec.num_agents, pool, rng) for _ in range(n_episodes)]
    eps = run_episodes(policy, env, comps, rng, greedy=True)
    by_fam: dict[int, list[float]] = {}
    for ep in eps:
        by_fam.setdefault(ep.composition.teammate_instance.family_id, []).append(ep.total_return)
    per_family = {str(f): float(np.mean(by_fam[f])) for f in sorted(by_fam)}
    return float(np.mean([ep.total_return for ep in eps])), per_family


def train(policy, env, pools: dict[str, TeammatePool], cfg: PPOConfig, seed: int, out_dir=None, variant=None):
    """Alternate rollouts, GAE and PPO updates until the env-step budget is spent.

    Returns the list of metrics records. With ``out_dir`` set, records are
    appended to ``metrics.jsonl`` and ``best.ckpt`` / ``final.ckpt`` written.
    """
    variant = variant or policy.label
    rng = np.random.default_rng(seed)
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        (out / "metrics.jsonl").write_text("")
    records = []
    env_steps, iteration = 0, 0
    best = -np.inf
    t0 = time.perf_counter()

    def evaluate_now():
        tr, _ = greedy_eval(policy, env, pools["train"], cfg.eval_episodes, cfg.eval_seed)
        te, fam = greedy_eval(policy, env, pools["test"], cfg.eval_episodes, cfg.eval_seed + 1)
        return tr, te, fam

    def emit(rec):
        records.append(rec)
        if out is not None:
            with open(out / "metrics.jsonl", "a") as fh:
                fh.write(json.dumps(rec, sort_keys=True) + "\n")
            if cfg.log_wall_time:
                with open(out / "timing.jsonl", "a") as fh:
                    fh.write(json.dumps({"iteration": rec["iteration"], "wall_ms": rec["wall_ms"]}) + "\n")

    def wall():
        return round(1000 * (time.perf_counter() - t0), 1) if cfg.log_wall_time else None

    tr, te, fam = evaluate_now()
    emit(_record(0, 0, wall(), tr, te, fam, None, {}, seed, variant, None))
    best = tr
    if out is not None:
        nx.save_checkpoint(out / "best.ckpt", policy.store, {"iteration": 0, "train_return": tr, "variant": variant})

    while env_steps < cfg.total_env_steps:
        iteration += 1
        buf = collect_rollouts(policy, pools["train"], env, cfg.batch_episodes, rng)
        env_steps += buf.env_steps
        compute_gae(buf, cfg.gamma, cfg.gae_lambda)
        report = ppo_update(policy, buf, cfg, rng, dump_dir=out)
        last = env_steps >= cfg.total_env_steps
        if iteration % cfg.eval_interval == 0 or last:
            tr, te, fam = evaluate_now()
            if tr > best and out is not None:
                nx.save_checkpoint(
                    out / "best.ckpt", policy.store, {"iteration": iteration, "train_return": tr, "variant": variant}
                )
            best = max(best, tr)
        else:
            tr = te = fam = None
        rollout_return = float(np.mean([ep.total_return for ep in buf.episodes]))
        emit(_record(iteration, env_steps, wall(), tr, te, fam, report, buf.n_histogram(), seed, variant, rollout_return))
    if out is not None:
        nx.save_checkpoint(out / "final.ckpt", policy.store, {"iteration": iteration, "variant": variant})
    return records


def _record(iteration, env_steps, wall_ms, tr, te, fam, report, hist, seed, variant, rollout_return):
    return {
        "iteration": iteration,
        "env_steps": env_steps,
        "wall_ms": wall_ms,
        "mean_train_return": tr,
        "mean_test_return": te,
        "per_family_test_return": fam,
        "policy_loss": None if report is None else report.policy_loss,
        "value_loss": None if report is None else report.value_loss,
        "entropy": None if report is None else report.entropy,
        "N_histogram": hist,
        "seed": seed,
        "variant": variant,
        "rollout_return": rollout_return,
    }
