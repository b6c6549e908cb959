"""Property suite behind ``naht-mat check`` and the acceptance tests.

Every check returns a :class:`CheckResult`; none raises on failure.
"""
from __future__ import annotations

import itertools
import time
from dataclasses import dataclass, field

import numpy as np
from scipy import stats

from . import numerics as nx
from .envs import Binding, SignalGame, make_env, oracle_memoryless_return, oracle_optimal_return
from .model import MATNAHT, HistoryBuffer, ModelConfig, build_tokens, decoder_logits, decode_teacher_forced, encode
from .sampler import TeamComposition, sample_composition
from .teammates import TeammateInstance, TeammatePool, build_pools, default_params
from .training import Episode, PPOConfig, compute_gae, controlled_view, gae, ppo_loss, run_episodes, RolloutBuffer


@dataclass
class CheckResult:
    name: str
    passed: bool
    detail: str
    seconds: float = 0.0
    data: dict = field(default_factory=dict)

    def line(self) -> str:
        return f"[{'PASS' if self.passed else 'FAIL'}] {self.name}: {self.detail} ({self.seconds:.1f}s)"


def _timed(fn):
    def wrapper(*args, **kwargs):
        t0 = time.perf_counter()
        res = fn(*args, **kwargs)
        res.seconds = time.perf_counter() - t0
        return res

    wrapper.__name__ = fn.__name__
    wrapper.__doc__ = fn.__doc__
    return wrapper


def small_model(env, k=3, d_model=16, seed=0, max_agents=None) -> MATNAHT:
    cfg = ModelConfig(
        env.spec.obs_dim,
        env.spec.num_actions,
        max_agents or env.spec.num_agents - 1,
        k=k,
        d_model=d_model,
        n_heads=2,
        n_layers_enc=2,
        n_layers_dec=2,
        ff_dim=2 * d_model,
    )
    return MATNAHT(cfg, seed)


def sample_batch(policy, env, n_episodes=6, seed=0, pool=None):
    """Rollouts with GAE filled in, covering several N values."""
    rng = np.random.default_rng(seed)
    pool = pool or build_pools(5, 2, 1, seed)[0]
    comps = [sample_composition(env.spec.num_agents, pool, rng) for _ in range(n_episodes)]
    buf = RolloutBuffer(run_episodes(policy, env, comps, rng))
    compute_gae(buf, 0.99, 0.95)
    return buf


@_timed
def gradient_check(n_coords: int = 200, h: float = 1e-5, tol: float = 1e-3, seed: int = 0) -> CheckResult:
    """Backprop vs central differences on the full PPO loss of the transformer policy."""
    env = SignalGame()
    policy = small_model(env, seed=seed)
    buf = sample_batch(policy, env, seed=seed)
    # move off the sampling parameters so ratios differ from one
    rng = np.random.default_rng(seed + 1)
    for _, p in policy.store.items():
        p.value += rng.normal(0, 0.02, p.value.shape)
    cfg = PPOConfig()

    def loss():
        return ppo_loss(policy, buf.episodes, cfg)[0]

    rep = nx.finite_diff_check(loss, policy.store, n_coords, h, tol, np.random.default_rng(seed))
    return CheckResult(
        "gradient",
        rep.passed,
        f"max rel err {rep.max_rel_err:.2e} over {rep.n_checked} coords (tol {tol:g}, worst {rep.worst})",
        data={"max_rel_err": rep.max_rel_err, "n_checked": rep.n_checked},
    )


def _team_trajectory(env, comp, rng):
    """Random full-team (obs, actions) arrays for one episode."""
    st = env.initial_state(comp.episode_seed, Binding(tuple(comp.controlled_slots), comp.teammate_instance.family_id))
    obs, acts = [], []
    done = False
    while not done:
        o = env.observe(st)
        a = tuple(int(x) for x in rng.integers(env.spec.num_actions, size=env.spec.num_agents))
        obs.append(o)
        acts.append(a)
        st, _, done = env.transition(st, a)
    return np.array(obs), np.array(acts)


def _outputs(policy, episodes, cfg):
    policy.store.zero_grad()
    batch = policy.tokens_from_episodes(episodes)
    total = ppo_loss(policy, episodes, cfg)[0]
    nx.backward(total)
    with nx.no_grad():
        enc = policy.encode(batch)
        actions = np.zeros(batch.agent_valid.shape, dtype=np.int64)
        for row, (e, t) in enumerate((e, t) for e, ep in enumerate(episodes) for t in range(ep.length)):
            actions[row, : episodes[e].actions.shape[1]] = episodes[e].actions[t]
        logits = decoder_logits(enc, actions, policy.store, policy.config).value
    out = {
        "reps": enc.reps.value.copy(),
        "value": enc.joint_value.value.copy(),
        "logits": logits.copy(),
        "loss": np.array(total.value),
    }
    for name, p in policy.store.items():
        out["grad:" + name] = p.grad.copy()
    policy.store.zero_grad()
    return out


@_timed
def masking_check(n_perturb: int = 100, seed: int = 0) -> CheckResult:
    """Uncontrolled-agent observations and actions never reach outputs, loss or gradients."""
    env = SignalGame()
    policy = small_model(env, seed=seed)
    rng = np.random.default_rng(seed)
    pool = build_pools(5, 2, 1, seed)[0]
    comps = [sample_composition(3, pool, rng) for _ in range(4)]
    comps.append(TeamComposition(3, 1, (1,), pool[0], 7))
    trajs = [_team_trajectory(env, c, rng) for c in comps]
    cfg = PPOConfig()

    def episodes_from(full):
        eps = []
        for comp, (fo, fa) in zip(comps, full):
            o, a = controlled_view(comp, fo, fa)
            T = len(o)
            lp = np.full(a.shape, -np.log(env.spec.num_actions))
            adv = np.linspace(-1, 1, T)
            eps.append(Episode(comp, o, a, lp, np.zeros(T), np.ones(T), np.arange(T) == T - 1, adv, adv + 0.5))
        return eps

    base = _outputs(policy, episodes_from(trajs), cfg)
    mismatches = 0
    for _ in range(n_perturb):
        pert = []
        for comp, (fo, fa) in zip(comps, trajs):
            fo, fa = fo.copy(), fa.copy()
            u = list(comp.uncontrolled_slots)
            fo[:, u] = rng.normal(0, 10, fo[:, u].shape)
            fa[:, u] = rng.integers(env.spec.num_actions, size=fa[:, u].shape)
            pert.append((fo, fa))
        out = _outputs(policy, episodes_from(pert), cfg)
        if any(not np.array_equal(base[k], out[k]) for k in base):
            mismatches += 1
    # the streaming path (HistoryBuffer) must agree too
    h1, h2 = HistoryBuffer((0, 2), policy.config.k), HistoryBuffer((0, 2), policy.config.k)
    fo, fa = trajs[0]
    for t in range(len(fo)):
        noisy = fo[t].copy()
        noisy[1] = rng.normal(0, 10, noisy[1].shape)
        h1.observe(fo[t])
        h2.observe(noisy)
        h1.record(fa[t, [0, 2]])
        h2.record(fa[t, [0, 2]])
    h1.observe(fo[-1])
    h2.observe(fo[-1])
    b1, b2 = build_tokens(h1, policy.config), build_tokens(h2, policy.config)
    stream_ok = all(np.array_equal(getattr(b1, f), getattr(b2, f)) for f in ("obs", "act", "token_valid", "agent_valid"))
    ok = mismatches == 0 and stream_ok
    return CheckResult(
        "masking",
        ok,
        f"{mismatches}/{n_perturb} perturbations changed outputs/loss/grads; streaming tokens identical={stream_ok}",
        data={"mismatches": mismatches},
    )


def _synthetic_encoder(obs_dim, num_actions, n_agents, seed):
    cfg = ModelConfig(obs_dim, num_actions, n_agents, k=2, d_model=16, n_heads=2, ff_dim=32)
    policy = MATNAHT(cfg, seed)
    rng = np.random.default_rng(seed)
    for _, p in policy.store.items():  # larger weights so logits are far from uniform
        p.value += rng.normal(0, 0.3, p.value.shape)
    h = HistoryBuffer(tuple(range(n_agents)), cfg.k)
    for _ in range(3):
        h.observe(rng.normal(size=(n_agents, obs_dim)))
        h.record(rng.integers(num_actions, size=n_agents))
    h.observe(rng.normal(size=(n_agents, obs_dim)))
    with nx.no_grad():
        enc = encode(build_tokens(h, cfg), policy.store, cfg)
    return policy, enc


@_timed
def causality_check(seed: int = 0) -> CheckResult:
    """Agent i's logits ignore actions of agents j >= i; joint distribution sums to one."""
    num_actions = 4
    policy, enc = _synthetic_encoder(5, num_actions, 3, seed)
    cfg = policy.config
    violations = 0
    with nx.no_grad():
        for prefix in itertools.product(range(num_actions), repeat=3):
            ref = decoder_logits(enc, np.array([prefix]), policy.store, cfg).value[0]
            for i in range(3):
                for tail in itertools.product(range(num_actions), repeat=3 - i):
                    acts = np.array([list(prefix[:i]) + list(tail)])
                    got = decoder_logits(enc, acts, policy.store, cfg).value[0, i]
                    if not np.array_equal(got, ref[i]):
                        violations += 1
    policy2, enc2 = _synthetic_encoder(5, 3, 2, seed + 1)
    joint = np.array(list(itertools.product(range(3), repeat=2)))
    enc_rep = type(enc2)(
        nx.as_node(np.repeat(enc2.reps.value, len(joint), 0)),
        nx.as_node(np.repeat(enc2.current_reps.value, len(joint), 0)),
        nx.as_node(np.repeat(enc2.joint_value.value, len(joint), 0)),
        np.repeat(enc2.agent_valid, len(joint), 0),
    )
    with nx.no_grad():
        logp, _ = decode_teacher_forced(enc_rep, joint, policy2.store, policy2.config)
    total = float(np.exp(logp.value.sum(axis=1)).sum())
    ok = violations == 0 and abs(total - 1.0) <= 1e-6
    return CheckResult(
        "causality",
        ok,
        f"{violations} future-action leaks (N=3, |A|={num_actions}); joint mass {total:.12f} (N=2, |A|=3)",
        data={"violations": violations, "joint_mass": total},
    )


@_timed
def sampler_check(M: int = 4, draws: int = 1_000_000, seed: int = 0, tol: float = 0.01, alpha: float = 1e-3) -> CheckResult:
    """N frequencies uniform on 1..M-1 (tolerance and chi-square), slot subsets uniform given N."""
    pool = TeammatePool((TeammateInstance(0, default_params(), 0),), "train")
    rng = np.random.default_rng(seed)
    n_counts = np.zeros(M - 1, dtype=np.int64)
    subset_counts: dict[tuple[int, ...], int] = {}
    for _ in range(draws):
        c = sample_composition(M, pool, rng)
        n_counts[c.N - 1] += 1
        subset_counts[c.controlled_slots] = subset_counts.get(c.controlled_slots, 0) + 1
    freqs = n_counts / draws
    p_n = float(stats.chisquare(n_counts).pvalue)
    p_sub = []
    for n in range(1, M):
        obs = [subset_counts.get(s, 0) for s in itertools.combinations(range(M), n)]
        p_sub.append(float(stats.chisquare(obs).pvalue))
    within = bool(np.all(np.abs(freqs - 1 / (M - 1)) <= tol))
    ok = within and p_n > alpha and min(p_sub) > alpha
    return CheckResult(
        "sampler",
        ok,
        f"N freqs {np.round(freqs, 4).tolist()} (target {1 / (M - 1):.4f}±{tol}); chi2 p={p_n:.3g}; min subset p={min(p_sub):.3g}",
        data={"freqs": freqs.tolist(), "p_n": p_n, "p_subsets": p_sub},
    )


def gae_direct(rewards, values, dones, gamma, lam):
    """Σ_l (γλ)^l δ_{t+l}, each δ from its own definition; O(T²)."""
    T = len(rewards)
    deltas = np.empty(T)
    for t in range(T):
        nxt = 0.0 if (dones[t] or t == T - 1) else values[t + 1]
        deltas[t] = rewards[t] + gamma * nxt - values[t]
    adv = np.zeros(T)
    for t in range(T):
        acc, w = 0.0, 1.0
        for l in range(t, T):
            acc += w * deltas[l]
            if dones[l]:
                break
            w *= gamma * lam
        adv[t] = acc
    return adv


@_timed
def gae_check(n_episodes: int = 1000, max_T: int = 16, seed: int = 0, tol: float = 1e-12) -> CheckResult:
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(n_episodes):
        T = int(rng.integers(1, max_T + 1))
        r, v = rng.normal(size=T), rng.normal(size=T)
        d = np.zeros(T, dtype=bool)
        d[-1] = True
        gamma, lam = float(rng.uniform(0.8, 1.0)), float(rng.uniform(0.0, 1.0))
        adv, _ = gae(r, v, d, gamma, lam)
        worst = max(worst, float(np.abs(adv - gae_direct(r, v, d, gamma, lam)).max()))
    return CheckResult(
        "gae", worst <= tol, f"max |recursive - direct| = {worst:.2e} over {n_episodes} episodes (tol {tol:g})",
        data={"max_abs_err": worst},
    )


@_timed
def oracle_check() -> CheckResult:
    env = SignalGame(num_agents=3, num_types=5, horizon=4)
    opt = oracle_optimal_return(env, range(5))
    mem = oracle_memoryless_return(env, range(5))
    ok = opt == 1.0 and mem == 0.2
    return CheckResult("signal_oracles", ok, f"history-optimal {opt!r}, memoryless {mem!r}", data={"optimal": opt, "memoryless": mem})


@_timed
def adam_check() -> CheckResult:
    """One Adam step on a scalar moves it by exactly lr (bias-corrected m/√v = sign)."""
    s = nx.ParamStore()
    p = s.add("x", np.array([2.0]))
    p.grad = np.array([4.0])
    nx.adam_step(s, lr=0.1)
    got = float(p.value[0])
    ok = abs(got - 1.9) < 1e-6
    return CheckResult("adam", ok, f"x after one step {got:.9f} (expected ≈1.9)")


@_timed
def variable_n_check(seed: int = 0) -> CheckResult:
    """One model acts for every N on a 4-agent gridworld without shape errors."""
    env = make_env("gridworld", size=4, num_agents=4, num_goals=3, horizon=6)
    policy = small_model(env, k=2, seed=seed)
    pool = build_pools(3, 1, 1, seed)[0]
    rng = np.random.default_rng(seed)
    rets = {}
    for n in (1, 2, 3):
        comp = TeamComposition(4, n, tuple(range(n)), pool[0], n)
        ep = run_episodes(policy, env, [comp], rng, greedy=True)[0]
        rets[n] = ep.total_return
    ok = all(np.isfinite(v) for v in rets.values())
    return CheckResult("variable_n", ok, f"greedy returns by N {rets}")


ALL_CHECKS = {
    "gradient": gradient_check,
    "masking": masking_check,
    "causality": causality_check,
    "sampler": sampler_check,
    "gae": gae_check,
    "signal_oracles": oracle_check,
    "adam": adam_check,
    "variable_n": variable_n_check,
}


def run_checks(names=None, quick: bool = False) -> list[CheckResult]:
    """Run the named checks (all by default); ``quick`` shrinks sample counts."""
    out = []
    for name in names or ALL_CHECKS:
        fn = ALL_CHECKS[name]
        if quick and name == "sampler":
            out.append(fn(draws=100_000, tol=0.01))
        elif quick and name == "masking":
            out.append(fn(n_perturb=10))
        else:
            out.append(fn())
    return out
