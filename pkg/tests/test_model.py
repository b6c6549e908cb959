import itertools

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from naht_mat import numerics as nx
from naht_mat.baseline import IndependentBaseline
from naht_mat.model import (
    MATNAHT,
    HistoryBuffer,
    ModelConfig,
    build_tokens,
    decode_autoregressive,
    decode_teacher_forced,
    decoder_logits,
    encode,
    tokens_from_episodes,
)

OBS, ACT = 7, 4


def config(k=2, max_agents=3, **kw):
    return ModelConfig(OBS, ACT, max_agents, k=k, d_model=16, n_heads=2, ff_dim=32, **kw)


def history(slots, k, steps, rng, M=4):
    h = HistoryBuffer(slots, k)
    for _ in range(steps):
        h.observe(rng.normal(size=(M, OBS)))
        h.record(rng.integers(ACT, size=len(slots)))
    h.observe(rng.normal(size=(M, OBS)))
    return h


@settings(max_examples=40, deadline=None)
@given(st.integers(1, 3), st.integers(0, 4), st.integers(0, 6))
def test_token_count(n, k, steps):
    rng = np.random.default_rng(n * 100 + k * 10 + steps)
    h = history(tuple(range(n)), k, steps, rng)
    b = build_tokens(h, config(k=k))
    assert b.length(0) == n * (1 + min(k, steps))
    assert all(delta <= min(k, steps) for _, delta in b.meta(0))


def test_token_errors():
    cfg = config()
    with pytest.raises(ValueError):
        build_tokens(HistoryBuffer((), 2), cfg)
    rng = np.random.default_rng(0)
    with pytest.raises(ValueError):
        build_tokens(history((0, 1, 2, 3), 2, 1, rng, M=5), cfg)
    h = HistoryBuffer((0,), 2)
    h.observe(np.zeros((2, OBS + 1)))
    with pytest.raises(ValueError):
        build_tokens(h, cfg)


def test_streaming_tokens_match_episode_tokens():
    class Ep:
        pass

    rng = np.random.default_rng(1)
    cfg = config(k=3)
    T, n = 5, 2
    ep = Ep()
    ep.obs = rng.normal(size=(T, n, OBS))
    ep.actions = rng.integers(ACT, size=(T, n))
    batch = tokens_from_episodes([ep], cfg)
    h = HistoryBuffer((0, 1), cfg.k)
    for t in range(T):
        h.current = ep.obs[t]
        one = build_tokens(h, cfg)
        for f in ("obs", "act", "token_valid", "agent_valid"):
            assert np.array_equal(getattr(one, f)[0], getattr(batch, f)[t]), (f, t)
        h.record(ep.actions[t])


def test_padding_is_inert():
    rng = np.random.default_rng(2)
    cfg = config()
    store = MATNAHT(cfg, 0).store
    b = build_tokens(history((0, 2), 2, 3, rng), cfg)
    enc = encode(b, store, cfg)
    garbage = build_tokens(history((0, 2), 2, 3, np.random.default_rng(2)), cfg)
    garbage.obs[:, 2] = rng.normal(size=garbage.obs[:, 2].shape) * 50
    enc2 = encode(garbage, store, cfg)
    assert np.array_equal(enc.joint_value.value, enc2.joint_value.value)
    assert np.array_equal(enc.current_reps.value[:, :2], enc2.current_reps.value[:, :2])
    acts = np.array([[1, 3, 0]])
    l1 = decoder_logits(enc, acts, store, cfg).value[:, :2]
    l2 = decoder_logits(enc2, np.array([[1, 3, 2]]), store, cfg).value[:, :2]
    assert np.array_equal(l1, l2)


def test_permutation_equivariance_of_encoder():
    """Swapping two agents' histories swaps their representations; the joint value is unchanged."""
    rng = np.random.default_rng(3)
    cfg = config()
    store = MATNAHT(cfg, 0).store
    b = build_tokens(history((0, 1, 2), 2, 3, rng), cfg)
    enc = encode(b, store, cfg)
    perm = [2, 0, 1]
    bp = build_tokens(history((0, 1, 2), 2, 3, np.random.default_rng(3)), cfg)
    for f in ("obs", "act", "token_valid", "agent_valid"):
        setattr(bp, f, getattr(bp, f)[:, perm])
    encp = encode(bp, store, cfg)
    np.testing.assert_allclose(encp.current_reps.value, enc.current_reps.value[:, perm], atol=1e-12)
    np.testing.assert_allclose(encp.joint_value.value, enc.joint_value.value, atol=1e-12)


def _enc(n, seed=0, k=2):
    rng = np.random.default_rng(seed)
    cfg = config(k=k, max_agents=n)
    policy = MATNAHT(cfg, seed)
    for _, p in policy.store.items():
        p.value += rng.normal(0, 0.3, p.value.shape)
    with nx.no_grad():
        enc = encode(build_tokens(history(tuple(range(n)), k, 2, rng), cfg), policy.store, cfg)
    return policy, enc


def _repeat(enc, r):
    return type(enc)(
        nx.as_node(np.repeat(enc.reps.value, r, 0)),
        nx.as_node(np.repeat(enc.current_reps.value, r, 0)),
        nx.as_node(np.repeat(enc.joint_value.value, r, 0)),
        np.repeat(enc.agent_valid, r, 0),
    )


@pytest.mark.parametrize("n", [1, 2, 3])
def test_joint_distribution_sums_to_one(n):
    policy, enc = _enc(n, seed=n)
    joint = np.array(list(itertools.product(range(ACT), repeat=n)))
    with nx.no_grad():
        logp, _ = decode_teacher_forced(_repeat(enc, len(joint)), joint, policy.store, policy.config)
    assert abs(np.exp(logp.value.sum(1)).sum() - 1.0) <= 1e-9


def test_sampling_matches_enumerated_joint_distribution():
    policy, enc = _enc(2, seed=5)
    joint = np.array(list(itertools.product(range(ACT), repeat=2)))
    with nx.no_grad():
        logp, _ = decode_teacher_forced(_repeat(enc, len(joint)), joint, policy.store, policy.config)
    probs = np.exp(logp.value.sum(1))
    draws = 20_000
    res = decode_autoregressive(_repeat(enc, draws), policy.store, policy.config, np.random.default_rng(0))
    idx = res.actions[:, 0] * ACT + res.actions[:, 1]
    freq = np.bincount(idx, minlength=ACT * ACT) / draws
    assert np.abs(freq - probs).max() < 4 * np.sqrt(0.25 / draws)


def test_autoregressive_and_teacher_forced_agree():
    policy, enc = _enc(3, seed=6)
    res = decode_autoregressive(enc, policy.store, policy.config, np.random.default_rng(1))
    logp, ent = decode_teacher_forced(enc, res.actions, policy.store, policy.config)
    assert np.array_equal(logp.value, res.log_probs)
    assert np.array_equal(ent.value, res.entropy)


def test_greedy_picks_argmax():
    policy, enc = _enc(2, seed=7)
    res = decode_autoregressive(enc, policy.store, policy.config, greedy=True)
    logits = decoder_logits(enc, res.actions, policy.store, policy.config).value
    assert (logits.argmax(-1) == res.actions).all()


def test_decoder_causality():
    policy, enc = _enc(3, seed=8)
    base = decoder_logits(enc, np.array([[0, 1, 2]]), policy.store, policy.config).value[0]
    for a1, a2 in itertools.product(range(ACT), repeat=2):
        out = decoder_logits(enc, np.array([[0, a1, a2]]), policy.store, policy.config).value[0]
        assert np.array_equal(out[0], base[0])
        if a1 == 1:
            assert np.array_equal(out[1], base[1])


def test_zero_weights_give_uniform_policy():
    cfg = config()
    policy = MATNAHT(cfg, 0)
    for _, p in policy.store.items():
        p.value[...] = 0.0
    b = build_tokens(history((0, 1), 2, 2, np.random.default_rng(0)), cfg)
    res, value = policy.act(b, greedy=True)
    assert (res.actions[0, :2] == 0).all()
    np.testing.assert_allclose(res.log_probs[0, :2], -np.log(ACT), atol=1e-12)
    assert value[0] == 0.0


def test_full_gradient_check():
    cfg = config(k=1, max_agents=2)
    policy = MATNAHT(cfg, 1)
    rng = np.random.default_rng(9)
    b = build_tokens([history((0,), 1, 2, rng), history((1, 3), 1, 0, rng)], cfg)
    acts = np.array([[2, 0], [1, 3]])

    def loss():
        logp, ent, v = policy.evaluate_actions(b, acts)
        return nx.sum_(logp) + nx.mul(nx.sum_(ent), 0.1) + nx.sum_(nx.square(v))

    report = nx.finite_diff_check(loss, policy.store, n_coords=120)
    assert report.passed, report


@pytest.mark.parametrize("cls", [MATNAHT, IndependentBaseline])
def test_policy_interface(cls):
    cfg = config()
    policy = cls(cfg, 0)
    rng = np.random.default_rng(4)
    b = build_tokens([history((0,), 2, 1, rng), history((0, 1, 3), 2, 4, rng)], cfg)
    res, values = policy.act(b, rng)
    assert res.actions.shape == (2, 3) and values.shape == (2,)
    assert (res.actions[0, 1:] == 0).all() and res.log_probs[0, 1:].sum() == 0
    logp, ent, v = policy.evaluate_actions(b, res.actions)
    np.testing.assert_allclose(logp.value, res.log_probs, atol=1e-12)
    np.testing.assert_allclose(v.value, values, atol=1e-12)
    assert sum(size for _, _, size in policy.describe()) == policy.store.num_values()


def test_baseline_agents_are_independent():
    """Each agent's action distribution depends on its own features only."""
    cfg = config()
    policy = IndependentBaseline(cfg, 0)
    rng = np.random.default_rng(5)
    b = build_tokens(history((0, 1), 2, 2, rng), cfg)
    lp1, _, _ = policy.evaluate_actions(b, np.array([[1, 2, 0]]))
    b.obs[0, 1] += 3.0
    lp2, _, _ = policy.evaluate_actions(b, np.array([[1, 0, 0]]))
    assert lp1.value[0, 0] == lp2.value[0, 0]


def test_config_validation():
    with pytest.raises(ValueError):
        ModelConfig(3, 2, 2, d_model=15, n_heads=2)
    with pytest.raises(ValueError):
        ModelConfig(3, 2, 2, k=-1)
