"""Independent PPO baseline: one shared MLP per agent, no cross-agent conditioning.

Each agent's policy reads its own current observation and its own last ``k``
(observation, action) pairs. The critic is an MLP over the concatenated
current observations of the controlled agents (zero-padded to ``max_agents``).
This is a simplified stand-in for a centralized-critic independent learner;
it has no teammate-modelling network.
"""
from __future__ import annotations

import numpy as np

from . import numerics as nx
from .model import ModelConfig, TokenBatch, _entropy, build_tokens, sample_categorical, tokens_from_episodes
from .model import DecodeResult
from .numerics import ParamStore


def init_baseline_params(config: ModelConfig, seed: int = 0, hidden: int = 64) -> ParamStore:
    rng = np.random.default_rng(seed)
    k1 = config.k + 1
    n_in = k1 * (config.obs_dim + config.num_actions)
    v_in = config.max_agents * config.obs_dim
    s = ParamStore()
    for prefix, fan_in, out, last_scale in (("pi", n_in, config.num_actions, 0.01), ("v", v_in, 1, 0.1)):
        s.add(f"{prefix}.w1", rng.normal(0, 1 / np.sqrt(fan_in), (fan_in, hidden)))
        s.add(f"{prefix}.b1", np.zeros(hidden))
        s.add(f"{prefix}.w2", rng.normal(0, 1 / np.sqrt(hidden), (hidden, hidden)))
        s.add(f"{prefix}.b2", np.zeros(hidden))
        s.add(f"{prefix}.w3", rng.normal(0, last_scale / np.sqrt(hidden), (hidden, out)))
        s.add(f"{prefix}.b3", np.zeros(out))
    return s


def _mlp(x, s: ParamStore, prefix: str):
    h = nx.gelu(nx.linear(x, s[f"{prefix}.w1"], s[f"{prefix}.b1"]))
    h = nx.gelu(nx.linear(h, s[f"{prefix}.w2"], s[f"{prefix}.b2"]))
    return nx.linear(h, s[f"{prefix}.w3"], s[f"{prefix}.b3"])


class IndependentBaseline:
    label = "independent_baseline"

    def __init__(self, config: ModelConfig, seed: int = 0, hidden: int = 64):
        self.config = config
        self.store = init_baseline_params(config, seed, hidden)

    def tokens(self, histories) -> TokenBatch:
        return build_tokens(histories, self.config)

    def tokens_from_episodes(self, episodes) -> TokenBatch:
        return tokens_from_episodes(episodes, self.config)

    def _forward(self, batch: TokenBatch):
        bsz, nmax, k1, _ = batch.obs.shape
        valid = batch.token_valid[..., None]
        feats = np.concatenate([batch.obs * valid, batch.act], axis=-1).reshape(bsz, nmax, -1)
        logits = _mlp(feats, self.store, "pi")
        current = (batch.obs[:, :, 0] * batch.agent_valid[..., None]).reshape(bsz, -1)
        value = nx.reshape(_mlp(current, self.store, "v"), (bsz,))
        return logits, value

    def act(self, batch: TokenBatch, rng=None, greedy: bool = False):
        with nx.no_grad():
            logits, value = self._forward(batch)
        z = logits.value - logits.value.max(axis=-1, keepdims=True)
        logp = z - np.log(np.exp(z).sum(axis=-1, keepdims=True))
        bsz, nmax, _ = logp.shape
        actions = np.zeros((bsz, nmax), dtype=np.int64)
        for i in range(int(batch.agent_valid.sum(axis=1).max())):
            a = logp[:, i].argmax(axis=-1) if greedy else sample_categorical(logp[:, i], rng)
            actions[:, i] = np.where(batch.agent_valid[:, i], a, 0)
        chosen = np.take_along_axis(logp, actions[..., None], axis=-1)[..., 0] * batch.agent_valid
        ent = _entropy(logp) * batch.agent_valid
        return DecodeResult(actions, chosen, ent, batch.agent_valid), value.value

    def evaluate_actions(self, batch: TokenBatch, actions: np.ndarray):
        logits, value = self._forward(batch)
        logp_all = nx.log_softmax(logits, axis=-1)
        onehot = np.eye(self.config.num_actions)[actions] * batch.agent_valid[..., None]
        logp = nx.sum_(nx.mul(logp_all, onehot), axis=-1)
        ent = nx.mul(nx.sum_(nx.mul(nx.exp(logp_all), logp_all), axis=-1), -batch.agent_valid.astype(np.float64))
        return logp, ent, value

    def describe(self):
        return [(name, p.value.shape, p.value.size) for name, p in self.store.items()]
