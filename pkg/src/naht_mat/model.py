"""History-conditioned multi-agent transformer for a variable controlled subteam.

Only controlled agents ever become tokens. Each (agent, relative timestep)
pair is one encoder token built from that step's observation, the action the
agent took then, and a learned encoding of the relative timestep. The joint
value reads the mean of the current-step representations; the decoder emits
actions agent by agent in ascending slot order, each agent's current-step
representation acting as the query over the already-decoded actions.
"""
from __future__ import annotations

from collections import deque
from dataclasses import dataclass, field

import numpy as np

from . import numerics as nx
from .numerics import Node, ParamStore


@dataclass
class ModelConfig:
    obs_dim: int
    num_actions: int
    max_agents: int  # M - 1
    k: int = 4
    d_model: int = 64
    n_heads: int = 2
    n_layers_enc: int = 2
    n_layers_dec: int = 2
    ff_dim: int = 128

    def __post_init__(self):
        if self.d_model % self.n_heads:
            raise ValueError(f"d_model={self.d_model} not divisible by n_heads={self.n_heads}")
        if self.k < 0:
            raise ValueError("history window k must be >= 0")
        if self.max_agents < 1:
            raise ValueError("max_agents must be >= 1")


# ---------------------------------------------------------------- history and tokens


class HistoryBuffer:
    """Last ``k`` (observation, action) pairs plus the current observation, per controlled slot."""

    def __init__(self, controlled_slots, k: int):
        self.slots = tuple(controlled_slots)
        self.k = k
        self.past = [deque(maxlen=k) for _ in self.slots]  # oldest first
        self.current = None

    @property
    def valid_length(self) -> int:
        return len(self.past[0]) if self.past else 0

    def observe(self, observations: np.ndarray) -> None:
        """Take the full [M, obs_dim] observation array; keeps controlled rows only."""
        self.current = np.array(observations[list(self.slots)], dtype=np.float64)

    def record(self, actions) -> None:
        """Push the current observation with the controlled agents' chosen actions."""
        if self.current is None:
            raise RuntimeError("record() before observe()")
        for i, a in enumerate(actions):
            self.past[i].append((self.current[i], int(a)))


@dataclass
class TokenBatch:
    """Padded encoder inputs for a batch of decision points.

    Token order inside a sample is agent-major: agent n, relative step δ sits
    at position ``n * (k + 1) + δ``.
    """

    obs: np.ndarray  # [B, Nmax, K1, obs_dim]
    act: np.ndarray  # [B, Nmax, K1, A], zero at δ=0
    token_valid: np.ndarray  # [B, Nmax, K1]
    agent_valid: np.ndarray  # [B, Nmax]

    @property
    def batch_size(self) -> int:
        return self.obs.shape[0]

    @property
    def n_agents(self) -> np.ndarray:
        return self.agent_valid.sum(axis=1)

    def length(self, b: int = 0) -> int:
        return int(self.token_valid[b].sum())

    def meta(self, b: int = 0) -> list[tuple[int, int]]:
        """(agent index, δ) of each real token in sample ``b``, in sequence order."""
        n, d = np.nonzero(self.token_valid[b])
        return list(zip(n.tolist(), d.tolist()))


def _empty_batch(bsz: int, config: ModelConfig) -> TokenBatch:
    k1 = config.k + 1
    return TokenBatch(
        np.zeros((bsz, config.max_agents, k1, config.obs_dim)),
        np.zeros((bsz, config.max_agents, k1, config.num_actions)),
        np.zeros((bsz, config.max_agents, k1), dtype=bool),
        np.zeros((bsz, config.max_agents), dtype=bool),
    )


def build_tokens(histories, config: ModelConfig) -> TokenBatch:
    """Token inputs from one :class:`HistoryBuffer` or a list of them."""
    if isinstance(histories, HistoryBuffer):
        histories = [histories]
    batch = _empty_batch(len(histories), config)
    for b, h in enumerate(histories):
        n = len(h.slots)
        if n == 0:
            raise ValueError("no controlled agents to build tokens for")
        if n > config.max_agents:
            raise ValueError(f"{n} controlled agents exceed max_agents={config.max_agents}")
        if h.current is None:
            raise ValueError("history has no current observation")
        if h.current.shape[1] != config.obs_dim:
            raise ValueError(f"observation dim {h.current.shape[1]} != model obs_dim {config.obs_dim}")
        batch.agent_valid[b, :n] = True
        batch.obs[b, :n, 0] = h.current
        batch.token_valid[b, :n, 0] = True
        for i in range(n):
            past = h.past[i]
            for delta in range(1, min(len(past), config.k) + 1):
                o, a = past[-delta]
                batch.obs[b, i, delta] = o
                batch.act[b, i, delta, a] = 1.0
                batch.token_valid[b, i, delta] = True
    return batch


def tokens_from_episodes(episodes, config: ModelConfig) -> TokenBatch:
    """Token inputs for every timestep of stored episodes, in (episode, t) order.

    Each episode supplies ``obs`` [T, N, obs_dim] and ``actions`` [T, N] for its
    controlled agents; matches :func:`build_tokens` on the equivalent histories.
    """
    sizes = [ep.obs.shape[0] for ep in episodes]
    batch = _empty_batch(sum(sizes), config)
    eye = np.eye(config.num_actions)
    start = 0
    for ep, steps in zip(episodes, sizes):
        n = ep.obs.shape[1]
        rows = slice(start, start + steps)
        batch.agent_valid[rows, :n] = True
        t = np.arange(steps)
        for delta in range(config.k + 1):
            src = t - delta
            ok = src >= 0
            idx = np.clip(src, 0, None)
            batch.obs[rows, :n, delta] = ep.obs[idx] * ok[:, None, None]
            if delta:
                batch.act[rows, :n, delta] = eye[ep.actions[idx]] * ok[:, None, None]
            batch.token_valid[rows, :n, delta] = ok[:, None]
        start += steps
    return batch


# ---------------------------------------------------------------- parameters


def _init(rng, fan_in, shape, scale=1.0):
    return rng.normal(0.0, scale / np.sqrt(fan_in), size=shape)


def _add_attn(store, rng, prefix, d):
    for nm in ("q", "k", "v", "o"):
        store.add(f"{prefix}.w{nm}", _init(rng, d, (d, d)))
        store.add(f"{prefix}.b{nm}", np.zeros(d))


def _add_ln(store, prefix, d):
    store.add(f"{prefix}.gain", np.ones(d))
    store.add(f"{prefix}.bias", np.zeros(d))


def _add_ff(store, rng, prefix, d, h):
    store.add(f"{prefix}.w1", _init(rng, d, (d, h)))
    store.add(f"{prefix}.b1", np.zeros(h))
    store.add(f"{prefix}.w2", _init(rng, h, (h, d)))
    store.add(f"{prefix}.b2", np.zeros(d))


def init_params(config: ModelConfig, seed: int = 0) -> ParamStore:
    rng = np.random.default_rng(seed)
    c, d = config, config.d_model
    s = ParamStore()
    s.add("embed.obs_w", _init(rng, c.obs_dim, (c.obs_dim, d)))
    s.add("embed.obs_b", np.zeros(d))
    s.add("embed.act_w", _init(rng, c.num_actions, (c.num_actions, d)))
    s.add("embed.no_action", rng.normal(0.0, 0.02, d))
    s.add("embed.pos", rng.normal(0.0, 0.02, (c.k + 1, d)))
    for layer in range(c.n_layers_enc):
        p = f"enc.{layer}"
        _add_ln(s, f"{p}.ln1", d)
        _add_attn(s, rng, f"{p}.attn", d)
        _add_ln(s, f"{p}.ln2", d)
        _add_ff(s, rng, f"{p}.ff", d, c.ff_dim)
    _add_ln(s, "enc.ln_f", d)
    s.add("value.w1", _init(rng, d, (d, d)))
    s.add("value.b1", np.zeros(d))
    s.add("value.w2", _init(rng, d, (d, 1), 0.1))
    s.add("value.b2", np.zeros(1))
    s.add("dec.sos", rng.normal(0.0, 0.02, d))
    s.add("dec.act_w", _init(rng, c.num_actions, (c.num_actions, d)))
    for layer in range(c.n_layers_dec):
        p = f"dec.{layer}"
        _add_ln(s, f"{p}.ln1", d)
        _add_attn(s, rng, f"{p}.self", d)
        _add_ln(s, f"{p}.ln2", d)
        _add_attn(s, rng, f"{p}.cross", d)
        _add_ln(s, f"{p}.ln3", d)
        _add_ff(s, rng, f"{p}.ff", d, c.ff_dim)
    _add_ln(s, "dec.ln_f", d)
    s.add("head.w", _init(rng, d, (d, c.num_actions), 0.01))
    s.add("head.b", np.zeros(c.num_actions))
    return s


def _sub(store: ParamStore, prefix: str) -> dict:
    n = len(prefix) + 1
    return {name[n:]: p for name, p in store.params.items() if name.startswith(prefix + ".")}


# ---------------------------------------------------------------- forward pieces


@dataclass
class EncoderOutput:
    reps: Node  # [B, L, d]
    current_reps: Node  # [B, Nmax, d], δ=0 tokens in ascending slot order
    joint_value: Node  # [B]
    agent_valid: np.ndarray  # [B, Nmax]


@dataclass
class DecodeResult:
    actions: np.ndarray  # [B, Nmax] (0 on padded agents)
    log_probs: np.ndarray  # [B, Nmax]
    entropy: np.ndarray  # [B, Nmax]
    agent_valid: np.ndarray


def _ln(x, store, prefix):
    return nx.layer_norm(x, store[f"{prefix}.gain"], store[f"{prefix}.bias"])


def _ff(x, store, prefix):
    h = nx.gelu(nx.linear(x, store[f"{prefix}.w1"], store[f"{prefix}.b1"]))
    return nx.linear(h, store[f"{prefix}.w2"], store[f"{prefix}.b2"])


def embed_tokens(batch: TokenBatch, store: ParamStore, config: ModelConfig) -> Node:
    bsz, nmax, k1, _ = batch.obs.shape
    L = nmax * k1
    valid = batch.token_valid.reshape(bsz, L, 1).astype(np.float64)
    x = nx.linear(batch.obs.reshape(bsz, L, -1), store["embed.obs_w"], store["embed.obs_b"])
    x = x + nx.matmul(batch.act.reshape(bsz, L, -1), store["embed.act_w"])
    current = np.zeros((1, L, 1))
    current[0, ::k1] = 1.0
    x = x + nx.mul(store["embed.no_action"], current)
    x = x + nx.take(store["embed.pos"], np.tile(np.arange(k1), nmax), axis=0)
    return nx.mul(x, valid)


def encode(batch: TokenBatch, store: ParamStore, config: ModelConfig) -> EncoderOutput:
    bsz, nmax, k1, _ = batch.obs.shape
    L = nmax * k1
    key_ok = batch.token_valid.reshape(bsz, 1, L)
    mask = np.broadcast_to(key_ok, (bsz, L, L))
    x = embed_tokens(batch, store, config)
    for layer in range(config.n_layers_enc):
        p = f"enc.{layer}"
        h = _ln(x, store, f"{p}.ln1")
        x = x + nx.multi_head_attention(h, h, mask, _sub(store, f"{p}.attn"), config.n_heads)
        x = x + _ff(_ln(x, store, f"{p}.ln2"), store, f"{p}.ff")
    reps = _ln(x, store, "enc.ln_f")
    current = nx.take(reps, np.arange(nmax) * k1, axis=1)
    n = batch.agent_valid.sum(axis=1, keepdims=True)
    weights = (batch.agent_valid / n)[:, :, None]
    pooled = nx.sum_(nx.mul(current, weights), axis=1)
    hidden = nx.gelu(nx.linear(pooled, store["value.w1"], store["value.b1"]))
    value = nx.reshape(nx.linear(hidden, store["value.w2"], store["value.b2"]), (bsz,))
    return EncoderOutput(reps, current, value, batch.agent_valid)


def decoder_logits(enc: EncoderOutput, actions: np.ndarray, store: ParamStore, config: ModelConfig) -> Node:
    """Logits [B, Nmax, A]; row i depends on actions of agents < i only."""
    bsz, nmax = enc.agent_valid.shape
    prev = np.zeros((bsz, nmax, config.num_actions))
    if nmax > 1:
        prev[:, 1:] = np.eye(config.num_actions)[actions[:, :-1]]
    sos = np.zeros((1, nmax, 1))
    sos[0, 0] = 1.0
    x = nx.matmul(prev, store["dec.act_w"]) + nx.mul(store["dec.sos"], sos)
    causal = np.tril(np.ones((nmax, nmax), dtype=bool))
    mask = causal[None] & enc.agent_valid[:, None, :]
    rep = enc.current_reps
    for layer in range(config.n_layers_dec):
        p = f"dec.{layer}"
        h = _ln(x, store, f"{p}.ln1")
        x = x + nx.multi_head_attention(h, h, mask, _sub(store, f"{p}.self"), config.n_heads)
        kv = _ln(x, store, f"{p}.ln2")
        x = rep + nx.multi_head_attention(rep, kv, mask, _sub(store, f"{p}.cross"), config.n_heads)
        x = x + _ff(_ln(x, store, f"{p}.ln3"), store, f"{p}.ff")
    return nx.linear(_ln(x, store, "dec.ln_f"), store["head.w"], store["head.b"])


def _entropy(logp: np.ndarray) -> np.ndarray:
    return -(np.exp(logp) * logp).sum(axis=-1)


def sample_categorical(logp: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """Inverse-CDF draw per row; one uniform per row keeps streams aligned."""
    u = rng.random(logp.shape[0])
    cdf = np.cumsum(np.exp(logp), axis=-1)
    return np.minimum((u[:, None] >= cdf).sum(axis=-1), logp.shape[-1] - 1)


def decode_autoregressive(
    enc: EncoderOutput, store: ParamStore, config: ModelConfig, rng=None, greedy: bool = False
) -> DecodeResult:
    """Sample (or argmax) actions agent by agent in ascending slot order."""
    bsz, nmax = enc.agent_valid.shape
    actions = np.zeros((bsz, nmax), dtype=np.int64)
    logps = np.zeros((bsz, nmax))
    ents = np.zeros((bsz, nmax))
    steps = int(enc.agent_valid.sum(axis=1).max())
    with nx.no_grad():
        for i in range(steps):
            logits = decoder_logits(enc, actions, store, config).value[:, i]
            z = logits - logits.max(axis=-1, keepdims=True)
            logp = z - np.log(np.exp(z).sum(axis=-1, keepdims=True))
            a = logp.argmax(axis=-1) if greedy else sample_categorical(logp, rng)
            a = np.where(enc.agent_valid[:, i], a, 0)
            actions[:, i] = a
            logps[:, i] = np.where(enc.agent_valid[:, i], logp[np.arange(bsz), a], 0.0)
            ents[:, i] = np.where(enc.agent_valid[:, i], _entropy(logp), 0.0)
    return DecodeResult(actions, logps, ents, enc.agent_valid)


def decode_teacher_forced(enc: EncoderOutput, actions: np.ndarray, store: ParamStore, config: ModelConfig):
    """Per-agent log-probabilities and entropies of given actions, as graph nodes [B, Nmax]."""
    logits = decoder_logits(enc, actions, store, config)
    logp_all = nx.log_softmax(logits, axis=-1)
    onehot = np.eye(config.num_actions)[actions] * enc.agent_valid[..., None]
    logp = nx.sum_(nx.mul(logp_all, onehot), axis=-1)
    probs = nx.exp(logp_all)
    ent = nx.mul(nx.sum_(nx.mul(probs, logp_all), axis=-1), -enc.agent_valid.astype(np.float64))
    return logp, ent


# ---------------------------------------------------------------- policy object


class MATNAHT:
    """Encoder/decoder policy plus joint value, sharing one parameter store."""

    label = "mat_naht"

    def __init__(self, config: ModelConfig, seed: int = 0):
        self.config = config
        self.store = init_params(config, seed)

    def tokens(self, histories) -> TokenBatch:
        return build_tokens(histories, self.config)

    def tokens_from_episodes(self, episodes) -> TokenBatch:
        return tokens_from_episodes(episodes, self.config)

    def encode(self, batch: TokenBatch) -> EncoderOutput:
        return encode(batch, self.store, self.config)

    def act(self, batch: TokenBatch, rng=None, greedy: bool = False):
        """Returns (DecodeResult, joint values [B]) without building a graph."""
        with nx.no_grad():
            enc = self.encode(batch)
        return decode_autoregressive(enc, self.store, self.config, rng, greedy), enc.joint_value.value

    def evaluate_actions(self, batch: TokenBatch, actions: np.ndarray):
        """(log_probs [B,Nmax], entropy [B,Nmax], value [B]) as differentiable nodes."""
        enc = self.encode(batch)
        logp, ent = decode_teacher_forced(enc, actions, self.store, self.config)
        return logp, ent, enc.joint_value

    def describe(self) -> list[tuple[str, tuple[int, ...], int]]:
        return [(name, p.value.shape, p.value.size) for name, p in self.store.items()]
