"""Toy cooperative Dec-POMDPs with exactly solvable oracles.

Two tasks share one interface:

* :class:`SignalGame` -- uncontrolled teammates reveal their type with a single
  action at ``t=0``; controlled agents must answer with that type's code at the
  final step. Between the signal and the answer every agent is held to the
  noop action, so the type is recoverable only from history.
* :class:`TypedGoalGridworld` -- scripted teammates walk to a type-dependent
  goal; controlled agents must cover the remaining goal cells.

Both are written as pure ``initial_state / transition / observe`` functions so
the oracles can search over them; ``reset``/``step`` wrap those for rollouts.
"""
from __future__ import annotations

import itertools
import json
from dataclasses import dataclass
from fractions import Fraction
from math import comb
from typing import Any, NamedTuple, Sequence

import numpy as np

from . import teammates as tm

UP, DOWN, LEFT, RIGHT, STAY = range(5)
MOVES = {UP: (-1, 0), DOWN: (1, 0), LEFT: (0, -1), RIGHT: (0, 1), STAY: (0, 0)}


class OracleCapExceeded(RuntimeError):
    pass


@dataclass(frozen=True)
class EnvSpec:
    name: str
    num_agents: int
    obs_dim: int
    num_actions: int
    horizon: int
    gamma: float = 0.99

    def __post_init__(self):
        if self.num_agents < 2 or self.num_actions < 2 or self.horizon < 1:
            raise ValueError(f"invalid env spec {self}")
        if not 0.0 < self.gamma <= 1.0:
            raise ValueError(f"gamma must lie in (0, 1], got {self.gamma}")


@dataclass
class StepResult:
    observations: np.ndarray  # [M, obs_dim]
    reward: float
    done: bool
    state: Any


class Binding(NamedTuple):
    """Which slots are controlled and which family drives the rest."""

    controlled: tuple[int, ...]
    family_id: int


def _binding(composition, num_agents: int) -> Binding:
    if composition is None:
        return Binding(tuple(range(num_agents - 1)), 0)
    return Binding(tuple(composition.controlled_slots), composition.teammate_instance.family_id)


class _Env:
    spec: EnvSpec

    def __init__(self):
        self._state = None
        self._done = True
        self.trace = None  # optional text handle for per-step JSON lines

    @property
    def state(self):
        return self._state

    def reset(self, seed: int, composition=None) -> np.ndarray:
        self._state = self.initial_state(seed, _binding(composition, self.spec.num_agents))
        self._done = False
        return self.observe(self._state)

    def step(self, joint_action: Sequence[int]) -> StepResult:
        if self._done:
            raise RuntimeError("step() called on a finished episode; call reset() first")
        joint_action = tuple(int(a) for a in joint_action)
        if len(joint_action) != self.spec.num_agents:
            raise ValueError(f"expected {self.spec.num_agents} actions, got {len(joint_action)}")
        for a in joint_action:
            if not 0 <= a < self.spec.num_actions:
                raise ValueError(f"action {a} outside [0, {self.spec.num_actions})")
        prev_t = self._state.t
        self._state, reward, done = self.transition(self._state, joint_action)
        self._done = done
        obs = self.observe(self._state)
        if self.trace is not None:
            rec = {
                "t": prev_t,
                "state": self.state_dict(self._state),
                "observations": obs.tolist(),
                "actions": list(joint_action),
                "reward": reward,
            }
            self.trace.write(json.dumps(rec) + "\n")
        return StepResult(obs, reward, done, self._state)

    def state_dict(self, state) -> dict:
        return {k: (list(v) if isinstance(v, tuple) else v) for k, v in state._asdict().items()}


# ---------------------------------------------------------------- signal game


class SignalState(NamedTuple):
    t: int
    last: tuple[int, ...] | None
    binding: Binding


class SignalGame(_Env):
    """Teammate type revealed at ``t=0``, answered at ``t=T-1``."""

    def __init__(self, num_agents: int = 3, num_types: int = 5, horizon: int = 4, gamma: float = 0.99):
        super().__init__()
        if num_types < 1:
            raise ValueError("num_types must be >= 1")
        self.num_types = num_types
        self.noop = num_types
        na = num_types + 1
        self.spec = EnvSpec("signal", num_agents, num_agents * na + 1, na, horizon, gamma)

    def initial_state(self, seed: int, binding: Binding) -> SignalState:
        return SignalState(0, None, binding)

    def held(self, t: int) -> bool:
        """Steps strictly between the signal and the answer force the noop action."""
        return 1 <= t <= self.spec.horizon - 2

    def transition(self, state: SignalState, joint_action):
        t = state.t
        if self.held(t):
            joint_action = (self.noop,) * self.spec.num_agents
        reward = 0.0
        if t == self.spec.horizon - 1:
            code = state.binding.family_id % self.num_types
            reward = float(all(joint_action[i] == code for i in state.binding.controlled))
        done = t + 1 >= self.spec.horizon
        return SignalState(t + 1, tuple(joint_action), state.binding), reward, done

    def observe(self, state: SignalState) -> np.ndarray:
        m, na = self.spec.num_agents, self.spec.num_actions
        obs = np.zeros((m, self.spec.obs_dim))
        for i in range(m):
            if state.last is not None:
                order = [i] + [j for j in range(m) if j != i]
                for seg, j in enumerate(order):
                    obs[i, seg * na + state.last[j]] = 1.0
            obs[i, -1] = state.t / max(self.spec.horizon - 1, 1)
        return obs


# ---------------------------------------------------------------- gridworld


class GridState(NamedTuple):
    t: int
    pos: tuple[tuple[int, int], ...]  # (row, col) per agent
    last: tuple[int, ...] | None
    goals: tuple[tuple[int, int], ...]
    binding: Binding


def grid_layout(seed: int, size: int, num_goals: int, num_agents: int):
    """Seeded placement: distinct cells, first the goals then the agent starts."""
    rng = np.random.default_rng(seed)
    cells = rng.choice(size * size, size=num_goals + num_agents, replace=False)
    cells = [divmod(int(c), size) for c in cells]
    return tuple(cells[:num_goals]), tuple(cells[num_goals:])


class TypedGoalGridworld(_Env):
    """Cover every goal cell with a distinct agent; teammates head for typed goals.

    Coordinates are (row, col); ``up`` decreases the row. Observed positions are
    ``(x, y) = (col, row)`` scaled by the grid size.
    """

    def __init__(
        self,
        size: int = 5,
        num_agents: int = 3,
        num_goals: int = 3,
        horizon: int = 12,
        fov: int = 2,
        step_cost: float = 0.01,
        gamma: float = 0.99,
    ):
        super().__init__()
        if num_goals > num_agents:
            raise ValueError("more goals than agents can never be covered")
        if num_goals + num_agents > size * size:
            raise ValueError("grid too small for the requested placement")
        self.size, self.num_goals, self.fov, self.step_cost = size, num_goals, fov, step_cost
        m = num_agents
        obs_dim = 2 + 2 * (m - 1) + len(MOVES) * (m - 1) + 2 * num_goals + 1
        self.spec = EnvSpec("gridworld", m, obs_dim, len(MOVES), horizon, gamma)

    @property
    def goal_offset(self) -> int:
        m = self.spec.num_agents
        return 2 + 2 * (m - 1) + len(MOVES) * (m - 1)

    def initial_state(self, seed: int, binding: Binding) -> GridState:
        goals, starts = grid_layout(seed, self.size, self.num_goals, self.spec.num_agents)
        return GridState(0, starts, None, goals, binding)

    def _move(self, p, a):
        dr, dc = MOVES[a]
        return (min(max(p[0] + dr, 0), self.size - 1), min(max(p[1] + dc, 0), self.size - 1))

    def transition(self, state: GridState, joint_action):
        pos = tuple(self._move(p, a) for p, a in zip(state.pos, joint_action))
        occupied = set(pos)
        success = all(g in occupied for g in state.goals)
        reward = 1.0 if success else -self.step_cost
        done = success or state.t + 1 >= self.spec.horizon
        return GridState(state.t + 1, pos, tuple(joint_action), state.goals, state.binding), reward, done

    def visible(self, state: GridState, i: int, j: int) -> bool:
        (ri, ci), (rj, cj) = state.pos[i], state.pos[j]
        return max(abs(ri - rj), abs(ci - cj)) <= self.fov

    def observe(self, state: GridState) -> np.ndarray:
        m, s, na = self.spec.num_agents, self.size, len(MOVES)
        obs = np.zeros((m, self.spec.obs_dim))
        for i in range(m):
            r, c = state.pos[i]
            o = obs[i]
            o[0], o[1] = c / s, r / s
            others = [j for j in range(m) if j != i]
            for k, j in enumerate(others):
                if not self.visible(state, i, j):
                    continue
                rj, cj = state.pos[j]
                o[2 + 2 * k] = (cj - c) / s
                o[3 + 2 * k] = (rj - r) / s
                if state.last is not None:
                    o[2 + 2 * (m - 1) + na * k + state.last[j]] = 1.0
            base = self.goal_offset
            for g, (gr, gc) in enumerate(state.goals):
                o[base + 2 * g] = (gc - c) / s
                o[base + 2 * g + 1] = (gr - r) / s
            o[-1] = state.t / self.spec.horizon
        return obs


def make_env(name: str, **kwargs) -> _Env:
    if name == "signal":
        return SignalGame(**kwargs)
    if name == "gridworld":
        return TypedGoalGridworld(**kwargs)
    raise ValueError(f"unknown environment {name!r}")


# ---------------------------------------------------------------- oracles


def uniform_compositions(num_agents: int):
    """(probability, controlled slots) under N ~ U{1..M-1}, slots uniform."""
    out = []
    for n in range(1, num_agents):
        subsets = list(itertools.combinations(range(num_agents), n))
        for s in subsets:
            out.append((Fraction(1, (num_agents - 1) * comb(num_agents, n)), s))
    return out


class _Search:
    def __init__(self, env: _Env, memoryless: bool, max_branches: int):
        self.env = env
        self.memoryless = memoryless
        self.max_branches = max_branches
        self.branches = 0
        self.memo: dict = {}
        self.instances = {}

    def tick(self, n=1):
        self.branches += n
        if self.branches > self.max_branches:
            raise OracleCapExceeded(
                f"oracle search exceeded {self.max_branches} policy branches; shrink the instance "
                "(fewer agents, shorter horizon, smaller grid or fewer teammate families)"
            )

    def teammate_actions(self, state, obs):
        b = state.binding
        inst = self.instances.setdefault(b.family_id, tm.TeammateInstance(b.family_id, tm.default_params(), 0))
        acts = {}
        member = 0
        for j in range(self.env.spec.num_agents):
            if j not in b.controlled:
                acts[j] = tm.teammate_act(inst, obs[j], state.t, None, self.env, member=member)
                member += 1
        return acts

    def key(self, state, obs, hist):
        cur = obs[list(state.binding.controlled)].tobytes()
        return cur if self.memoryless else hist + (cur,)

    def outcomes(self, group, joint):
        """Immediate reward and surviving particles after one joint action."""
        reward, nxt = Fraction(0), []
        for prob, state, hist, obs in group:
            acts = self.teammate_actions(state, obs)
            full = [0] * self.env.spec.num_agents
            for slot, a in zip(state.binding.controlled, joint):
                full[slot] = a
            for j, a in acts.items():
                full[j] = a
            ns, r, done = self.env.transition(state, tuple(full))
            reward += prob * Fraction(repr(r))
            if not done:
                nobs = self.env.observe(ns)
                nxt.append((prob, ns, self.key(ns, nobs, hist), nobs))
        return reward, nxt

    def solve(self, particles) -> float:
        if not particles:
            return Fraction(0)
        groups: dict = {}
        for p in particles:
            groups.setdefault(p[2], []).append(p)
        if not self.memoryless:
            return sum(self.solve_group(g) for g in groups.values())
        memo_key = frozenset((p[0], p[1], p[2]) for p in particles)
        if memo_key in self.memo:
            return self.memo[memo_key]
        options = []
        for g in groups.values():
            n = len(g[0][1].binding.controlled)
            seen = {}
            for joint in itertools.product(range(self.env.spec.num_actions), repeat=n):
                self.tick()
                r, nxt = self.outcomes(g, joint)
                sig = (r, tuple((p[0], p[1]) for p in nxt))
                seen.setdefault(sig, (r, nxt))
            options.append(list(seen.values()))
        if all(not nxt for opts in options for _, nxt in opts):
            best = sum(max(r for r, _ in opts) for opts in options)
        else:
            best = None
            for combo in itertools.product(*options):
                self.tick()
                r = sum(c[0] for c in combo)
                v = r + self.solve([p for c in combo for p in c[1]])
                best = v if best is None else max(best, v)
        self.memo[memo_key] = best
        return best

    def solve_group(self, group) -> float:
        memo_key = ("g", frozenset((p[0], p[1]) for p in group))
        if memo_key in self.memo:
            return self.memo[memo_key]
        n = len(group[0][1].binding.controlled)
        best, tried = None, set()
        for joint in itertools.product(range(self.env.spec.num_actions), repeat=n):
            self.tick()
            r, nxt = self.outcomes(group, joint)
            sig = (r, tuple((p[0], p[1]) for p in nxt))
            if sig in tried:
                continue
            tried.add(sig)
            v = r + self.solve(nxt)
            best = v if best is None else max(best, v)
        self.memo[memo_key] = best
        return best


def _oracle(env: _Env, families, seed: int, memoryless: bool, max_branches: int) -> float:
    families = list(families)
    if not families:
        raise ValueError("need at least one teammate family")
    search = _Search(env, memoryless, max_branches)
    particles = []
    for pc, slots in uniform_compositions(env.spec.num_agents):
        for fam in families:
            state = env.initial_state(seed, Binding(slots, fam))
            obs = env.observe(state)
            particles.append((pc / len(families), state, search.key(state, obs, ()), obs))
    return float(search.solve(particles))


def oracle_optimal_return(env: _Env, families=range(5), seed: int = 0, max_branches: int = 10**7) -> float:
    """Best expected return over deterministic joint-history controlled policies.

    Averages uniformly over ``families`` (noise-free teammates) and over team
    compositions drawn as in training. ``seed`` fixes the gridworld layout.
    """
    return _oracle(env, families, seed, False, max_branches)


def oracle_memoryless_return(env: _Env, families=range(5), seed: int = 0, max_branches: int = 10**7) -> float:
    """Best expected return over policies of the current joint observation only."""
    return _oracle(env, families, seed, True, max_branches)
