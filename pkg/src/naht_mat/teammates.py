"""Scripted uncontrolled teammates and train/test pools of them.

A family is a behaviour type; an instance is one parameter draw from the
family's distribution (noise level and move tie-break order). Train and test
pools hold disjoint instances of the same families.
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

MAX_EPSILON = 0.1
GRID_MOVES = (0, 1, 2, 3)  # up, down, left, right
GRID_STAY = 4


@dataclass(frozen=True)
class TeammateParams:
    epsilon: float = 0.0
    tie_order: tuple[int, ...] = GRID_MOVES


def default_params() -> TeammateParams:
    return TeammateParams()


def sample_params(rng: np.random.Generator) -> TeammateParams:
    eps = float(rng.uniform(0.0, MAX_EPSILON))
    order = tuple(int(m) for m in rng.permutation(len(GRID_MOVES)))
    return TeammateParams(eps, order)


@dataclass(frozen=True)
class TeammateInstance:
    family_id: int
    params: TeammateParams
    instance_seed: int

    def key(self):
        return (self.family_id, self.params, self.instance_seed)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["params"]["tie_order"] = list(self.params.tie_order)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TeammateInstance":
        p = d["params"]
        return cls(int(d["family_id"]), TeammateParams(float(p["epsilon"]), tuple(p["tie_order"])), int(d["instance_seed"]))


@dataclass
class TeammatePool:
    instances: list[TeammateInstance]
    role: str = "train"

    def __len__(self):
        return len(self.instances)

    def __getitem__(self, i) -> TeammateInstance:
        return self.instances[i]

    @property
    def family_ids(self) -> list[int]:
        return sorted({inst.family_id for inst in self.instances})

    def to_dict(self) -> dict:
        return {"role": self.role, "instances": [inst.to_dict() for inst in self.instances]}

    @classmethod
    def from_dict(cls, d: dict) -> "TeammatePool":
        return cls([TeammateInstance.from_dict(x) for x in d["instances"]], d["role"])


def build_pools(
    num_families: int = 5,
    instances_per_family_train: int = 8,
    instances_per_family_test: int = 4,
    seed: int = 0,
) -> tuple[TeammatePool, TeammatePool]:
    """Draw disjoint train/test instance sets covering every family."""
    if min(num_families, instances_per_family_train, instances_per_family_test) < 1:
        raise ValueError("family and instance counts must be >= 1")
    rng = np.random.default_rng(seed)
    train, test, seen = [], [], set()
    for fam in range(num_families):
        drawn = []
        while len(drawn) < instances_per_family_train + instances_per_family_test:
            inst = TeammateInstance(fam, sample_params(rng), int(rng.integers(2**31 - 1)))
            if inst.key() not in seen:
                seen.add(inst.key())
                drawn.append(inst)
        train += drawn[:instances_per_family_train]
        test += drawn[instances_per_family_train:]
    return TeammatePool(train, "train"), TeammatePool(test, "test")


def save_pools(path, pools: dict[str, TeammatePool]) -> None:
    Path(path).write_text(json.dumps({k: p.to_dict() for k, p in pools.items()}, indent=1, sort_keys=True))


def load_pools(path) -> dict[str, TeammatePool]:
    return {k: TeammatePool.from_dict(v) for k, v in json.loads(Path(path).read_text()).items()}


# ---------------------------------------------------------------- behaviour


def _signal_action(env, inst: TeammateInstance, t: int) -> int:
    if t == 0:
        return inst.family_id % env.num_types
    return env.noop


def _grid_action(env, inst: TeammateInstance, obs: np.ndarray, member: int) -> int:
    s = env.size
    col, row = round(obs[0] * s), round(obs[1] * s)
    g = (inst.family_id + member) % env.num_goals
    base = env.goal_offset
    gc = col + round(obs[base + 2 * g] * s)
    gr = row + round(obs[base + 2 * g + 1] * s)
    dist = abs(gr - row) + abs(gc - col)
    for move in inst.params.tie_order:
        nr, nc = env._move((row, col), move)
        if abs(gr - nr) + abs(gc - nc) < dist:
            return move
    return GRID_STAY


def teammate_act(inst: TeammateInstance, obs: np.ndarray, t: int, rng, env, member: int = 0) -> int:
    """One scripted action for an uncontrolled agent.

    ``member`` is the agent's rank among the uncontrolled slots (gridworld
    teammates of one team spread over consecutive goals). With probability
    ``epsilon`` the action is uniform random instead; ``rng`` may be ``None``
    only for noise-free instances.
    """
    obs = np.asarray(obs)
    if obs.shape != (env.spec.obs_dim,):
        raise ValueError(f"observation shape {obs.shape} does not match env obs_dim {env.spec.obs_dim}")
    if inst.params.epsilon > 0.0:
        if rng.random() < inst.params.epsilon:
            return int(rng.integers(env.spec.num_actions))
    if env.spec.name == "signal":
        return _signal_action(env, inst, t)
    if env.spec.name == "gridworld":
        return _grid_action(env, inst, obs, member)
    raise ValueError(f"no teammate behaviour for env {env.spec.name!r}")
