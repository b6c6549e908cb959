"""Per-episode team sampling: teammate team, controlled count N, controlled slots."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .teammates import TeammateInstance, TeammatePool


@dataclass(frozen=True)
class TeamComposition:
    M: int
    N: int
    controlled_slots: tuple[int, ...]
    teammate_instance: TeammateInstance
    episode_seed: int

    def __post_init__(self):
        if not 1 <= self.N <= self.M - 1:
            raise ValueError(f"controlled count {self.N} outside [1, {self.M - 1}]")
        if len(self.controlled_slots) != self.N or list(self.controlled_slots) != sorted(set(self.controlled_slots)):
            raise ValueError(f"controlled slots {self.controlled_slots} must be {self.N} sorted distinct indices")
        if self.controlled_slots[0] < 0 or self.controlled_slots[-1] >= self.M:
            raise ValueError(f"controlled slots {self.controlled_slots} outside [0, {self.M})")

    @property
    def uncontrolled_slots(self) -> tuple[int, ...]:
        return tuple(i for i in range(self.M) if i not in self.controlled_slots)

    def to_dict(self) -> dict:
        return {
            "M": self.M,
            "N": self.N,
            "controlled_slots": list(self.controlled_slots),
            "teammate": self.teammate_instance.to_dict(),
            "episode_seed": self.episode_seed,
        }


def sample_composition(M: int, pool: TeammatePool, rng: np.random.Generator) -> TeamComposition:
    """Teammate team uniform over the pool, then N ~ U{1..M-1}, then a uniform N-subset of slots."""
    if M < 2:
        raise ValueError("need at least two agents")
    if len(pool) == 0:
        raise ValueError("teammate pool is empty")
    inst = pool[int(rng.integers(len(pool)))]
    n = int(rng.integers(1, M))
    slots = tuple(sorted(int(s) for s in rng.permutation(M)[:n]))
    return TeamComposition(M, n, slots, inst, int(rng.integers(2**31 - 1)))
