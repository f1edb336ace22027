"""Binary differential evolution over pruning states."""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import ConfigError, ConsistencyError, InputError
from .ising import PruningGraph, energies


@dataclass
class StatePopulation:
    states: np.ndarray  # (S, D) uint8
    energies: np.ndarray  # (S,)
    t: int = 0
    tag: int | None = None  # tag of the graph the energies were computed on

    @property
    def S(self) -> int:
        return self.states.shape[0]

    @property
    def D(self) -> int:
        return self.states.shape[1]

    def copy(self) -> "StatePopulation":
        return StatePopulation(self.states.copy(), self.energies.copy(), self.t, self.tag)


def row_streams(seed, S: int) -> list[np.random.Generator]:
    """One independent generator per population row, split from ``seed``."""
    ss = seed if isinstance(seed, np.random.SeedSequence) else np.random.SeedSequence(seed)
    return [np.random.default_rng(c) for c in ss.spawn(S)]


def init_population(S: int, D: int, rng) -> StatePopulation:
    """S x D Bernoulli(0.5) states; energies are unset until :func:`score`."""
    if S < 4:
        raise ConfigError(f"population size must be at least 4, got {S}")
    if D < 1:
        raise ConfigError(f"state dimension must be at least 1, got {D}")
    rng = np.random.default_rng(rng)
    states = rng.integers(0, 2, size=(S, D), dtype=np.uint8)
    return StatePopulation(states, np.full(S, np.nan))


def score(pop: StatePopulation, graph: PruningGraph) -> StatePopulation:
    pop.energies = energies(graph, pop.states)
    pop.tag = graph.tag
    return pop


def pick_donors(S: int, i: int, rng) -> tuple[int, int, int]:
    if S < 4:
        raise ConfigError(f"need at least 4 states to draw three donors distinct from row {i}, have {S}")
    others = np.delete(np.arange(S), i)
    i1, i2, i3 = rng.choice(others, size=3, replace=False)
    return int(i1), int(i2), int(i3)


def mutate(pop: StatePopulation, i: int, F: float, rng, donors=None) -> np.ndarray:
    """Flip donor i1's bits where donors i2 and i3 disagree and r_d < F."""
    i1, i2, i3 = pick_donors(pop.S, i, rng) if donors is None else donors
    s = pop.states
    r = rng.random(pop.D)
    flip = (s[i2] != s[i3]) & (r < F)
    return np.where(flip, 1 - s[i1], s[i1]).astype(np.uint8)


def crossover(v, s_i, C: float, rng) -> np.ndarray:
    """Take v_d where r'_d <= C, else keep s_i[d]."""
    v = np.asarray(v)
    s_i = np.asarray(s_i)
    if v.shape != s_i.shape:
        raise InputError(f"crossover of vectors with lengths {v.size} and {s_i.size}")
    r = rng.random(v.size)
    return np.where(r <= C, v, s_i).astype(np.uint8)


def select(pop: StatePopulation, candidates, candidate_energies, tag: int | None = None) -> StatePopulation:
    """Greedy one-to-one replacement; ties go to the candidate."""
    if tag is not None and pop.tag != tag:
        raise ConsistencyError(f"population energies belong to graph {pop.tag}, candidates to graph {tag}")
    if np.isnan(pop.energies).any():
        raise ConsistencyError("population has not been scored")
    cand = np.asarray(candidates, dtype=np.uint8)
    ce = np.asarray(candidate_energies, dtype=np.float64)
    if cand.shape != pop.states.shape or ce.shape != pop.energies.shape:
        raise InputError("candidate batch does not match the population shape")
    take = ce <= pop.energies
    pop.states[take] = cand[take]
    pop.energies[take] = ce[take]
    pop.t += 1
    return pop


def best_state(pop: StatePopulation) -> tuple[np.ndarray, float]:
    """Lowest-energy row; ties go to the lowest index."""
    b = int(np.argmin(pop.energies))
    return pop.states[b].copy(), float(pop.energies[b])


def state_spread(pop: StatePopulation) -> float:
    """Best energy minus mean energy (<= 0, zero at consensus)."""
    e = pop.energies
    if np.all(e == e[0]):
        return 0.0
    return float(min(e.min() - e.mean(), 0.0))


def evolve_step(pop: StatePopulation, graph: PruningGraph, F: float, C: float, rngs) -> StatePopulation:
    """One generation against ``graph``: re-score parents, mutate, cross over, select."""
    score(pop, graph)
    cand = np.empty_like(pop.states)
    for i in range(pop.S):
        v = mutate(pop, i, F, rngs[i])
        cand[i] = crossover(v, pop.states[i], C, rngs[i])
    return select(pop, cand, energies(graph, cand), tag=graph.tag)


def dump_population(pop: StatePopulation, path) -> None:
    """One ``<hex bits> <energy>`` line per row (bit d is bit d % 8, MSB first, of byte d // 8)."""
    lines = [f"# S={pop.S} D={pop.D} t={pop.t}"]
    for row, e in zip(pop.states, pop.energies.tolist()):
        lines.append(f"{np.packbits(row).tobytes().hex()} {e!r}")
    Path(path).write_text("\n".join(lines) + "\n")


def load_population(path) -> StatePopulation:
    lines = Path(path).read_text().splitlines()
    head = dict(kv.split("=") for kv in lines[0].lstrip("# ").split())
    S, D, t = int(head["S"]), int(head["D"]), int(head["t"])
    states = np.zeros((S, D), dtype=np.uint8)
    en = np.zeros(S)
    for i, line in enumerate(lines[1:1 + S]):
        hx, e = line.split()
        states[i] = np.unpackbits(np.frombuffer(bytes.fromhex(hx), np.uint8), count=D)
        en[i] = float(e)
    return StatePopulation(states, en, t)
