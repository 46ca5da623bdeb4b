"""A miniature episodic network-defense MDP with tabular Q-learning.

Stands in for a full cyber range: a scripted attacker spreads compromise over
a small host graph while the defender picks one (host, action) pair per step.
Tabular Q-learning over the per-host (compromised, observed) flags produces
per-host, per-action Q-values whose distribution is right-skewed with a long
negative tail, the qualitative shape the valuation pipeline expects.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .errors import InvalidInputError, UnsupportedSizeError
from .valuation import DEFAULT_ACTIONS, QMatrix

ANALYZE, REMOVE, RESTORE = 0, 1, 2
ATTACKERS = ("chain", "random-walk")

DEFAULT_COMPROMISE_PENALTY = {
    "User": -0.1,
    "Enterprise": -0.5,
    "Operator": -1.0,
    "Defender": -0.3,
}

MAX_VI_STATES = 10_000


def _default_types(n: int) -> tuple[str, ...]:
    # Roughly half user workstations, then enterprise, operator, defender.
    counts = [("User", (n + 1) // 2), ("Enterprise", max(0, (n - (n + 1) // 2) - 3))]
    assigned = sum(c for _, c in counts)
    rest = n - assigned
    counts.append(("Operator", max(0, rest - 1)))
    counts.append(("Defender", min(1, rest)))
    out: list[str] = []
    for name, c in counts:
        out.extend([name] * c)
    return tuple(out[:n]) if len(out) >= n else tuple(out + ["User"] * (n - len(out)))


def _path_edges(n: int) -> tuple[tuple[int, int], ...]:
    return tuple((i, i + 1) for i in range(n - 1))


@dataclass(frozen=True)
class GymConfig:
    """Hosts, topology, reward shaping and attacker policy.

    ``step_reward`` is a flat per-step operating reward; it shifts all long-run
    values upward without changing their ordering, so penalties show up as a
    negative tail rather than dragging the whole distribution below zero.
    """

    n_hosts: int = 13
    host_types: Optional[tuple[str, ...]] = None
    adjacency: Optional[tuple[tuple[int, int], ...]] = None
    remove_reward: float = 0.1
    restore_penalty: float = -1.0
    compromise_penalty: dict[str, float] = field(default_factory=lambda: dict(DEFAULT_COMPROMISE_PENALTY))
    step_reward: float = 0.6
    q_remove: float = 0.9
    attack_prob: float = 0.3
    horizon: int = 30
    attacker: str = "random-walk"
    observe_flag: bool = True
    seed: int = 0

    def __post_init__(self):
        if self.n_hosts < 1:
            raise InvalidInputError("n_hosts must be >= 1")
        if self.horizon < 1:
            raise InvalidInputError("horizon must be >= 1")
        if self.attacker not in ATTACKERS:
            raise InvalidInputError(f"attacker must be one of {ATTACKERS}")
        if not (0.0 <= self.q_remove <= 1.0) or not (0.0 <= self.attack_prob <= 1.0):
            raise InvalidInputError("q_remove and attack_prob must lie in [0, 1]")
        if self.host_types is None:
            object.__setattr__(self, "host_types", _default_types(self.n_hosts))
        else:
            object.__setattr__(self, "host_types", tuple(self.host_types))
        if len(self.host_types) != self.n_hosts:
            raise InvalidInputError("host_types length must equal n_hosts")
        for t in self.host_types:
            if t not in self.compromise_penalty:
                raise InvalidInputError(f"no compromise penalty configured for host type {t!r}")
        if self.adjacency is None:
            object.__setattr__(self, "adjacency", _path_edges(self.n_hosts))
        else:
            object.__setattr__(self, "adjacency", tuple(tuple(e) for e in self.adjacency))
        if self.n_hosts > 1 and not _connected(self.n_hosts, self.adjacency):
            raise InvalidInputError("host graph must be connected")

    def host_ids(self) -> tuple[str, ...]:
        counters: dict[str, int] = {}
        ids = []
        for t in self.host_types:
            k = counters.get(t, 0)
            counters[t] = k + 1
            ids.append(f"{t}{k}")
        return tuple(ids)

    def neighbors(self, h: int) -> list[int]:
        out = []
        for a, b in self.adjacency:
            if a == h:
                out.append(b)
            elif b == h:
                out.append(a)
        return sorted(set(out))


def _connected(n: int, edges) -> bool:
    seen = {0}
    frontier = [0]
    adj: dict[int, list[int]] = {i: [] for i in range(n)}
    for a, b in edges:
        if not (0 <= a < n and 0 <= b < n):
            raise InvalidInputError(f"edge ({a}, {b}) out of range")
        adj[a].append(b)
        adj[b].append(a)
    while frontier:
        u = frontier.pop()
        for v in adj[u]:
            if v not in seen:
                seen.add(v)
                frontier.append(v)
    return len(seen) == n


# State encoding: bits 0..n-1 hold per-host compromised flags, bits n..2n-1
# per-host observed flags.

def compromised_mask(state: int, n: int) -> int:
    return state & ((1 << n) - 1)


def observed_mask(state: int, n: int) -> int:
    return state >> n


def _pack(comp: int, obs: int, n: int) -> int:
    return comp | (obs << n)


def transition_dist(state: int, host: int, act: int, config: GymConfig) -> list[tuple[float, int, float]]:
    """Exact outcome distribution of one step: list of (prob, next_state, reward).

    The defender acts first, then the attacker advances, then per-step
    compromise penalties (plus the flat operating reward) accrue on the
    resulting state.
    """
    n = config.n_hosts
    if not (0 <= host < n) or act not in (ANALYZE, REMOVE, RESTORE):
        raise InvalidInputError(f"invalid blue action ({host}, {act})")
    comp = compromised_mask(state, n)
    obs = observed_mask(state, n)
    bit = 1 << host

    blue: list[tuple[float, int, int, float]] = []  # (prob, comp, obs, action reward)
    if act == ANALYZE:
        new_obs = obs | bit if config.observe_flag else obs
        blue.append((1.0, comp, new_obs, 0.0))
    elif act == REMOVE:
        if comp & bit:
            if config.q_remove > 0.0:
                blue.append((config.q_remove, comp & ~bit, obs, config.remove_reward))
            if config.q_remove < 1.0:
                blue.append((1.0 - config.q_remove, comp, obs, 0.0))
        else:
            blue.append((1.0, comp, obs, 0.0))
    else:  # RESTORE always clears the host's flags and costs the penalty
        blue.append((1.0, comp & ~bit, obs & ~bit, config.restore_penalty))

    merged: dict[tuple[int, float], float] = {}
    for p_blue, c1, o1, r_act in blue:
        attacks: list[tuple[float, int]] = []
        if config.attacker == "chain":
            target = None
            for h in range(n):
                if not c1 >> h & 1:
                    target = h
                    break
            if target is None or config.attack_prob == 0.0:
                attacks.append((1.0, c1))
            else:
                attacks.append((config.attack_prob, c1 | (1 << target)))
                if config.attack_prob < 1.0:
                    attacks.append((1.0 - config.attack_prob, c1))
        else:  # random-walk over the host graph
            if c1 == 0:
                candidates = [0]
            else:
                candidates = sorted(
                    {
                        v
                        for h in range(n)
                        if c1 >> h & 1
                        for v in config.neighbors(h)
                        if not c1 >> v & 1
                    }
                )
            if not candidates or config.attack_prob == 0.0:
                attacks.append((1.0, c1))
            else:
                p_each = config.attack_prob / len(candidates)
                for v in candidates:
                    attacks.append((p_each, c1 | (1 << v)))
                if config.attack_prob < 1.0:
                    attacks.append((1.0 - config.attack_prob, c1))
        for p_att, c2 in attacks:
            penalty = sum(
                config.compromise_penalty[config.host_types[h]]
                for h in range(n)
                if c2 >> h & 1
            )
            reward = r_act + config.step_reward + penalty
            key = (_pack(c2, o1, n), reward)
            merged[key] = merged.get(key, 0.0) + p_blue * p_att
    return [(p, s, r) for (s, r), p in merged.items()]


def step(state: int, action: tuple[int, int], rng: np.random.Generator, config: GymConfig) -> tuple[int, float]:
    """Sample one environment step; action is a (host, act) pair."""
    host, act = action
    dist = transition_dist(state, host, act, config)
    if len(dist) == 1:
        return dist[0][1], dist[0][2]
    u = rng.random()
    acc = 0.0
    for p, s, r in dist:
        acc += p
        if u < acc:
            return s, r
    return dist[-1][1], dist[-1][2]


@dataclass
class QTable:
    """Sparse (state, host, action) -> value map with visit counts.

    Unvisited keys are absent, which is distinct from a learned value of zero.
    """

    n_hosts: int
    q: dict[tuple[int, int, int], float] = field(default_factory=dict)
    visits: dict[tuple[int, int, int], int] = field(default_factory=dict)

    def value(self, state: int, host: int, act: int) -> float:
        return self.q.get((state, host, act), 0.0)

    def best_value(self, state: int) -> float:
        best = 0.0
        for h in range(self.n_hosts):
            for a in (ANALYZE, REMOVE, RESTORE):
                v = self.q.get((state, h, a))
                if v is not None and v > best:
                    best = v
        return best

    def greedy_action(self, state: int) -> tuple[int, int]:
        best = None
        best_v = -np.inf
        for h in range(self.n_hosts):
            for a in (ANALYZE, REMOVE, RESTORE):
                v = self.q.get((state, h, a), 0.0)
                if v > best_v:
                    best_v = v
                    best = (h, a)
        return best


def q_learning(
    config: GymConfig,
    episodes: int,
    alpha: float = 0.2,
    gamma_discount: float = 0.9,
    eps_explore: float = 0.2,
) -> QTable:
    """Standard one-step tabular Q-learning; deterministic given config.seed."""
    if not (0.0 < alpha <= 1.0):
        raise InvalidInputError("alpha must lie in (0, 1]")
    if not (0.0 <= gamma_discount < 1.0):
        raise InvalidInputError("gamma_discount must lie in [0, 1)")
    if not (0.0 <= eps_explore <= 1.0):
        raise InvalidInputError("eps_explore must lie in [0, 1]")
    rng = np.random.Generator(np.random.PCG64(config.seed))
    table = QTable(n_hosts=config.n_hosts)
    n_actions = config.n_hosts * 3
    for _ in range(episodes):
        state = 0
        for _ in range(config.horizon):
            if rng.random() < eps_explore:
                flat = int(rng.integers(0, n_actions))
                action = (flat // 3, flat % 3)
            else:
                action = table.greedy_action(state)
            nxt, reward = step(state, action, rng, config)
            key = (state, action[0], action[1])
            target = reward + gamma_discount * table.best_value(nxt)
            old = table.q.get(key, 0.0)
            table.q[key] = old + alpha * (target - old)
            table.visits[key] = table.visits.get(key, 0) + 1
            state = nxt
    return table


def value_iteration(
    config: GymConfig,
    gamma_discount: float = 0.9,
    tol: float = 1e-10,
    max_iter: int = 100_000,
) -> dict[tuple[int, int, int], float]:
    """Exact discounted Q-values by fixed-point Bellman iteration.

    Enumerates the full flag state space (4^n states), so it only supports
    tiny configs; Q-learning's one-step targets converge to the same fixed
    point, which makes this the test oracle.
    """
    n = config.n_hosts
    n_states = 1 << (2 * n)
    if n_states > MAX_VI_STATES:
        raise UnsupportedSizeError(f"state space {n_states} exceeds {MAX_VI_STATES}")
    actions = [(h, a) for h in range(n) for a in (ANALYZE, REMOVE, RESTORE)]
    dists = {
        (s, h, a): transition_dist(s, h, a, config)
        for s in range(n_states)
        for h, a in actions
    }
    v = np.zeros(n_states)
    for _ in range(max_iter):
        new_v = np.empty(n_states)
        for s in range(n_states):
            best = -np.inf
            for h, a in actions:
                total = 0.0
                for p, s2, r in dists[(s, h, a)]:
                    total += p * (r + gamma_discount * v[s2])
                if total > best:
                    best = total
            new_v[s] = best
        delta = float(np.abs(new_v - v).max())
        v = new_v
        if delta < tol:
            break
    q = {}
    for s in range(n_states):
        for h, a in actions:
            q[(s, h, a)] = sum(p * (r + gamma_discount * v[s2]) for p, s2, r in dists[(s, h, a)])
    return q


def export_host_q(table: QTable, config: GymConfig) -> QMatrix:
    """Aggregate a Q-table into a per-host, per-action matrix.

    Entry (h, a) is the visit-weighted mean of Q(s, h, a) over states; pairs
    never visited get zero (with a warning).
    """
    if not table.q:
        raise InvalidInputError("Q-table is empty")
    n = config.n_hosts
    sums = np.zeros((n, 3))
    weights = np.zeros((n, 3))
    for (s, h, a), value in table.q.items():
        w = table.visits.get((s, h, a), 0)
        sums[h, a] += w * value
        weights[h, a] += w
    out = np.zeros((n, 3))
    missing = []
    for h in range(n):
        for a in range(3):
            if weights[h, a] > 0:
                out[h, a] = sums[h, a] / weights[h, a]
            else:
                missing.append((h, a))
    if missing:
        warnings.warn(f"{len(missing)} (host, action) pairs never visited; exported as 0: {missing[:5]}")
    return QMatrix(values=out, host_ids=config.host_ids(), host_types=tuple(config.host_types))


GYM_ACTIONS = DEFAULT_ACTIONS
