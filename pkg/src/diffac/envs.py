"""Desk-scale environments with computable ground truth.

Two continuous-control toys exercise the phenomena the learner must handle:
a one-step bandit whose reward surface has two global optima, and a
point-mass navigation task where a central obstacle forces a left/right
route choice between two symmetric goals. A small tabular MDP with an exact
return-distribution enumerator provides verification targets for the
distributional value learner.

Environment API: reset(seed) -> state; step(action) -> (next_state, reward,
terminal, truncated); spec() -> EnvSpec.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Tuple

import numpy as np

from .seeding import rng_from


@dataclass(frozen=True)
class EnvSpec:
    """Static facts a learner needs about an environment."""

    state_dim: int
    action_dim: int
    action_low: np.ndarray
    action_high: np.ndarray
    max_episode_len: int
    reward_range: Tuple[float, float]

    def __post_init__(self):
        if self.action_dim < 1:
            raise ValueError("action_dim must be >= 1")
        if not (np.isfinite(self.action_low).all() and np.isfinite(self.action_high).all()):
            raise ValueError("action bounds must be finite")


class BimodalBandit:
    """One-step bandit with two equally good actions at +/-0.6.

    reward = 1 - min((a - 0.6)^2, (a + 0.6)^2) + noise_std * N(0, 1).
    """

    OPTIMA = (-0.6, 0.6)

    def __init__(self, noise_std: float = 0.05):
        self.noise_std = float(noise_std)
        self._rng = np.random.default_rng(0)
        self._done = True

    def spec(self) -> EnvSpec:
        return EnvSpec(
            state_dim=1,
            action_dim=1,
            action_low=np.array([-1.0]),
            action_high=np.array([1.0]),
            max_episode_len=1,
            reward_range=(0.0 - 4 * self.noise_std, 1.0 + 4 * self.noise_std),
        )

    def reset(self, seed: int) -> np.ndarray:
        self._rng = np.random.default_rng(seed)
        self._done = False
        return np.zeros(1)

    def mean_reward(self, action: float) -> float:
        a = float(np.clip(action, -1.0, 1.0))
        return 1.0 - min((a - 0.6) ** 2, (a + 0.6) ** 2)

    def step(self, action: np.ndarray):
        if self._done:
            raise RuntimeError("episode finished; call reset first")
        a = np.asarray(action, dtype=np.float64).reshape(-1)
        if a[0] < -1.0 or a[0] > 1.0:
            warnings.warn("bandit action outside [-1, 1]; clipping", stacklevel=2)
        reward = self.mean_reward(a[0]) + self.noise_std * self._rng.standard_normal()
        self._done = True
        return np.zeros(1), float(reward), True, False


class TwoGoalPointMass:
    """Double-integrator point mass with two symmetric goals behind an obstacle.

    State is (px, py, vx, vy); actions are bounded accelerations. The reward
    penalizes distance to the nearest goal, penetration into the central
    obstacle and action magnitude, so optimal behavior swerves either left
    or right around the obstacle; the two routes have equal return by
    symmetry.
    """

    def __init__(
        self,
        goal_x: float = 1.0,
        goal_y: float = 1.0,
        start: Tuple[float, float] = (0.0, -1.0),
        obstacle_center: Tuple[float, float] = (0.0, 0.0),
        obstacle_radius: float = 0.55,
        obstacle_cost: float = 10.0,
        action_cost: float = 0.05,
        goal_radius: float = 0.15,
        dt: float = 0.2,
        v_max: float = 1.0,
        max_steps: int = 40,
    ):
        self.goals = np.array([[-goal_x, goal_y], [goal_x, goal_y]])
        self.start = np.array(start, dtype=np.float64)
        self.obstacle_center = np.array(obstacle_center, dtype=np.float64)
        self.obstacle_radius = float(obstacle_radius)
        self.obstacle_cost = float(obstacle_cost)
        self.action_cost = float(action_cost)
        self.goal_radius = float(goal_radius)
        self.dt = float(dt)
        self.v_max = float(v_max)
        self.max_steps = int(max_steps)
        self._state = None
        self._steps = 0

    def spec(self) -> EnvSpec:
        # Largest per-step penalty: far corner distance + full obstacle depth
        # + max action cost.
        worst = -(6.0 + self.obstacle_cost * self.obstacle_radius + self.action_cost * 2.0)
        return EnvSpec(
            state_dim=4,
            action_dim=2,
            action_low=np.array([-1.0, -1.0]),
            action_high=np.array([1.0, 1.0]),
            max_episode_len=self.max_steps,
            reward_range=(worst, 0.0),
        )

    def reset(self, seed: int) -> np.ndarray:
        self._state = np.concatenate([self.start, np.zeros(2)])
        self._steps = 0
        return self._state.copy()

    def reward(self, state: np.ndarray, action: np.ndarray) -> float:
        pos = state[:2]
        dists = np.linalg.norm(self.goals - pos[None, :], axis=1)
        r = -float(dists.min())
        depth = self.obstacle_radius - np.linalg.norm(pos - self.obstacle_center)
        if depth > 0:
            r -= self.obstacle_cost * float(depth)
        r -= self.action_cost * float(np.sum(action**2))
        return r

    def step(self, action: np.ndarray):
        if self._state is None:
            raise RuntimeError("call reset first")
        a = np.clip(np.asarray(action, dtype=np.float64).reshape(2), -1.0, 1.0)
        pos, vel = self._state[:2], self._state[2:]
        vel = np.clip(vel + a * self.dt, -self.v_max, self.v_max)
        pos = pos + vel * self.dt
        self._state = np.concatenate([pos, vel])
        self._steps += 1

        reward = self.reward(self._state, a)
        goal_dist = np.linalg.norm(self.goals - pos[None, :], axis=1).min()
        terminal = bool(goal_dist <= self.goal_radius)
        truncated = bool(self._steps >= self.max_steps) and not terminal
        return self._state.copy(), float(reward), terminal, truncated

    def nearest_goal_index(self, state: np.ndarray) -> int:
        pos = np.asarray(state)[:2]
        return int(np.argmin(np.linalg.norm(self.goals - pos[None, :], axis=1)))


_ENV_REGISTRY = {
    "bimodal_bandit": BimodalBandit,
    "two_goal_pointmass": TwoGoalPointMass,
}


def make_env(name: str, overrides: Optional[dict] = None):
    if name not in _ENV_REGISTRY:
        raise ValueError(f"unknown environment {name!r}; options: {sorted(_ENV_REGISTRY)}")
    return _ENV_REGISTRY[name](**(overrides or {}))


TERMINAL = -1


@dataclass
class OracleMdp:
    """Finite MDP with finite-support stochastic rewards.

    branches[(s, a)] is a list of (probability, reward, next_state) with
    next_state == TERMINAL for episode end; probabilities per (s, a) sum
    to one.
    """

    n_states: int
    n_actions: int
    branches: Dict[Tuple[int, int], List[Tuple[float, float, int]]]
    gamma: float

    def __post_init__(self):
        if not 0.0 <= self.gamma < 1.0:
            raise ValueError("gamma must lie in [0, 1)")
        for (s, a), brs in self.branches.items():
            total = sum(p for p, _, _ in brs)
            if not math.isclose(total, 1.0, abs_tol=1e-12):
                raise ValueError(f"branch probabilities for ({s},{a}) sum to {total}")

    @property
    def max_abs_reward(self) -> float:
        return max(abs(r) for brs in self.branches.values() for _, r, _ in brs)

    def sample_step(self, s: int, a: int, rng: np.random.Generator):
        brs = self.branches[(s, a)]
        probs = np.array([p for p, _, _ in brs])
        idx = rng.choice(len(brs), p=probs)
        _, r, s_next = brs[idx]
        return r, s_next


class EnumerationBudgetError(RuntimeError):
    """Raised when exact enumeration would exceed the atom budget."""


def _merge(atoms: Dict[float, float], value: float, prob: float) -> None:
    key = round(value, 12)
    atoms[key] = atoms.get(key, 0.0) + prob


def oracle_return_distribution(
    mdp: OracleMdp,
    policy_table: np.ndarray,
    s: int,
    a: int,
    horizon: int,
    alpha: float = 0.0,
    node_budget: int = 2_000_000,
) -> Tuple[np.ndarray, np.ndarray]:
    """Exact (truncated-horizon) distribution of the discounted return from (s, a).

    Enumerates every trajectory branch under the tabular policy, merging
    equal return values, and returns (values, probabilities) sorted by
    value. With alpha > 0, each post-first-step action contributes an
    entropy bonus of -alpha * log pi(a|s) discounted like its reward.
    Raises EnumerationBudgetError when the atom count would exceed
    node_budget; shrink the horizon in that case.
    """
    if horizon < 1:
        raise ValueError("horizon must be >= 1")
    policy_table = np.asarray(policy_table, dtype=np.float64)
    if policy_table.shape != (mdp.n_states, mdp.n_actions):
        raise ValueError("policy table must be (n_states, n_actions)")
    if not np.allclose(policy_table.sum(axis=1), 1.0, atol=1e-12):
        raise ValueError("policy rows must sum to 1")

    gamma = mdp.gamma
    # future[k][state] = distribution of sum_{j<k} gamma^j (r_j - alpha log pi),
    # actions drawn from the policy, starting from `state`.
    future: List[Dict[int, Dict[float, float]]] = [
        {st: {0.0: 1.0} for st in range(mdp.n_states)}
    ]
    for k in range(1, horizon):
        level: Dict[int, Dict[float, float]] = {}
        for st in range(mdp.n_states):
            atoms: Dict[float, float] = {}
            for act in range(mdp.n_actions):
                p_act = policy_table[st, act]
                if p_act == 0.0:
                    continue
                bonus = -alpha * math.log(p_act) if alpha > 0 else 0.0
                for p_br, r, s_next in mdp.branches[(st, act)]:
                    head = bonus + r
                    if s_next == TERMINAL:
                        _merge(atoms, head, p_act * p_br)
                    else:
                        for v, pv in future[k - 1][s_next].items():
                            _merge(atoms, head + gamma * v, p_act * p_br * pv)
            if len(atoms) > node_budget:
                raise EnumerationBudgetError(
                    f"enumeration exceeded {node_budget} atoms at depth {k}; "
                    "use a smaller horizon"
                )
            level[st] = atoms
        future.append(level)

    result: Dict[float, float] = {}
    for p_br, r, s_next in mdp.branches[(s, a)]:
        if s_next == TERMINAL:
            _merge(result, r, p_br)
        else:
            for v, pv in future[horizon - 1][s_next].items():
                _merge(result, r + gamma * v, p_br * pv)
    values = np.array(sorted(result))
    probs = np.array([result[v] for v in values])
    return values, probs


def two_state_mdp(gamma: float = 0.5) -> Tuple[OracleMdp, np.ndarray]:
    """The reference 2-state MDP with +/-1 rewards plus its tabular policy.

    All rewards live on {-1, +1} so truncated returns share a small value
    grid; termination keeps episodes short. Used as the verification target
    for distributional value learning.
    """
    branches = {
        (0, 0): [(0.35, 1.0, 1), (0.35, -1.0, 1), (0.15, 1.0, 0), (0.15, -1.0, 0)],
        (0, 1): [(0.8, 1.0, 1), (0.2, -1.0, 1)],
        (1, 0): [(0.25, 1.0, 1), (0.25, -1.0, 1), (0.25, 1.0, TERMINAL), (0.25, -1.0, TERMINAL)],
        (1, 1): [(0.21, 1.0, 0), (0.49, -1.0, 0), (0.09, 1.0, TERMINAL), (0.21, -1.0, TERMINAL)],
    }
    mdp = OracleMdp(n_states=2, n_actions=2, branches=branches, gamma=gamma)
    policy = np.array([[0.6, 0.4], [0.5, 0.5]])
    return mdp, policy
