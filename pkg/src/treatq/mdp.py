"""Discrete MDP estimation and Bellman solvers over the tagged dataset.

States are cluster ids plus two absorbing ids (discharge, death) appended
after the clusters. Action values exist only for observed (state, action)
pairs: pairs never taken by clinicians are hard-masked out of both the
update and the max, so the solver cannot extrapolate into unsupported
actions. Solving is exact value iteration to a sup-norm tolerance; for a
discount below 1 the update is a contraction with guaranteed convergence
to the unique fixed point.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .actions import N_ACTIONS, ActionGrid, discretize_doses
from .data import Dataset
from .errors import ConvergenceError, DataError
from .states import FeatureTable, StateModel, assign_states, feature_table


@dataclass(frozen=True, eq=False)
class TaggedDataset:
    """Per-transition (s, a, s', r) arrays in canonical row order, plus the
    episode bookkeeping needed for resampling and reports."""

    s: np.ndarray
    a: np.ndarray
    s_next: np.ndarray
    r: np.ndarray
    episode_slices: tuple[tuple[int, int], ...]
    patient_ids: tuple[str, ...]
    labels: np.ndarray
    fluid: np.ndarray
    vis: np.ndarray
    died: np.ndarray
    n_states: int
    n_actions: int

    @property
    def n_rows(self) -> int:
        return len(self.s)

    @property
    def discharge_state(self) -> int:
        return self.n_states

    @property
    def death_state(self) -> int:
        return self.n_states + 1

    def episode_rows(self, i: int) -> slice:
        lo, hi = self.episode_slices[i]
        return slice(lo, hi)


def tag_dataset(
    dataset: Dataset,
    state_model: StateModel,
    grid: ActionGrid,
    rewards: Sequence[Sequence[float]],
    table: FeatureTable | None = None,
) -> TaggedDataset:
    """Map every transition to (state, action, next state, reward).

    `rewards` is one list per episode, aligned with the canonical sorted
    patient order. The final transition of an episode points at the
    discharge/death absorbing id.
    """
    if table is None:
        table = feature_table(dataset)
    if len(rewards) != len(table.episode_slices):
        raise DataError(f"expected {len(table.episode_slices)} reward lists, got {len(rewards)}")

    states = assign_states(state_model, table.x)
    actions = discretize_doses(grid, table.fluid, table.vis)
    n = table.n_rows
    s_next = np.empty(n, dtype=int)
    r = np.empty(n, dtype=float)
    for i, (lo, hi) in enumerate(table.episode_slices):
        ep_rewards = np.asarray(rewards[i], dtype=float)
        if len(ep_rewards) != hi - lo:
            raise DataError(
                f"episode {table.patient_ids[i]}: {hi - lo} transitions but {len(ep_rewards)} rewards"
            )
        r[lo:hi] = ep_rewards
        s_next[lo : hi - 1] = states[lo + 1 : hi]
        s_next[hi - 1] = (
            state_model.death_state if table.died[lo] else state_model.discharge_state
        )
    return TaggedDataset(
        s=states,
        a=actions,
        s_next=s_next,
        r=r,
        episode_slices=table.episode_slices,
        patient_ids=table.patient_ids,
        labels=table.labels,
        fluid=table.fluid,
        vis=table.vis,
        died=table.died,
        n_states=state_model.n_states,
        n_actions=N_ACTIONS,
    )


@dataclass(frozen=True, eq=False)
class MdpEstimate:
    """Count-based maximum-likelihood MDP: p(s'|s,a) and mean rewards."""

    counts: np.ndarray  # (S, A, S + 2)
    probs: np.ndarray  # rows normalized where observed
    r_mean: np.ndarray  # mean observed reward per (s, a, s')
    n_sa: np.ndarray  # (S, A)
    observed: np.ndarray  # (S, A) bool

    @property
    def n_states(self) -> int:
        return self.counts.shape[0]

    @property
    def n_actions(self) -> int:
        return self.counts.shape[1]

    def expected_reward(self) -> np.ndarray:
        return np.einsum("sat,sat->sa", self.probs, self.r_mean)


def estimate_mdp(
    tagged: TaggedDataset | tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray],
    n_states: int | None = None,
    n_actions: int | None = None,
) -> MdpEstimate:
    if isinstance(tagged, TaggedDataset):
        s, a, s_next, r = tagged.s, tagged.a, tagged.s_next, tagged.r
        n_states = tagged.n_states
        n_actions = tagged.n_actions
    else:
        s, a, s_next, r = tagged
        if n_states is None or n_actions is None:
            raise DataError("n_states and n_actions required with raw arrays")
    if len(s) == 0:
        raise DataError("cannot estimate an MDP from zero transitions")

    shape = (n_states, n_actions, n_states + 2)
    counts = np.zeros(shape)
    r_sum = np.zeros(shape)
    np.add.at(counts, (s, a, s_next), 1.0)
    np.add.at(r_sum, (s, a, s_next), r)

    n_sa = counts.sum(axis=2)
    observed = n_sa > 0
    with np.errstate(invalid="ignore", divide="ignore"):
        probs = np.where(counts > 0, counts / np.maximum(n_sa, 1.0)[:, :, None], 0.0)
        r_mean = np.where(counts > 0, r_sum / np.maximum(counts, 1.0), 0.0)
    return MdpEstimate(counts=counts, probs=probs, r_mean=r_mean, n_sa=n_sa, observed=observed)


@dataclass(frozen=True)
class SolverConfig:
    gamma: float = 0.99
    tol: float = 1e-9
    max_iter: int = 100_000

    def __post_init__(self):
        if not 0.0 < self.gamma <= 1.0:
            raise DataError(f"gamma must be in (0,1], got {self.gamma}")
        if self.tol <= 0:
            raise DataError("tol must be positive")


@dataclass(frozen=True, eq=False)
class QTable:
    """Action values on observed pairs; NaN marks masked (unobserved) pairs."""

    q: np.ndarray  # (S, A) with NaN where unobserved
    observed: np.ndarray
    gamma: float
    residual: float
    residuals: tuple[float, ...]  # sup-norm residual per iteration

    @property
    def n_states(self) -> int:
        return self.q.shape[0]

    @property
    def n_actions(self) -> int:
        return self.q.shape[1]

    def state_values(self) -> np.ndarray:
        """max_a q(s, a) over observed actions; 0 for unvisited states."""
        masked = np.where(self.observed, self.q, -np.inf)
        return np.where(self.observed.any(axis=1), masked.max(axis=1), 0.0)

    def to_dict(self) -> dict:
        dense = [
            [None if not self.observed[s, a] else float(self.q[s, a]) for a in range(self.n_actions)]
            for s in range(self.n_states)
        ]
        return {
            "n_states": self.n_states,
            "n_actions": self.n_actions,
            "gamma": self.gamma,
            "residual": self.residual,
            "q": dense,
        }

    @classmethod
    def from_dict(cls, obj: dict) -> "QTable":
        raw = obj["q"]
        q = np.array([[np.nan if v is None else v for v in row] for row in raw], dtype=float)
        return cls(
            q=q,
            observed=~np.isnan(q),
            gamma=obj["gamma"],
            residual=obj["residual"],
            residuals=(),
        )


def _iterate(mdp: MdpEstimate, cfg: SolverConfig, next_value) -> QTable:
    expected_r = mdp.expected_reward()
    p_live = mdp.probs[:, :, : mdp.n_states]
    observed = mdp.observed
    q = np.zeros_like(expected_r)
    residuals: list[float] = []
    for _ in range(cfg.max_iter):
        v = next_value(q)
        q_new = np.where(observed, expected_r + cfg.gamma * (p_live @ v), 0.0)
        residual = float(np.max(np.abs(q_new - q))) if observed.any() else 0.0
        residuals.append(residual)
        q = q_new
        if residual < cfg.tol:
            q_out = np.where(observed, q, np.nan)
            return QTable(
                q=q_out,
                observed=observed,
                gamma=cfg.gamma,
                residual=residual,
                residuals=tuple(residuals),
            )
    raise ConvergenceError(
        f"no convergence after {cfg.max_iter} iterations (residual {residuals[-1]:.3e})",
        residual=residuals[-1],
    )


def solve_q_optimal(mdp: MdpEstimate, cfg: SolverConfig = SolverConfig()) -> QTable:
    """Fixed point of the Bellman optimality operator restricted to observed
    actions; absorbing states contribute zero future value."""
    observed = mdp.observed
    any_obs = observed.any(axis=1)

    def next_value(q):
        masked = np.where(observed, q, -np.inf)
        return np.where(any_obs, masked.max(axis=1), 0.0)

    return _iterate(mdp, cfg, next_value)


class PolicyKind(enum.Enum):
    GREEDY = "greedy"
    BEHAVIOR = "behavior"
    RANDOM = "random"
    ZERO_INTERVENTION = "zero"
    EXPLICIT = "explicit"


@dataclass(frozen=True, eq=False)
class PolicySpec:
    """Per-state action distribution. Rows of unvisited states are all zero."""

    kind: PolicyKind
    probs: np.ndarray  # (S, A)

    def __post_init__(self):
        row_sums = self.probs.sum(axis=1)
        live = row_sums > 0
        if np.any(np.abs(row_sums[live] - 1.0) > 1e-9):
            raise DataError("policy rows must sum to 1 on supported states")


def solve_q_policy(mdp: MdpEstimate, policy: PolicySpec, cfg: SolverConfig = SolverConfig()) -> QTable:
    """Evaluate a fixed policy: expectation over pi replaces the max."""
    if np.any(policy.probs[~mdp.observed] > 0):
        raise DataError("policy puts mass on unobserved (state, action) pairs")

    def next_value(q):
        return np.einsum("sa,sa->s", policy.probs, np.where(mdp.observed, q, 0.0))

    return _iterate(mdp, cfg, next_value)


def greedy_policy(q_table: QTable) -> PolicySpec:
    """Deterministic argmax over observed actions; ties -> lower action id
    (the less aggressive intervention under the vaso-major encoding)."""
    masked = np.where(q_table.observed, q_table.q, -np.inf)
    probs = np.zeros_like(q_table.q)
    visited = q_table.observed.any(axis=1)
    best = np.argmax(masked, axis=1)
    probs[np.nonzero(visited)[0], best[visited]] = 1.0
    return PolicySpec(kind=PolicyKind.GREEDY, probs=probs)


def greedy_actions(q_table: QTable) -> np.ndarray:
    """Argmax action per state; -1 for unvisited states."""
    masked = np.where(q_table.observed, q_table.q, -np.inf)
    best = np.argmax(masked, axis=1)
    return np.where(q_table.observed.any(axis=1), best, -1)


def behavior_policy(
    tagged: TaggedDataset | tuple[np.ndarray, np.ndarray],
    n_states: int | None = None,
    n_actions: int | None = None,
) -> PolicySpec:
    """Empirical clinician policy: pi(a|s) = N(s,a) / N(s)."""
    if isinstance(tagged, TaggedDataset):
        s, a = tagged.s, tagged.a
        n_states, n_actions = tagged.n_states, tagged.n_actions
    else:
        s, a = tagged
        if n_states is None or n_actions is None:
            raise DataError("n_states and n_actions required with raw arrays")
    if len(s) == 0:
        raise DataError("empty tagged dataset")
    counts = np.zeros((n_states, n_actions))
    np.add.at(counts, (s, a), 1.0)
    totals = counts.sum(axis=1, keepdims=True)
    probs = np.where(totals > 0, counts / np.maximum(totals, 1.0), 0.0)
    return PolicySpec(kind=PolicyKind.BEHAVIOR, probs=probs)


def random_policy(mdp: MdpEstimate) -> PolicySpec:
    """Uniform over the observed actions of each visited state."""
    counts = mdp.observed.sum(axis=1, keepdims=True)
    probs = np.where(counts > 0, mdp.observed / np.maximum(counts, 1.0), 0.0)
    return PolicySpec(kind=PolicyKind.RANDOM, probs=probs)


def zero_intervention_policy(mdp: MdpEstimate) -> PolicySpec:
    """Mass 1 on action 0 (lowest fluids, no vasopressors). Where action 0
    was never observed the policy falls back to the lowest observed action
    id, the least aggressive evaluable option under the masking rule."""
    probs = np.zeros((mdp.n_states, mdp.n_actions))
    for s in np.nonzero(mdp.observed.any(axis=1))[0]:
        lowest = int(np.argmax(mdp.observed[s]))
        probs[s, lowest] = 1.0
    return PolicySpec(kind=PolicyKind.ZERO_INTERVENTION, probs=probs)
