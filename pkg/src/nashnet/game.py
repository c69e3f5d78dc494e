"""Turn-based deterministic general-sum Markov games and the Garnet generator."""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np


@dataclass(frozen=True)
class GarnetSpec:
    n_players: int = 5
    n_states: int = 100
    n_actions: int = 5
    sigma_next: float = 1.0
    sigma_noise: float = 0.05
    sparsity: float = 0.5
    gamma: float = 0.9
    seed: int = 0

    def __post_init__(self):
        if self.n_players < 1:
            raise ValueError(f"n_players must be >= 1, got {self.n_players}")
        if self.n_states < 2:
            raise ValueError(f"n_states must be >= 2, got {self.n_states}")
        if self.n_actions < 1:
            raise ValueError(f"n_actions must be >= 1, got {self.n_actions}")
        if not 0.0 <= self.gamma < 1.0:
            raise ValueError(f"gamma must lie in [0, 1), got {self.gamma}")
        if self.sigma_next < 0 or self.sigma_noise < 0:
            raise ValueError("standard deviations must be non-negative")
        if not 0.0 <= self.sparsity <= 1.0:
            raise ValueError(f"sparsity must lie in [0, 1], got {self.sparsity}")


@dataclass(frozen=True, eq=False)
class TurnBasedGarnet:
    """A turn-based game with deterministic transitions.

    ``controller[s]`` is the only player acting in ``s``; ``next_state[s, a]``
    and ``reward[i, s, a]`` are indexed by that player's action.
    """

    spec: GarnetSpec
    controller: np.ndarray
    next_state: np.ndarray
    reward: np.ndarray
    critical_state: np.ndarray
    _fingerprint: str = field(default="", repr=False, compare=False)

    def __post_init__(self):
        S, A, N = self.spec.n_states, self.spec.n_actions, self.spec.n_players
        controller = np.asarray(self.controller, dtype=np.int64)
        next_state = np.asarray(self.next_state, dtype=np.int64)
        reward = np.asarray(self.reward, dtype=np.float64)
        critical = np.asarray(self.critical_state, dtype=np.int64)
        if controller.shape != (S,) or next_state.shape != (S, A):
            raise ValueError("controller/next_state shapes do not match the GarnetSpec")
        if reward.shape != (N, S, A) or critical.shape != (N,):
            raise ValueError("reward/critical_state shapes do not match the GarnetSpec")
        if controller.min() < 0 or controller.max() >= N:
            raise ValueError("controller entries out of range")
        if next_state.min() < 0 or next_state.max() >= S:
            raise ValueError("next_state entries out of range")
        if not np.all(np.isfinite(reward)):
            raise ValueError("rewards must be finite")
        for arr in (controller, next_state, reward, critical):
            arr.setflags(write=False)
        object.__setattr__(self, "controller", controller)
        object.__setattr__(self, "next_state", next_state)
        object.__setattr__(self, "reward", reward)
        object.__setattr__(self, "critical_state", critical)

    @property
    def n_players(self) -> int:
        return self.spec.n_players

    @property
    def n_states(self) -> int:
        return self.spec.n_states

    @property
    def n_actions(self) -> int:
        return self.spec.n_actions

    @property
    def gamma(self) -> float:
        return self.spec.gamma

    def with_gamma(self, gamma: float) -> "TurnBasedGarnet":
        spec = GarnetSpec(**{**asdict(self.spec), "gamma": gamma})
        return TurnBasedGarnet(spec, self.controller, self.next_state, self.reward, self.critical_state)

    def with_reward(self, reward: np.ndarray) -> "TurnBasedGarnet":
        return TurnBasedGarnet(self.spec, self.controller, self.next_state, reward, self.critical_state)

    def transition_matrix(self) -> np.ndarray:
        """Dense kernel ``p[s, a, s']`` (0/1 entries)."""
        S, A = self.n_states, self.n_actions
        p = np.zeros((S, A, S))
        p[np.arange(S)[:, None], np.arange(A)[None, :], self.next_state] = 1.0
        return p

    def to_dict(self) -> dict:
        return {
            "spec": asdict(self.spec),
            "controller": self.controller.tolist(),
            "next_state": self.next_state.tolist(),
            "reward": self.reward.tolist(),
            "critical_state": self.critical_state.tolist(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "TurnBasedGarnet":
        return cls(
            spec=GarnetSpec(**d["spec"]),
            controller=np.array(d["controller"], dtype=np.int64),
            next_state=np.array(d["next_state"], dtype=np.int64),
            reward=np.array(d["reward"], dtype=np.float64),
            critical_state=np.array(d["critical_state"], dtype=np.int64),
        )

    def fingerprint(self) -> str:
        if not self._fingerprint:
            blob = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
            object.__setattr__(self, "_fingerprint", hashlib.sha256(blob.encode()).hexdigest()[:16])
        return self._fingerprint

    def save(self, path: str | Path) -> None:
        # json renders floats with repr(), which round-trips IEEE-754 doubles exactly
        Path(path).write_text(json.dumps(self.to_dict()))

    @classmethod
    def load(cls, path: str | Path) -> "TurnBasedGarnet":
        return cls.from_dict(json.loads(Path(path).read_text()))


def circular_distance(a, b, n_states: int):
    d = np.abs(np.asarray(a) - np.asarray(b))
    return np.minimum(d, n_states - d)


def base_reward(game: TurnBasedGarnet, i: int, s: int) -> float:
    """Noise-free reward of player ``i`` in state ``s``: 1 at the critical
    state, decreasing linearly with circular index distance."""
    n = game.n_states
    d = circular_distance(s, game.critical_state[i], n)
    return float(1.0 - 2.0 * d / n)


def _base_reward_table(critical_state: np.ndarray, n_states: int) -> np.ndarray:
    s = np.arange(n_states)
    d = circular_distance(s[None, :], critical_state[:, None], n_states)
    return 1.0 - 2.0 * d / n_states


def generate_garnet(spec: GarnetSpec) -> TurnBasedGarnet:
    rng = np.random.default_rng(spec.seed)
    N, S, A = spec.n_players, spec.n_states, spec.n_actions

    controller = rng.integers(0, N, size=S)
    critical = rng.integers(0, S, size=N)

    offsets = np.rint(rng.normal(0.0, spec.sigma_next, size=(S, A))).astype(np.int64)
    next_state = (np.arange(S)[:, None] + offsets) % S

    base = _base_reward_table(critical, S)
    reward = np.repeat(base[:, :, None], A, axis=2)
    reward = reward + rng.normal(0.0, spec.sigma_noise, size=(N, S, A))
    keep = rng.random((N, S, A)) >= spec.sparsity
    reward = np.where(keep, reward, 0.0)

    return TurnBasedGarnet(spec, controller, next_state, reward, critical)


def two_state_game(gamma: float = 0.5) -> TurnBasedGarnet:
    """Two players, two states, two actions (a=0, b=1).

    Player 0 controls state 0: ``a`` loops with rewards (1, 0), ``b`` moves to
    state 1 with nothing. Player 1 controls state 1: ``b`` loops with rewards
    (0, 1), ``a`` moves to state 0 with nothing. Playing (a@0, b@1) is a Nash
    equilibrium.
    """
    spec = GarnetSpec(n_players=2, n_states=2, n_actions=2, sigma_next=0.0,
                      sigma_noise=0.0, sparsity=0.0, gamma=gamma, seed=0)
    controller = np.array([0, 1])
    next_state = np.array([[0, 1], [0, 1]])
    reward = np.zeros((2, 2, 2))
    reward[0, 0, 0] = 1.0
    reward[1, 1, 1] = 1.0
    return TurnBasedGarnet(spec, controller, next_state, reward, np.array([0, 1]))


def encoding_size(n_states: int, mode: str = "one_hot") -> int:
    if mode == "one_hot":
        return n_states
    if mode == "compact":
        return max(1, math.ceil(math.log2(n_states)))
    raise ValueError(f"unknown encoding mode {mode!r}")


def encode_state(s: int, n_states: int, mode: str = "one_hot") -> np.ndarray:
    if not 0 <= s < n_states:
        raise ValueError(f"state {s} out of range [0, {n_states})")
    return encode_states(np.array([s]), n_states, mode)[0]


def encode_states(states: np.ndarray, n_states: int, mode: str = "one_hot") -> np.ndarray:
    """Row-wise encodings for an array of state indices."""
    states = np.asarray(states, dtype=np.int64)
    width = encoding_size(n_states, mode)
    if mode == "one_hot":
        out = np.zeros((len(states), width))
        out[np.arange(len(states)), states] = 1.0
        return out
    bits = (states[:, None] >> np.arange(width)[None, :]) & 1
    return bits.astype(np.float64)
