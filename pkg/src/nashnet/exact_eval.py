"""Exact evaluation of joint strategies on a known turn-based game.

A joint strategy is an array ``pi[s, a]``: the distribution over the actions
of the player controlling ``s``. Player ``i``'s own strategy is the subset of
rows where ``controller == i``.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass

import numpy as np
import scipy.linalg

from .game import TurnBasedGarnet


def check_strategy(game: TurnBasedGarnet, pi: np.ndarray, atol: float = 1e-9) -> np.ndarray:
    pi = np.asarray(pi, dtype=np.float64)
    if pi.shape != (game.n_states, game.n_actions):
        raise ValueError(f"strategy shape {pi.shape} != {(game.n_states, game.n_actions)}")
    if np.any(pi < -atol) or np.any(np.abs(pi.sum(axis=1) - 1.0) > atol):
        raise ValueError("strategy rows must be probability vectors")
    return pi


def uniform_strategy(game: TurnBasedGarnet) -> np.ndarray:
    return np.full((game.n_states, game.n_actions), 1.0 / game.n_actions)


def deterministic_strategy(game: TurnBasedGarnet, actions) -> np.ndarray:
    pi = np.zeros((game.n_states, game.n_actions))
    pi[np.arange(game.n_states), np.asarray(actions)] = 1.0
    return pi


def induced_kernel(game: TurnBasedGarnet, pi: np.ndarray) -> np.ndarray:
    """State-to-state kernel ``P[s, s'] = sum_a pi(a|s) [next(s, a) = s']``."""
    pi = check_strategy(game, pi)
    S = game.n_states
    P = np.zeros((S, S))
    np.add.at(P, (np.repeat(np.arange(S), game.n_actions), game.next_state.ravel()), pi.ravel())
    return P


def induced_reward(game: TurnBasedGarnet, pi: np.ndarray, i: int) -> np.ndarray:
    pi = check_strategy(game, pi)
    return np.einsum("sa,sa->s", pi, game.reward[i])


def _solve_value(P: np.ndarray, r: np.ndarray, gamma: float) -> np.ndarray:
    A = np.eye(len(r)) - gamma * P
    v = scipy.linalg.solve(A, r)
    res = np.max(np.abs(A @ v - r), initial=0.0)
    if not np.isfinite(res) or res > 1e-9 * max(1.0, np.max(np.abs(r), initial=0.0)):
        raise RuntimeError(f"linear solve failed, residual {res:.3e}")
    return v


def joint_value(game: TurnBasedGarnet, pi: np.ndarray, i: int) -> np.ndarray:
    """Value of the joint strategy for player ``i``: solves (I - gamma P) v = r."""
    return _solve_value(induced_kernel(game, pi), induced_reward(game, pi, i), game.gamma)


def joint_values(game: TurnBasedGarnet, pi: np.ndarray) -> np.ndarray:
    """All players at once, shape ``[n_players, n_states]``."""
    P = induced_kernel(game, pi)
    R = np.einsum("sa,isa->si", pi, game.reward)
    A = np.eye(game.n_states) - game.gamma * P
    V = scipy.linalg.solve(A, R)
    res = np.max(np.abs(A @ V - R), initial=0.0)
    if not np.isfinite(res) or res > 1e-9 * max(1.0, np.max(np.abs(R), initial=0.0)):
        raise RuntimeError(f"linear solve failed, residual {res:.3e}")
    return V.T


def _action_values(game: TurnBasedGarnet, v: np.ndarray, i: int) -> np.ndarray:
    """``r^i(s, a) + gamma v(next(s, a))`` for every state-action pair."""
    return game.reward[i] + game.gamma * v[game.next_state]


def best_response_value(game: TurnBasedGarnet, pi: np.ndarray, i: int,
                        max_iter: int | None = None) -> tuple[np.ndarray, np.ndarray]:
    """Optimal value of player ``i`` against the others' fixed strategies.

    Runs exact policy iteration on the MDP where player ``i`` picks actions at
    the states it controls and every other state is a chance node following
    ``pi``. Returns ``(v_star, pi_star)`` where ``pi_star`` equals ``pi``
    outside ``i``'s states and is deterministic on them.
    """
    pi = check_strategy(game, pi)
    own = game.controller == i
    own_idx = np.flatnonzero(own)
    if max_iter is None:
        # |deterministic policies| bounds the number of improvements
        max_iter = int(min(game.n_actions ** len(own_idx), 10**6)) + 1

    # warm start from the greediest action of the current strategy
    actions = np.argmax(pi[own_idx], axis=1)
    for _ in range(max_iter):
        pi_star = pi.copy()
        pi_star[own_idx] = 0.0
        pi_star[own_idx, actions] = 1.0
        v = joint_value(game, pi_star, i)
        if len(own_idx) == 0:
            return v, pi_star
        q = _action_values(game, v, i)[own_idx]
        current = q[np.arange(len(own_idx)), actions]
        best = np.argmax(q, axis=1)  # lowest index on ties
        improve = q[np.arange(len(own_idx)), best] > current + 1e-12 * max(1.0, np.max(np.abs(q)))
        if not improve.any():
            return v, pi_star
        actions = np.where(improve, best, actions)
    raise RuntimeError(f"policy iteration did not converge in {max_iter} iterations")


def brute_force_best_response(game: TurnBasedGarnet, pi: np.ndarray, i: int) -> np.ndarray:
    """Componentwise max of the joint value over every deterministic response.
    Exponential; only for tiny games."""
    pi = check_strategy(game, pi)
    own_idx = np.flatnonzero(game.controller == i)
    best = np.full(game.n_states, -np.inf)
    for acts in itertools.product(range(game.n_actions), repeat=len(own_idx)):
        cand = pi.copy()
        cand[own_idx] = 0.0
        cand[own_idx, list(acts)] = 1.0
        best = np.maximum(best, joint_value(game, cand, i))
    return best


def error_vs_best_response(game: TurnBasedGarnet, pi: np.ndarray) -> np.ndarray:
    """Per-player ``||v_pi - v_star|| / ||v_star||`` (2-norms over states).

    Players whose best-response value is identically zero get NaN.
    """
    V = joint_values(game, pi)
    out = np.empty(game.n_players)
    for i in range(game.n_players):
        v_star, _ = best_response_value(game, pi, i)
        denom = np.linalg.norm(v_star)
        out[i] = np.nan if denom == 0.0 else np.linalg.norm(V[i] - v_star) / denom
    return out


def apply_T_joint(game: TurnBasedGarnet, v: np.ndarray, pi: np.ndarray, i: int) -> np.ndarray:
    pi = check_strategy(game, pi)
    return np.einsum("sa,sa->s", pi, _action_values(game, np.asarray(v, dtype=np.float64), i))


def apply_T_star(game: TurnBasedGarnet, v: np.ndarray, pi: np.ndarray, i: int) -> np.ndarray:
    """Greedy backup for player ``i``: max over actions where ``i`` controls,
    expectation under ``pi`` elsewhere."""
    pi = check_strategy(game, pi)
    q = _action_values(game, np.asarray(v, dtype=np.float64), i)
    return np.where(game.controller == i, q.max(axis=1), np.einsum("sa,sa->s", pi, q))


@dataclass(frozen=True)
class MeasureSet:
    mu: np.ndarray
    nu: np.ndarray
    rho: np.ndarray
    p: float = 2.0

    def __post_init__(self):
        if self.p <= 1.0:
            raise ValueError("p must be > 1")
        for name in ("mu", "nu", "rho"):
            d = np.asarray(getattr(self, name), dtype=np.float64)
            if np.any(d < 0) or abs(d.sum() - 1.0) > 1e-9:
                raise ValueError(f"{name} must be a probability distribution")
            object.__setattr__(self, name, d)
        if np.any((self.mu > 0) & (self.nu <= 0)):
            raise ValueError("nu must be positive wherever mu has mass")

    @property
    def p_prime(self) -> float:
        return self.p / (self.p - 1.0)

    @classmethod
    def uniform(cls, game: TurnBasedGarnet, p: float = 2.0) -> "MeasureSet":
        S, N = game.n_states, game.n_players
        return cls(np.full(S, 1.0 / S), np.full(S, 1.0 / S), np.full(N, 1.0 / N), p)


def _pnorm_p(g: np.ndarray, weights: np.ndarray, p: float) -> float:
    """``sum_s w(s) |g(s)|^p``."""
    return float(np.sum(weights * np.abs(g) ** p))


def residual_norms(game: TurnBasedGarnet, v: np.ndarray, pi: np.ndarray, i: int,
                   weights: np.ndarray, p: float) -> tuple[float, float]:
    """Weighted p-th powers of the greedy and joint Bellman residuals."""
    star = _pnorm_p(apply_T_star(game, v, pi, i) - v, weights, p)
    joint = _pnorm_p(apply_T_joint(game, v, pi, i) - v, weights, p)
    return star, joint


def loss_value_space(game: TurnBasedGarnet, v: np.ndarray, pi: np.ndarray,
                     measures: MeasureSet) -> float:
    """Sum over players of rho(i) times both residual norms (``v`` is ``[N, S]``)."""
    v = np.asarray(v, dtype=np.float64)
    total = 0.0
    for i in range(game.n_players):
        star, joint = residual_norms(game, v[i], pi, i, measures.nu, measures.p)
        total += measures.rho[i] * (star + joint)
    return total


def concentrability(game: TurnBasedGarnet, pi: np.ndarray, mu: np.ndarray, nu: np.ndarray) -> float:
    """``max_s [mu^T (1 - gamma)(I - gamma P_pi)^-1](s) / nu(s)``; inf if nu
    vanishes where the discounted occupancy does not."""
    P = induced_kernel(game, pi)
    A = np.eye(game.n_states) - game.gamma * P
    occupancy = (1.0 - game.gamma) * scipy.linalg.solve(A.T, np.asarray(mu, dtype=np.float64))
    nu = np.asarray(nu, dtype=np.float64)
    support = occupancy > 1e-15
    if np.any(support & (nu <= 0)):
        return np.inf
    with np.errstate(divide="ignore", invalid="ignore"):
        ratio = np.where(nu > 0, occupancy / np.where(nu > 0, nu, 1.0), 0.0)
    return float(ratio.max())


@dataclass
class Lemma1Report:
    lhs: np.ndarray
    rhs: np.ndarray
    holds: bool
    infinite: np.ndarray

    def slack(self) -> np.ndarray:
        return self.rhs - self.lhs


def check_lemma1(game: TurnBasedGarnet, v: np.ndarray, pi: np.ndarray,
                 measures: MeasureSet, tol: float = 1e-9) -> Lemma1Report:
    """Compare the best-response gap with its residual-based upper bound, per player."""
    v = np.asarray(v, dtype=np.float64)
    p, pp, g = measures.p, measures.p_prime, game.gamma
    N = game.n_players
    lhs, rhs, inf = np.zeros(N), np.zeros(N), np.zeros(N, dtype=bool)
    for i in range(N):
        v_pi = joint_value(game, pi, i)
        v_star, pi_star = best_response_value(game, pi, i)
        lhs[i] = _pnorm_p(v_star - v_pi, measures.mu, p) ** (1.0 / p)
        c_star = concentrability(game, pi_star, measures.mu, measures.nu)
        c_pi = concentrability(game, pi, measures.mu, measures.nu)
        if not (np.isfinite(c_star) and np.isfinite(c_pi)):
            inf[i] = True
            rhs[i] = np.inf
            continue
        star, joint = residual_norms(game, v[i], pi, i, measures.nu, p)
        coef = (c_star ** (pp / p) + c_pi ** (pp / p)) ** (1.0 / pp)
        rhs[i] = coef * (star + joint) ** (1.0 / p) / (1.0 - g)
    return Lemma1Report(lhs, rhs, bool(np.all(lhs <= rhs + tol)), inf)


@dataclass
class EquivalenceReport:
    value_side: bool
    operator_side: bool

    @property
    def agree(self) -> bool:
        return self.value_side == self.operator_side


def definition_sides(game: TurnBasedGarnet, pi: np.ndarray, tol: float = 1e-8) -> EquivalenceReport:
    """Evaluate both characterisations of a Nash equilibrium independently.

    Value side: every player's joint value equals its best-response value.
    Operator side: the joint values are fixed points of both Bellman operators.
    """
    V = joint_values(game, pi)
    value_side = all(
        np.max(np.abs(V[i] - best_response_value(game, pi, i)[0])) <= tol
        for i in range(game.n_players)
    )
    operator_side = all(
        np.max(np.abs(apply_T_joint(game, V[i], pi, i) - V[i])) <= tol
        and np.max(np.abs(apply_T_star(game, V[i], pi, i) - V[i])) <= tol
        for i in range(game.n_players)
    )
    return EquivalenceReport(value_side, operator_side)


def check_definition_equivalence(game: TurnBasedGarnet, pi: np.ndarray, tol: float = 1e-8) -> bool:
    """Whether ``pi`` is a Nash equilibrium; raises if the two characterisations disagree."""
    report = definition_sides(game, pi, tol)
    if not report.agree:
        raise AssertionError(
            f"Nash characterisations disagree: value side {report.value_side}, "
            f"operator side {report.operator_side}")
    return report.value_side
