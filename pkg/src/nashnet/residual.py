"""Q-function Bellman backups and the empirical batch residual.

Turn-based Q tables are indexed ``q[i, s, a]`` where ``a`` is the action of
the player controlling ``s``. The batch quantities below are what a learner
needs to compute for each sample ``j``:

    q_sa[j, i]       Q^i(s_j, a_j)
    q_next[j, i, b]  Q^i(s'_j, b)
    pi_next[j, b]    strategy of the controller of s'_j at s'_j
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .game import TurnBasedGarnet


def expected_q_turnbased(q_row: np.ndarray, pi_row: np.ndarray) -> float:
    return float(np.dot(pi_row, q_row))


def expected_q_joint(q: np.ndarray, strategies, exclude: int | None = None):
    """Expectation of a joint-action Q slice ``q[b1, ..., bN]`` under
    independent per-player strategies ``strategies[j][bj]``.

    With ``exclude=i`` player ``i`` is left free and a vector over its actions
    is returned.
    """
    q = np.asarray(q, dtype=np.float64)
    strategies = [np.asarray(s, dtype=np.float64) for s in strategies]
    if q.ndim != len(strategies):
        raise ValueError(f"Q has {q.ndim} action axes but {len(strategies)} strategies were given")
    for axis, s in enumerate(strategies):
        if s.shape != (q.shape[axis],):
            raise ValueError(f"strategy {axis} has shape {s.shape}, expected ({q.shape[axis]},)")
    if exclude is not None and not 0 <= exclude < q.ndim:
        raise ValueError(f"exclude={exclude} out of range")
    out = q
    # contract from the last axis so remaining axis indices stay valid
    for axis in reversed(range(q.ndim)):
        if axis == exclude:
            continue
        out = np.tensordot(out, strategies[axis], axes=([axis], [0]))
    return out if exclude is not None else float(out)


def backup_star(game: TurnBasedGarnet, s_next: int, q_row: np.ndarray, pi_row: np.ndarray, i: int) -> float:
    """Greedy continuation value for player ``i`` at ``s_next``."""
    if game.controller[s_next] == i:
        return float(np.max(q_row))
    return expected_q_turnbased(q_row, pi_row)


def batch_backups(q_next: np.ndarray, pi_next: np.ndarray, c_next: np.ndarray):
    """Expected and greedy next-state values, both ``[k, N]``.

    Also returns the argmax index used by the greedy branch.
    """
    expect = np.einsum("kib,kb->ki", q_next, pi_next)
    arg = np.argmax(q_next, axis=2)
    qmax = np.take_along_axis(q_next, arg[:, :, None], axis=2)[:, :, 0]
    own = c_next[:, None] == np.arange(q_next.shape[1])[None, :]
    star = np.where(own, qmax, expect)
    return expect, star, arg, own


@dataclass
class ResidualTerms:
    """Per-sample, per-player residuals (signed) and their p-th powers."""

    d_star: np.ndarray
    d_joint: np.ndarray
    p: float

    @property
    def star(self) -> np.ndarray:
        return np.abs(self.d_star) ** self.p

    @property
    def joint(self) -> np.ndarray:
        return np.abs(self.d_joint) ** self.p


@dataclass
class LossResult:
    total: float
    terms: ResidualTerms

    @property
    def mean(self) -> float:
        return self.total / self.terms.d_star.shape[0]


def residual_terms(q_sa, q_next, pi_next, c_next, rewards, gamma: float, p: float = 2.0) -> ResidualTerms:
    expect, star, _, _ = batch_backups(q_next, pi_next, c_next)
    d_star = rewards + gamma * star - q_sa
    d_joint = rewards + gamma * expect - q_sa
    return ResidualTerms(d_star, d_joint, p)


def weighted_sum(terms: ResidualTerms, rho: np.ndarray) -> float:
    per_sample = (terms.star + terms.joint) @ rho
    # fixed left-to-right reduction order
    return float(np.add.reduce(per_sample))


def gather_tables(batch, q: np.ndarray, pi: np.ndarray):
    """Pull the per-sample quantities out of tabular Q and strategy arrays."""
    q_sa = q[:, batch.s, batch.a].T
    q_next = np.transpose(q[:, batch.s_next, :], (1, 0, 2))
    pi_next = pi[batch.s_next]
    return q_sa, q_next, pi_next


def default_rho(n_players: int) -> np.ndarray:
    return np.full(n_players, 1.0 / n_players)


def empirical_loss(batch, q: np.ndarray, pi: np.ndarray, gamma: float,
                   rho: np.ndarray | None = None, p: float = 2.0) -> LossResult:
    """Raw (unnormalised) sum over samples of both weighted residuals.

    ``batch`` is anything with ``s, a, rewards, s_next, c_next`` arrays, such as
    :class:`nashnet.batch.Dataset`.
    """
    if len(batch.s) == 0:
        raise ValueError("empty batch")
    n_players = q.shape[0]
    rho = default_rho(n_players) if rho is None else np.asarray(rho, dtype=np.float64)
    q_sa, q_next, pi_next = gather_tables(batch, q, pi)
    terms = residual_terms(q_sa, q_next, pi_next, batch.c_next, batch.rewards, gamma, p)
    return LossResult(weighted_sum(terms, rho), terms)


def model_based_backup(game: TurnBasedGarnet, s: int, a: int, q: np.ndarray, pi: np.ndarray,
                       i: int, mode: str = "joint") -> float:
    """Known-kernel backup ``r + gamma sum_s' p(s'|s,a) V(s')``, where V is the
    expectation of ``q[i, s']`` under ``pi`` (``joint``) or the greedy value
    (``star``)."""
    kernel = game.transition_matrix()[s, a]
    if mode == "joint":
        cont = np.einsum("sb,sb->s", pi, q[i])
    elif mode == "star":
        cont = np.where(game.controller == i, q[i].max(axis=1), np.einsum("sb,sb->s", pi, q[i]))
    else:
        raise ValueError(f"unknown mode {mode!r}")
    return float(game.reward[i, s, a] + game.gamma * kernel @ cont)


def q_from_values(game: TurnBasedGarnet, v: np.ndarray) -> np.ndarray:
    """``Q^i(s, a) = r^i(s, a) + gamma v^i(next(s, a))`` for ``v`` of shape ``[N, S]``."""
    return game.reward + game.gamma * v[:, game.next_state]
