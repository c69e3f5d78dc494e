import itertools

import numpy as np
import pytest

from nashnet.exact_eval import deterministic_strategy, joint_value
from nashnet.game import GarnetSpec, TurnBasedGarnet, generate_garnet, two_state_game


@pytest.fixture
def g2():
    return two_state_game(gamma=0.5)


@pytest.fixture
def g2_nash(g2):
    # (a@0, b@1)
    return deterministic_strategy(g2, [0, 1])


def random_game(rng, n_players=2, n_states=5, n_actions=2, gamma=0.9) -> TurnBasedGarnet:
    """Unstructured random turn-based game (arbitrary transitions and rewards)."""
    spec = GarnetSpec(n_players=n_players, n_states=n_states, n_actions=n_actions,
                      gamma=gamma, seed=0)
    return TurnBasedGarnet(
        spec,
        controller=rng.integers(0, n_players, n_states),
        next_state=rng.integers(0, n_states, (n_states, n_actions)),
        reward=rng.normal(size=(n_players, n_states, n_actions)),
        critical_state=rng.integers(0, n_states, n_players),
    )


def random_strategy(rng, n_states, n_actions):
    w = rng.exponential(size=(n_states, n_actions))
    return w / w.sum(axis=1, keepdims=True)


def enumerate_nash(game: TurnBasedGarnet, tol=1e-9):
    """All deterministic joint strategies that are Nash, by brute force over
    every unilateral deterministic deviation."""
    found = []
    S, A = game.n_states, game.n_actions
    for acts in itertools.product(range(A), repeat=S):
        pi = deterministic_strategy(game, acts)
        ok = True
        for i in range(game.n_players):
            v = joint_value(game, pi, i)
            own = np.flatnonzero(game.controller == i)
            for dev in itertools.product(range(A), repeat=len(own)):
                alt = list(acts)
                for s, b in zip(own, dev):
                    alt[s] = b
                if np.any(joint_value(game, deterministic_strategy(game, alt), i) > v + tol):
                    ok = False
                    break
            if not ok:
                break
        if ok:
            found.append(pi)
    return found


def value_iteration(game: TurnBasedGarnet, tol=1e-13, max_iter=100_000):
    """Single-player optimal value by plain value iteration."""
    v = np.zeros(game.n_states)
    for _ in range(max_iter):
        new = (game.reward[0] + game.gamma * v[game.next_state]).max(axis=1)
        if np.max(np.abs(new - v)) < tol:
            return new
        v = new
    raise RuntimeError("value iteration did not converge")


@pytest.fixture
def small_garnet():
    return generate_garnet(GarnetSpec(n_players=2, n_states=12, n_actions=3, seed=11))


@pytest.fixture
def acceptance(request):
    """Record one result line per acceptance criterion; printed in the terminal summary."""
    lines = request.config.__dict__.setdefault("_acceptance_lines", [])

    def record(criterion: str, passed: bool, detail: str) -> None:
        line = f"criterion {criterion}: {'PASS' if passed else 'FAIL'} ({detail})"
        lines.append(line)
        print(line)

    return record


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    lines = config.__dict__.get("_acceptance_lines")
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in lines:
            terminalreporter.write_line(line)
