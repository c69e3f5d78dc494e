"""Batch datasets sampled from a game, with JSON-lines persistence."""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .game import TurnBasedGarnet

FORMAT_VERSION = 1


class DatasetFormatError(ValueError):
    pass


class FingerprintMismatch(RuntimeError):
    pass


@dataclass(frozen=True)
class BatchSample:
    s: int
    a: int
    rewards: tuple[float, ...]
    s_next: int
    controller_s: int
    controller_s_next: int


@dataclass(frozen=True, eq=False)
class Dataset:
    """Column-oriented batch of transitions."""

    fingerprint: str
    s: np.ndarray
    a: np.ndarray
    rewards: np.ndarray
    s_next: np.ndarray
    c: np.ndarray
    c_next: np.ndarray
    split: str = "train"
    seed: int | None = None

    def __post_init__(self):
        for name in ("s", "a", "s_next", "c", "c_next"):
            arr = np.asarray(getattr(self, name), dtype=np.int64)
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)
        r = np.asarray(self.rewards, dtype=np.float64).reshape(len(self.s), -1)
        r.setflags(write=False)
        object.__setattr__(self, "rewards", r)

    def __len__(self) -> int:
        return len(self.s)

    def __getitem__(self, j: int) -> BatchSample:
        return BatchSample(int(self.s[j]), int(self.a[j]), tuple(float(x) for x in self.rewards[j]),
                           int(self.s_next[j]), int(self.c[j]), int(self.c_next[j]))

    def __eq__(self, other) -> bool:
        if not isinstance(other, Dataset):
            return NotImplemented
        return (self.fingerprint == other.fingerprint and self.split == other.split
                and all(np.array_equal(getattr(self, k), getattr(other, k))
                        for k in ("s", "a", "rewards", "s_next", "c", "c_next")))

    def subset(self, idx) -> "Dataset":
        return Dataset(self.fingerprint, self.s[idx], self.a[idx], self.rewards[idx],
                       self.s_next[idx], self.c[idx], self.c_next[idx], self.split, self.seed)

    def check_game(self, game: TurnBasedGarnet) -> None:
        if game.fingerprint() != self.fingerprint:
            raise FingerprintMismatch(
                f"dataset was generated from game {self.fingerprint}, got {game.fingerprint()}")


def sample_batch(game: TurnBasedGarnet, k: int, seed, split: str = "train") -> Dataset:
    """``k`` i.i.d. transitions: uniform state, uniform controller action."""
    if k < 1:
        raise ValueError("k must be >= 1")
    rng = np.random.default_rng(seed)
    s = rng.integers(0, game.n_states, size=k)
    a = rng.integers(0, game.n_actions, size=k)
    s_next = game.next_state[s, a]
    rewards = game.reward[:, s, a].T
    seed_tag = seed if isinstance(seed, int) else None
    return Dataset(game.fingerprint(), s, a, rewards, s_next,
                   game.controller[s], game.controller[s_next], split, seed_tag)


def save_dataset(ds: Dataset, path: str | Path) -> None:
    header = {"format": FORMAT_VERSION, "fingerprint": ds.fingerprint, "seed": ds.seed,
              "split": ds.split, "n_players": int(ds.rewards.shape[1])}
    lines = [json.dumps(header)]
    for j in range(len(ds)):
        r = ",".join(format(float(x), ".17g") for x in ds.rewards[j])
        lines.append(f'{{"s": {ds.s[j]}, "a": {ds.a[j]}, "r": [{r}], '
                     f'"s_next": {ds.s_next[j]}, "c": {ds.c[j]}, "c_next": {ds.c_next[j]}}}')
    Path(path).write_text("\n".join(lines) + "\n")


_KEYS = ("s", "a", "r", "s_next", "c", "c_next")


def load_dataset(path: str | Path) -> Dataset:
    with open(path) as fh:
        raw = fh.read().splitlines()
    if not raw:
        raise DatasetFormatError(f"{path}: empty file")
    try:
        header = json.loads(raw[0])
        fingerprint = header["fingerprint"]
    except (json.JSONDecodeError, KeyError, TypeError) as exc:
        raise DatasetFormatError(f"{path}:1: bad header ({exc})") from None
    n_players = header.get("n_players")
    cols = {k: [] for k in _KEYS}
    for lineno, line in enumerate(raw[1:], start=2):
        if not line.strip():
            continue
        try:
            rec = json.loads(line)
            values = [rec[k] for k in _KEYS]
        except (json.JSONDecodeError, KeyError, TypeError) as exc:
            raise DatasetFormatError(f"{path}:{lineno}: malformed sample ({exc})") from None
        if n_players is not None and len(values[2]) != n_players:
            raise DatasetFormatError(f"{path}:{lineno}: expected {n_players} rewards")
        for k, val in zip(_KEYS, values):
            cols[k].append(val)
    if not cols["s"]:
        raise DatasetFormatError(f"{path}: no samples")
    return Dataset(fingerprint, np.array(cols["s"]), np.array(cols["a"]),
                   np.array(cols["r"], dtype=np.float64), np.array(cols["s_next"]),
                   np.array(cols["c"]), np.array(cols["c_next"]),
                   header.get("split", "train"), header.get("seed"))
