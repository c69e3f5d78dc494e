"""NashNetwork: per-player Q-network and strategy network trained jointly on the
empirical Bellman residual, with plain numpy forward/backward passes.

Parameters of all players are stacked along a leading player axis so one
minibatch step is a handful of batched matrix products.
"""

from __future__ import annotations

import json
import logging
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from numba import njit

from . import exact_eval
from .batch import Dataset
from .game import TurnBasedGarnet, encode_states, encoding_size
from .residual import batch_backups, default_rho

log = logging.getLogger(__name__)

CHECKPOINT_VERSION = 1


class TrainingDiverged(RuntimeError):
    pass


class NonFiniteLoss(FloatingPointError):
    pass


@dataclass
class TrainConfig:
    lr_q: float = 1e-3
    lr_pi: float = 5e-5
    weight_decay: float = 1e-6
    minibatch: int = 20
    epochs: int = 600
    p: float = 2.0
    rho: list[float] | None = None
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    hidden: int = 80
    encoding: str = "one_hot"
    init: str = "fan_in"
    tabular: bool = False
    fill_unobserved: bool = True
    lr_decay: float = 1.0
    eval_every: int = 10
    seed: int = 0

    def __post_init__(self):
        if self.lr_q <= 0 or self.lr_pi <= 0:
            raise ValueError("learning rates must be positive")
        if self.minibatch < 1:
            raise ValueError("minibatch must be >= 1")
        if self.epochs < 0 or self.eval_every < 1:
            raise ValueError("epochs must be >= 0 and eval_every >= 1")
        if self.p < 1:
            raise ValueError("p must be >= 1")
        if not 0.0 < self.lr_decay <= 1.0:
            raise ValueError("lr_decay must lie in (0, 1]")


def softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


class _Model:
    """Shared residual forward/backward. Subclasses provide the two heads."""

    n_players: int
    n_actions: int
    params: dict[str, np.ndarray]

    Q_KEYS: tuple[str, ...] = ()
    PI_KEYS: tuple[str, ...] = ()

    def q_forward(self, states):
        raise NotImplementedError

    def q_backward(self, cache, dout) -> None:
        raise NotImplementedError

    def pi_forward(self, states):
        raise NotImplementedError

    def pi_backward(self, cache, dout) -> None:
        raise NotImplementedError

    def decay_keys(self) -> tuple[str, ...]:
        return self.Q_KEYS + self.PI_KEYS

    # -- evaluation -------------------------------------------------------

    def check_finite(self) -> None:
        for k, w in self.params.items():
            if not np.all(np.isfinite(w)):
                raise FloatingPointError(f"non-finite values in parameter {k}")

    def forward(self, states) -> tuple[np.ndarray, np.ndarray]:
        """Q-values and strategies ``[N, len(states), A]`` for every player."""
        self.check_finite()
        states = np.atleast_1d(np.asarray(states, dtype=np.int64))
        q, _ = self.q_forward(states)
        logits, _ = self.pi_forward(states)
        return q, softmax(logits)

    def q_table(self, n_states: int) -> np.ndarray:
        return self.forward(np.arange(n_states))[0]

    def strategy_tables(self, n_states: int) -> np.ndarray:
        return self.forward(np.arange(n_states))[1]

    def extract_strategy(self, game: TurnBasedGarnet) -> np.ndarray:
        """Joint strategy: each state's row comes from its controller's network."""
        per_player = self.strategy_tables(game.n_states)
        return per_player[game.controller, np.arange(game.n_states)]

    # -- loss -------------------------------------------------------------

    def loss_and_gradients(self, s, a, rewards, s_next, c_next, gamma: float,
                           rho=None, p: float = 2.0, weight_decay: float = 0.0,
                           normalize: bool = True):
        """Mean (or summed) empirical residual plus L2 penalty, with gradients.

        The greedy branch routes its subgradient through the lowest-index argmax.
        """
        loss = self._loss_into_buffer(s, a, rewards, s_next, c_next, gamma, rho, p,
                                      weight_decay, normalize)
        return loss, {k: g.copy() for k, g in self.grads.items()}

    def _loss_into_buffer(self, s, a, rewards, s_next, c_next, gamma, rho=None, p=2.0,
                          weight_decay=0.0, normalize=True) -> float:
        # gradients land in self.grad_flat, overwritten on every call
        s = np.asarray(s, dtype=np.int64)
        k = len(s)
        if k == 0:
            raise ValueError("empty minibatch")
        N = self.n_players
        rho = default_rho(N) if rho is None else np.asarray(rho, dtype=np.float64)
        scale = 1.0 / k if normalize else 1.0

        q_all, q_cache = self.q_forward(np.concatenate([s, s_next]))
        logits, pi_cache = self.pi_forward(s_next)
        pi_all = softmax(logits)

        ks = np.arange(k)
        q_sa = q_all[:, ks, a].T                                  # [k, N]
        q_next = np.transpose(q_all[:, k:, :], (1, 0, 2))         # [k, N, A]
        pi_next = pi_all[c_next, ks]                              # [k, A]

        expect, star, arg, own = batch_backups(q_next, pi_next, c_next)
        d_star = rewards + gamma * star - q_sa
        d_joint = rewards + gamma * expect - q_sa
        a_star, a_joint = np.abs(d_star), np.abs(d_joint)
        per_sample = (a_star ** p + a_joint ** p) @ rho
        bad = np.flatnonzero(~np.isfinite(per_sample))
        if bad.size:
            raise NonFiniteLoss(f"non-finite residual at minibatch sample {bad[0]}")
        loss = scale * float(np.add.reduce(per_sample))

        g_star = scale * rho * p * a_star ** (p - 1) * np.sign(d_star)
        g_joint = scale * rho * p * a_joint ** (p - 1) * np.sign(d_joint)

        coef_expect = gamma * (g_joint + np.where(own, 0.0, g_star))   # [k, N]
        coef_max = gamma * np.where(own, g_star, 0.0)

        dq_next = coef_expect[:, :, None] * pi_next[:, None, :]
        np.add.at(dq_next, (ks[:, None], np.arange(N)[None, :], arg), coef_max)
        dq_all = np.zeros_like(q_all)
        dq_all[:, ks, a] = -(g_star + g_joint).T
        dq_all[:, k:, :] = np.transpose(dq_next, (1, 0, 2))

        dpi_next = np.einsum("ki,kib->kb", coef_expect, q_next)
        dlogit_next = pi_next * (dpi_next - np.sum(pi_next * dpi_next, axis=1, keepdims=True))
        dlogits = np.zeros_like(logits)
        dlogits[c_next, ks] = dlogit_next

        self.q_backward(q_cache, dq_all)
        self.pi_backward(pi_cache, dlogits)
        if weight_decay:
            for key in self.decay_keys():
                w = self.params[key]
                loss += 0.5 * weight_decay * float(np.sum(w * w))
                self.grads[key] += weight_decay * w
        return loss

    def batch_loss(self, ds: Dataset, gamma: float, rho=None, p: float = 2.0,
                   weight_decay: float = 0.0, normalize: bool = True):
        return self.loss_and_gradients(ds.s, ds.a, ds.rewards, ds.s_next, ds.c_next, gamma,
                                       rho, p, weight_decay, normalize)

    def residual(self, ds: Dataset, gamma: float, rho=None, p: float = 2.0) -> float:
        """Mean empirical residual over a dataset, without gradients."""
        q, pi = self.forward(np.arange(self.n_states))
        return _dataset_residual(ds, q, pi[ds.c_next, ds.s_next], gamma, rho, p)

    # -- parameters -------------------------------------------------------

    def _pack(self) -> None:
        """Move every parameter into one contiguous buffer; ``params`` holds views.
        A twin buffer ``grad_flat`` with views ``grads`` receives gradients."""
        keys = sorted(self.params)
        self.flat = np.concatenate([self.params[k].ravel() for k in keys])
        self.grad_flat = np.zeros_like(self.flat)
        self.grads = {}
        pos = 0
        for k in keys:
            shape, n = self.params[k].shape, self.params[k].size
            self.params[k] = self.flat[pos:pos + n].reshape(shape)
            self.grads[k] = self.grad_flat[pos:pos + n].reshape(shape)
            pos += n

    def get_flat(self) -> np.ndarray:
        return self.flat.copy()

    def set_flat(self, flat: np.ndarray) -> None:
        self.flat[:] = flat

    def flatten(self, grads: dict[str, np.ndarray]) -> np.ndarray:
        return np.concatenate([grads[k].ravel() for k in sorted(self.params)])

    def decay_mask(self) -> np.ndarray:
        """1 on entries subject to weight decay, 0 elsewhere, in flat order."""
        keys = set(self.decay_keys())
        return np.concatenate([np.full(self.params[k].size, float(k in keys)) for k in sorted(self.params)])

    def copy(self):
        clone = object.__new__(type(self))
        clone.__dict__.update(self.__dict__)
        clone.params = {k: v.copy() for k, v in self.params.items()}
        clone._pack()
        return clone

    def save(self, path: str | Path) -> None:
        meta = {"version": CHECKPOINT_VERSION, "kind": type(self).__name__, **self._meta()}
        np.savez(path, __meta__=np.array(json.dumps(meta)), **self.params)


def _dataset_residual(ds: Dataset, q: np.ndarray, pi_next: np.ndarray, gamma, rho, p) -> float:
    N = q.shape[0]
    rho = default_rho(N) if rho is None else np.asarray(rho, dtype=np.float64)
    q_sa = q[:, ds.s, ds.a].T
    q_next = np.transpose(q[:, ds.s_next, :], (1, 0, 2))
    expect, star, _, _ = batch_backups(q_next, pi_next, ds.c_next)
    d1 = ds.rewards + gamma * star - q_sa
    d2 = ds.rewards + gamma * expect - q_sa
    return float(np.add.reduce((np.abs(d1) ** p + np.abs(d2) ** p) @ rho)) / len(ds)


class NashNetwork(_Model):
    """One hidden layer (ReLU) per head; Q head linear, strategy head softmax."""

    Q_KEYS = ("q_W1", "q_W2")
    PI_KEYS = ("pi_W1", "pi_W2")

    def __init__(self, n_players: int, n_states: int, n_actions: int, hidden: int = 80,
                 encoding: str = "one_hot", rng: np.random.Generator | int | None = 0,
                 init: str = "fan_in"):
        self.n_players, self.n_states, self.n_actions = n_players, n_states, n_actions
        self.hidden, self.encoding, self.init = hidden, encoding, init
        self.inputs = encode_states(np.arange(n_states), n_states, encoding)
        d = encoding_size(n_states, encoding)
        rng = np.random.default_rng(rng)
        self.params = {}
        for head in ("q", "pi"):
            for layer, (fan_in, fan_out) in (("1", (d, hidden)), ("2", (hidden, n_actions))):
                if init == "fan_in":
                    w_lim = b_lim = 1.0 / np.sqrt(fan_in)
                elif init == "glorot":
                    w_lim, b_lim = np.sqrt(6.0 / (fan_in + fan_out)), 0.0
                else:
                    raise ValueError(f"unknown init {init!r}")
                self.params[f"{head}_W{layer}"] = rng.uniform(-w_lim, w_lim, (n_players, fan_in, fan_out))
                self.params[f"{head}_b{layer}"] = rng.uniform(-b_lim, b_lim, (n_players, fan_out))
        self._pack()

    def _mlp_forward(self, head: str, states):
        P = self.params
        x = self.inputs[states]
        z = np.matmul(x, P[f"{head}_W1"]) + P[f"{head}_b1"][:, None, :]
        h = np.maximum(z, 0.0)
        out = np.matmul(h, P[f"{head}_W2"]) + P[f"{head}_b2"][:, None, :]
        return out, (x, z, h)

    def _mlp_backward(self, head: str, cache, dout) -> None:
        x, z, h = cache
        G = self.grads
        dh = np.matmul(dout, self.params[f"{head}_W2"].transpose(0, 2, 1))
        dh *= z > 0
        np.matmul(h.transpose(0, 2, 1), dout, out=G[f"{head}_W2"])
        np.sum(dout, axis=1, out=G[f"{head}_b2"])
        np.matmul(x.T, dh, out=G[f"{head}_W1"])
        np.sum(dh, axis=1, out=G[f"{head}_b1"])

    def q_forward(self, states):
        return self._mlp_forward("q", states)

    def q_backward(self, cache, dout):
        return self._mlp_backward("q", cache, dout)

    def pi_forward(self, states):
        return self._mlp_forward("pi", states)

    def pi_backward(self, cache, dout):
        return self._mlp_backward("pi", cache, dout)

    def _meta(self):
        return {"n_players": self.n_players, "n_states": self.n_states, "n_actions": self.n_actions,
                "hidden": self.hidden, "encoding": self.encoding, "init": self.init}


class TabularNash(_Model):
    """One Q-value and one strategy logit per (player, state, action).

    The loss only sees strategies at next states, so logits of states that
    never occur as a next state get no gradient. States listed in
    ``greedy_states`` play the greedy action of their own Q-values instead.
    """

    Q_KEYS = ("q",)
    PI_KEYS = ("logits",)

    def __init__(self, n_players: int, n_states: int, n_actions: int, q=None, logits=None,
                 greedy_states=()):
        self.n_players, self.n_states, self.n_actions = n_players, n_states, n_actions
        self.greedy_states = np.asarray(greedy_states, dtype=np.int64)
        shape = (n_players, n_states, n_actions)
        self.params = {
            "q": np.zeros(shape) if q is None else np.array(q, dtype=np.float64).reshape(shape),
            "logits": np.zeros(shape) if logits is None else np.array(logits, dtype=np.float64).reshape(shape),
        }
        self._pack()

    def decay_keys(self):
        return ()

    def forward(self, states):
        q, pi = super().forward(states)
        states = np.atleast_1d(np.asarray(states, dtype=np.int64))
        cols = np.flatnonzero(np.isin(states, self.greedy_states))
        if cols.size:
            pi[:, cols, :] = np.eye(self.n_actions)[np.argmax(q[:, cols, :], axis=-1)]
        return q, pi

    def _lookup(self, key, states):
        return self.params[key][:, states, :], states

    def _scatter(self, key, states, dout) -> None:
        g = self.grads[key]
        g.fill(0.0)
        np.add.at(g, (slice(None), states), dout)

    def q_forward(self, states):
        return self._lookup("q", states)

    def q_backward(self, cache, dout):
        return self._scatter("q", cache, dout)

    def pi_forward(self, states):
        return self._lookup("logits", states)

    def pi_backward(self, cache, dout):
        return self._scatter("logits", cache, dout)

    def _meta(self):
        return {"n_players": self.n_players, "n_states": self.n_states, "n_actions": self.n_actions,
                "greedy_states": self.greedy_states.tolist()}


def load_model(path: str | Path) -> _Model:
    with np.load(path) as data:
        meta = json.loads(str(data["__meta__"]))
        params = {k: data[k] for k in data.files if k != "__meta__"}
    if meta.get("version") != CHECKPOINT_VERSION:
        raise ValueError(f"unsupported checkpoint version {meta.get('version')}")
    kind = meta.pop("kind")
    meta.pop("version")
    if kind == "NashNetwork":
        model = NashNetwork(rng=0, **meta)
    elif kind == "TabularNash":
        model = TabularNash(**meta)
    else:
        raise ValueError(f"unknown model kind {kind!r}")
    for k, v in params.items():
        if model.params[k].shape != v.shape:
            raise ValueError(f"shape mismatch for {k}: {v.shape} vs {model.params[k].shape}")
        model.params[k][...] = v
    return model


def make_model(game: TurnBasedGarnet, config: TrainConfig) -> _Model:
    if config.tabular:
        return TabularNash(game.n_players, game.n_states, game.n_actions)
    rng = np.random.default_rng([config.seed, 1])
    return NashNetwork(game.n_players, game.n_states, game.n_actions, config.hidden,
                       config.encoding, rng, config.init)


@njit(cache=True, fastmath=True)
def _adam_kernel(p, g, m, v, lr, decay, b1, b2, c1, c2, eps):
    for j in range(p.size):
        gj = g[j] + decay[j] * p[j]
        m[j] = b1 * m[j] + (1.0 - b1) * gj
        v[j] = b2 * v[j] + (1.0 - b2) * gj * gj
        p[j] -= lr[j] * (m[j] * c1) / (np.sqrt(v[j]) * c2 + eps)


class Adam:
    """Adam over one flat parameter vector with a per-entry learning rate."""

    def __init__(self, size: int, lr, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.size = size
        self.lr = lr
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.m = np.zeros(size)
        self.v = np.zeros(size)
        self._no_decay = np.zeros(size)
        self.t = 0

    @property
    def lr(self) -> np.ndarray:
        return self._lr

    @lr.setter
    def lr(self, value) -> None:
        self._lr = np.ascontiguousarray(np.broadcast_to(np.asarray(value, dtype=np.float64), (self.size,)))

    def step(self, params: np.ndarray, grad: np.ndarray, decay: np.ndarray | None = None) -> None:
        """One in-place update; ``decay`` adds a per-entry L2 gradient ``decay * params``."""
        self.t += 1
        c1 = 1.0 / (1.0 - self.beta1 ** self.t)
        c2 = 1.0 / np.sqrt(1.0 - self.beta2 ** self.t)
        decay = self._no_decay if decay is None else decay
        _adam_kernel(params, grad, self.m, self.v, self._lr, decay,
                     self.beta1, self.beta2, c1, c2, self.eps)


@dataclass
class Checkpoint:
    epoch: int
    step: int
    train_residual: float
    test_residual: float
    errors: list[float]
    wall_clock: float

    @property
    def mean_error(self) -> float:
        return float(np.mean(self.errors))


@dataclass
class TrainReport:
    checkpoints: list[Checkpoint] = field(default_factory=list)

    def append(self, cp: Checkpoint) -> None:
        if self.checkpoints and cp.epoch <= self.checkpoints[-1].epoch:
            raise ValueError("checkpoint epochs must increase")
        self.checkpoints.append(cp)

    @property
    def final(self) -> Checkpoint:
        return self.checkpoints[-1]

    def to_dicts(self) -> list[dict]:
        return [asdict(cp) for cp in self.checkpoints]


def evaluate(model: _Model, game: TurnBasedGarnet, train: Dataset, test: Dataset | None,
             config: TrainConfig) -> tuple[float, float, list[float]]:
    rho = config.rho
    tr = model.residual(train, game.gamma, rho, config.p)
    te = model.residual(test, game.gamma, rho, config.p) if test is not None else float("nan")
    errors = exact_eval.error_vs_best_response(game, model.extract_strategy(game))
    return tr, te, [float(e) for e in errors]


def train(game: TurnBasedGarnet, train_ds: Dataset, test_ds: Dataset | None,
          config: TrainConfig, model: _Model | None = None) -> tuple[_Model, TrainReport]:
    """Minibatch Adam on the mean empirical residual, evaluating exactly every
    ``config.eval_every`` epochs and at the end."""
    train_ds.check_game(game)
    if test_ds is not None:
        test_ds.check_game(game)
    model = make_model(game, config) if model is None else model
    if isinstance(model, TabularNash) and config.fill_unobserved:
        model.greedy_states = np.setdiff1d(np.arange(game.n_states), train_ds.s_next)
    lr = np.concatenate([np.full(model.params[k].size, config.lr_q if k.startswith("q") else config.lr_pi)
                         for k in sorted(model.params)])
    opt = Adam(lr.size, lr, config.beta1, config.beta2, config.eps)
    decay = model.decay_mask() * config.weight_decay if config.weight_decay else None
    rng = np.random.default_rng([config.seed, 2])
    report = TrainReport()
    t0 = time.perf_counter()
    n, mb = len(train_ds), config.minibatch
    step = 0

    def checkpoint(epoch):
        tr, te, errs = evaluate(model, game, train_ds, test_ds, config)
        if not np.isfinite(tr):
            raise TrainingDiverged(f"non-finite train residual at epoch {epoch}")
        if report.checkpoints:
            initial = report.checkpoints[0].train_residual
            if tr > 1e3 * max(initial, 1e-12):
                raise TrainingDiverged(
                    f"train residual {tr:.3g} exceeds 1e3 x initial {initial:.3g} at epoch {epoch}")
        report.append(Checkpoint(epoch, step, tr, te, errs, time.perf_counter() - t0))
        log.debug("epoch %d residual %.4g/%.4g error %.4f", epoch, tr, te, np.mean(errs))

    checkpoint(0)
    S, A, R = train_ds.s, train_ds.a, train_ds.rewards
    SN, CN = train_ds.s_next, train_ds.c_next
    for epoch in range(1, config.epochs + 1):
        perm = rng.permutation(n)
        for start in range(0, n, mb):
            idx = perm[start:start + mb]
            model._loss_into_buffer(S[idx], A[idx], R[idx], SN[idx], CN[idx],
                                    game.gamma, config.rho, config.p)
            opt.step(model.flat, model.grad_flat, decay)
            step += 1
        if config.lr_decay != 1.0:
            opt.lr = lr * config.lr_decay ** epoch
        if epoch % config.eval_every == 0 or epoch == config.epochs:
            checkpoint(epoch)
    return model, report
