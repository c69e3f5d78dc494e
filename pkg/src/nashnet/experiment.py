"""Experiment harness: Garnet ensembles, sample-size sweeps and the oracle
self-checks behind ``nashnet verify``."""

from __future__ import annotations

import contextlib
import csv
import json
import logging
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from unittest import mock

import numpy as np

from . import exact_eval as ee
from .batch import sample_batch
from .game import GarnetSpec, TurnBasedGarnet, generate_garnet, two_state_game
from .learner import NashNetwork, TabularNash, TrainConfig, train
from .residual import empirical_loss, model_based_backup

log = logging.getLogger(__name__)


@dataclass
class ExperimentConfig:
    game: GarnetSpec = field(default_factory=GarnetSpec)
    train: TrainConfig = field(default_factory=TrainConfig)
    n_garnets: int = 5
    n_resamples: int = 5
    alpha: float = 5.0
    test_alpha: float = 1.0
    seed: int = 0
    out_dir: str = "results"
    workers: int = 1

    def __post_init__(self):
        if self.n_garnets < 1 or self.n_resamples < 1:
            raise ValueError("n_garnets and n_resamples must be >= 1")
        if self.alpha <= 0 or self.test_alpha <= 0:
            raise ValueError("alpha and test_alpha must be positive")
        if self.workers < 1:
            raise ValueError("workers must be >= 1")

    @property
    def n_train(self) -> int:
        return max(1, round(self.alpha * self.game.n_states * self.game.n_actions))

    @property
    def n_test(self) -> int:
        return max(1, round(self.test_alpha * self.game.n_states * self.game.n_actions))

    def to_dict(self) -> dict:
        """Flat document; per-component seeds are derived, so they are omitted."""
        out = {k: v for k, v in asdict(self.game).items() if k != "seed"}
        out.update({k: v for k, v in asdict(self.train).items() if k != "seed"})
        out.update({f.name: getattr(self, f.name) for f in fields(self) if f.name not in ("game", "train")})
        return out

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        game_keys = {f.name for f in fields(GarnetSpec)} - {"seed"}
        train_keys = {f.name for f in fields(TrainConfig)} - {"seed"}
        own_keys = {f.name for f in fields(cls)} - {"game", "train"}
        unknown = set(d) - game_keys - train_keys - own_keys
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        return cls(GarnetSpec(**{k: d[k] for k in d if k in game_keys}),
                   TrainConfig(**{k: d[k] for k in d if k in train_keys}),
                   **{k: d[k] for k in d if k in own_keys})

    @classmethod
    def load(cls, path: str | Path) -> "ExperimentConfig":
        return cls.from_dict(json.loads(Path(path).read_text()))


def derive_seed(*ids: int) -> int:
    return int(np.random.SeedSequence([int(x) for x in ids]).generate_state(1)[0])


def garnet_for(cfg: ExperimentConfig, g: int) -> TurnBasedGarnet:
    return generate_garnet(replace(cfg.game, seed=derive_seed(cfg.seed, g)))


@dataclass
class MetricsRow:
    garnet: int
    resample: int
    epoch: int
    step: int
    train_residual: float
    test_residual: float
    errors: list[float]
    mean_error: float
    std_error: float

    @classmethod
    def make(cls, garnet, resample, epoch, step, train_residual, test_residual, errors):
        e = np.asarray(errors, dtype=np.float64)
        return cls(garnet, resample, epoch, step, train_residual, test_residual, list(map(float, e)),
                   float(np.mean(e)), float(np.std(e)))

    def to_record(self) -> dict:
        rec = {k: getattr(self, k) for k in ("garnet", "resample", "epoch", "step",
                                             "train_residual", "test_residual")}
        rec.update({f"error_{i}": e for i, e in enumerate(self.errors)})
        rec.update(mean_error=self.mean_error, std_error=self.std_error)
        return rec


@dataclass
class RunResult:
    garnet: int
    resample: int
    rows: list[MetricsRow]
    error: str | None = None
    seconds: float = 0.0

    @property
    def ok(self) -> bool:
        return self.error is None


def run_one(cfg: ExperimentConfig, g: int, r: int) -> RunResult:
    """One (garnet, resample) run; any failure is captured, never raised."""
    t0 = time.perf_counter()
    try:
        game = garnet_for(cfg, g)
        tr = sample_batch(game, cfg.n_train, [cfg.seed, g, r, 0], "train")
        te = sample_batch(game, cfg.n_test, [cfg.seed, g, r, 1], "test")
        tcfg = replace(cfg.train, seed=derive_seed(cfg.seed, g, r))
        _, report = train(game, tr, te, tcfg)
        rows = [MetricsRow.make(g, r, cp.epoch, cp.step, cp.train_residual, cp.test_residual, cp.errors)
                for cp in report.checkpoints]
        return RunResult(g, r, rows, None, time.perf_counter() - t0)
    except Exception as exc:  # isolate the run; reported in runs.csv
        log.warning("run garnet=%d resample=%d failed: %r", g, r, exc)
        return RunResult(g, r, [], f"{type(exc).__name__}: {exc}", time.perf_counter() - t0)


def _run_star(args):
    return run_one(*args)


@dataclass
class ExperimentResult:
    config: ExperimentConfig
    runs: list[RunResult]

    @property
    def rows(self) -> list[MetricsRow]:
        return [row for run in self.runs for row in run.rows]

    @property
    def failed(self) -> list[RunResult]:
        return [run for run in self.runs if not run.ok]

    def summary(self) -> dict:
        return summarize(self.rows, n_failed=len(self.failed))


def summarize(rows: list[MetricsRow], n_failed: int = 0) -> dict:
    """Final-checkpoint aggregate: mean over players first, then over runs."""
    final: dict[tuple[int, int], MetricsRow] = {}
    for row in rows:
        key = (row.garnet, row.resample)
        if key not in final or row.epoch > final[key].epoch:
            final[key] = row
    last = [final[k] for k in sorted(final)]
    nan = float("nan")

    def stat(fn, attr):
        return float(fn([getattr(r, attr) for r in last])) if last else nan

    return {
        "n_runs": len(last),
        "n_failed": n_failed,
        "epoch": max((r.epoch for r in last), default=0),
        "train_residual": stat(np.mean, "train_residual"),
        "test_residual": stat(np.mean, "test_residual"),
        "mean_error": stat(np.mean, "mean_error"),
        "run_std_error": stat(np.std, "mean_error"),
        "player_std_error": stat(np.mean, "std_error"),
    }


def write_csv(path: Path, records: list[dict]) -> None:
    with open(path, "w", newline="") as fh:
        if not records:
            return
        writer = csv.DictWriter(fh, fieldnames=list(records[0]))
        writer.writeheader()
        writer.writerows(records)


def read_metrics(path: str | Path) -> list[MetricsRow]:
    rows = []
    with open(path, newline="") as fh:
        for rec in csv.DictReader(fh):
            n = sum(1 for k in rec if k.startswith("error_"))
            rows.append(MetricsRow(int(rec["garnet"]), int(rec["resample"]), int(rec["epoch"]),
                                   int(rec["step"]), float(rec["train_residual"]),
                                   float(rec["test_residual"]),
                                   [float(rec[f"error_{i}"]) for i in range(n)],
                                   float(rec["mean_error"]), float(rec["std_error"])))
    return rows


def _curves(rows: list[MetricsRow]):
    epochs = sorted({r.epoch for r in rows})
    by_epoch = {e: [r for r in rows if r.epoch == e] for e in epochs}
    mean = lambda attr, f=np.mean: np.array([f([getattr(r, attr) for r in by_epoch[e]]) for e in epochs])
    return np.array(epochs), mean("train_residual"), mean("test_residual"), mean("mean_error"), \
        mean("mean_error", np.std)


def _svg_figure():
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt
    plt.rcParams["svg.hashsalt"] = "nashnet"
    return plt


def plot_curves(rows: list[MetricsRow], path: Path, title: str = "") -> None:
    plt = _svg_figure()
    fig, (ax_res, ax_err) = plt.subplots(1, 2, figsize=(10, 4))
    if rows:
        ep, tr, te, err, err_std = _curves(rows)
        ax_res.semilogy(ep, tr, label="train")
        ax_res.semilogy(ep, te, "--", label="test")
        ax_err.plot(ep, err, label="mean over players and runs")
        ax_err.fill_between(ep, err - err_std, err + err_std, alpha=0.25)
    ax_res.set(xlabel="epoch", ylabel="empirical Bellman residual")
    ax_err.set(xlabel="epoch", ylabel="error vs best response")
    for ax in (ax_res, ax_err):
        ax.grid(alpha=0.3)
        ax.legend(loc="upper right")
    fig.suptitle(title)
    fig.tight_layout()
    fig.savefig(path, format="svg", metadata={"Date": None})
    plt.close(fig)


def run_experiment(cfg: ExperimentConfig, out_dir: str | Path | None = None) -> ExperimentResult:
    """Train on every (garnet, resample) pair and write metrics.csv, runs.csv,
    summary.csv, curves.svg and config.json."""
    jobs = [(cfg, g, r) for g in range(cfg.n_garnets) for r in range(cfg.n_resamples)]
    if cfg.workers > 1:
        with ProcessPoolExecutor(cfg.workers) as pool:
            runs = list(pool.map(_run_star, jobs))
    else:
        runs = [run_one(*job) for job in jobs]
    for run in runs:
        log.info("garnet %d resample %d: %s in %.1fs", run.garnet, run.resample,
                 "ok" if run.ok else run.error, run.seconds)
    result = ExperimentResult(cfg, runs)
    out = Path(cfg.out_dir if out_dir is None else out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.json").write_text(json.dumps(cfg.to_dict(), indent=2) + "\n")
    write_csv(out / "metrics.csv", [row.to_record() for row in result.rows])
    write_csv(out / "runs.csv", [{"garnet": r.garnet, "resample": r.resample,
                                  "status": "ok" if r.ok else "failed", "error": r.error or ""}
                                 for r in runs])
    write_csv(out / "summary.csv", [result.summary()])
    plot_curves(result.rows, out / "curves.svg", f"{cfg.game.n_players} player(s)")
    return result


def sweep_samples(cfg: ExperimentConfig, alphas, out_dir: str | Path | None = None):
    """One experiment per sample multiplier; writes sweep.csv and sweep.svg."""
    alphas = [float(a) for a in alphas]
    if not alphas or any(a <= 0 for a in alphas):
        raise ValueError("alphas must be a non-empty list of positive numbers")
    out = Path(cfg.out_dir if out_dir is None else out_dir)
    out.mkdir(parents=True, exist_ok=True)
    results, records = [], []
    for a in alphas:
        sub = replace(cfg, alpha=a)
        res = run_experiment(sub, out / f"alpha_{a:g}")
        results.append(res)
        records.append({"alpha": a, "n_samples": sub.n_train, **res.summary()})
    write_csv(out / "sweep.csv", records)
    plt = _svg_figure()
    fig, ax = plt.subplots(figsize=(5, 4))
    ax.plot(alphas, [r["mean_error"] for r in records], "o-")
    ax.set(xscale="log", xlabel="alpha (samples / (states x actions))", ylabel="final error vs best response")
    ax.grid(alpha=0.3)
    fig.tight_layout()
    fig.savefig(out / "sweep.svg", format="svg", metadata={"Date": None})
    plt.close(fig)
    return records, results


# -- verification --------------------------------------------------------------

@dataclass
class CheckResult:
    name: str
    n_cases: int
    failures: list[dict] = field(default_factory=list)
    seconds: float = 0.0

    @property
    def passed(self) -> bool:
        return not self.failures


@dataclass
class VerifyReport:
    checks: list[CheckResult]

    @property
    def passed(self) -> bool:
        return all(c.passed for c in self.checks)


def random_tiny_game(rng, n_players=2, n_states=5, n_actions=2, gamma=0.9) -> TurnBasedGarnet:
    """Unstructured random turn-based game (arbitrary transitions and rewards)."""
    spec = GarnetSpec(n_players=n_players, n_states=n_states, n_actions=n_actions, gamma=gamma, seed=0)
    return TurnBasedGarnet(spec, rng.integers(0, n_players, n_states),
                           rng.integers(0, n_states, (n_states, n_actions)),
                           rng.normal(size=(n_players, n_states, n_actions)),
                           rng.integers(0, n_states, n_players))


def _softmax_rows(z):
    e = np.exp(z - z.max(axis=1, keepdims=True))
    return e / e.sum(axis=1, keepdims=True)


def _dump(game: TurnBasedGarnet, **arrays) -> dict:
    return {"game": game.to_dict(), **{k: np.asarray(v).tolist() for k, v in arrays.items()}}


def check_lemma1_suite(rng, n_cases=100) -> CheckResult:
    """Random games, strategies and value functions; a third of the value
    functions are near fixed points of the joint operator, where the bound is tight."""
    res = CheckResult("lemma1", n_cases)
    for case in range(n_cases):
        game = random_tiny_game(rng, gamma=float(rng.uniform(0.1, 0.95)))
        pi = _softmax_rows(rng.normal(size=(5, 2)) * 3)
        v = rng.normal(size=(2, 5)) * 3
        if case % 3 == 0:
            for _ in range(int(rng.integers(5, 200))):
                v = np.stack([ee.apply_T_joint(game, v[i], pi, i) for i in range(2)])
        p = float(rng.choice([1.5, 2.0, 3.0]))
        mu, nu = rng.dirichlet(np.ones(5)), rng.dirichlet(np.ones(5))
        report = ee.check_lemma1(game, v, pi, ee.MeasureSet(mu, nu, np.full(2, 0.5), p))
        if not report.holds:
            res.failures.append({"case": case, "lhs": report.lhs.tolist(), "rhs": report.rhs.tolist(),
                                 "p": p, **_dump(game, v=v, pi=pi, mu=mu, nu=nu)})
    return res


def minimal_gap_strategies(game: TurnBasedGarnet) -> list[np.ndarray]:
    """Deterministic joint strategies whose largest best-response gap is minimal
    (ties within 1e-9 all kept), found by exhaustive enumeration."""
    import itertools
    cands, gaps = [], []
    for acts in itertools.product(range(game.n_actions), repeat=game.n_states):
        pi = ee.deterministic_strategy(game, acts)
        gap = max(float(np.max(ee.best_response_value(game, pi, i)[0] - ee.joint_value(game, pi, i)))
                  for i in range(game.n_players))
        cands.append(pi)
        gaps.append(gap)
    best = min(gaps)
    return [pi for pi, g in zip(cands, gaps) if g <= best + 1e-9]


def check_equivalence_suite(rng, n_games=20) -> CheckResult:
    res = CheckResult("definition_equivalence", 0)
    games = [two_state_game(0.5)] + [random_tiny_game(rng, n_players=int(rng.integers(1, 4)), n_states=3,
                                                      n_actions=2, gamma=float(rng.uniform(0.1, 0.9)))
                                     for _ in range(n_games)]
    for gi, game in enumerate(games):
        pis = minimal_gap_strategies(game)
        pis.append(_softmax_rows(rng.normal(size=(game.n_states, game.n_actions))))
        for pi in pis:
            res.n_cases += 1
            sides = ee.definition_sides(game, pi)
            if not sides.agree:
                res.failures.append({"game_index": gi, "value_side": sides.value_side,
                                     "operator_side": sides.operator_side, **_dump(game, pi=pi)})
    return res


def check_estimator_suite(rng, n_probes=10_000, per_draw=100) -> CheckResult:
    """Empirical one-sample backups against model-based backups on Garnets."""
    res = CheckResult("estimator_exactness", 0)
    while res.n_cases < n_probes:
        n = int(rng.integers(1, 4))
        game = generate_garnet(GarnetSpec(n_players=n, n_states=int(rng.integers(2, 15)),
                                          n_actions=int(rng.integers(1, 5)), seed=int(rng.integers(2**31))))
        S, A = game.n_states, game.n_actions
        ds = sample_batch(game, per_draw, int(rng.integers(2**31)))
        q = rng.normal(size=(n, S, A)) * 5
        pi = _softmax_rows(rng.normal(size=(S, A)) * 2)
        terms = empirical_loss(ds, q, pi, game.gamma).terms
        for j in range(len(ds)):
            s, a = int(ds.s[j]), int(ds.a[j])
            for i in range(n):
                for mode, emp in (("joint", terms.d_joint[j, i]), ("star", terms.d_star[j, i])):
                    model = model_based_backup(game, s, a, q, pi, i, mode) - q[i, s, a]
                    if not abs(model - emp) <= 1e-12:
                        res.failures.append({"s": s, "a": a, "player": i, "mode": mode,
                                             "empirical": float(emp), "model_based": float(model)})
            res.n_cases += 1
    return res


def _kink_margin(model, s, s_next, c_next) -> float:
    """Distance to the nearest non-differentiable point: ReLU pre-activations
    and greedy-backup ties."""
    margins = [np.inf]
    states = np.concatenate([s, s_next])
    q, q_cache = model.q_forward(states)
    if isinstance(model, NashNetwork):
        margins.append(np.min(np.abs(q_cache[1])))
        margins.append(np.min(np.abs(model.pi_forward(s_next)[1][1])))
    q_next = np.sort(q[:, len(s):, :], axis=-1)
    if q_next.shape[-1] > 1:
        margins.append(np.min(q_next[..., -1] - q_next[..., -2]))
    return float(np.min(margins))


def gradient_check(model, rng, n_coords=300, h=1e-6, tol=1e-4, weight_decay=1e-3,
                   p: float = 2.0, rho=None) -> list[dict]:
    """Central differences on ``n_coords`` random entries of each head; returns failures."""
    N, S, A = model.n_players, model.n_states, model.n_actions
    spec = GarnetSpec(n_players=N, n_states=S, n_actions=A, seed=int(rng.integers(2**31)))
    game = generate_garnet(spec)
    for _ in range(100):
        ds = sample_batch(game, 16, int(rng.integers(2**31)))
        if _kink_margin(model, ds.s, ds.s_next, ds.c_next) > 1e-5:
            break
    else:
        raise RuntimeError("could not find a kink-free evaluation point")
    args = (ds.s, ds.a, ds.rewards, ds.s_next, ds.c_next, game.gamma, rho, p)
    _, grads = model.loss_and_gradients(*args, weight_decay=weight_decay)
    failures = []
    for prefix in ("q", "pi" if isinstance(model, NashNetwork) else "logits"):
        keys = [k for k in sorted(model.params) if k.startswith(prefix)]
        sizes = np.array([model.params[k].size for k in keys])
        for _ in range(n_coords):
            ki = int(rng.choice(len(keys), p=sizes / sizes.sum()))
            key = keys[ki]
            idx = np.unravel_index(int(rng.integers(sizes[ki])), model.params[key].shape)
            w = model.params[key]
            old = w[idx]
            w[idx] = old + h
            up = model.loss_and_gradients(*args, weight_decay=weight_decay)[0]
            w[idx] = old - h
            down = model.loss_and_gradients(*args, weight_decay=weight_decay)[0]
            w[idx] = old
            fd, bp = (up - down) / (2 * h), float(grads[key][idx])
            rel = abs(fd - bp) / max(abs(fd) + abs(bp), 1e-8)
            if rel > tol:
                failures.append({"param": key, "index": [int(x) for x in idx], "backprop": bp,
                                 "finite_difference": fd, "relative_error": rel})
    return failures


def check_gradient_suite(rng, n_coords=300) -> CheckResult:
    res = CheckResult("gradients", 0)
    for n_players in (1, 3):
        for model in (NashNetwork(n_players, 7, 3, hidden=12, rng=int(rng.integers(2**31))),
                      TabularNash(n_players, 7, 3, q=rng.normal(size=(n_players, 7, 3)),
                                  logits=rng.normal(size=(n_players, 7, 3)))):
            res.failures += gradient_check(model, rng, n_coords)
            res.n_cases += 2 * n_coords
    return res


def _corrupt_gamma_sign():
    """Both Bellman operators evaluated with -gamma, as a self-test of the harness."""
    def action_values(game, v, i):
        return game.reward[i] - game.gamma * np.asarray(v, dtype=np.float64)[game.next_state]

    def t_joint(game, v, pi, i):
        return np.einsum("sa,sa->s", pi, action_values(game, v, i))

    def t_star(game, v, pi, i):
        q = action_values(game, v, i)
        return np.where(game.controller == i, q.max(axis=1), np.einsum("sa,sa->s", pi, q))

    stack = contextlib.ExitStack()
    stack.enter_context(mock.patch.object(ee, "apply_T_joint", t_joint))
    stack.enter_context(mock.patch.object(ee, "apply_T_star", t_star))
    return stack


def verify(seed: int = 0, quick: bool = False, corrupt: str | None = None) -> VerifyReport:
    rng = np.random.default_rng(seed)
    suites = [("lemma1", lambda: check_lemma1_suite(rng, 30 if quick else 100)),
              ("equivalence", lambda: check_equivalence_suite(rng, 5 if quick else 20)),
              ("estimator", lambda: check_estimator_suite(rng, 1000 if quick else 10_000)),
              ("gradients", lambda: check_gradient_suite(rng, 60 if quick else 300))]
    checks = []
    with _corrupt_gamma_sign() if corrupt == "gamma-sign" else contextlib.nullcontext():
        if corrupt not in (None, "gamma-sign"):
            raise ValueError(f"unknown corruption {corrupt!r}")
        for _, suite in suites:
            t0 = time.perf_counter()
            result = suite()
            result.seconds = time.perf_counter() - t0
            checks.append(result)
    return VerifyReport(checks)
