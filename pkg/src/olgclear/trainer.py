"""Simulate-then-train loop, episode bookkeeping and accuracy evaluation."""
from __future__ import annotations

import contextlib
import csv
import logging
import time
from collections import deque
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np
from threadpoolctl import threadpool_limits

from . import nn
from .economy import model_for
from .quadrature import gauss_hermite

log = logging.getLogger(__name__)

METRICS_HEADER = ("episode", "mean_loss", "max_loss", "wall_ms")
DEFAULT_PERCENTILES = (10.0, 90.0, 99.0)


@dataclass(frozen=True)
class TrainRun:
    episodes: int
    trajectories: int
    epochs: int = 10
    minibatch: int = 128
    lr: float = 1e-5
    seed: int = 0
    quad_order: int = 8
    mode: str | None = None        # overrides the economy's clearing mode when set
    deterministic: bool = False    # single-threaded BLAS, wall_ms recorded as 0
    history: int = 4096            # length of the loss ring buffer

    def __post_init__(self):
        if self.episodes < 0:
            raise ValueError("episodes must be nonnegative")
        for name in ("trajectories", "epochs", "minibatch", "quad_order", "history"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be at least 1")
        if self.minibatch > self.trajectories:
            raise ValueError("minibatch larger than the number of trajectories")
        if self.lr < 0:
            raise ValueError("learning rate must be nonnegative")

    @property
    def batches_per_epoch(self) -> int:
        # a final short batch is dropped
        return self.trajectories // self.minibatch

    @property
    def steps_per_episode(self) -> int:
        return self.epochs * self.batches_per_epoch


@dataclass
class EpisodeMetrics:
    episode: int
    mean_loss: float
    max_loss: float
    wall_ms: float
    steps: int

    def row(self) -> list:
        return [self.episode, repr(self.mean_loss), repr(self.max_loss), repr(self.wall_ms)]


class TrainingAborted(RuntimeError):
    """A minibatch produced a non-finite loss."""

    def __init__(self, episode: int, rows: np.ndarray, states: np.ndarray, dump_path: Path | None = None):
        self.episode = episode
        self.rows = rows
        self.states = states
        self.dump_path = dump_path
        super().__init__(f"non-finite loss in episode {episode}; {len(rows)} offending state rows")


@dataclass
class TrainResult:
    params: nn.MlpParams
    adam: nn.AdamState
    states: np.ndarray
    metrics: list[EpisodeMetrics]
    history: deque = field(default_factory=deque)


@contextlib.contextmanager
def execution_mode(deterministic: bool) -> Iterator[None]:
    """Pin BLAS to one thread when bitwise reproducibility is requested."""
    if deterministic:
        with threadpool_limits(limits=1):
            yield
    else:
        yield


def episode_streams(seed: int, episode: int) -> tuple[np.random.Generator, np.random.Generator]:
    """Independent (simulation, shuffling) generators for one episode.

    Trajectory ``i`` always takes the ``i``-th innovation of the simulation
    stream, so the draws do not depend on how the work is split.
    """
    sim, shuffle = np.random.SeedSequence([seed, episode]).spawn(2)
    return np.random.default_rng(sim), np.random.default_rng(shuffle)


def fresh_params(cfg, hidden: Sequence[int], seed: int) -> nn.MlpParams:
    dims = [cfg.input_dim, *hidden, cfg.output_dim]
    return nn.init_mlp(dims, cfg.heads(), seed)


def _run_cfg(cfg, run: TrainRun):
    return cfg if run.mode is None or run.mode == cfg.mode else replace(cfg, mode=run.mode)


def _bad_rows(model, params, X, cfg, rule) -> np.ndarray:
    per_state = np.asarray(model.equilibrium_graph(params, X, cfg, rule)["per_state"])
    return np.flatnonzero(~np.isfinite(per_state))


def run_episode(params: nn.MlpParams, adam: nn.AdamState, states: np.ndarray, cfg, run: TrainRun,
                episode: int, rule=None, history: deque | None = None):
    """One simulation step followed by ``run.epochs`` passes of minibatch Adam.

    Returns ``(params, adam, new_states, metrics)``.
    """
    if states.shape[0] != run.trajectories:
        raise ValueError(f"state batch has {states.shape[0]} rows, run expects {run.trajectories}")
    cfg = _run_cfg(cfg, run)
    model = model_for(cfg)
    rule = rule or gauss_hermite(run.quad_order)
    sim_rng, shuffle_rng = episode_streams(run.seed, episode)
    t0 = time.perf_counter()

    states = model.simulate(params, states, cfg, sim_rng.standard_normal(run.trajectories))
    adam = nn.reset_adam(adam)
    losses = []
    mb = run.minibatch
    for _ in range(run.epochs):
        perm = shuffle_rng.permutation(run.trajectories)
        for k in range(run.batches_per_epoch):
            idx = perm[k * mb:(k + 1) * mb]
            loss, grads = model.loss_and_grad(params, states[idx], cfg, rule)
            if not np.isfinite(loss):
                bad = idx[_bad_rows(model, params, states[idx], cfg, rule)]
                raise TrainingAborted(episode, bad, states[bad])
            adam, params = nn.adam_step(adam, params, nn.zero_nans(grads))
            losses.append(loss)
            if history is not None:
                history.append(loss)
    wall = 0.0 if run.deterministic else 1e3 * (time.perf_counter() - t0)
    losses = np.asarray(losses)
    metrics = EpisodeMetrics(episode, float(losses.mean()), float(losses.max()), wall, len(losses))
    return params, adam, states, metrics


def write_metrics(path: Path, metrics: Sequence[EpisodeMetrics]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(METRICS_HEADER)
        for m in metrics:
            w.writerow(m.row())


def train(cfg, run: TrainRun, params: nn.MlpParams, adam: nn.AdamState | None = None,
          states: np.ndarray | None = None, out_dir: str | Path | None = None,
          stage: dict | None = None, first_episode: int = 0) -> TrainResult:
    """Run ``run.episodes`` episodes starting from ``params``.

    ``states`` defaults to copies of a single clearing state.  When
    ``out_dir`` is given, ``metrics.csv``, ``checkpoint.bin`` and
    ``states.npy`` are written there; on abort the last good checkpoint and
    the offending rows (``abort_states.npy``) are written before re-raising.
    """
    cfg = _run_cfg(cfg, run)
    model = model_for(cfg)
    rule = gauss_hermite(run.quad_order)
    if adam is None:
        adam = nn.AdamState.for_params(params, run.lr)
    else:
        adam = replace(adam, lr=run.lr)
    if states is None:
        states = model.initial_states(cfg, run.trajectories)
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
    history: deque = deque(maxlen=run.history)
    metrics: list[EpisodeMetrics] = []

    def persist(p, a, s):
        if out is None:
            return
        write_metrics(out / "metrics.csv", metrics)
        nn.save_checkpoint(out / "checkpoint.bin", p, a, stage=stage,
                           extra={"episodes_done": first_episode + len(metrics)})
        np.save(out / "states.npy", s)

    with execution_mode(run.deterministic):
        for ep in range(first_episode, first_episode + run.episodes):
            try:
                params_new, adam_new, states_new, m = run_episode(params, adam, states, cfg, run, ep,
                                                                  rule, history)
            except TrainingAborted as exc:
                log.error("%s", exc)
                persist(params, adam, states)
                if out is not None:
                    exc.dump_path = out / "abort_states.npy"
                    np.save(exc.dump_path, exc.states)
                raise
            params, adam, states = params_new, adam_new, states_new
            metrics.append(m)
            log.info("episode %d  mean loss %.4e  max loss %.4e", ep, m.mean_loss, m.max_loss)
    persist(params, adam, states)
    return TrainResult(params, adam, states, metrics, history)


# ---------------------------------------------------------------------------
# evaluation

def stat_columns(percentiles: Sequence[float]) -> list[str]:
    """``min, p_lo..., mean, p_hi..., max`` with percentiles below 50 before the mean."""
    ps = sorted(percentiles)
    fmt = [f"p{p:g}" for p in ps]
    lo = [f for p, f in zip(ps, fmt) if p < 50]
    hi = [f for p, f in zip(ps, fmt) if p >= 50]
    return ["min", *lo, "mean", *hi, "max"]


@dataclass
class EvalRow:
    family: str
    type: int
    age: int
    stats: dict[str, float]


def simulate_forward(params: nn.MlpParams, cfg, states: np.ndarray, periods: int, seed: int) -> np.ndarray:
    model = model_for(cfg)
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0x5EED]))
    for _ in range(periods):
        states = model.simulate(params, states, cfg, rng.standard_normal(states.shape[0]))
    return states


def residual_table(params: nn.MlpParams, cfg, states: np.ndarray, rule,
                   percentiles: Sequence[float] = DEFAULT_PERCENTILES, chunk: int = 1024) -> list[EvalRow]:
    """Per family, type and age statistics of absolute residuals over ``states``."""
    model = model_for(cfg)
    parts: dict[str, list[np.ndarray]] = {}
    for k in range(0, states.shape[0], chunk):
        for fam, arr in model.residuals(params, states[k:k + chunk], cfg, rule).items():
            parts.setdefault(fam, []).append(np.abs(arr))
    cols = stat_columns(percentiles)
    rows = []
    for fam in model.RESIDUAL_FAMILIES:
        err = np.concatenate(parts[fam], axis=0)        # (n, T, ages)
        pct = np.percentile(err, sorted(percentiles), axis=0)
        for t in range(err.shape[1]):
            for a in range(err.shape[2]):
                e = err[:, t, a]
                stats = {"min": float(e.min()), "mean": float(e.mean()), "max": float(e.max())}
                for p, v in zip(sorted(percentiles), pct[:, t, a]):
                    stats[f"p{p:g}"] = float(v)
                rows.append(EvalRow(fam, t + 1, a + 1, {c: stats[c] for c in cols}))
    return rows


def evaluate(params: nn.MlpParams, cfg, n_states: int = 8192, n_periods: int = 256,
             percentiles: Sequence[float] = DEFAULT_PERCENTILES, quad_order: int = 8,
             seed: int = 0, start: np.ndarray | None = None) -> tuple[list[EvalRow], np.ndarray]:
    """Simulate ``n_periods`` forward without training and tabulate residuals.

    ``start`` (e.g. the final training states) defaults to copies of a
    single clearing state.  Returns the table and the evaluated states.
    """
    model = model_for(cfg)
    states = start if start is not None else model.initial_states(cfg, n_states)
    states = simulate_forward(params, cfg, states, n_periods, seed)
    return residual_table(params, cfg, states, gauss_hermite(quad_order), percentiles), states


def write_eval_csv(path: str | Path, rows: Sequence[EvalRow]) -> None:
    cols = list(rows[0].stats) if rows else stat_columns(DEFAULT_PERCENTILES)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["residual_family", "type", "age", *cols])
        for r in rows:
            w.writerow([r.family, r.type, r.age, *(repr(r.stats[c]) for c in cols)])
