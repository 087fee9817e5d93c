"""Command-line driver: ``olgclear {train-single,homotopy,evaluate,profiles}``."""
from __future__ import annotations

import argparse
import csv
import logging
import sys
from pathlib import Path

import numpy as np

from . import nn
from .config import RunConfig, dumps, load_config
from .economy import model_for
from .economy.single import ConfigError
from .homotopy import HomotopySettings, HomotopyStage, build_schedule, run_homotopy
from .trainer import (TrainingAborted, evaluate, execution_mode, fresh_params, simulate_forward, train,
                      write_eval_csv)

log = logging.getLogger("olgclear")

EXIT_OK, EXIT_ABORT, EXIT_INVALID = 0, 1, 2
PROFILE_HEADER = ("variable", "type", "age", "mean", "p10", "p90")


def _common(p: argparse.ArgumentParser, checkpoint: bool = False) -> None:
    p.add_argument("--config", required=True, help="config file or shipped config name")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--mode", choices=("simple", "solver"), default=None)
    p.add_argument("--deterministic", action="store_true",
                   help="single-threaded execution, bitwise-reproducible outputs")
    p.add_argument("-v", "--verbose", action="store_true")
    if checkpoint:
        p.add_argument("--checkpoint", required=True)
        p.add_argument("--states", type=int, default=None, help="number of simulated states")
        p.add_argument("--periods", type=int, default=None, help="periods simulated before measuring")
        p.add_argument("--start", default=None, help="optional .npy state batch to start from")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="olgclear", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)
    p = sub.add_parser("train-single", help="train the single-asset economy")
    _common(p)
    p.add_argument("--episodes", type=int, default=None)
    p = sub.add_parser("homotopy", help="run the multi-asset homotopy schedule")
    _common(p)
    p.add_argument("--episodes", type=int, default=None, help="episodes for every stage")
    p.add_argument("--resume", action="store_true", help="continue from an existing manifest")
    p = sub.add_parser("evaluate", help="residual statistics of a trained checkpoint")
    _common(p, checkpoint=True)
    p = sub.add_parser("profiles", help="life-cycle policy profiles of a trained checkpoint")
    _common(p, checkpoint=True)
    return parser


def _load(args) -> RunConfig:
    cfg = load_config(args.config)
    return cfg.with_overrides(seed=args.seed, mode=args.mode,
                              episodes=getattr(args, "episodes", None),
                              deterministic=args.deterministic)


def cmd_train_single(args) -> int:
    cfg = _load(args)
    if cfg.model != "single":
        raise ConfigError("model", "train-single needs a single-asset config")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.json").write_text(dumps(cfg))
    params = fresh_params(cfg.economy, cfg.hidden, cfg.seed)
    res = train(cfg.economy, cfg.train, params, out_dir=out, stage={"label": "single"})
    if res.metrics:
        print(f"trained {len(res.metrics)} episodes; final mean loss {res.metrics[-1].mean_loss:.4e}")
    else:
        print("no episodes requested; wrote the initial checkpoint")
    return EXIT_OK


def cmd_homotopy(args) -> int:
    cfg = _load(args)
    if cfg.model != "multi":
        raise ConfigError("model", "homotopy needs a multi-asset config")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.json").write_text(dumps(cfg))
    h = cfg.homotopy
    schedule = build_schedule(cfg.economy, h.stock_steps, h.house_steps, h.initial_episodes, h.episodes)
    settings = HomotopySettings(cfg.hidden, cfg.evaluation.states, cfg.evaluation.periods)
    manifest = run_homotopy(cfg.economy, schedule, cfg.train, out, settings, resume=args.resume)
    print(f"completed {len(manifest['stages'])} stages; manifest at {out / 'manifest.json'}")
    return EXIT_OK


def _restore(args, cfg: RunConfig):
    ck = nn.load_checkpoint(args.checkpoint, expect_dims=cfg.dims)
    econ = cfg.economy
    stage = ck.stage or {}
    if cfg.model == "multi" and "supplies" in stage:
        econ = HomotopyStage.from_json(stage).apply(econ)
    n = args.states if args.states is not None else cfg.evaluation.states
    periods = args.periods if args.periods is not None else cfg.evaluation.periods
    if n < 1 or periods < 0:
        raise ConfigError("states", "need at least one state and a nonnegative period count")
    start = None
    if args.start:
        start = np.load(args.start)
        if start.ndim != 2 or start.shape[1] != econ.input_dim:
            raise ConfigError("start", f"state file has shape {start.shape}, expected (n, {econ.input_dim})")
        start = start[:n]
    return ck.params, econ, n, periods, start


def cmd_evaluate(args) -> int:
    cfg = _load(args)
    params, econ, n, periods, start = _restore(args, cfg)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    with execution_mode(args.deterministic):
        rows, _ = evaluate(params, econ, n, periods, cfg.evaluation.percentiles, cfg.train.quad_order,
                           cfg.seed, start)
    write_eval_csv(out / "evaluation.csv", rows)
    worst = max(r.stats[f"p{max(cfg.evaluation.percentiles):g}"] for r in rows)
    print(f"wrote {len(rows)} rows to {out / 'evaluation.csv'}; "
          f"largest p{max(cfg.evaluation.percentiles):g} residual {worst:.3e}")
    return EXIT_OK


def profile_arrays(params: nn.MlpParams, econ, states: np.ndarray) -> dict[str, np.ndarray]:
    """Per-state life-cycle profiles, each ``(n, T, H)``.

    Asset entries are the holdings chosen at each age for the next period;
    the oldest age chooses nothing and reports zero.
    """
    model = model_for(econ)
    pol = model.policies(params, states, econ)
    pad = lambda x: np.concatenate([np.asarray(x), np.zeros(np.shape(x)[:-1] + (1,))], axis=-1)
    out = {"consumption": np.asarray(pol["consumption"])}
    if "next" in pol:
        for a, x in pol["next"].items():
            out[a] = pad(x)
    else:
        out["bond"] = pad(pol["b_next"])
    out["rent"] = np.asarray(pol["h_rent"])
    return out


def cmd_profiles(args) -> int:
    cfg = _load(args)
    params, econ, n, periods, start = _restore(args, cfg)
    model = model_for(econ)
    states = start if start is not None else model.initial_states(econ, n)
    with execution_mode(args.deterministic):
        states = simulate_forward(params, econ, states, periods, cfg.seed)
        prof = profile_arrays(params, econ, states)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    rows = 0
    with open(out / "profiles.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(PROFILE_HEADER)
        for var, arr in prof.items():
            p10, p90 = np.percentile(arr, [10, 90], axis=0)
            mean = arr.mean(axis=0)
            for t in range(arr.shape[1]):
                for a in range(arr.shape[2]):
                    w.writerow([var, t + 1, a + 1, repr(float(mean[t, a])), repr(float(p10[t, a])),
                                repr(float(p90[t, a]))])
                    rows += 1
    print(f"wrote {rows} rows to {out / 'profiles.csv'}")
    return EXIT_OK


COMMANDS = {
    "train-single": cmd_train_single,
    "homotopy": cmd_homotopy,
    "evaluate": cmd_evaluate,
    "profiles": cmd_profiles,
}


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return COMMANDS[args.command](args)
    except (ConfigError, nn.CheckpointError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID
    except TrainingAborted as exc:
        where = f"; offending states in {exc.dump_path}" if exc.dump_path else ""
        print(f"aborted: {exc}{where}", file=sys.stderr)
        return EXIT_ABORT
    except (OSError, FloatingPointError, RuntimeError) as exc:
        print(f"aborted: {exc}", file=sys.stderr)
        return EXIT_ABORT


if __name__ == "__main__":
    sys.exit(main())
