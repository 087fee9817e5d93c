"""Asset-introduction schedule for the multi-asset economy.

Training starts from a bond-only economy.  Each further asset first gets
its Euler equation switched on (so its price is learned at zero
allocations), then a small mask, then its supply is raised in equal steps.
Every stage warm-starts from the previous stage's weights and states.
"""
from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from . import nn
from .economy import multi
from .trainer import (TrainingAborted, TrainRun, evaluate, execution_mode, fresh_params, train,
                      write_eval_csv)

log = logging.getLogger(__name__)

MANIFEST = "manifest.json"
SMALL_MASK = 0.01


@dataclass(frozen=True)
class HomotopyStage:
    label: str
    weights: tuple[float, float, float, float]   # w_b, w_s, w_o, w_r
    masks: tuple[float, float, float]            # m_b, m_s, m_o
    supplies: tuple[float, float, float, float]  # B, S, Ho, Hex
    episodes: int

    def apply(self, cfg: multi.MultiAssetConfig) -> multi.MultiAssetConfig:
        w_b, w_s, w_o, w_r = self.weights
        m_b, m_s, m_o = self.masks
        B, S, Ho, Hex = self.supplies
        return replace(cfg, w_b=w_b, w_s=w_s, w_o=w_o, w_r=w_r, m_b=m_b, m_s=m_s, m_o=m_o,
                       B=B, S=S, Ho=Ho, Hex=Hex)

    def to_json(self) -> dict:
        return asdict(self)

    @classmethod
    def from_json(cls, d: dict) -> "HomotopyStage":
        return cls(d["label"], tuple(d["weights"]), tuple(d["masks"]), tuple(d["supplies"]), int(d["episodes"]))


def build_schedule(cfg: multi.MultiAssetConfig, stock_steps: int = 10, house_steps: int = 20,
                   initial_episodes: int = 512, episodes: int = 256) -> list[HomotopyStage]:
    """Stage list ending at the supplies, masks and weights of ``cfg``.

    ``1 + 1 + 1 + stock_steps + 1 + 1 + house_steps`` stages.
    """
    if stock_steps < 1 or house_steps < 1:
        raise ValueError("step counts must be at least 1")
    B, S_final = cfg.B, cfg.S
    housing_total = cfg.Ho + cfg.Hex
    Ho_final = cfg.Ho
    w_b, w_s, w_o, w_r = cfg.w_b, cfg.w_s, cfg.w_o, cfg.w_r
    stages = [
        HomotopyStage("bond-only", (w_b, 0.0, 0.0, w_r), (1.0, 0.0, 0.0), (B, 0.0, 0.0, housing_total),
                      initial_episodes),
        HomotopyStage("stock-price", (w_b, w_s, 0.0, w_r), (1.0, 0.0, 0.0), (B, 0.0, 0.0, housing_total),
                      episodes),
        HomotopyStage("stock-mask", (w_b, w_s, 0.0, w_r), (1.0, SMALL_MASK, 0.0),
                      (B, 0.0, 0.0, housing_total), episodes),
    ]
    for k in range(1, stock_steps + 1):
        stages.append(HomotopyStage(f"stock-{k:02d}", (w_b, w_s, 0.0, w_r), (1.0, 1.0, 0.0),
                                    (B, S_final * k / stock_steps, 0.0, housing_total), episodes))
    stages += [
        HomotopyStage("house-price", (w_b, w_s, w_o, w_r), (1.0, 1.0, 0.0), (B, S_final, 0.0, housing_total),
                      episodes),
        HomotopyStage("house-mask", (w_b, w_s, w_o, w_r), (1.0, 1.0, SMALL_MASK),
                      (B, S_final, 0.0, housing_total), episodes),
    ]
    for j in range(1, house_steps + 1):
        ho = Ho_final * j / house_steps
        stages.append(HomotopyStage(f"house-{j:02d}", (w_b, w_s, w_o, w_r), (1.0, 1.0, 1.0),
                                    (B, S_final, ho, housing_total - ho), episodes))
    return stages


def rescale_states(cfg_old: multi.MultiAssetConfig, cfg_new: multi.MultiAssetConfig,
                   states: np.ndarray) -> np.ndarray:
    """Move holdings onto the new stage's clearing identities.

    A positive supply change scales holdings by new/old.  Starting from zero
    supply, the (zero-sum) holdings are shifted up by the equal per-capita
    amount, which keeps newborns at zero and clears exactly.
    """
    z, hold, _ = multi.split_state(cfg_old, states)
    hold = {a: h.copy() for a, h in hold.items()}
    changed = False
    for a in multi.ASSETS:
        old, new = cfg_old.asset(a)["supply"], cfg_new.asset(a)["supply"]
        if old == new:
            continue
        changed = True
        if old > 0:
            hold[a] *= new / old
        else:
            hold[a][:, :, 1:] += multi.per_capita_holdings(cfg_new, new)
    return multi.pack_state(cfg_new, z, hold) if changed else states


def rescale_policy_heads(params: nn.MlpParams, cfg_old: multi.MultiAssetConfig,
                         cfg_new: multi.MultiAssetConfig) -> nn.MlpParams:
    """Keep masked choices continuous when a mask is raised.

    The final-layer columns of an asset's policy head are scaled by
    old/new mask, so ``mask * head`` is unchanged at the switch.  Heads
    whose old mask is zero carry no information and are left alone.
    Only meaningful for identity policy heads.
    """
    if cfg_new.policy_head != "identity":
        return params
    W, b = params.weights[-1].copy(), params.biases[-1].copy()
    start, changed = 0, False
    for head in params.heads:
        cols = slice(start, start + head.width)
        start += head.width
        if head.name not in multi.ASSETS:
            continue
        old, new = cfg_old.asset(head.name)["mask"], cfg_new.asset(head.name)["mask"]
        if old > 0.0 and new > 0.0 and old != new:
            W[:, cols] *= old / new
            b[cols] *= old / new
            changed = True
    if not changed:
        return params
    return replace(params, weights=params.weights[:-1] + [W], biases=params.biases[:-1] + [b])


def clearing_gaps(cfg: multi.MultiAssetConfig, states: np.ndarray, params: nn.MlpParams | None = None) -> dict[str, float]:
    """Largest absolute clearing error per market over a state batch.

    Asset markets are read off the states; the rental market (a same-period
    choice) needs ``params``.
    """
    _, hold, _ = multi.split_state(cfg, states)
    mu = np.asarray(cfg.masses)[None, :, None]
    gaps = {a: float(np.max(np.abs(np.sum(mu * hold[a], axis=(1, 2)) - cfg.asset(a)["supply"])))
            for a in multi.ASSETS}
    if params is not None:
        h_rent = np.asarray(multi.policies(params, states, cfg)["h_rent"])
        gaps["rent"] = float(np.max(np.abs(np.sum(mu * h_rent, axis=(1, 2)) - cfg.rental_supply)))
    return gaps


@dataclass(frozen=True)
class HomotopySettings:
    hidden: tuple[int, ...] = (400, 400)
    eval_states: int = 8192
    eval_periods: int = 256


def _stage_dir(out: Path, k: int, stage: HomotopyStage) -> Path:
    return out / f"stage_{k:02d}_{stage.label}"


def _write_manifest(path: Path, manifest: dict) -> None:
    tmp = path.with_suffix(".tmp")
    tmp.write_text(json.dumps(manifest, indent=2, sort_keys=True))
    tmp.replace(path)


def run_homotopy(cfg: multi.MultiAssetConfig, schedule: Sequence[HomotopyStage], run: TrainRun,
                 out_dir: str | Path, settings: HomotopySettings = HomotopySettings(),
                 resume: bool = False) -> dict:
    """Train through ``schedule``; returns the manifest.

    ``run`` supplies every training hyperparameter except the per-stage
    episode budget.  Episode counters run on across stages so every episode
    draws from its own random stream.  With ``resume`` the schedule stored
    in an existing manifest is continued after its last completed stage.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    mpath = out / MANIFEST
    if resume and mpath.exists():
        manifest = json.loads(mpath.read_text())
        schedule = [HomotopyStage.from_json(s) for s in manifest["schedule"]]
    else:
        manifest = {"schedule": [s.to_json() for s in schedule], "stages": [], "failed": None,
                    "seed": run.seed, "hidden": list(settings.hidden)}
    if not schedule:
        raise ValueError("empty homotopy schedule")

    done = len(manifest["stages"])
    params = adam = states = None
    prev_cfg = None
    episode = 0
    if done:
        last = manifest["stages"][-1]
        ck = nn.load_checkpoint(out / last["checkpoint"])
        params, adam = ck.params, ck.adam
        states = np.load(out / last["states"])
        prev_cfg = schedule[done - 1].apply(cfg)
        episode = last["episode_end"]
        log.info("resuming after stage %d (%s)", done - 1, last["label"])
    else:
        params = fresh_params(cfg, settings.hidden, run.seed)
    manifest["failed"] = None

    for k in range(done, len(schedule)):
        stage = schedule[k]
        stage_cfg = stage.apply(cfg)
        if states is None:
            states = multi.initial_states(stage_cfg, run.trajectories)
        elif prev_cfg is not None:
            states = rescale_states(prev_cfg, stage_cfg, states)
            params = rescale_policy_heads(params, prev_cfg, stage_cfg)
        sdir = _stage_dir(out, k, stage)
        stage_run = replace(run, episodes=stage.episodes)
        meta = {"index": k, **stage.to_json()}
        try:
            res = train(stage_cfg, stage_run, params, adam, states, out_dir=sdir, stage=meta,
                        first_episode=episode)
        except TrainingAborted as exc:
            manifest["failed"] = {"index": k, "label": stage.label, "episode": exc.episode,
                                  "message": str(exc)}
            _write_manifest(mpath, manifest)
            raise
        params, adam, states = res.params, res.adam, res.states
        episode += stage.episodes
        # evaluate from the trained states when there are enough of them
        start = states[:settings.eval_states] if settings.eval_states <= len(states) else None
        with execution_mode(run.deterministic):
            rows, _ = evaluate(params, stage_cfg, settings.eval_states, settings.eval_periods,
                               quad_order=run.quad_order, seed=run.seed + k, start=start)
        write_eval_csv(sdir / "evaluation.csv", rows)
        gaps = clearing_gaps(stage_cfg, states, params)
        manifest["stages"].append({
            "index": k, "label": stage.label,
            "checkpoint": str((sdir / "checkpoint.bin").relative_to(out)),
            "states": str((sdir / "states.npy").relative_to(out)),
            "metrics": str((sdir / "metrics.csv").relative_to(out)),
            "evaluation": str((sdir / "evaluation.csv").relative_to(out)),
            "episode_end": episode,
            "clearing_gaps": gaps,
            "final_mean_loss": res.metrics[-1].mean_loss if res.metrics else None,
        })
        _write_manifest(mpath, manifest)
        prev_cfg = stage_cfg
        log.info("stage %d (%s) done; clearing gaps %s", k, stage.label, gaps)
    return manifest
