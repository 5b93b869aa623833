"""Greedy evaluation episodes and the five summary metrics."""

from __future__ import annotations

import csv
import io
from dataclasses import asdict, dataclass

import numpy as np

from .trainer import STREAM_EVAL, Trainer, derive_rng, derive_seed

CSV_FIELDS = ("episode", "seed", "steps", "success", "captures", "reward", "reward_per_step")


@dataclass
class EvalMetrics:
    AR: float         # mean episode reward (summed over steps, averaged over agents)
    SDR: float
    ATS: float
    SDTS: float
    SR: float
    AR_per_step: float
    episodes: int

    def to_dict(self) -> dict:
        return asdict(self)


def summarize(rows) -> EvalMetrics:
    """Population statistics over per-episode rows."""
    if not rows:
        raise ValueError("no episodes to summarise")
    reward = np.array([r["reward"] for r in rows], dtype=np.float64)
    steps = np.array([r["steps"] for r in rows], dtype=np.float64)
    success = np.array([r["success"] for r in rows], dtype=np.float64)
    per_step = np.array([r["reward_per_step"] for r in rows], dtype=np.float64)
    return EvalMetrics(AR=float(reward.mean()), SDR=float(reward.std()), ATS=float(steps.mean()),
                       SDTS=float(steps.std()), SR=float(success.mean()), AR_per_step=float(per_step.mean()),
                       episodes=len(rows))


def evaluate(trainer: Trainer, episodes: int, seed: int, policy=None):
    """Run greedy episodes with seeds derived from `seed`. Returns (metrics, rows)."""
    if episodes < 1:
        raise ValueError("need at least one episode")
    N = trainer.config.N
    rows = []
    for i in range(episodes):
        env_seed = derive_seed(seed, STREAM_EVAL, i)
        rngs = [derive_rng(seed, STREAM_EVAL, i, n) for n in range(N)]
        res = trainer.rollout(env_seed, 0.0, rngs, policy=policy)
        rows.append({
            "episode": i, "seed": env_seed, "steps": res.length, "success": int(res.success),
            "captures": res.captures, "reward": float(np.mean(res.total_rewards)),
            "reward_per_step": float(np.mean(res.per_step_rewards)),
        })
    return summarize(rows), rows


def rows_to_csv(rows) -> str:
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=CSV_FIELDS, lineterminator="\n")
    w.writeheader()
    for r in rows:
        w.writerow({k: repr(v) if isinstance(v, float) else v for k, v in r.items()})
    return buf.getvalue()


def rows_from_csv(text: str):
    rows = []
    for r in csv.DictReader(io.StringIO(text)):
        rows.append({"episode": int(r["episode"]), "seed": int(r["seed"]), "steps": int(r["steps"]),
                     "success": int(r["success"]), "captures": int(r["captures"]),
                     "reward": float(r["reward"]), "reward_per_step": float(r["reward_per_step"])})
    return rows
