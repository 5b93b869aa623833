"""Prioritization network and the priority pipeline.

PN maps (stored episode, querying agent's parameters) to a predicted gain in
that agent's per-step test reward. Predictions are min-max normalised into
priorities q, annealed into sampling probabilities P and turned into
importance weights that correct for the non-uniform draw.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .agent import AgentNets
from .neural import MLP, NetParams, clip_grad_norm, sgd_step

EPISODE_FEATURES = ("length", "total_reward", "mean_reward", "std_reward",
                    "captures", "mean_distance", "mean_abs_td")


def signed_log(x):
    """sign(x) * log(1 + |x|): keeps magnitudes spanning decades in a narrow range."""
    x = np.asarray(x, dtype=np.float64)
    return np.sign(x) * np.log1p(np.abs(x))


def feature_width(nets: AgentNets) -> int:
    return len(EPISODE_FEATURES) + 2 * len(nets.online.specs)


def episode_td_errors(episode, nets: AgentNets, gamma: float = 0.9) -> np.ndarray:
    """TD errors of every stored transition under the agent's current online/target nets."""
    q = nets.mlp(nets.online, episode.states)
    q_next = nets.mlp(nets.target, episode.next_states)
    if episode.next_mask is not None:
        q_next = np.where(episode.next_mask, q_next, -np.inf)
    boot = np.where(episode.terminals, 0.0, gamma * q_next.max(axis=1))
    return episode.rewards + boot - q[np.arange(len(episode)), episode.actions]


def param_signature(params: NetParams) -> np.ndarray:
    """Mean and std of every parameter tensor, in layer order."""
    out = []
    for _, view in params.items():
        out.append(view.mean())
        out.append(view.std())
    return np.array(out)


def raw_episode_features(episode, nets: AgentNets, gamma: float = 0.9) -> np.ndarray:
    r = episode.rewards
    dist = float(episode.distances.mean()) if episode.distances is not None else 0.0
    td = episode_td_errors(episode, nets, gamma)
    return np.array([len(episode), r.sum(), r.mean(), r.std(), float(episode.captures), dist,
                     float(np.abs(td).mean())])


def featurize(episode, nets: AgentNets, gamma: float = 0.9) -> np.ndarray:
    """Fixed-width PN input: signed-log episode statistics then the parameter signature."""
    return np.concatenate([signed_log(raw_episode_features(episode, nets, gamma)),
                           param_signature(nets.online)])


def make_pn(width: int, hidden=(64, 32)) -> MLP:
    return MLP((width, *hidden, 1), prefix="pn")


def predict_gain(pn: MLP, params: NetParams, x) -> np.ndarray | float:
    """Predicted reward gain; a scalar for one input row, a vector for a batch."""
    x = np.asarray(x, dtype=np.float64)
    out = pn(params, x)
    return float(out[0]) if x.ndim == 1 else out[:, 0]


def pn_loss_and_grad(pn: MLP, params: NetParams, X, y):
    """Mean squared error of PN over the rows of X and its parameter gradient."""
    X = np.atleast_2d(np.asarray(X, dtype=np.float64))
    y = np.asarray(y, dtype=np.float64).reshape(-1)
    pred, cache = pn.forward(params, X)
    err = pred[:, 0] - y
    loss = float(np.mean(err ** 2))
    grads = pn.backward(params, cache, (2.0 * err / len(y))[:, None])
    return loss, grads


def pn_train_step(pn: MLP, params: NetParams, X, y, lr: float, clip: float | None = None):
    """One gradient step on the PN regression loss; returns the pre-step loss. Updates params in place.

    With clip set, the gradient is rescaled so its global L2 norm is at most clip.
    """
    loss, grads = pn_loss_and_grad(pn, params, X, y)
    sgd_step(params, clip_grad_norm(grads, clip), lr)
    return params, loss


# --- priorities --------------------------------------------------------------------------


def normalize_priorities(gains, zeta: float = 0.01) -> np.ndarray:
    g = np.asarray(gains, dtype=np.float64)
    if g.size == 0:
        raise ValueError("no gains to normalise")
    lo, hi = g.min(), g.max()
    if hi == lo:
        return np.full(g.shape, 1.0 + zeta)
    return (g - lo) / (hi - lo) + zeta


def annealed_probabilities(q, beta: float) -> np.ndarray:
    q = np.asarray(q, dtype=np.float64)
    if np.any(q <= 0):
        raise ValueError("priorities must be positive")
    if not 0.0 <= beta <= 1.0:
        raise ValueError("beta must lie in [0, 1]")
    w = q ** beta
    return w / w.sum()


def importance_weights(P, size: int, lam: float) -> np.ndarray:
    """(size * P)^(-lam), scaled so the largest weight is 1."""
    P = np.asarray(P, dtype=np.float64)
    if np.any(P <= 0):
        raise ValueError("importance weights need strictly positive probabilities")
    raw = (size * P) ** (-lam)
    return raw / raw.max()


def beta_schedule(epoch: int, total_epochs: int, beta0: float = 0.01) -> float:
    if total_epochs <= 0:
        return 1.0
    b = beta0 + (1.0 - beta0) * epoch / total_epochs
    return float(min(1.0, max(beta0, b)))


@dataclass
class PrioritySet:
    gains: np.ndarray
    q: np.ndarray
    P: np.ndarray
    omega: np.ndarray
    beta: float
    zeta: float


def compute_priorities(gains, beta: float, zeta: float = 0.01, lam: float = 0.5) -> PrioritySet:
    q = normalize_priorities(gains, zeta)
    P = annealed_probabilities(q, beta)
    omega = importance_weights(P, len(P), lam)
    return PrioritySet(np.asarray(gains, dtype=np.float64), q, P, omega, beta, zeta)


def uniform_priorities(n: int, zeta: float = 0.01) -> PrioritySet:
    """The prioritisation-disabled path: uniform P and unit weights."""
    return PrioritySet(np.zeros(n), np.full(n, 1.0 + zeta), np.full(n, 1.0 / n), np.ones(n), 0.0, zeta)


@dataclass
class RewardLedger:
    """Per-agent history of per-step average test rewards."""

    k: int = 5
    history: dict = field(default_factory=dict)

    def base(self, n: int) -> float | None:
        h = self.history.get(n, [])
        if not h:
            return None
        return float(np.mean(h[-self.k:]))

    def reward_change(self, n: int, new_reward: float) -> float:
        """Gain of new_reward over the recent-window mean; records new_reward."""
        b = self.base(n)
        delta = 0.0 if b is None else float(new_reward) - b
        self.history.setdefault(n, []).append(float(new_reward))
        return delta

    def to_dict(self) -> dict:
        return {"k": self.k, "history": {str(n): list(h) for n, h in self.history.items()}}

    @classmethod
    def from_dict(cls, d: dict) -> "RewardLedger":
        return cls(int(d["k"]), {int(n): [float(x) for x in h] for n, h in d["history"].items()})
