"""Per-pursuer DQN planner: state assembly, action choice, reward, TD update."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .cognition import embedding_width, location_embedding
from .neural import MLP, NetParams
from .roadnet import Location, RoadNetwork

N_ACTIONS = 3

# reward constants
CAPTURE_REWARD = 400.0
STEP_PENALTY = 0.02
DISTANCE_SCALE = 5.0


def state_width(L: int, f_dim: int, M: int) -> int:
    return 2 * embedding_width(L) + f_dim + M


def assemble_state(net: RoadNetwork, own: Location, target: Location, F, wg_row) -> np.ndarray:
    """[own embedding, target embedding, traffic feature, own row of W_g]."""
    return np.concatenate([
        location_embedding(net, own),
        location_embedding(net, target),
        np.asarray(F, dtype=np.float64),
        np.asarray(wg_row, dtype=np.float64),
    ])


@dataclass
class AgentNets:
    """Online and target Q-networks sharing one layer layout."""

    mlp: MLP
    online: NetParams
    target: NetParams

    @property
    def width(self) -> int:
        return self.mlp.sizes[0]

    def copy(self) -> "AgentNets":
        return AgentNets(self.mlp, self.online.copy(), self.target.copy())


def make_agent_nets(width: int, rng: np.random.Generator, hidden=(128, 128)) -> AgentNets:
    mlp = MLP((width, *hidden, N_ACTIONS), prefix="q")
    online = mlp.init(rng)
    return AgentNets(mlp, online, online.copy())


def q_values(nets: AgentNets, s, params: NetParams | None = None) -> np.ndarray:
    s = np.asarray(s, dtype=np.float64)
    if s.shape[-1] != nets.width:
        raise ValueError(f"state width {s.shape[-1]} does not match network input {nets.width}")
    return nets.mlp(nets.online if params is None else params, s)


def select_action(q, feasible, epsilon: float, rng: np.random.Generator) -> int:
    """Epsilon-greedy over feasible actions; argmax ties go to the lowest index."""
    feasible = sorted(int(a) for a in feasible)
    if not feasible:
        raise ValueError("no feasible actions")
    if epsilon > 0.0 and rng.random() < epsilon:
        return feasible[int(rng.integers(len(feasible)))]
    q = np.asarray(q, dtype=np.float64)
    best = feasible[0]
    for a in feasible[1:]:
        if q[a] > q[best]:
            best = a
    return best


def compute_reward(captured_by_group: bool, t: int, d_t: float, d_prev: float,
                   V: float = CAPTURE_REWARD, c: float = STEP_PENALTY, sigma: float = DISTANCE_SCALE,
                   max_change: float | None = None) -> float:
    """V on a group capture, otherwise a flat step penalty plus distance-closing shaping.

    t is accepted for interface symmetry; the penalty does not grow with time.
    max_change caps |d_prev - d_t|. Driving distance on one-way lanes jumps by a
    whole loop when the shortest route changes (a wrong turn, the target slipping
    behind), far more than two vehicles can close or open in one step.
    """
    if captured_by_group:
        return float(V)
    if d_t < 0 or d_prev < 0:
        raise ValueError("distances must be non-negative")
    change = d_prev - d_t
    if max_change is not None:
        change = min(max(change, -max_change), max_change)
    return float(-c + sigma * change)


def td_gradient(nets: AgentNets, s, a: int, r: float, s_next, terminal: bool,
                omega: float = 1.0, gamma: float = 0.9, next_mask=None):
    """Gradient of 0.5 * omega * delta^2 w.r.t. the online parameters (target held fixed).

    Returns (grads, delta). Applying sgd_step(online, grads, alpha) moves Q(s, a)
    by alpha * omega * delta along its gradient; the learning rate is applied
    only there. next_mask optionally restricts the bootstrap max to feasible actions.
    """
    s = np.asarray(s, dtype=np.float64)
    q, cache = nets.mlp.forward(nets.online, s)
    target = float(r)
    if not terminal:
        q_next = nets.mlp(nets.target, np.asarray(s_next, dtype=np.float64))
        if next_mask is not None:
            q_next = q_next[np.asarray(next_mask, dtype=bool)]
        target += gamma * float(np.max(q_next))
    delta = target - float(q[a])
    g_out = np.zeros(N_ACTIONS)
    g_out[a] = -omega * delta
    return nets.mlp.backward(nets.online, cache, g_out), delta


def td_gradient_batch(nets: AgentNets, S, A, R, S_next, terminal, omega, gamma: float = 0.9,
                      next_mask=None, input_grad: bool = False):
    """Sum of the per-transition td_gradient over a batch, all evaluated at the current
    parameters. Returns (grads, deltas)."""
    S = np.asarray(S, dtype=np.float64)
    A = np.asarray(A, dtype=np.int64)
    n = len(A)
    q, cache = nets.mlp.forward(nets.online, S)
    q_next = nets.mlp(nets.target, np.asarray(S_next, dtype=np.float64))
    if next_mask is not None:
        q_next = np.where(np.asarray(next_mask, dtype=bool), q_next, -np.inf)
    boot = np.where(np.asarray(terminal, dtype=bool), 0.0, gamma * q_next.max(axis=1))
    deltas = np.asarray(R, dtype=np.float64) + boot - q[np.arange(n), A]
    g_out = np.zeros((n, N_ACTIONS))
    g_out[np.arange(n), A] = -np.broadcast_to(np.asarray(omega, dtype=np.float64), (n,)) * deltas
    if input_grad:
        grads, d_in = nets.mlp.backward(nets.online, cache, g_out, input_grad=True)
        return grads, deltas, d_in
    return nets.mlp.backward(nets.online, cache, g_out), deltas


def soft_update(nets: AgentNets, tau: float) -> AgentNets:
    """target <- tau * online + (1 - tau) * target, in place."""
    if not 0.0 < tau <= 1.0:
        raise ValueError("tau must be in (0, 1]")
    if tau == 1.0:
        nets.target.flat[...] = nets.online.flat
    else:
        # written as a step toward online so equal parameters stay bit-identical
        nets.target.flat += tau * (nets.online.flat - nets.target.flat)
    return nets


def epsilon_schedule(epoch: int, total_epochs: int, start: float = 0.9, end: float = 0.05,
                     fraction: float = 0.6) -> float:
    """Linear anneal from start to end over the first `fraction` of training, then flat."""
    span = max(1.0, fraction * total_epochs)
    f = min(1.0, max(0.0, epoch / span))
    return start + (end - start) * f
