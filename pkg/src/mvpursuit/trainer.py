"""Training loop: rollouts, prioritised per-agent replay rounds, PN updates and checkpoints."""

from __future__ import annotations

import dataclasses
import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import simcore
from .agent import (
    AgentNets, assemble_state, compute_reward, epsilon_schedule, make_agent_nets, q_values,
    select_action, soft_update, state_width, td_gradient_batch,
)
from .cognition import CognitionModel, embedding_width, location_embedding, nearest_targets
from .neural import (
    CheckpointError, NetParams, load_tensors, params_from_tensors, params_to_tensors, save_tensors,
    clip_grad_norm, sgd_step,
)
from .prioritizer import (
    RewardLedger, beta_schedule, compute_priorities, feature_width, featurize, make_pn, pn_train_step, predict_gain,
    uniform_priorities,
)
from .replay import EpisodeTransitionSet, GlobalBuffer, sample_indices
from .roadnet import RoadNetwork, adjacency_matrix, generate_grid, load_map, network_distance

SCENARIOS = {"p6e3": (6, 3), "p7e4": (7, 4), "p8e5": (8, 5)}

# per-grid defaults: lane length and background population
GRID_DEFAULTS = {"3x3": (500.0, 240), "4x5": (400.0, 500)}

# seed-stream purposes
STREAM_ENV, STREAM_ACT, STREAM_SAMPLE, STREAM_TEST, STREAM_INIT, STREAM_EVAL = range(6)


def parse_blocks(text: str) -> tuple[int, int]:
    try:
        bx, by = (int(x) for x in str(text).lower().split("x"))
    except ValueError:
        raise ValueError(f"blocks must look like 3x3, got {text!r}") from None
    if bx < 1 or by < 1:
        raise ValueError(f"blocks must be positive, got {text!r}")
    return bx, by


@dataclass
class TrainConfig:
    # learning
    max_epoch: int = 300
    alpha: float = 1e-4
    gamma: float = 0.9
    tau: float = 0.001
    batch_size: int = 32
    q_clip: float = 1e4
    q_hidden: tuple = (128, 128)
    eps_start: float = 0.9
    eps_end: float = 0.05
    eps_fraction: float = 0.6
    # reward
    V: float = 400.0
    c: float = 0.02
    sigma: float = 5.0
    # prioritisation
    beta0: float = 0.01
    lam: float = 0.5
    zeta: float = 0.01
    k: int = 5
    max_cap: int = 64
    k_sample: int = 8
    pn_lr: float = 1e-3
    pn_clip: float = 10.0
    pn_hidden: tuple = (64, 32)
    # cognition
    f_dim: int = 32
    heads: int = 4
    d_k: int = 16
    # simulator
    st: int = 800
    d_min: float = 5.0
    v_max: float = 20.0
    ac_max: float = 0.5
    de_max: float = 4.5
    # scenario
    scenario: str = "p6e3"
    N: int = 6
    M: int = 3
    B: int = 240
    blocks: str = "3x3"
    lane_length: float = 500.0
    map_path: str = ""
    seed: int = 0
    # switches
    disable_prioritization: bool = False
    disable_cognition: bool = False
    cotrain_cognition: bool = False
    separate_test_episode: bool = False

    def validate(self) -> "TrainConfig":
        checks = [
            (self.max_epoch >= 1, "max_epoch must be >= 1"),
            (self.alpha > 0, "alpha must be positive"),
            (0 <= self.gamma < 1, "gamma must lie in [0, 1)"),
            (0 < self.tau <= 1, "tau must lie in (0, 1]"),
            (self.batch_size >= 1, "batch_size must be >= 1"),
            (self.q_clip > 0, "q_clip must be positive"),
            (0 <= self.eps_end <= self.eps_start <= 1, "need 0 <= eps_end <= eps_start <= 1"),
            (0 < self.eps_fraction <= 1, "eps_fraction must lie in (0, 1]"),
            (self.V > 0 and self.c >= 0 and self.sigma >= 0, "reward constants must be non-negative"),
            (0 < self.beta0 <= 1, "beta0 must lie in (0, 1]"),
            (0 <= self.lam <= 1, "lam must lie in [0, 1]"),
            (self.zeta > 0, "zeta must be positive"),
            (self.k >= 1, "k must be >= 1"),
            (1 <= self.k_sample <= self.max_cap, "need 1 <= k_sample <= max_cap"),
            (self.pn_lr > 0, "pn_lr must be positive"),
            (self.pn_clip > 0, "pn_clip must be positive"),
            (self.st >= 1, "st must be >= 1"),
            (self.d_min > 0, "d_min must be positive"),
            (self.v_max > 0 and self.ac_max > 0 and self.de_max > 0, "kinematic limits must be positive"),
            (self.N > self.M >= 1, "need N > M >= 1"),
            (self.B >= 0, "B must be non-negative"),
            (self.lane_length > 0, "lane_length must be positive"),
        ]
        for ok, msg in checks:
            if not ok:
                raise ValueError(msg)
        if not self.map_path:
            parse_blocks(self.blocks)
        return self

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["q_hidden"] = list(self.q_hidden)
        d["pn_hidden"] = list(self.pn_hidden)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        d = dict(d)
        for key in ("q_hidden", "pn_hidden"):
            if key in d:
                d[key] = tuple(int(x) for x in d[key])
        return cls(**d)


def build_network(cfg: TrainConfig) -> RoadNetwork:
    if cfg.map_path:
        return load_map(cfg.map_path)
    bx, by = parse_blocks(cfg.blocks)
    return generate_grid(bx, by, cfg.lane_length)


def derive_rng(cfg_seed: int, *keys) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([int(cfg_seed), *[int(k) for k in keys]]))


def derive_seed(cfg_seed: int, *keys) -> int:
    return int(np.random.SeedSequence([int(cfg_seed), *[int(k) for k in keys]]).generate_state(1)[0])


@dataclass
class EpochReport:
    epoch: int
    rewards: list            # per-agent per-step average reward of the rollout
    test_rewards: list       # rewards used as the test signal
    delta_r: list | None
    pn_loss: float | None
    length: int
    captures: int
    done: bool
    success: bool
    trained: bool
    beta: float
    epsilon: float
    emergency_stops: int = 0

    @property
    def mean_reward(self) -> float:
        return float(np.mean(self.test_rewards))

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


@dataclass
class EpisodeResult:
    episodes: list            # one EpisodeTransitionSet per agent
    length: int
    captures: int
    success: bool
    emergency_stops: int
    trace: list = field(default_factory=list)

    @property
    def per_step_rewards(self) -> list:
        return [float(e.rewards.sum() / self.length) for e in self.episodes]

    @property
    def total_rewards(self) -> list:
        return [float(e.rewards.sum()) for e in self.episodes]


class Trainer:
    """All mutable training state plus the epoch loop."""

    def __init__(self, config: TrainConfig):
        self.config = config.validate()
        cfg = self.config
        self.net = build_network(cfg)
        self.RT = adjacency_matrix(self.net)
        self.cognition = CognitionModel(self.net.L, cfg.M, f_dim=cfg.f_dim, heads=cfg.heads, d_k=cfg.d_k)
        self.cog_params = self.cognition.init(derive_rng(cfg.seed, STREAM_INIT, 0))
        width = state_width(self.net.L, cfg.f_dim, cfg.M)
        self.agents = [make_agent_nets(width, derive_rng(cfg.seed, STREAM_INIT, 1, n), cfg.q_hidden) for n in range(cfg.N)]
        self.pn = make_pn(feature_width(self.agents[0]), cfg.pn_hidden)
        self.pn_params = self.pn.init(derive_rng(cfg.seed, STREAM_INIT, 2))
        self.buffer = GlobalBuffer(cfg.max_cap)
        self.ledger = RewardLedger(cfg.k)
        self.epoch = 0
        self.audit: list[dict] = []
        self._conv = None

    # -- cognition --------------------------------------------------------------------

    def _conv_features(self):
        if self._conv is None or self.config.cotrain_cognition:
            self._conv = self.cognition.conv_features(self.cog_params, self.RT)
        return self._conv

    def perceive(self, world: simcore.WorldState):
        """Traffic feature, group attention matrix and targets for the current step."""
        cfg = self.config
        active = world.active_evaders()
        bv = simcore.count_background(world)
        tf = self.cognition.extract_traffic_feature(self.RT, bv, self.cog_params, conv=self._conv_features())
        emb_P = np.array([location_embedding(self.net, p.location) for p in world.pursuers])
        emb_E = np.array([location_embedding(self.net, e.location) for e in world.evaders])
        if cfg.disable_cognition:
            W_g = np.zeros((cfg.N, cfg.M))
            targets = nearest_targets(simcore.pursuer_distance_matrix(world), active)
        else:
            ga = self.cognition.group_attention(emb_P, emb_E, tf.F, self.cog_params, active)
            W_g, targets = ga.W_g, ga.targets
        return tf.F, W_g, targets, (emb_P, emb_E, bv, active)

    def _distance(self, world, n: int, m: int) -> float:
        d = network_distance(self.net, world.pursuer(n).location, world.evader(m).location)
        return d if math.isfinite(d) else self.net.unreachable_distance

    # -- rollout ------------------------------------------------------------------------

    def episode_config(self, env_seed: int) -> simcore.EpisodeConfig:
        cfg = self.config
        return simcore.EpisodeConfig(net=self.net, N=cfg.N, M=cfg.M, B=cfg.B, seed=env_seed, d_min=cfg.d_min,
                                     st=cfg.st, v_max=cfg.v_max, ac_max=cfg.ac_max, de_max=cfg.de_max)

    def rollout(self, env_seed: int, epsilon: float, action_rngs, epoch: int = 0,
                trace: bool = False, policy=None) -> EpisodeResult:
        """Play one episode. policy(world, n) may replace the Q-greedy choice (baselines)."""
        cfg = self.config
        N = cfg.N
        world = simcore.reset(self.episode_config(env_seed))
        keep_cog = cfg.cotrain_cognition and not cfg.disable_cognition
        rows = {k: [[] for _ in range(N)] for k in ("s", "a", "r", "s2", "term", "mask", "dist")}
        cog_rows = []
        captures = 0
        records = []
        F, W_g, targets, raw = self.perceive(world)
        states = self._states(world, F, W_g, targets)
        max_closing = 2.0 * cfg.v_max * world.config.dt
        if trace:
            records.append(simcore.trace_record(world, None, W_g))
        while True:
            actions = []
            for n in range(N):
                feasible = simcore.feasible_actions(world, n)
                if policy is not None:
                    a = policy(world, n)
                else:
                    q = q_values(self.agents[n], states[n])
                    a = select_action(q, feasible, epsilon, action_rngs[n])
                actions.append(a)
            d_prev = [self._distance(world, n, targets[n]) for n in range(N)]
            world, events = simcore.step(world, actions, targets)
            captured = {m for _, m in events.captures}
            captures += len(events.captures)
            d_now = [self._distance(world, n, targets[n]) for n in range(N)]
            if world.done:
                next_states = self._states(world, F, W_g, targets)
                nxt = None
            else:
                nxt = self.perceive(world)
                next_states = self._states(world, nxt[0], nxt[1], nxt[2])
            for n in range(N):
                got = int(targets[n]) in captured
                rows["s"][n].append(states[n])
                rows["a"][n].append(actions[n])
                rows["r"][n].append(compute_reward(got, world.step, d_now[n], d_prev[n], cfg.V, cfg.c, cfg.sigma,
                                                 max_closing))
                rows["s2"][n].append(next_states[n])
                rows["term"][n].append(got or world.done)
                mask = np.zeros(3, dtype=bool)
                mask[simcore.feasible_actions(world, n)] = True
                rows["mask"][n].append(mask)
                rows["dist"][n].append(d_prev[n])
            if keep_cog:
                cog_rows.append(raw)
            if trace:
                records.append(simcore.trace_record(world, events, None if nxt is None else nxt[1]))
            if world.done:
                break
            F, W_g, targets, raw = nxt
            states = next_states
        length = world.step
        episodes = []
        for n in range(N):
            meta = {}
            if keep_cog and n == 0:
                meta["cognition_inputs"] = cog_rows
            episodes.append(EpisodeTransitionSet(
                agent=n, states=np.array(rows["s"][n]), actions=rows["a"][n], rewards=rows["r"][n],
                next_states=np.array(rows["s2"][n]), terminals=rows["term"][n],
                next_mask=np.array(rows["mask"][n]), distances=rows["dist"][n],
                captures=captures, epoch=epoch, scenario=cfg.scenario, meta=meta))
        success = not world.active_evaders().any()
        return EpisodeResult(episodes, length, captures, success, world.emergency_stops, records)

    def _states(self, world, F, W_g, targets):
        return [assemble_state(self.net, world.pursuer(n).location, world.evader(int(targets[n])).location,
                               F, W_g[n]) for n in range(self.config.N)]

    # -- training -------------------------------------------------------------------------

    def priorities_for(self, n: int, beta: float):
        """PN inputs and priority set of every buffer entry for agent n."""
        cfg = self.config
        if cfg.disable_prioritization:
            return None, uniform_priorities(len(self.buffer), cfg.zeta)
        X = np.array([featurize(e, self.agents[n], cfg.gamma) for e in self.buffer])
        gains = predict_gain(self.pn, self.pn_params, X)
        return X, compute_priorities(gains, beta, cfg.zeta, cfg.lam)

    def train_round(self, beta: float, epoch: int | None = None):
        """One prioritised replay round for every agent. Returns PN inputs per agent
        for the sampled entries (None when prioritisation is disabled)."""
        cfg = self.config
        if not self.buffer.full:
            raise RuntimeError(f"buffer holds {len(self.buffer)} of {cfg.max_cap} episodes; training is gated")
        epoch = self.epoch if epoch is None else epoch
        # score everything before anyone trains so agents are independent of update order
        scored = [self.priorities_for(n, beta) for n in range(cfg.N)]
        pn_inputs = []
        for n in range(cfg.N):
            X, ps = scored[n]
            idx = sample_indices(self.buffer, ps.P, cfg.k_sample, derive_rng(cfg.seed, epoch, STREAM_SAMPLE, n))
            chosen = set(idx)
            for i, e in enumerate(self.buffer):
                self.audit.append({"epoch": epoch, "agent": n, "entry": e.entry_id, "gain": float(ps.gains[i]),
                                   "q": float(ps.q[i]), "P": float(ps.P[i]), "omega": float(ps.omega[i]),
                                   "sampled": int(i in chosen)})
            for i in idx:
                self.replay_episode(n, self.buffer[i], float(ps.omega[i]))
            pn_inputs.append(None if X is None else X[idx])
        return pn_inputs

    def replay_episode(self, n: int, ep: EpisodeTransitionSet, omega: float) -> None:
        """Replay one stored episode in order: one optimizer step and one soft update per batch."""
        cfg = self.config
        nets = self.agents[n]
        cotrain = n == 0 and "cognition_inputs" in ep.meta and cfg.cotrain_cognition
        for lo in range(0, len(ep), cfg.batch_size):
            sl = slice(lo, lo + cfg.batch_size)
            S = ep.states[sl]
            if cotrain:
                S, cog_cache = self._recompute_states(ep, sl)
                grads, _, d_in = td_gradient_batch(nets, S, ep.actions[sl], ep.rewards[sl], ep.next_states[sl],
                                                   ep.terminals[sl], omega, cfg.gamma, ep.next_mask[sl],
                                                   input_grad=True)
                self._cognition_step(d_in, cog_cache)
            else:
                grads, _ = td_gradient_batch(nets, S, ep.actions[sl], ep.rewards[sl], ep.next_states[sl],
                                             ep.terminals[sl], omega, cfg.gamma, ep.next_mask[sl])
            sgd_step(nets.online, clip_grad_norm(grads, cfg.q_clip), cfg.alpha)
            soft_update(nets, cfg.tau)

    def _recompute_states(self, ep, sl):
        """Agent-0 states rebuilt from stored cognition inputs with the current cognition parameters."""
        cfg = self.config
        e = embedding_width(self.net.L)
        conv = self.cognition.conv_features(self.cog_params, self.RT)
        S = ep.states[sl].copy()
        cache = []
        for r, (emb_P, emb_E, bv, active) in zip(range(len(S)), ep.meta["cognition_inputs"][sl]):
            tf = self.cognition.extract_traffic_feature(self.RT, bv, self.cog_params, conv=conv)
            ga = self.cognition.group_attention(emb_P, emb_E, tf.F, self.cog_params, active)
            S[r, 2 * e: 2 * e + cfg.f_dim] = tf.F
            S[r, 2 * e + cfg.f_dim:] = ga.W_g[0]
            cache.append((tf, ga))
        return S, cache

    def _cognition_step(self, d_in, cache) -> None:
        cfg = self.config
        e = embedding_width(self.net.L)
        grads = self.cog_params.zeros_like()
        for r, (tf, ga) in enumerate(cache):
            dF = d_in[r, 2 * e: 2 * e + cfg.f_dim].copy()
            gW = np.zeros_like(ga.W_g)
            gW[0] = d_in[r, 2 * e + cfg.f_dim:]
            dF += self.cognition.group_attention_backward(self.cog_params, ga, gW, grads)
            self.cognition.traffic_feature_backward(self.cog_params, tf, dF, grads)
        sgd_step(self.cog_params, grads, cfg.alpha)
        self._conv = None

    def run_epoch(self) -> EpochReport:
        cfg = self.config
        epoch = self.epoch
        beta = beta_schedule(epoch, cfg.max_epoch, cfg.beta0)
        eps = epsilon_schedule(epoch, cfg.max_epoch, cfg.eps_start, cfg.eps_end, cfg.eps_fraction)
        trained = self.buffer.full
        pn_inputs = self.train_round(beta, epoch) if trained else None

        rngs = [derive_rng(cfg.seed, epoch, STREAM_ACT, n) for n in range(cfg.N)]
        result = self.rollout(derive_seed(cfg.seed, epoch, STREAM_ENV), eps, rngs, epoch)
        for ep in result.episodes:
            self.buffer.append(ep)
        rewards = result.per_step_rewards
        test = rewards
        if cfg.separate_test_episode:
            test_rngs = [derive_rng(cfg.seed, epoch, STREAM_TEST, n) for n in range(cfg.N)]
            test = self.rollout(derive_seed(cfg.seed, epoch, STREAM_TEST), 0.0, test_rngs, epoch).per_step_rewards

        delta = [self.ledger.reward_change(n, test[n]) for n in range(cfg.N)]
        pn_loss = None
        if trained and pn_inputs is not None and pn_inputs[0] is not None:
            X = np.concatenate(pn_inputs)
            y = np.concatenate([np.full(len(pn_inputs[n]), delta[n]) for n in range(cfg.N)])
            _, pn_loss = pn_train_step(self.pn, self.pn_params, X, y, cfg.pn_lr, cfg.pn_clip)
        self.epoch += 1
        return EpochReport(epoch=epoch, rewards=rewards, test_rewards=list(test),
                           delta_r=delta if trained else None, pn_loss=pn_loss, length=result.length,
                           captures=result.captures, done=True, success=result.success, trained=trained,
                           beta=beta, epsilon=eps, emergency_stops=result.emergency_stops)

    def train(self, epochs: int | None = None, log=None) -> list[EpochReport]:
        reports = []
        stop = self.config.max_epoch if epochs is None else self.epoch + epochs
        while self.epoch < stop:
            rep = self.run_epoch()
            reports.append(rep)
            if log is not None:
                log(rep)
        return reports

    # -- checkpoints ----------------------------------------------------------------------

    def save_checkpoint(self, path) -> None:
        """Directory with one file per agent network plus a state file for everything else."""
        path = Path(path)
        path.mkdir(parents=True, exist_ok=True)
        for n, nets in enumerate(self.agents):
            save_tensors(path / f"agent_{n}_online.bin", params_to_tensors("q", nets.online), {"agent": n})
            save_tensors(path / f"agent_{n}_target.bin", params_to_tensors("q", nets.target), {"agent": n})
        tensors = {}
        tensors.update(params_to_tensors("cognition", self.cog_params))
        tensors.update(params_to_tensors("pn", self.pn_params))
        entries = []
        for i, e in enumerate(self.buffer):
            key = f"buffer/{i}"
            tensors[f"{key}/states"] = e.states
            tensors[f"{key}/actions"] = e.actions.astype(np.float64)
            tensors[f"{key}/rewards"] = e.rewards
            tensors[f"{key}/next_states"] = e.next_states
            tensors[f"{key}/terminals"] = e.terminals.astype(np.float64)
            if e.next_mask is not None:
                tensors[f"{key}/next_mask"] = e.next_mask.astype(np.float64)
            if e.distances is not None:
                tensors[f"{key}/distances"] = e.distances
            cog = e.meta.get("cognition_inputs")
            if cog:
                for j, name in enumerate(("emb_P", "emb_E", "bv", "active")):
                    tensors[f"{key}/cog_{name}"] = np.array([row[j] for row in cog], dtype=np.float64)
            entries.append({"agent": e.agent, "captures": e.captures, "epoch": e.epoch, "scenario": e.scenario,
                            "entry_id": e.entry_id, "mask": e.next_mask is not None,
                            "dist": e.distances is not None, "cog": bool(cog)})
        meta = {"config": self.config.to_dict(), "epoch": self.epoch, "ledger": self.ledger.to_dict(),
                "buffer": {"entries": entries, "next_id": self.buffer.next_id}}
        save_tensors(path / "state.bin", tensors, meta)

    @classmethod
    def load_checkpoint(cls, path) -> "Trainer":
        path = Path(path)
        state = path / "state.bin"
        if not state.exists():
            raise CheckpointError(f"{path}: no state.bin found")
        tensors, meta = load_tensors(state)
        try:
            config = TrainConfig.from_dict(meta["config"])
        except (KeyError, TypeError) as exc:
            raise CheckpointError(f"{path}: bad config block ({exc})") from None
        tr = cls(config)
        tr.cog_params = params_from_tensors("cognition", tensors, tr.cog_params)
        tr.pn_params = params_from_tensors("pn", tensors, tr.pn_params)
        for n, nets in enumerate(tr.agents):
            on, _ = load_tensors(path / f"agent_{n}_online.bin")
            tg, _ = load_tensors(path / f"agent_{n}_target.bin")
            nets.online = params_from_tensors("q", on, nets.online)
            nets.target = params_from_tensors("q", tg, nets.target)
        for i, info in enumerate(meta["buffer"]["entries"]):
            key = f"buffer/{i}"
            ep_meta = {}
            if info["cog"]:
                cols = [tensors[f"{key}/cog_{name}"] for name in ("emb_P", "emb_E", "bv", "active")]
                ep_meta["cognition_inputs"] = [(cols[0][t], cols[1][t], cols[2][t], cols[3][t].astype(bool))
                                               for t in range(len(cols[0]))]
            tr.buffer.append(EpisodeTransitionSet(
                agent=info["agent"], states=tensors[f"{key}/states"],
                actions=tensors[f"{key}/actions"].astype(np.int64), rewards=tensors[f"{key}/rewards"],
                next_states=tensors[f"{key}/next_states"], terminals=tensors[f"{key}/terminals"].astype(bool),
                next_mask=tensors[f"{key}/next_mask"].astype(bool) if info["mask"] else None,
                distances=tensors[f"{key}/distances"] if info["dist"] else None,
                captures=info["captures"], epoch=info["epoch"], scenario=info["scenario"],
                entry_id=info["entry_id"], meta=ep_meta))
        tr.buffer.next_id = meta["buffer"]["next_id"]
        tr.ledger = RewardLedger.from_dict(meta["ledger"])
        tr.epoch = int(meta["epoch"])
        return tr


def write_jsonl(path, records) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for rec in records:
            fh.write(json.dumps(rec, sort_keys=True) + "\n")
