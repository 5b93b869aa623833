"""Discrete-time pursuit-evasion micro-simulation on a lane graph.

Vehicles are points on lanes. Each step every moving vehicle picks the
largest speed within its acceleration/braking limits that keeps both its
next position and its full-braking stopping point behind the obstacle
ahead (leader on the same lane, rearmost vehicle on the lane it will
enter, a merging vehicle closer to the junction, or a red stop line).
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import dataclass, field

import numpy as np

from .roadnet import LEFT, RIGHT, STRAIGHT, Location, RoadNetwork, network_distance

PURSUER, EVADER, BACKGROUND = "pursuer", "evader", "background"
NS_GREEN, EW_GREEN, UNSIGNALISED = 0, 1, -1
_EPS = 1e-9


class PlacementError(RuntimeError):
    pass


@dataclass
class EpisodeConfig:
    net: RoadNetwork
    N: int
    M: int
    B: int = 0
    seed: int = 0
    d_min: float = 5.0
    st: int = 800
    v_max: float = 20.0
    ac_max: float = 0.5
    de_max: float = 4.5
    min_gap: float = 5.0
    light_cycle: int = 30
    dt: float = 1.0
    static_evaders: bool = False

    def __post_init__(self):
        if not (self.N > self.M >= 1):
            raise ValueError(f"need N > M >= 1, got N={self.N}, M={self.M}")
        if self.B < 0:
            raise ValueError("B must be non-negative")
        if self.d_min <= 0:
            raise ValueError("d_min must be positive")
        if self.st < 1:
            raise ValueError("st must be at least 1")


@dataclass(slots=True)
class Vehicle:
    id: int
    kind: str
    lane: int
    offset: float
    speed: float = 0.0
    captured: bool = False
    intent: int = -1
    action: int = STRAIGHT

    @property
    def location(self) -> Location:
        return Location(self.lane, self.offset)


@dataclass
class StepEvents:
    """captures holds (pursuer index, evader index) pairs."""

    captures: list = field(default_factory=list)
    done: bool = False


class _Scene:
    """Per-network lookup tables used by the kinematics."""

    def __init__(self, net: RoadNetwork):
        self.net = net
        self.lengths = [lane.length for lane in net.lanes]
        self.ns_axis = []
        for lane in net.lanes:
            a, b = net.junctions[lane.src], net.junctions[lane.dst]
            self.ns_axis.append(abs(b.y - a.y) >= abs(b.x - a.x))
        self.signalised = [len(inc) >= 3 for inc in net.incoming]


_SCENES: dict[int, _Scene] = {}


def _scene(net: RoadNetwork) -> _Scene:
    sc = _SCENES.get(id(net))
    if sc is None or sc.net is not net:
        sc = _Scene(net)
        _SCENES[id(net)] = sc
    return sc


def braking_distance(v: float, de: float) -> float:
    """Distance covered while braking at de per step from speed v (position advances by the new speed)."""
    if v <= 0.0:
        return 0.0
    n = math.floor(v / de)
    return n * v - de * n * (n + 1) / 2.0


def max_speed_within(room: float, de: float) -> float:
    """Largest v with v + braking_distance(v) <= room; -1 when room < 0."""
    if room < 0.0:
        return -1.0
    n = math.floor((-1.0 + math.sqrt(1.0 + 8.0 * room / de)) / 2.0)
    while de * n * (n + 1) / 2.0 > room:
        n -= 1
    while de * (n + 1) * (n + 2) / 2.0 <= room:
        n += 1
    return (room + de * n * (n + 1) / 2.0) / (n + 1)


class WorldState:
    def __init__(self, config: EpisodeConfig):
        self.config = config
        self.net = config.net
        self.scene = _scene(config.net)
        self.step = 0
        self.vehicles: list[Vehicle] = []
        self.rng = np.random.default_rng(config.seed)
        self.light_phases = np.zeros(len(self.net.junctions), dtype=np.int64)
        self.targets = np.zeros(config.N, dtype=np.int64)
        self.done = False
        self.emergency_stops = 0
        self._occ: dict[int, list[int]] = {}
        self._start_offset: list[float] = []

    # -- views ----------------------------------------------------------------

    @property
    def N(self):
        return self.config.N

    @property
    def M(self):
        return self.config.M

    def pursuer(self, n: int) -> Vehicle:
        return self.vehicles[n]

    def evader(self, m: int) -> Vehicle:
        return self.vehicles[self.config.N + m]

    @property
    def pursuers(self):
        return self.vehicles[: self.config.N]

    @property
    def evaders(self):
        return self.vehicles[self.config.N: self.config.N + self.config.M]

    @property
    def background(self):
        return self.vehicles[self.config.N + self.config.M:]

    def active_evaders(self) -> np.ndarray:
        return np.array([not e.captured for e in self.evaders], dtype=bool)

    def occupants(self, lane: int) -> list[int]:
        return self._occ.get(lane, [])

    # -- mutation helpers -------------------------------------------------------

    def _occ_add(self, vid: int, lane: int):
        self._occ.setdefault(lane, []).append(vid)

    def _occ_remove(self, vid: int, lane: int):
        self._occ[lane].remove(vid)

    def place(self, vid: int, lane: int, offset: float, speed: float | None = None) -> None:
        """Move a vehicle directly (scenario construction and tests)."""
        v = self.vehicles[vid]
        self.net.validate_location(Location(lane, offset))
        if not v.captured:
            self._occ_remove(vid, v.lane)
            self._occ_add(vid, lane)
        v.lane, v.offset = lane, float(offset)
        if speed is not None:
            v.speed = float(speed)
        v.intent = self._initial_intent(v)

    def _initial_intent(self, v: Vehicle) -> int:
        succ = self.net.successors[v.lane]
        if not succ:
            return -1
        if v.kind == PURSUER:
            moves = self.net.turn_table[v.lane]
            if v.action in moves:
                return moves[v.action]
            for a in (LEFT, RIGHT, STRAIGHT):
                if a in moves:
                    return moves[a]
            return succ[0]
        return succ[int(self.rng.integers(len(succ)))]

    # -- serialisation ------------------------------------------------------------

    def snapshot(self) -> dict:
        return {
            "t": self.step,
            "vehicles": [
                {"id": v.id, "kind": v.kind, "lane": v.lane, "offset": v.offset, "speed": v.speed,
                 "captured": v.captured, "intent": v.intent}
                for v in self.vehicles
            ],
            "light_phases": self.light_phases.tolist(),
            "targets": self.targets.tolist(),
            "done": self.done,
        }

    def state_hash(self) -> str:
        blob = json.dumps(self.snapshot(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()


# --- episode lifecycle ---------------------------------------------------------


def _corner_lanes(net: RoadNetwork, high: bool, need: int, spacing: float) -> list[int]:
    """Lanes of the corner block nearest the low (or high) diagonal corner, grown until they fit `need`."""
    key = [(j.x + j.y, j.id) for j in net.junctions]
    corner = max(key)[1] if high else min(key)[1]
    cx, cy = net.junctions[corner].x, net.junctions[corner].y
    order = sorted(net.junctions, key=lambda j: (math.hypot(j.x - cx, j.y - cy), -j.id if high else j.id))
    for k in range(min(4, len(order)), len(order) + 1):
        members = {j.id for j in order[:k]}
        lanes = [l.id for l in net.lanes if l.src in members and l.dst in members]
        cap = sum(int(net.lanes[l].length // spacing) for l in lanes)
        if lanes and cap >= need * 2:
            return lanes
    return [l.id for l in net.lanes]


def _spawn(world: WorldState, kind: str, lanes: list[int], spacing: float, tries: int = 2000) -> Vehicle:
    net, rng = world.net, world.rng
    for _ in range(tries):
        lane = lanes[int(rng.integers(len(lanes)))]
        length = net.lanes[lane].length
        offset = float(rng.uniform(0.0, length))
        if all(abs(world.vehicles[o].offset - offset) >= spacing for o in world.occupants(lane)):
            v = Vehicle(len(world.vehicles), kind, lane, offset)
            world.vehicles.append(v)
            world._occ_add(v.id, lane)
            return v
    raise PlacementError(f"could not place {kind} vehicle #{len(world.vehicles)}: road too crowded")


def reset(config: EpisodeConfig) -> WorldState:
    world = WorldState(config)
    net = config.net
    spacing = 2.0 * config.min_gap
    total_cap = sum(int(l.length // spacing) for l in net.lanes)
    if config.N + config.M + config.B > total_cap:
        raise PlacementError(f"{config.N + config.M + config.B} vehicles exceed road capacity {total_cap}")
    p_lanes = _corner_lanes(net, False, config.N, spacing)
    e_lanes = _corner_lanes(net, True, config.M, spacing)
    for _ in range(config.N):
        _spawn(world, PURSUER, p_lanes, spacing)
    for _ in range(config.M):
        _spawn(world, EVADER, e_lanes, spacing)
    all_lanes = list(range(net.L))
    for _ in range(config.B):
        _spawn(world, BACKGROUND, all_lanes, spacing)
    for v in world.vehicles:
        v.intent = world._initial_intent(v)
    world.light_phases = _light_phases(world, 0)
    world.targets = nearest_evader_targets(world)
    return world


def _light_phases(world: WorldState, t: int) -> np.ndarray:
    phase = (t // world.config.light_cycle) % 2
    return np.array([phase if s else UNSIGNALISED for s in world.scene.signalised], dtype=np.int64)


def is_red(world: WorldState, lane: int) -> bool:
    j = world.net.lanes[lane].dst
    phase = world.light_phases[j]
    if phase == UNSIGNALISED:
        return False
    return (phase == NS_GREEN) != world.scene.ns_axis[lane]


def pursuer_distance_matrix(world: WorldState) -> np.ndarray:
    net = world.net
    return np.array([[network_distance(net, p.location, e.location) for e in world.evaders]
                     for p in world.pursuers])


def nearest_evader_targets(world: WorldState) -> np.ndarray:
    active = world.active_evaders()
    if not active.any():
        return world.targets.copy()
    d = np.where(active[None, :], pursuer_distance_matrix(world), np.inf)
    return np.argmin(d, axis=1)


def feasible_actions(world: WorldState, n: int) -> list[int]:
    """Turn choices available at the end of pursuer n's current lane."""
    if not 0 <= n < world.N:
        raise ValueError(f"unknown pursuer {n}")
    return sorted(world.net.turn_table[world.pursuer(n).lane])


def count_background(world: WorldState) -> np.ndarray:
    bv = np.zeros(world.net.L, dtype=np.float64)
    for v in world.background:
        bv[v.lane] += 1.0
    return bv


# --- kinematics ------------------------------------------------------------------------


def _can_stop(v: Vehicle, length: float, de: float) -> bool:
    return v.offset + braking_distance(v.speed, de) <= length + _EPS


def _next_state(world, other: Vehicle, moved: list[bool]) -> tuple[int, float, float]:
    """(lane, position, speed) of another vehicle: its updated state, or the least it can reach."""
    if moved[other.id]:
        return other.lane, other.offset, other.speed
    v_min = max(0.0, other.speed - world.config.de_max)
    if other.kind == EVADER and world.config.static_evaders:
        v_min = 0.0
    return other.lane, other.offset + v_min, v_min


def _gap_to(world: WorldState, follower: Vehicle, leader: Vehicle) -> float:
    if follower.kind == PURSUER and leader.kind == EVADER and \
            world.targets[follower.id] == leader.id - world.config.N:
        return 0.0
    return world.config.min_gap


def _exits(world: WorldState, veh: Vehicle) -> list[int]:
    """Lanes the vehicle may enter at the end of its lane. A pursuer's turn can still
    change on the step it crosses, so it keeps clear of every exit."""
    if veh.kind == PURSUER:
        return sorted(set(world.net.turn_table[veh.lane].values()) | ({veh.intent} if veh.intent >= 0 else set()))
    return [veh.intent] if veh.intent >= 0 else []


def _neighbours(world: WorldState, veh: Vehicle, moved: list[bool]):
    """Vehicles whose motion constrains veh this step: the same-lane leader, plus for
    each possible exit its rearmost vehicle and the merge competitor that reaches the
    junction first. Returns (leader, [(kind, vehicle), ...])."""
    cfg, sc = world.config, world.scene
    x = veh.offset
    length = sc.lengths[veh.lane]
    leader = None
    for o in world.occupants(veh.lane):
        ov = world.vehicles[o]
        if o != veh.id and (ov.offset > x or (ov.offset == x and o < veh.id and moved[o])):
            if leader is None or ov.offset < leader.offset:
                leader = ov
    ahead = []
    rem = length - x
    horizon = cfg.v_max + braking_distance(cfg.v_max, cfg.de_max) + cfg.min_gap
    for nxt in _exits(world, veh):
        rear = None
        for o in world.occupants(nxt):
            ov = world.vehicles[o]
            if o != veh.id and (rear is None or ov.offset < rear.offset):
                rear = ov
        if rear is not None:
            ahead.append(("rear", rear))
        if rem > horizon:
            continue
        best = None
        for k in world.net.incoming[world.net.lanes[veh.lane].dst]:
            if k == veh.lane:
                continue
            for o in world.occupants(k):
                ov = world.vehicles[o]
                if ov.intent != nxt:
                    continue
                o_rem = sc.lengths[k] - world._start_offset[o]
                if (o_rem, o) >= (rem, veh.id):
                    continue
                if is_red(world, ov.lane) and _can_stop(ov, sc.lengths[ov.lane], cfg.de_max):
                    continue
                if best is None or o_rem > best[0]:
                    best = (o_rem, ov)
        if best is not None:
            ahead.append(("merge", best[1]))
    return leader, ahead


def _dependencies(world: WorldState, veh: Vehicle, moved: list[bool]) -> list[Vehicle]:
    leader, ahead = _neighbours(world, veh, moved)
    out = [ov for _, ov in ahead]
    if leader is not None:
        out.insert(0, leader)
    return out


def _plan_speed(world: WorldState, veh: Vehicle, moved: list[bool]) -> float:
    cfg = world.config
    sc = world.scene
    de = cfg.de_max
    x, v = veh.offset, veh.speed
    length = sc.lengths[veh.lane]
    v_lo = max(0.0, v - de * cfg.dt)
    v_hi = min(cfg.v_max, v + cfg.ac_max * cfg.dt)
    if veh.kind == EVADER and cfg.static_evaders:
        v_lo = v_hi = 0.0
    bound = v_hi
    leader, ahead = _neighbours(world, veh, moved)
    # (position of obstacle next step, its stopping point, required gap), all in path coordinates
    obstacles = []
    if leader is not None:
        lane_l, pos, spd = _next_state(world, leader, moved)
        if lane_l != veh.lane:
            pos += length
        obstacles.append((pos, pos + braking_distance(spd, de), _gap_to(world, veh, leader)))
    if veh.intent < 0 or (is_red(world, veh.lane) and _can_stop(veh, length, de)):
        obstacles.append((length, length, 0.0))
    for kind, ov in ahead:
        _, pos, spd = _next_state(world, ov, moved)
        if kind == "rear":
            pos += length
        else:
            pos = length - (sc.lengths[ov.lane] - pos)
        obstacles.append((pos, pos + braking_distance(spd, de), _gap_to(world, veh, ov)))

    for pos, stop, gap in obstacles:
        bound = min(bound, pos - gap - x, max_speed_within(stop - gap - x, de))
    if bound < v_lo:
        return v_lo
    return bound


def _advance(world: WorldState, veh: Vehicle, v_new: float) -> None:
    cfg = world.config
    lengths = world.scene.lengths
    x0 = veh.offset
    x = x0 + v_new * cfg.dt
    limit = math.inf
    for o in world.occupants(veh.lane):
        ov = world.vehicles[o]
        if o != veh.id and ov.offset >= x0 and not (ov.offset == x0 and o > veh.id):
            limit = min(limit, ov.offset - _gap_to(world, veh, ov))
    x = max(x0, min(x, limit))
    length = lengths[veh.lane]
    lane = veh.lane
    if x <= length + _EPS:
        # rounding must not carry a vehicle planned to stop at the line into the junction
        x = min(x, length)
    else:
        nxt = veh.intent
        off = x - length
        rear_limit = math.inf
        for o in world.occupants(nxt):
            ov = world.vehicles[o]
            rear_limit = min(rear_limit, ov.offset - _gap_to(world, veh, ov))
        off = min(off, rear_limit, lengths[nxt])
        if off < 0.0:
            x = length
        else:
            world._occ_remove(veh.id, lane)
            world._occ_add(veh.id, nxt)
            veh.lane = nxt
            x = off
    displacement = (x - x0) if veh.lane == lane else (length - x0 + x)
    veh.offset = x
    v_lo = max(0.0, veh.speed - cfg.de_max * cfg.dt)
    if displacement < v_new * cfg.dt - _EPS:
        if displacement < v_lo * cfg.dt - _EPS:
            world.emergency_stops += 1
            veh.speed = v_lo
        else:
            veh.speed = displacement / cfg.dt
    else:
        veh.speed = v_new
    if veh.lane != lane:
        veh.intent = world._initial_intent(veh)


def step(world: WorldState, pursuit_actions, targets=None) -> tuple[WorldState, StepEvents]:
    """Advance the world by one time step.

    pursuit_actions: one turn choice per pursuer (sequence or {index: action}).
    targets: optional per-pursuer evader indices; capture is only scored
    against a pursuer's own target.
    """
    if world.done:
        raise RuntimeError("episode is already done")
    cfg, net = world.config, world.net
    if isinstance(pursuit_actions, dict):
        items = list(pursuit_actions.items())
    else:
        items = list(enumerate(pursuit_actions))
    for n, a in items:
        if not (isinstance(n, (int, np.integer)) and 0 <= n < cfg.N):
            raise ValueError(f"action for unknown pursuer {n}")
        a = int(a)
        if a not in net.turn_table[world.pursuer(n).lane]:
            raise ValueError(f"action {a} is not feasible for pursuer {n} on lane {world.pursuer(n).lane}")
    active = world.active_evaders()
    if targets is not None:
        targets = np.asarray(targets, dtype=np.int64)
        if targets.shape != (cfg.N,) or targets.min() < 0 or targets.max() >= cfg.M:
            raise ValueError("targets must hold one evader index per pursuer")
        if not active[targets].all():
            raise ValueError("captured evaders cannot be targets")
        world.targets = targets.copy()

    for n, a in items:
        p = world.pursuer(n)
        p.action = int(a)
        # the turn taken at a junction is the action of the step that crosses it
        p.intent = net.turn_table[p.lane][p.action]

    movers = [v for v in world.vehicles if not v.captured]
    movers.sort(key=lambda v: (v.lane, -v.offset, v.id))
    moved = [False] * len(world.vehicles)
    world._start_offset = [v.offset for v in world.vehicles]
    # vehicles ahead move first so followers see their updated positions; cycles
    # (e.g. a full ring) are broken by the busy mark and fall back to min-next bounds
    busy = [False] * len(world.vehicles)
    for root in movers:
        if moved[root.id]:
            continue
        stack = [root]
        busy[root.id] = True
        while stack:
            veh = stack[-1]
            ahead = [o for o in _dependencies(world, veh, moved) if not moved[o.id] and not busy[o.id]]
            if ahead:
                busy[ahead[0].id] = True
                stack.append(ahead[0])
                continue
            stack.pop()
            v_new = _plan_speed(world, veh, moved)
            _advance(world, veh, v_new)
            moved[veh.id] = True

    events = StepEvents()
    for m in range(cfg.M):
        if not active[m]:
            continue
        ev = world.evader(m)
        best = None
        for n in range(cfg.N):
            if world.targets[n] != m:
                continue
            d = network_distance(net, world.pursuer(n).location, ev.location)
            if d < cfg.d_min and (best is None or d < best[0]):
                best = (d, n)
        if best is not None:
            ev.captured = True
            ev.speed = 0.0
            world._occ_remove(ev.id, ev.lane)
            events.captures.append((best[1], m))

    world.step += 1
    world.light_phases = _light_phases(world, world.step)
    active = world.active_evaders()
    if events.captures and active.any():
        fresh = nearest_evader_targets(world)
        for n in range(cfg.N):
            if not active[world.targets[n]]:
                world.targets[n] = fresh[n]
    world.done = (not active.any()) or world.step >= cfg.st
    events.done = world.done
    return world, events


def trace_record(world: WorldState, events: StepEvents | None = None, w_g=None) -> dict:
    rec = {
        "t": world.step,
        "vehicles": [[v.id, v.kind, v.lane, round(v.offset, 6), round(v.speed, 6)] for v in world.vehicles],
        "light_phases": world.light_phases.tolist(),
        "events": {"captures": [list(c) for c in events.captures], "done": events.done} if events else None,
    }
    if w_g is not None:
        rec["w_g"] = np.asarray(w_g).round(6).tolist()
    return rec
