"""Directed lane graph: grid generation, map files, lane codes and driving distances."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path

import numpy as np
from scipy.sparse import csr_matrix
from scipy.sparse.csgraph import shortest_path

LEFT, RIGHT, STRAIGHT = 0, 1, 2
ACTION_NAMES = ("left", "right", "straight")


class MapFormatError(ValueError):
    """Raised when a map file cannot be parsed or describes an invalid network."""


@dataclass(frozen=True)
class Junction:
    id: int
    x: float
    y: float


@dataclass(frozen=True)
class Lane:
    id: int
    src: int
    dst: int
    length: float


@dataclass(frozen=True)
class Location:
    lane: int
    offset: float


@dataclass(eq=False)
class RoadNetwork:
    """Immutable lane graph.

    A lane's successors are the lanes leaving its end junction, minus the
    reverse lane (no U-turns) unless it is the only way out.
    """

    junctions: tuple[Junction, ...]
    lanes: tuple[Lane, ...]
    successors: tuple[tuple[int, ...], ...] = field(init=False)

    def __post_init__(self):
        self.junctions = tuple(self.junctions)
        self.lanes = tuple(self.lanes)
        n_j = len(self.junctions)
        for k, j in enumerate(self.junctions):
            if j.id != k:
                raise MapFormatError(f"junction ids must be consecutive from 0, got {j.id} at position {k}")
        for k, lane in enumerate(self.lanes):
            if lane.id != k:
                raise MapFormatError(f"lane ids must be consecutive from 0, got {lane.id} at position {k}")
            if not (0 <= lane.src < n_j and 0 <= lane.dst < n_j):
                raise MapFormatError(f"lane {lane.id} references a missing junction")
            if lane.src == lane.dst:
                raise MapFormatError(f"lane {lane.id} starts and ends at junction {lane.src}")
            if not (lane.length > 0 and math.isfinite(lane.length)):
                raise MapFormatError(f"lane {lane.id} has non-positive length {lane.length}")
        outgoing = [[] for _ in range(n_j)]
        for lane in self.lanes:
            outgoing[lane.src].append(lane.id)
        succ = []
        for lane in self.lanes:
            out = [o for o in outgoing[lane.dst] if self.lanes[o].dst != lane.src]
            if not out:
                out = list(outgoing[lane.dst])
            succ.append(tuple(out))
        self.successors = tuple(succ)

    @property
    def L(self) -> int:
        return len(self.lanes)

    @cached_property
    def lengths(self) -> np.ndarray:
        return np.array([lane.length for lane in self.lanes], dtype=np.float64)

    @cached_property
    def incoming(self) -> tuple[tuple[int, ...], ...]:
        inc = [[] for _ in self.junctions]
        for lane in self.lanes:
            inc[lane.dst].append(lane.id)
        return tuple(tuple(x) for x in inc)

    def bearing(self, lane_id: int) -> float:
        """Heading of a lane in degrees, counter-clockwise from east."""
        lane = self.lanes[lane_id]
        a, b = self.junctions[lane.src], self.junctions[lane.dst]
        return math.degrees(math.atan2(b.y - a.y, b.x - a.x))

    def turn_class(self, from_lane: int, to_lane: int) -> int | None:
        """LEFT/RIGHT/STRAIGHT for a lane-to-lane move, None for U-turns and sharp turns."""
        d = (self.bearing(to_lane) - self.bearing(from_lane) + 180.0) % 360.0 - 180.0
        if abs(d) < 45.0:
            return STRAIGHT
        if 45.0 <= d < 135.0:
            return LEFT
        if -135.0 < d <= -45.0:
            return RIGHT
        return None

    @cached_property
    def turn_table(self) -> tuple[dict[int, int], ...]:
        """Per lane, mapping action -> successor lane. First successor wins on duplicate classes."""
        table = []
        for lane in self.lanes:
            moves: dict[int, int] = {}
            for s in self.successors[lane.id]:
                cls = self.turn_class(lane.id, s)
                if cls is not None and cls not in moves:
                    moves[cls] = s
            table.append(moves)
        return tuple(table)

    @cached_property
    def _start_to_start(self) -> np.ndarray:
        rows, cols, w = [], [], []
        for lane in self.lanes:
            for s in self.successors[lane.id]:
                rows.append(lane.id)
                cols.append(s)
                w.append(lane.length)
        g = csr_matrix((w, (rows, cols)), shape=(self.L, self.L))
        return shortest_path(g, method="D", directed=True)

    @cached_property
    def end_to_start(self) -> np.ndarray:
        """end_to_start[i, j]: shortest driving distance from the end of lane i to the start of lane j."""
        sp = self._start_to_start
        out = np.full((self.L, self.L), np.inf)
        for lane in self.lanes:
            succ = list(self.successors[lane.id])
            if succ:
                out[lane.id] = sp[succ].min(axis=0)
        return out

    @cached_property
    def unreachable_distance(self) -> float:
        """Finite stand-in for an infinite distance: longer than any simple path."""
        return float(self.lengths.sum()) * 2.0

    def validate_location(self, loc: Location) -> None:
        if not (0 <= loc.lane < self.L):
            raise ValueError(f"lane {loc.lane} out of range")
        if not (0.0 <= loc.offset <= self.lanes[loc.lane].length):
            raise ValueError(f"offset {loc.offset} outside lane {loc.lane}")

    def is_strongly_connected(self) -> bool:
        return bool(np.isfinite(self._start_to_start).all())


def generate_grid(blocks_x: int, blocks_y: int, lane_length: float) -> RoadNetwork:
    """Grid of (blocks_x+1) x (blocks_y+1) junctions with one lane per direction on every edge."""
    if blocks_x < 1 or blocks_y < 1:
        raise ValueError("grid needs at least one block in each direction")
    if lane_length <= 0:
        raise ValueError("lane_length must be positive")
    nx_, ny_ = blocks_x + 1, blocks_y + 1
    junctions = [Junction(j * nx_ + i, float(i * lane_length), float(j * lane_length))
                 for j in range(ny_) for i in range(nx_)]
    edges = []
    for j in range(ny_):
        for i in range(blocks_x):
            edges.append((j * nx_ + i, j * nx_ + i + 1))
    for j in range(blocks_y):
        for i in range(nx_):
            edges.append((j * nx_ + i, (j + 1) * nx_ + i))
    lanes = []
    for a, b in edges:
        lanes.append(Lane(len(lanes), a, b, float(lane_length)))
        lanes.append(Lane(len(lanes), b, a, float(lane_length)))
    return RoadNetwork(junctions, lanes)


def serialize_map(net: RoadNetwork) -> str:
    lines = ["# road network", f"junctions {len(net.junctions)}"]
    lines += [f"J {j.id} {j.x!r} {j.y!r}" for j in net.junctions]
    lines.append(f"lanes {net.L}")
    lines += [f"L {lane.id} {lane.src} {lane.dst} {lane.length!r}" for lane in net.lanes]
    return "\n".join(lines) + "\n"


def save_map(net: RoadNetwork, path) -> None:
    Path(path).write_text(serialize_map(net), encoding="ascii")


def parse_map(text: str) -> RoadNetwork:
    junctions: list[Junction] = []
    lanes: list[Lane] = []
    expect = None  # (kind, remaining)
    n_j = n_l = None
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        tok = line.split()
        try:
            if tok[0] == "junctions" and n_j is None and len(tok) == 2:
                n_j = int(tok[1])
                expect = "J"
            elif tok[0] == "lanes" and n_l is None and n_j is not None and len(tok) == 2:
                if len(junctions) != n_j:
                    raise MapFormatError(f"line {lineno}: expected {n_j} junctions, got {len(junctions)}")
                n_l = int(tok[1])
                expect = "L"
            elif tok[0] == "J" and expect == "J" and len(tok) == 4:
                if len(junctions) >= n_j:
                    raise MapFormatError(f"line {lineno}: more junctions than declared")
                jid = int(tok[1])
                if jid != len(junctions):
                    raise MapFormatError(f"line {lineno}: junction id {jid} out of order")
                junctions.append(Junction(jid, float(tok[2]), float(tok[3])))
            elif tok[0] == "L" and expect == "L" and len(tok) == 5:
                if len(lanes) >= n_l:
                    raise MapFormatError(f"line {lineno}: more lanes than declared")
                lid, src, dst = int(tok[1]), int(tok[2]), int(tok[3])
                if lid != len(lanes):
                    raise MapFormatError(f"line {lineno}: lane id {lid} out of order")
                for jref in (src, dst):
                    if not 0 <= jref < n_j:
                        raise MapFormatError(f"line {lineno}: lane {lid} references unknown junction {jref}")
                lanes.append(Lane(lid, src, dst, float(tok[4])))
            else:
                raise MapFormatError(f"line {lineno}: unexpected record {line!r}")
        except (ValueError, IndexError) as exc:
            if isinstance(exc, MapFormatError):
                raise
            raise MapFormatError(f"line {lineno}: {exc}") from None
    if n_j is None or n_l is None:
        raise MapFormatError("missing 'junctions' or 'lanes' header")
    if len(lanes) != n_l:
        raise MapFormatError(f"expected {n_l} lanes, got {len(lanes)}")
    return RoadNetwork(junctions, lanes)


def load_map(path) -> RoadNetwork:
    return parse_map(Path(path).read_text(encoding="ascii"))


def adjacency_matrix(net: RoadNetwork) -> np.ndarray:
    rt = np.zeros((net.L, net.L), dtype=np.float64)
    for lane in net.lanes:
        for s in net.successors[lane.id]:
            rt[lane.id, s] = 1.0
    np.fill_diagonal(rt, 0.0)
    return rt


def code_width(L: int) -> int:
    return max(1, math.ceil(math.log2(L))) if L > 1 else 1


def lane_code(lane_id: int, L: int) -> np.ndarray:
    """Big-endian fixed-width binary code of a lane id."""
    if not 0 <= lane_id < L:
        raise ValueError(f"lane id {lane_id} outside 0..{L - 1}")
    w = code_width(L)
    return np.array([(lane_id >> (w - 1 - k)) & 1 for k in range(w)], dtype=np.uint8)


def decode_lane_code(bits) -> int:
    out = 0
    for b in bits:
        out = (out << 1) | int(b)
    return out


def network_distance(net: RoadNetwork, a: Location, b: Location) -> float:
    """Driving distance from a to b; inf when b cannot be reached."""
    if a.lane == b.lane and b.offset >= a.offset:
        return b.offset - a.offset
    return (net.lanes[a.lane].length - a.offset) + net.end_to_start[a.lane, b.lane] + b.offset


def euclidean_position(net: RoadNetwork, loc: Location) -> tuple[float, float]:
    lane = net.lanes[loc.lane]
    a, b = net.junctions[lane.src], net.junctions[lane.dst]
    f = loc.offset / lane.length
    return a.x + f * (b.x - a.x), a.y + f * (b.y - a.y)


def euclidean_distance(net: RoadNetwork, a: Location, b: Location) -> float:
    """Straight-line distance. Debug helper only; pursuit logic uses network_distance."""
    (ax, ay), (bx, by) = euclidean_position(net, a), euclidean_position(net, b)
    return math.hypot(ax - bx, ay - by)
