"""Scripted pursuit baseline: one-junction lookahead toward the nearest evader."""

from __future__ import annotations

import math

from . import simcore
from .roadnet import Location, network_distance


def greedy_baseline_policy(world: simcore.WorldState, n: int) -> int:
    """Feasible turn minimising the driving distance to the closest active evader.

    Each candidate is scored as the distance to the end of the current lane
    plus the shortest distance from the start of the lane that turn enters.
    """
    net = world.net
    p = world.pursuer(n)
    moves = net.turn_table[p.lane]
    actions = sorted(moves)
    if len(actions) == 1:
        return actions[0]
    evaders = [e for e in world.evaders if not e.captured]
    to_end = net.lanes[p.lane].length - p.offset
    best, best_d = actions[0], math.inf
    for a in actions:
        start = Location(moves[a], 0.0)
        d = to_end + min(network_distance(net, start, e.location) for e in evaders)
        if d < best_d:
            best, best_d = a, d
    return best
