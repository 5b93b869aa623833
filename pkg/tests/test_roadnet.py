"""Road network: grid generation, map files, lane codes, turn classes and distances."""

import heapq
import itertools

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mvpursuit.roadnet import (
    LEFT, RIGHT, STRAIGHT, Junction, Lane, Location, MapFormatError, RoadNetwork, adjacency_matrix,
    code_width, decode_lane_code, euclidean_distance, generate_grid, lane_code, load_map, network_distance,
    parse_map, save_map, serialize_map,
)


def _brute_force_distance(net, a, b):
    """Dijkstra over (lane, offset) points written independently of the library."""
    if a.lane == b.lane and b.offset >= a.offset:
        return b.offset - a.offset
    # cost to reach the start of each lane
    best = {}
    heap = [(net.lanes[a.lane].length - a.offset, s) for s in net.successors[a.lane]]
    heapq.heapify(heap)
    while heap:
        d, lane = heapq.heappop(heap)
        if lane in best:
            continue
        best[lane] = d
        for s in net.successors[lane]:
            if s not in best:
                heapq.heappush(heap, (d + net.lanes[lane].length, s))
    if b.lane not in best:
        return np.inf
    return best[b.lane] + b.offset


class TestGridGeneration:
    @pytest.mark.parametrize("bx,by,junctions,lanes", [(3, 3, 16, 48), (4, 5, 30, 98), (1, 1, 4, 8), (2, 2, 9, 24)])
    def test_counts(self, bx, by, junctions, lanes):
        net = generate_grid(bx, by, 500.0)
        assert len(net.junctions) == junctions
        assert net.L == lanes

    def test_lane_count_formula(self):
        for bx, by in itertools.product(range(1, 6), repeat=2):
            net = generate_grid(bx, by, 100.0)
            assert net.L == 2 * (bx * (by + 1) + by * (bx + 1))

    def test_every_lane_has_its_reverse(self):
        net = generate_grid(3, 3, 500.0)
        pairs = {(l.src, l.dst) for l in net.lanes}
        assert all((d, s) in pairs for s, d in pairs)

    def test_no_u_turns_in_larger_grids(self):
        net = generate_grid(3, 3, 500.0)
        for lane in net.lanes:
            for s in net.successors[lane.id]:
                assert net.lanes[s].dst != lane.src

    def test_dead_end_keeps_reverse_lane(self):
        # a single edge: both lanes can only turn back
        net = RoadNetwork([Junction(0, 0, 0), Junction(1, 10, 0)], [Lane(0, 0, 1, 10.0), Lane(1, 1, 0, 10.0)])
        assert net.successors == ((1,), (0,))

    def test_strong_connectivity(self):
        assert generate_grid(3, 3, 500.0).is_strongly_connected()
        assert generate_grid(4, 5, 400.0).is_strongly_connected()
        # the 1x1 ring splits into a clockwise and an anticlockwise loop
        assert not generate_grid(1, 1, 100.0).is_strongly_connected()

    def test_invalid_sizes(self):
        with pytest.raises(ValueError):
            generate_grid(0, 3, 100.0)
        with pytest.raises(ValueError):
            generate_grid(2, 2, -1.0)


class TestTurns:
    def test_center_junction_offers_three_turns(self):
        net = generate_grid(2, 2, 100.0)
        # lane entering the centre junction 4 from the west (3 -> 4)
        lane = next(l.id for l in net.lanes if (l.src, l.dst) == (3, 4))
        moves = net.turn_table[lane]
        assert set(moves) == {LEFT, RIGHT, STRAIGHT}
        dst = {a: net.lanes[s].dst for a, s in moves.items()}
        assert dst[STRAIGHT] == 5
        assert dst[LEFT] == 7    # north is +y, i.e. the next row up
        assert dst[RIGHT] == 1

    def test_corner_offers_a_single_turn(self):
        net = generate_grid(1, 1, 100.0)
        for lane in net.lanes:
            assert len(net.turn_table[lane.id]) == 1

    def test_turn_classes_by_bearing(self):
        net = generate_grid(1, 1, 100.0)
        east = next(l.id for l in net.lanes if (l.src, l.dst) == (0, 1))
        north = next(l.id for l in net.lanes if (l.src, l.dst) == (1, 3))
        south = next(l.id for l in net.lanes if (l.src, l.dst) == (3, 1))
        assert net.turn_class(east, north) == LEFT
        assert net.turn_class(east, south) == RIGHT
        assert net.turn_class(east, east) == STRAIGHT


class TestLaneCodes:
    def test_examples(self):
        assert code_width(48) == 6
        assert lane_code(5, 48).tolist() == [0, 0, 0, 1, 0, 1]
        assert code_width(2) == 1
        assert lane_code(0, 2).tolist() == [0]
        assert code_width(1) == 1

    @given(st.integers(min_value=1, max_value=600))
    @settings(max_examples=60, deadline=None)
    def test_round_trip_and_injective(self, L):
        codes = {tuple(lane_code(i, L)) for i in range(L)}
        assert len(codes) == L
        for i in range(0, L, max(1, L // 7)):
            assert decode_lane_code(lane_code(i, L)) == i

    def test_out_of_range(self):
        with pytest.raises(ValueError):
            lane_code(48, 48)


class TestMapFiles:
    def test_round_trip(self, tmp_path):
        net = generate_grid(4, 5, 400.0)
        save_map(net, tmp_path / "m.txt")
        back = load_map(tmp_path / "m.txt")
        assert back.junctions == net.junctions
        assert back.lanes == net.lanes
        assert serialize_map(back) == serialize_map(net)

    def test_comments_and_blank_lines(self):
        text = "# hi\n\njunctions 2\nJ 0 0 0\nJ 1 5 0  # east\nlanes 2\nL 0 0 1 5\nL 1 1 0 5\n"
        net = parse_map(text)
        assert net.L == 2

    @pytest.mark.parametrize("text,fragment", [
        ("junctions 1\nJ 0 0 0\nlanes 1\nL 0 0 3 5\n", "line 4"),
        ("junctions 2\nJ 0 0 0\nJ 1 1 1\nlanes 1\nL 0 0 1 x\n", "line 5"),
        ("junctions 2\nJ 1 0 0\n", "line 2"),
        ("junctions 2\nJ 0 0 0\nlanes 1\n", "line 3"),
        ("lanes 0\n", "line 1"),
    ])
    def test_errors_carry_line_numbers(self, text, fragment):
        with pytest.raises(MapFormatError, match=fragment):
            parse_map(text)

    def test_bad_length_names_the_lane(self):
        with pytest.raises(MapFormatError, match="lane 0"):
            parse_map("junctions 2\nJ 0 0 0\nJ 1 1 0\nlanes 1\nL 0 0 1 -3\n")

    def test_missing_header(self):
        with pytest.raises(MapFormatError):
            parse_map("# nothing\n")


class TestDistances:
    def test_same_lane_ahead(self):
        net = generate_grid(2, 2, 100.0)
        assert network_distance(net, Location(3, 10.0), Location(3, 60.0)) == 50.0

    def test_same_lane_behind_goes_around(self):
        net = generate_grid(2, 2, 100.0)
        d = network_distance(net, Location(3, 60.0), Location(3, 10.0))
        # at least one full loop of four lanes minus the gap
        assert d == pytest.approx(4 * 100.0 - 50.0)

    def test_matches_brute_force(self):
        rng = np.random.default_rng(3)
        for net in (generate_grid(2, 2, 100.0), generate_grid(3, 2, 70.0), generate_grid(1, 1, 50.0)):
            for _ in range(200):
                a = Location(int(rng.integers(net.L)), float(rng.uniform(0, net.lanes[0].length)))
                b = Location(int(rng.integers(net.L)), float(rng.uniform(0, net.lanes[0].length)))
                want = _brute_force_distance(net, a, b)
                got = network_distance(net, a, b)
                if np.isinf(want):
                    assert np.isinf(got)
                else:
                    assert got == pytest.approx(want, abs=1e-9)

    def test_network_distance_at_least_euclidean(self):
        net = generate_grid(3, 3, 500.0)
        rng = np.random.default_rng(0)
        for _ in range(200):
            a = Location(int(rng.integers(net.L)), float(rng.uniform(0, 500)))
            b = Location(int(rng.integers(net.L)), float(rng.uniform(0, 500)))
            assert network_distance(net, a, b) >= euclidean_distance(net, a, b) - 1e-9

    def test_unreachable_distance_exceeds_every_finite_distance(self):
        net = generate_grid(2, 2, 100.0)
        finite = net.end_to_start[np.isfinite(net.end_to_start)]
        assert net.unreachable_distance > finite.max() + 2 * 100.0


class TestAdjacency:
    def test_matches_successors(self):
        net = generate_grid(3, 3, 500.0)
        rt = adjacency_matrix(net)
        assert rt.shape == (48, 48)
        assert rt.sum() == sum(len(s) for s in net.successors)
        assert np.all(np.diag(rt) == 0)
