"""CLI, configuration files, evaluation metrics and the scripted baseline."""

import csv
import json
import math

import pytest

from mvpursuit import simcore
from mvpursuit.baseline import greedy_baseline_policy
from mvpursuit.cli import main
from mvpursuit.config import ConfigError, dump_config, parse_config
from mvpursuit.evaluation import evaluate, rows_from_csv, rows_to_csv, summarize
from mvpursuit.roadnet import STRAIGHT, generate_grid, load_map
from mvpursuit.trainer import TrainConfig, Trainer

SMALL_CFG = """\
# tiny run for tests
blocks = 2x2
lane_length = 100.0
N = 2
M = 1
B = 4
st = 30
scenario = p2e1
max_epoch = 4
max_cap = 4
k_sample = 2
q_hidden = 16,16
pn_hidden = 8,8
f_dim = 8
heads = 2
d_k = 4
seed = 5
"""


@pytest.fixture
def cfg_file(tmp_path):
    path = tmp_path / "small.cfg"
    path.write_text(SMALL_CFG)
    return path


def _row(steps, success=0, reward=0.0):
    return {"episode": 0, "seed": 0, "steps": steps, "success": success, "captures": success,
            "reward": reward, "reward_per_step": reward / steps}


class TestConfigFiles:
    def test_round_trip(self):
        cfg = TrainConfig(seed=9, q_hidden=(32, 8), disable_cognition=True, alpha=3e-5)
        assert parse_config(dump_config(cfg)) == cfg

    def test_comments_and_overrides(self):
        cfg = parse_config("# c\n\nseed = 4   # trailing\nseparate_test_episode = true\n")
        assert cfg.seed == 4 and cfg.separate_test_episode and cfg.alpha == 1e-4

    @pytest.mark.parametrize("text,fragment", [("nonsense\n", "line 1"), ("seed = 1\nbogus = 2\n", "unknown key"),
                                               ("seed = x\n", "line 1"), ("gamma = 2\n", "gamma"),
                                               ("cotrain_cognition = maybe\n", "boolean")])
    def test_errors(self, text, fragment):
        with pytest.raises(ConfigError, match=fragment):
            parse_config(text)


class TestMetrics:
    def test_timeout_episode(self):
        m = summarize([_row(800)])
        assert (m.SR, m.ATS, m.SDTS) == (0.0, 800.0, 0.0)

    def test_two_lengths(self):
        m = summarize([_row(100, 1, 10.0), _row(300, 0, -2.0)])
        assert (m.ATS, m.SDTS, m.SR) == (200.0, 100.0, 0.5)
        assert (m.AR, m.SDR) == (4.0, 6.0)

    def test_empty(self):
        with pytest.raises(ValueError):
            summarize([])

    def test_recompute_from_csv(self):
        tr = Trainer(parse_config(SMALL_CFG))
        metrics, rows = evaluate(tr, 6, seed=2)
        back = rows_from_csv(rows_to_csv(rows))
        assert back == rows
        again = summarize(back)
        for k, v in metrics.to_dict().items():
            assert abs(getattr(again, k) - v) <= 1e-9
        assert 0.0 <= metrics.SR <= 1.0 and metrics.ATS <= 30

    def test_reproducible(self):
        tr = Trainer(parse_config(SMALL_CFG))
        assert rows_to_csv(evaluate(tr, 3, seed=1)[1]) == rows_to_csv(evaluate(tr, 3, seed=1)[1])


class TestBaseline:
    def test_evader_straight_ahead(self):
        net = generate_grid(2, 2, 100.0)
        w = simcore.reset(simcore.EpisodeConfig(net=net, N=2, M=1, B=0, seed=0, static_evaders=True))
        lane = next(l.id for l in net.lanes if (l.src, l.dst) == (3, 4))
        w.place(0, lane, 50.0)
        w.place(1, next(l.id for l in net.lanes if (l.src, l.dst) == (0, 1)), 0.0)
        w.place(2, net.turn_table[lane][STRAIGHT], 40.0)
        assert greedy_baseline_policy(w, 0) == STRAIGHT

    def test_single_action(self):
        net = generate_grid(1, 1, 100.0)
        w = simcore.reset(simcore.EpisodeConfig(net=net, N=2, M=1, B=0, seed=0))
        for lane in range(net.L):
            w.place(0, lane, 0.0)
            if len(net.turn_table[lane]) == 1:
                assert greedy_baseline_policy(w, 0) == next(iter(net.turn_table[lane]))

    def test_catches_static_evader_on_single_block(self):
        net = generate_grid(1, 1, 100.0)
        ring = 4 * 100.0
        # steps to cover the whole ring from rest: accelerate at ac_max, capped at v_max
        bound, covered, v = 0, 0.0, 0.0
        while covered < ring:
            v = min(20.0, v + 0.5)
            covered += v
            bound += 1
        for seed in range(5):
            w = simcore.reset(simcore.EpisodeConfig(net=net, N=2, M=1, B=0, seed=seed, static_evaders=True, st=400))
            # the single block splits into two one-way rings; put the evader on pursuer 0's ring
            w.place(2, w.pursuer(0).lane, 0.0)
            w.place(0, w.pursuer(0).lane, 60.0)
            w.place(1, next(l.id for l in net.lanes if l.id not in _ring(net, w.pursuer(0).lane)), 0.0)
            while not w.done:
                w, ev = simcore.step(w, [greedy_baseline_policy(w, n) for n in range(2)], [0, 0])
            assert not w.active_evaders().any()
            assert w.step <= bound


def _ring(net, lane):
    seen, todo = set(), [lane]
    while todo:
        l = todo.pop()
        if l not in seen:
            seen.add(l)
            todo.extend(net.successors[l])
    return seen


class TestCLI:
    def test_gen_map(self, tmp_path, capsys):
        assert main(["gen-map", "--blocks", "3x3", "--lane-length", "500", "--out", str(tmp_path / "m.txt")]) == 0
        net = load_map(tmp_path / "m.txt")
        assert (len(net.junctions), net.L) == (16, 48)
        assert main(["gen-map", "--blocks", "4x5"]) == 0
        assert "junctions 30" in capsys.readouterr().out

    def test_config_dump_shows_defaults(self, capsys):
        assert main(["config"]) == 0
        cfg = parse_config(capsys.readouterr().out)
        assert cfg == TrainConfig()

    def test_flags_override_config_file(self, cfg_file, capsys):
        assert main(["config", "--config", str(cfg_file), "--seed", "11", "--ablation", "no-cognition"]) == 0
        cfg = parse_config(capsys.readouterr().out)
        assert cfg.seed == 11 and cfg.N == 2 and cfg.disable_cognition and not cfg.disable_prioritization

    def test_scenario_and_blocks_presets(self, capsys):
        assert main(["config", "--scenario", "p8e5", "--blocks", "4x5"]) == 0
        cfg = parse_config(capsys.readouterr().out)
        assert (cfg.N, cfg.M, cfg.lane_length, cfg.B) == (8, 5, 400.0, 500)

    def test_eval_needs_checkpoint(self, capsys):
        assert main(["eval"]) == 2
        assert "checkpoint" in capsys.readouterr().err

    def test_unknown_flag(self):
        with pytest.raises(SystemExit) as exc:
            main(["train", "--bogus"])
        assert exc.value.code != 0

    def test_invalid_config(self, tmp_path, capsys):
        bad = tmp_path / "bad.cfg"
        bad.write_text("gamma = 7\n")
        assert main(["train", "--config", str(bad), "--out", str(tmp_path / "r")]) == 1
        assert "gamma" in capsys.readouterr().err

    def test_train_eval_inspect_trace(self, cfg_file, tmp_path, capsys):
        run = tmp_path / "run"
        assert main(["train", "--config", str(cfg_file), "--ablation", "no-prioritization", "--out", str(run)]) == 0
        log = [json.loads(l) for l in (run / "train_log.jsonl").read_text().splitlines()]
        assert [r["epoch"] for r in log] == [0, 1, 2, 3]
        with open(run / "priority_audit.csv") as fh:
            audit = list(csv.DictReader(fh))
        assert audit and all(float(r["P"]) == 0.25 and float(r["omega"]) == 1.0 for r in audit)
        assert parse_config((run / "config.txt").read_text()).disable_prioritization

        ck = str(run / "checkpoint")
        capsys.readouterr()
        assert main(["eval", "--checkpoint", ck, "--episodes", "3", "--out", str(tmp_path / "ev")]) == 0
        summary = json.loads(capsys.readouterr().out)
        assert summary["episodes"] == 3
        first = (tmp_path / "ev" / "metrics.csv").read_bytes()
        assert main(["eval", "--checkpoint", ck, "--episodes", "3", "--out", str(tmp_path / "ev2")]) == 0
        assert (tmp_path / "ev2" / "metrics.csv").read_bytes() == first

        capsys.readouterr()
        assert main(["inspect-buffer", "--checkpoint", ck]) == 0
        snap = json.loads(capsys.readouterr().out)
        assert snap["size"] == 4 and snap["max_cap"] == 4

        assert main(["dump-trace", "--checkpoint", ck, "--out", str(tmp_path / "tr")]) == 0
        recs = [json.loads(l) for l in (tmp_path / "tr" / "trace_0.jsonl").read_text().splitlines()]
        assert recs[0]["t"] == 0 and recs[-1]["events"]["done"]

        assert main(["eval", "--checkpoint", ck, "--blocks", "3x3"]) == 2

    def test_resume_appends(self, cfg_file, tmp_path):
        run = tmp_path / "run"
        assert main(["train", "--config", str(cfg_file), "--epochs", "2", "--out", str(run)]) == 0
        assert main(["train", "--resume", str(run / "checkpoint"), "--epochs", "4", "--out", str(run)]) == 0
        log = [json.loads(l) for l in (run / "train_log.jsonl").read_text().splitlines()]
        assert [r["epoch"] for r in log] == [0, 1, 2, 3]

    def test_baseline_eval(self, cfg_file, capsys):
        assert main(["eval", "--config", str(cfg_file), "--baseline", "--episodes", "2"]) == 0
        m = json.loads(capsys.readouterr().out)
        assert m["episodes"] == 2 and not math.isnan(m["AR"])
