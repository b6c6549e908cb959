import json
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from naht_mat import numerics as nx
from naht_mat import harness
from naht_mat.cli import main
from naht_mat.envs import SignalGame
from naht_mat.teammates import TeammatePool, build_pools

TINY = """
[experiment]
variant = mat_naht
seeds = 0, 1
output_dir = {out}
eval_episodes = 3

[env]
name = signal

[model]
k = 2
d_model = 16
ff_dim = 32
baseline_hidden = 16

[ppo]
total_env_steps = 256
batch_episodes = 16
minibatch_episodes = 8
eval_interval = 1
eval_episodes = 10

[pools]
instances_per_family_train = 2
instances_per_family_test = 1
"""


@pytest.fixture
def tiny_cfg(tmp_path):
    path = tmp_path / "tiny.ini"
    path.write_text(TINY.format(out=tmp_path / "runs"))
    return path


# ---- config


def test_parse_config_round_trip(tiny_cfg):
    cfg = harness.load_config(tiny_cfg)
    assert cfg.seeds == [0, 1] and cfg.model.d_model == 16 and cfg.ppo.total_env_steps == 256
    again = harness.parse_config(cfg.to_ini())
    assert again == cfg


@pytest.mark.parametrize(
    "patch",
    [
        ("variant = mat_naht", "variant = transformer"),
        ("d_model = 16", "d_model = 15"),
        ("k = 2", "k = two"),
        ("[pools]", "[pools]\nflavour = 3"),
        ("[ppo]", "[ppo]\ngamma = 2"),
        ("name = signal", "name = chess"),
        ("seeds = 0, 1", "seeds ="),
        ("[env]", "[envs]"),
    ],
)
def test_bad_config_rejected(tiny_cfg, patch):
    text = tiny_cfg.read_text().replace(*patch)
    with pytest.raises(harness.ConfigError):
        harness.parse_config(text)


def test_cli_bad_config_exit_code(tmp_path, tiny_cfg, capsys):
    bad = tmp_path / "bad.ini"
    bad.write_text(tiny_cfg.read_text().replace("k = 2", "k = -1"))
    assert main(["train", "--config", str(bad)]) == 2
    assert main(["describe", "--config", str(tmp_path / "missing.ini")]) == 2
    assert "config error" in capsys.readouterr().err


# ---- intervals and plot tables


@settings(max_examples=50)
@given(st.lists(st.floats(-10, 10, allow_nan=False), min_size=2, max_size=12))
def test_ci95_formula(xs):
    mu, lo, hi = harness.ci95(xs)
    s = np.std(xs, ddof=1)
    assert mu == pytest.approx(np.mean(xs))
    assert hi - mu == pytest.approx(1.96 * s / math.sqrt(len(xs)), abs=1e-9)
    assert mu - lo == pytest.approx(hi - mu, abs=1e-9)


def write_stream(path, variant, seed, points):
    with open(path, "w") as fh:
        for i, (steps, ret) in enumerate(points):
            fh.write(json.dumps({"iteration": i, "env_steps": steps, "mean_train_return": ret,
                                 "variant": variant, "seed": seed}) + "\n")


def test_plot_single_seed_is_degenerate(tmp_path):
    write_stream(tmp_path / "a.jsonl", "mat_naht", 0, [(0, 0.1), (100, 0.5)])
    rows = harness.emit_plot_data([tmp_path / "a.jsonl"], tmp_path / "p.csv")
    for r in rows:
        assert r["mat_naht_ci_lo"] == r["mat_naht_mean"] == r["mat_naht_ci_hi"]
        assert r["mat_naht_degenerate"]
    assert (tmp_path / "p.csv").read_text().startswith("env_steps,")


def test_plot_identical_streams_zero_width(tmp_path):
    files = []
    for s in range(5):
        files.append(tmp_path / f"{s}.jsonl")
        write_stream(files[-1], "mat_naht", s, [(0, 0.2), (128, 0.7), (256, 0.9)])
    for r in harness.emit_plot_data(files):
        assert r["mat_naht_ci_hi"] - r["mat_naht_ci_lo"] == 0.0


def test_plot_known_variance_matches_formula(tmp_path):
    rng = np.random.default_rng(0)
    vals = rng.normal(size=(5, 3))
    files = []
    for s in range(5):
        files.append(tmp_path / f"{s}.jsonl")
        write_stream(files[-1], "independent_baseline", s, [(100 * i + s, vals[s, i]) for i in range(3)])
    rows = harness.emit_plot_data(files)
    # grid holds every step; nearest record per stream is point i for steps 100*i + (0..4)
    for r in rows:
        i = round(r["env_steps"] / 100)
        col = vals[:, i]
        half = 1.96 * col.std(ddof=1) / math.sqrt(5)
        assert abs(r["independent_baseline_ci_hi"] - (col.mean() + half)) <= 1e-9
        assert abs(r["independent_baseline_ci_lo"] - (col.mean() - half)) <= 1e-9


def test_plot_rejects_inconsistent_variants(tmp_path):
    p = tmp_path / "mixed.jsonl"
    write_stream(p, "mat_naht", 0, [(0, 0.1)])
    with open(p, "a") as fh:
        fh.write(json.dumps({"env_steps": 5, "mean_train_return": 0.2, "variant": "independent_baseline", "seed": 0}) + "\n")
    with pytest.raises(ValueError):
        harness.emit_plot_data([p])
    write_stream(tmp_path / "a.jsonl", "mat_naht", 0, [(0, 0.1)])
    write_stream(tmp_path / "b.jsonl", "mat_naht", 0, [(0, 0.3)])
    with pytest.raises(ValueError):
        harness.emit_plot_data([tmp_path / "a.jsonl", tmp_path / "b.jsonl"])


# ---- evaluation


def zero_policy(cfg):
    env = SignalGame()
    policy = harness.make_policy(cfg, env.spec, "mat_naht", 0)
    for _, p in policy.store.items():
        p.value[...] = 0.0
    return policy, env


def test_absent_family_reported_as_none(tiny_cfg):
    cfg = harness.load_config(tiny_cfg)
    policy, env = zero_policy(cfg)
    pool = build_pools(5, 1, 1, 0)[1]
    rep = harness.evaluate(policy, pool, env, 2, [0])
    absent = [f for f, c in rep.per_family.items() if c is None]
    assert len(absent) >= 3
    assert rep.to_dict()["per_family"][str(absent[0])] is None
    assert rep.overall.degenerate


def test_train_and_test_pools_are_disjoint(tiny_cfg):
    cfg = harness.load_config(tiny_cfg)
    tr, te = cfg.pools.build()
    assert not {i.key() for i in tr.instances} & {i.key() for i in te.instances}


def test_zero_checkpoint_eval(tmp_path, tiny_cfg, capsys):
    """Zero weights give a uniform decoder: greedy picks action 0, sampling is uniform over 6 actions."""
    cfg = harness.load_config(tiny_cfg)
    policy, _ = zero_policy(cfg)
    ckpt = tmp_path / "zero.ckpt"
    nx.save_checkpoint(ckpt, policy.store, {"variant": "mat_naht"})
    assert main(["eval", "--config", str(tiny_cfg), "--ckpt", str(ckpt), "--pool", "test", "--episodes", "400"]) == 0
    greedy = json.loads(capsys.readouterr().out)
    assert greedy["overall"]["mean"] == pytest.approx(0.2, abs=0.06)  # only family code 0 answered
    args = ["eval", "--config", str(tiny_cfg), "--ckpt", str(ckpt), "--pool", "test", "--episodes", "2000", "--sample",
            "--seed", "0", "--seed", "1", "--seed", "2"]
    assert main(args) == 0
    sampled = json.loads(capsys.readouterr().out)["overall"]
    expected = (1 / 6 + 1 / 36) / 2  # N uniform on {1, 2}, each controlled agent right w.p. 1/6
    assert sampled["mean"] == pytest.approx(expected, abs=0.02)
    assert not sampled["degenerate"]


def test_eval_missing_checkpoint_exit_code(tmp_path, tiny_cfg):
    assert main(["eval", "--config", str(tiny_cfg), "--ckpt", str(tmp_path / "nope.ckpt")]) == 3


# ---- runs


@pytest.fixture(scope="module")
def tiny_ablation(tmp_path_factory):
    root = tmp_path_factory.mktemp("abl")
    path = root / "tiny.ini"
    path.write_text(TINY.format(out=root / "runs"))
    assert main(["ablate", "--config", str(path)]) == 0
    return path, root / "runs"


def test_ablate_layout(tiny_ablation):
    _, out = tiny_ablation
    variants = sorted(p.name for p in out.iterdir() if p.is_dir())
    assert variants == sorted(harness.VARIANTS)
    pools = {(out / v / "pools.json").read_bytes() for v in variants}
    assert len(pools) == 1
    for v in variants:
        assert (out / v / "config.ini").exists() and (out / v / "eval_report.json").exists()
        for s in (0, 1):
            run = out / v / f"seed_{s}"
            for f in ("metrics.jsonl", "best.ckpt", "final.ckpt", "eval_train.json", "eval_test.json"):
                assert (run / f).exists(), (run, f)
    header = (out / "plot_data.csv").read_text().splitlines()[0]
    assert all(f"{v}_mean" in header for v in harness.VARIANTS)


def test_config_copy_is_verbatim(tiny_ablation):
    path, out = tiny_ablation
    assert (out / "mat_naht" / "config.ini").read_text() == path.read_text()


def test_no_history_variant_uses_k0(tiny_ablation):
    path, out = tiny_ablation
    cfg = harness.load_config(path)
    policy, _ = harness.load_policy(cfg, out / "mat_naht_no_history" / "seed_0" / "final.ckpt")
    assert policy.config.k == 0 and policy.label == "mat_naht_no_history"


def test_eval_report_per_n(tiny_ablation):
    _, out = tiny_ablation
    rep = json.loads((out / "independent_baseline" / "eval_report.json").read_text())
    assert set(rep["test"]["per_n"]) == {"1", "2"}
    assert rep["seeds"] == [0, 1]


def test_describe_and_check(tiny_cfg, capsys):
    assert main(["describe", "--config", str(tiny_cfg), "--variant", "independent_baseline"]) == 0
    assert "total parameters" in capsys.readouterr().out
    assert main(["check", "--only", "gae", "--only", "adam"]) == 0
    out = capsys.readouterr().out
    assert out.count("[PASS]") == 2
