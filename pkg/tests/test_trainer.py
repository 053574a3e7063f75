import json
import os

import numpy as np
import pytest

from gazeloss.dataset import PolicyData, generate, load_manifest, load_policy_split, load_trajectories
from gazeloss.errors import ConfigurationError, ValidationError
from gazeloss.models import ConvNet, build_bc_net, build_bco_net, build_trex_net
from gazeloss.trainer import RunConfig, activation_mass, activation_share, evaluate_policy, evaluate_reward, read_metrics, reward_metrics, train
from oracles import spearman_scalar


@pytest.fixture(scope="module")
def bc_data(tmp_path_factory):
    root = tmp_path_factory.mktemp("bc")
    return generate("bc", {"n_train": 40, "n_test": 200, "seed": 21}, root)


@pytest.fixture(scope="module")
def bc_nogaze(tmp_path_factory):
    root = tmp_path_factory.mktemp("bc0")
    return generate("bc", {"n_train": 40, "n_test": 20, "seed": 21, "fixations_per_state": 0}, root)


@pytest.fixture(scope="module")
def trex_data(tmp_path_factory):
    root = tmp_path_factory.mktemp("trex")
    return generate("trex", {"n_trajectories": 4, "n_heldout": 3, "length": 6, "seed": 22}, root)


def run(tmp_path, data, name="run", **kw):
    kw.setdefault("batch_size", 8)
    kw.setdefault("steps", 3)
    cfg = RunConfig(data=str(data), out_dir=str(tmp_path / name), **kw)
    return train(cfg), tmp_path / name


def files(directory):
    out = {}
    for root, _, names in os.walk(directory):
        for n in names:
            path = os.path.join(root, n)
            with open(path, "rb") as fh:
                out[os.path.relpath(path, directory)] = fh.read()
    return out


# --- config -------------------------------------------------------------------------


def test_config_validation():
    with pytest.raises(ConfigurationError):
        RunConfig(algorithm="gail")
    with pytest.raises(ConfigurationError):
        RunConfig(algorithm="trex", attention="gmd")
    with pytest.raises(ConfigurationError):
        RunConfig(steps=-1)
    with pytest.raises(ConfigurationError):
        RunConfig.from_dict({"algorithm": "bc", "lr": 0.1})
    assert RunConfig(algorithm="bco").batch == 32
    assert RunConfig(algorithm="bc", attention="gmd", alpha=0.5).cgl_config().alpha == 0.0
    assert RunConfig(attention="motion-cgl", alpha=0.5).cgl_config().alpha == 0.5


def test_activation_mass_and_share_by_hand():
    tap = np.zeros((1, 2, 2, 2))
    tap[0, 0] = [[0.0, 1.0], [2.0, 4.0]]  # collapses to [[0, .25], [.5, 1]]
    gaze = np.array([[[0.0, 0.3], [0.0, 1.0]]])
    assert activation_mass(tap, gaze) == pytest.approx(1.25)
    assert activation_share(tap, gaze) == pytest.approx(1.25 / 1.75)
    assert activation_share(np.zeros((1, 1, 2, 2)), gaze) == 0.0


# --- training runs ------------------------------------------------------------------


def test_zero_steps_reports_initial_metrics_only(tmp_path, bc_data):
    result, out = run(tmp_path, bc_data, steps=0)
    assert result["final_metrics"] == result["initial_metrics"]
    assert result["checkpoints"] == []
    assert read_metrics(out / "metrics.csv")["step"].size == 0
    assert (out / "checkpoint" / "spec.json").exists()
    on_disk = json.loads((out / "run.json").read_text())
    assert on_disk["format"] == "gazeloss-run/1"
    assert len(on_disk["dataset"]["hash"]) == 40


def test_run_manifest_contents(tmp_path, bc_data):
    result, out = run(tmp_path, bc_data, attention="cgl", checkpoint_every=2, steps=4)
    assert result["checkpoints"] == [os.path.join("checkpoints", "step_000002"), os.path.join("checkpoints", "step_000004")]
    for rel in result["checkpoints"]:
        assert (out / rel / "spec.json").exists()
    assert result["final_metrics"]["probe_activation_mass"] >= 0
    assert 0 <= result["final_metrics"]["probe_activation_share"] <= 1
    assert (out / "probe" / "start_00.pgm").exists() and (out / "probe" / "end_07.pgm").exists()
    assert result["config"]["attention"] == "cgl"


def test_runs_are_bitwise_deterministic(tmp_path, bc_data):
    run(tmp_path / "a", bc_data, attention="cgl")
    run(tmp_path / "b", bc_data, attention="cgl")
    a, b = files(tmp_path / "a" / "run"), files(tmp_path / "b" / "run")
    assert sorted(a) == sorted(b)
    for name in a:
        if name == "run.json":
            ja, jb = json.loads(a[name]), json.loads(b[name])
            ja["config"].pop("out_dir"), jb["config"].pop("out_dir")
            assert ja == jb
        else:
            assert a[name] == b[name], name


def test_total_is_base_plus_alpha_cgl(tmp_path, bc_data):
    _, out = run(tmp_path, bc_data, attention="cgl", alpha=0.1, steps=4)
    m = read_metrics(out / "metrics.csv")
    assert np.all(m["cgl"] > 0)
    np.testing.assert_allclose(m["total"], m["base"] + 0.1 * m["cgl"], rtol=1e-6)


def test_zero_gaze_cgl_equals_none_bitwise(tmp_path, bc_nogaze):
    _, a = run(tmp_path, bc_nogaze, "none", attention="none")
    _, b = run(tmp_path, bc_nogaze, "cgl", attention="cgl", alpha=0.5)
    ma, mb = read_metrics(a / "metrics.csv"), read_metrics(b / "metrics.csv")
    np.testing.assert_array_equal(ma["total"], mb["total"])
    np.testing.assert_array_equal(mb["cgl"], 0.0)
    ca, cb = files(a / "checkpoint"), files(b / "checkpoint")
    assert ca == cb


def test_cgl_adds_no_parameters(tmp_path, bc_data):
    r0, _ = run(tmp_path, bc_data, "none", steps=0)
    r1, _ = run(tmp_path, bc_data, "cgl", attention="cgl", steps=0)
    assert r0["num_parameters"] == r1["num_parameters"]


@pytest.mark.parametrize("attention", ["gmd", "motion-cgl"])
def test_bco_variants_train(tmp_path, bc_data, attention):
    result, out = run(tmp_path, bc_data, algorithm="bco", attention=attention)
    m = read_metrics(out / "metrics.csv")
    assert np.all(np.isfinite(m["total"]))
    assert (m["cgl"] > 0).all() == (attention == "motion-cgl")
    assert result["num_parameters"] == build_bco_net(2).num_parameters()


def test_trex_run(tmp_path, trex_data):
    result, out = run(tmp_path, trex_data, algorithm="trex", attention="cgl", num_pairs=5, snippet_len=3, batch_size=1)
    m = read_metrics(out / "metrics.csv")
    assert len(m["step"]) == 3 and np.all(m["cgl"] > 0)
    ev = result["final_metrics"]["eval"]
    assert set(ev) >= {"pairwise_accuracy", "spearman"}
    assert ev["pairs"] == 3


def test_task_mismatch_rejected_before_training(tmp_path, trex_data):
    with pytest.raises(ValidationError):
        run(tmp_path, trex_data, algorithm="bc")
    assert not (tmp_path / "run" / "metrics.csv").exists()


def test_inconsistent_manifest_rejected(tmp_path, bc_data):
    manifest = json.loads(open(bc_data).read())
    manifest["splits"]["train"]["actions"] = manifest["splits"]["train"]["actions"][:-1]
    d = os.path.dirname(bc_data)
    bad = tmp_path / "manifest.json"
    bad.write_text(json.dumps(manifest))
    for name in ("train_frames.gzt", "train_fixations.csv", "test_frames.gzt", "test_fixations.csv"):
        os.symlink(os.path.join(d, name), tmp_path / name)
    with pytest.raises(ValidationError, match="actions"):
        run(tmp_path, bad)


def test_batch_larger_than_data(tmp_path, bc_data):
    with pytest.raises(ValidationError):
        run(tmp_path, bc_data, batch_size=100)


# --- evaluation ---------------------------------------------------------------------


def test_untrained_net_near_chance(bc_data):
    data = load_policy_split(load_manifest(bc_data), "test")
    accs = [evaluate_policy(build_bc_net(2, seed=s), data)["accuracy"] for s in range(5)]
    assert abs(np.mean(accs) - 0.5) <= 0.05 + abs(data.actions.mean() - 0.5)


def test_planted_net_is_perfect():
    rng = np.random.default_rng(0)
    actions = rng.integers(0, 2, size=30)
    stacks = np.zeros((30, 4, 84, 84))
    stacks[actions == 1] = rng.uniform(0.2, 1.0, size=(int(actions.sum()), 4, 84, 84))
    net = build_bc_net(2, seed=1)
    for i in (1, 2, 3):
        np.abs(net.params[f"conv{i}.weight"].data, out=net.params[f"conv{i}.weight"].data)
    w = net.params["fc1.weight"].data
    w[0] = -1.0
    w[1] = 1.0
    result = evaluate_policy(net, PolicyData(stacks, actions, np.zeros((30, 84, 84)), 2))
    assert result["accuracy"] == 1.0
    assert result["confusion"] == [[int((actions == 0).sum()), 0], [0, int(actions.sum())]]


def test_accuracy_matches_recount(tmp_path, bc_data):
    result, out = run(tmp_path, bc_data, steps=2)
    data = load_policy_split(load_manifest(bc_data), "test")
    net = ConvNet.load(out / "checkpoint")
    hits = sum(int(np.argmax(net.forward(s[3:4]).output.data) == a) for s, a in zip(data.stacks, data.actions))
    ev = evaluate_policy(out / "checkpoint", bc_data)
    assert ev["accuracy"] == hits / len(data)
    assert sum(map(sum, ev["confusion"])) == ev["count"] == len(data)
    # checkpoint round trip reproduces the logged final metrics exactly
    assert ev == result["final_metrics"]["eval"]


def test_policy_checkpoint_mismatch(tmp_path, bc_data):
    net = build_bc_net(3)
    with pytest.raises(ValidationError):
        evaluate_policy(net, bc_data)
    with pytest.raises(ValidationError):
        evaluate_policy(build_trex_net(), bc_data)


def test_reward_ground_truth_is_perfect():
    true = [3.0, 1.0, 7.0, 2.0, 5.0]
    r = reward_metrics(true, true)
    assert r["pairwise_accuracy"] == 1.0 and r["spearman"] == pytest.approx(1.0)


def test_constant_reward_is_coin_flip():
    true = np.arange(10, dtype=float)
    accs = [reward_metrics(np.zeros(10), true, seed=s)["pairwise_accuracy"] for s in range(40)]
    assert abs(np.mean(accs) - 0.5) < 0.03
    assert reward_metrics(np.zeros(10), true, seed=3) == reward_metrics(np.zeros(10), true, seed=3)
    assert reward_metrics(np.zeros(10), true)["spearman"] == 0.0


def test_spearman_matches_independent_statistic():
    rng = np.random.default_rng(5)
    for _ in range(20):
        pred = rng.integers(0, 6, size=12).astype(float)  # includes ties
        true = rng.normal(size=12)
        rho = reward_metrics(pred, true)["spearman"]
        assert rho == pytest.approx(spearman_scalar(list(pred), list(true)), abs=1e-9)


def test_evaluate_reward_on_heldout(tmp_path, trex_data):
    net = build_trex_net(seed=0)
    for p in net.parameters():
        p.data[:] = 0
    r = evaluate_reward(net, trex_data, seed=1)
    assert len(r["true_returns"]) == 3 and r["pairs"] == 3
    assert r["predicted_returns"] == [0.0, 0.0, 0.0]
    trajs = load_trajectories(load_manifest(trex_data), "test")
    with pytest.raises(ValidationError):
        evaluate_reward(net, trajs[:1])
    with pytest.raises(ValidationError):
        evaluate_reward(build_bc_net(2), trex_data)
