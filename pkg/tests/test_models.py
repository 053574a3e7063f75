import numpy as np
import pytest

from gazeloss.cgl import CglConfig
from gazeloss.errors import ConfigurationError, DimensionError, FormatError
from gazeloss.losses import LabeledState, RankedSnippetPair, TrajectorySnippet, bc_loss, ranking_logits
from gazeloss.models import ConvNet, RewardNet, build_bc_net, build_bco_net, build_trex_net
from gazeloss.tensor import backward


def conv_params(c_in, c_out, k):
    return c_out * c_in * k * k + c_out


def test_bc_default_shapes():
    net = build_bc_net(4)
    assert net.shapes == [(32, 39, 39), (64, 18, 18), (64, 16, 16)]
    assert net.tap == 3 and net.tap_shape == (64, 16, 16)
    out = net.forward(np.zeros((1, 84, 84)))
    assert out.tap(3).shape == (64, 16, 16)
    assert out.output.shape == (4,)


def test_bco_default_shapes():
    net = build_bco_net(3)
    assert net.shapes == [(32, 20, 20), (32, 9, 9), (64, 7, 7)]
    assert net.forward(np.zeros((4, 84, 84))).tap(2).shape == (32, 9, 9)


def test_trex_default_shapes():
    net = build_trex_net()
    assert net.shapes == [(16, 26, 26), (16, 11, 11), (16, 9, 9), (16, 7, 7)]
    out = net.forward(np.zeros((2, 4, 84, 84)))
    assert out.tap(1).shape == (2, 16, 26, 26)
    assert out.output.shape == (2, 1)


def test_parameter_counts():
    bc = conv_params(1, 32, 8) + conv_params(32, 64, 4) + conv_params(64, 64, 3) + (64 * 16 * 16 + 1) * 2
    assert build_bc_net(2).num_parameters() == bc
    bco = conv_params(4, 32, 8) + conv_params(32, 32, 4) + conv_params(32, 64, 3) + (64 * 7 * 7 + 1) * 5
    assert build_bco_net(5).num_parameters() == bco
    trex = conv_params(4, 16, 7) + conv_params(16, 16, 5) + 2 * conv_params(16, 16, 3)
    trex += (16 * 7 * 7 + 1) * 64 + 65
    assert build_trex_net().num_parameters() == trex


def test_gaze_loss_adds_no_parameters():
    net = build_bc_net(2, seed=0)
    before = [id(p) for p in net.parameters()], net.num_parameters()
    rng = np.random.default_rng(0)
    batch = [LabeledState(rng.random((1, 84, 84)), 1, rng.random((16, 16)))]
    backward(bc_loss(net, batch, CglConfig(alpha=0.5)))
    assert ([id(p) for p in net.parameters()], net.num_parameters()) == before


def test_zero_input_gives_head_bias():
    net = build_bc_net(3, seed=1)
    net.params["fc1.bias"].data[:] = [0.25, -1.0, 2.0]
    np.testing.assert_allclose(net.forward(np.zeros((1, 84, 84))).output.data, [0.25, -1.0, 2.0])


def test_same_seed_same_net():
    a, b = build_bco_net(4, seed=7), build_bco_net(4, seed=7)
    for name in a.params:
        np.testing.assert_array_equal(a.params[name].data, b.params[name].data)
    x = np.random.default_rng(1).random((4, 84, 84))
    np.testing.assert_array_equal(a.forward(x).output.data, b.forward(x).output.data)
    c = build_bco_net(4, seed=8)
    assert not np.array_equal(a.params["conv1.weight"].data, c.params["conv1.weight"].data)


def test_fan_in_uniform_init():
    net = build_bc_net(2, seed=0)
    w = net.params["conv2.weight"].data
    bound = 1 / np.sqrt(32 * 4 * 4)
    assert np.abs(w).max() <= bound
    assert np.abs(w).max() > 0.95 * bound
    assert not net.params["conv2.bias"].data.any()


def test_tap_mismatch_is_configuration_error():
    conv = [{"out_channels": 8, "kernel": 8, "stride": 4}, {"out_channels": 8, "kernel": 4, "stride": 2},
            {"out_channels": 8, "kernel": 3, "stride": 1}]
    with pytest.raises(ConfigurationError, match="16x16"):
        build_bc_net(2, conv=conv)
    net = build_bc_net(2, conv=conv, allow_tap_mismatch=True)
    assert net.tap_shape == (8, 7, 7)
    with pytest.raises(ConfigurationError):
        build_bco_net(2, tap=3)


def test_invalid_builds():
    with pytest.raises(ConfigurationError):
        build_bc_net(1)
    with pytest.raises(ConfigurationError):
        build_bc_net(2, conv=[{"out_channels": 4, "kernel": 100, "stride": 1}], tap=1, allow_tap_mismatch=True)


def test_wrong_input_shape():
    with pytest.raises(DimensionError):
        build_bc_net(2).forward(np.zeros((4, 84, 84)))


def test_checkpoint_round_trip(tmp_path):
    net = build_trex_net(seed=3)
    net.params["fc2.bias"].data[:] = 0.7
    net.save(tmp_path / "ck")
    loaded = ConvNet.load(tmp_path / "ck")
    assert isinstance(loaded, RewardNet)
    assert loaded.spec == net.spec
    x = np.random.default_rng(2).random((3, 4, 84, 84))
    np.testing.assert_array_equal(loaded.forward(x).output.data, net.forward(x).output.data)


def test_load_missing_checkpoint(tmp_path):
    with pytest.raises(FormatError):
        ConvNet.load(tmp_path)


def test_snippet_return_is_sum_and_empty_is_zero():
    net = build_trex_net(seed=0)
    states = np.random.default_rng(3).random((3, 4, 84, 84))
    per_state = net.forward(states).output.data[:, 0]
    assert net.snippet_return(states).item() == pytest.approx(per_state.sum(), rel=1e-6)
    assert net.snippet_return(np.zeros((0, 4, 84, 84))).item() == 0.0


def test_swapping_pair_flips_logit_sign():
    net = build_trex_net(seed=0)
    rng = np.random.default_rng(4)
    a = TrajectorySnippet(rng.random((2, 4, 84, 84)), np.zeros((2, 26, 26)), 0.0)
    b = TrajectorySnippet(rng.random((2, 4, 84, 84)), np.zeros((2, 26, 26)), 0.0)
    fwd = ranking_logits(net, RankedSnippetPair(a, b, allow_ties=True))
    rev = ranking_logits(net, RankedSnippetPair(b, a, allow_ties=True))
    assert fwd[1] - fwd[0] == pytest.approx(-(rev[1] - rev[0]))
