import numpy as np
import pytest

from ws3net import ConfigError, ShapeError, SparseTensor
from ws3net.network import (
    ARCH_PRESETS,
    Network,
    NetworkSpec,
    build_network,
    count_params,
    param_breakdown,
)

from oracles import random_unique_coords

TINY = dict(
    architecture="custom",
    planes=(3, 4, 4, 5, 4, 4, 3, 3),
    repeats=(1,) * 8,
    init_dim=3,
    in_channels=2,
    num_classes=3,
    offset_head=True,
    seed=5,
)


def tiny_net():
    return build_network(NetworkSpec(**TINY))


def tiny_input(seed=0, n=30, extent=8):
    rng = np.random.default_rng(seed)
    coords = random_unique_coords(rng, n, extent=extent, batches=2)
    feats = rng.normal(size=(coords.shape[0], 2))
    return SparseTensor(coords, feats)


def test_preset_parameter_counts_frozen():
    got = {}
    for arch in ARCH_PRESETS:
        net = build_network(NetworkSpec(architecture=arch, in_channels=3,
                                        num_classes=20))
        got[arch] = count_params(net)
    assert got["res16unet14a"] == 8_015_072
    assert got["res16unet18a"] == 15_483_744
    assert got["res16unet34c"] == 37_846_624


def test_breakdown_sums_to_count():
    net = build_network(NetworkSpec(architecture="res16unet14a", in_channels=3,
                                    num_classes=20))
    rows = param_breakdown(net)
    assert sum(r[2] for r in rows) == count_params(net)
    prunable = count_params(net, only_prunable=True)
    conv_rows = sum(r[2] for r in rows if r[1] == "conv")
    assert prunable == conv_rows
    # heads exist and are excluded from the prunable pool
    head_names = {r[0] for r in rows if r[1] == "conv_head"}
    assert head_names == {"final"}
    names = [r[0] for r in rows]
    assert len(names) == len(set(names))


def test_width_multiplier_scaling():
    spec = NetworkSpec(architecture="res16unet14a", in_channels=3, num_classes=5,
                       width_multiplier=0.25)
    net = build_network(spec)
    assert net.conv0.out_channels == 8
    assert net.enc_stages[0][0].conv1.out_channels == 8
    assert net.enc_stages[3][0].conv1.out_channels == 64
    assert net.dec_convs[3].out_channels == 24
    # tiny multipliers clamp to one channel rather than zero
    spec2 = NetworkSpec(architecture="res16unet14a", in_channels=3, num_classes=5,
                        width_multiplier=0.001)
    assert spec2.scaled(256) == 1


def test_spec_validation_and_roundtrip():
    with pytest.raises(ConfigError):
        NetworkSpec(architecture="nope")
    with pytest.raises(ConfigError):
        NetworkSpec(architecture="custom", planes=(1, 2), repeats=(1,) * 8)
    with pytest.raises(ConfigError):
        NetworkSpec(num_classes=1)
    with pytest.raises(ConfigError):
        NetworkSpec(dtype="float16")
    spec = NetworkSpec(**TINY)
    again = NetworkSpec.from_dict(spec.to_dict())
    assert again == spec
    assert again.spec_hash() == spec.spec_hash()
    with pytest.raises(ConfigError):
        NetworkSpec.from_dict({**spec.to_dict(), "bogus": 1})
    # hash is sensitive to any field
    other = NetworkSpec.from_dict({**spec.to_dict(), "seed": 6})
    assert other.spec_hash() != spec.spec_hash()


def test_init_determinism():
    a, b = tiny_net(), tiny_net()
    for va, vb in zip(a.param_views(), b.param_views()):
        assert va.name == vb.name
        assert np.array_equal(va.value, vb.value)
    c = build_network(NetworkSpec(**{**TINY, "seed": 6}))
    assert not np.array_equal(c.conv0.weights.w, a.conv0.weights.w)


def test_forward_shapes_and_skip_alignment():
    net = tiny_net()
    t = tiny_input()
    logits, offsets = net.forward(t, train=True)
    assert logits.n == t.n
    assert logits.num_features == 3
    assert logits.stride == 1
    # the stride-1 decoder output reuses the input coordinate buffer
    assert np.shares_memory(logits.coords, t.coords)
    assert np.array_equal(logits.coords, t.coords)
    assert offsets is not None
    assert offsets.features.shape == (t.n, 3)
    with pytest.raises(ShapeError):
        net.forward(t.replace_features(np.zeros((t.n, 5))), train=True)


def test_forward_eval_consistency_after_training_stats():
    # eval mode must use running stats and be repeatable
    net = tiny_net()
    t = tiny_input()
    net.forward(t, train=True)
    a, _ = net.forward(t, train=False)
    b, _ = net.forward(t, train=False)
    assert np.array_equal(a.features, b.features)


def test_full_network_gradients_match_finite_differences():
    net = tiny_net()
    t = tiny_input(seed=3, n=25, extent=6)
    rng = np.random.default_rng(9)
    r_log = rng.normal(size=(t.n, 3))
    r_off = rng.normal(size=(t.n, 3))

    def loss():
        logits, offsets = net.forward(t, train=True)
        return float((logits.features * r_log).sum()
                     + (offsets.features * r_off).sum())

    base = loss()
    net.zero_grad()
    net.forward(t, train=True)
    net.backward(r_log, r_off)
    views = net.param_views()
    grads = [v.grad.copy() for v in views]

    h = 1e-6
    worst = 0.0
    for k in range(6):
        dirs = [np.random.default_rng(100 + 7 * k + i).normal(size=v.value.shape)
                for i, v in enumerate(views)]
        for v, d in zip(views, dirs):
            v.value += h * d
        lp = loss()
        for v, d in zip(views, dirs):
            v.value -= 2 * h * d
        lm = loss()
        for v, d in zip(views, dirs):
            v.value += h * d
        numeric = (lp - lm) / (2 * h)
        analytic = float(sum((g * d).sum() for g, d in zip(grads, dirs)))
        denom = max(1.0, abs(numeric), abs(analytic))
        worst = max(worst, abs(numeric - analytic) / denom)
    assert worst < 1e-4, worst
    assert abs(loss() - base) < 1e-9  # perturbations restored


def test_gradient_accumulation_until_zero_grad():
    net = tiny_net()
    t = tiny_input(seed=4)
    r = np.random.default_rng(0).normal(size=(t.n, 3))
    net.zero_grad()
    net.forward(t, train=True)
    net.backward(r)
    once = net.conv0.grad_w.copy()
    net.forward(t, train=True)
    net.backward(r)
    assert np.allclose(net.conv0.grad_w, 2 * once)
    net.zero_grad()
    assert not net.conv0.grad_w.any()


def test_conv_by_name_and_layer_order():
    net = tiny_net()
    convs = net.conv_layers()
    names = [c.name for c in convs]
    assert names[0] == "conv0"
    assert names[-1] == "offset1"
    assert "block5_0.conv1" in names
    assert net.conv_by_name("final") is convs[names.index("final")]
    with pytest.raises(Exception):
        net.conv_by_name("missing")
    # offset head and classifier are non-prunable
    flags = {c.name: c.prunable for c in convs}
    assert not flags["final"] and not flags["offset0"] and not flags["offset1"]
    assert flags["conv0"] and flags["block1_0.conv2"]
