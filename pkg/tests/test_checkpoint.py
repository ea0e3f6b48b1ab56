import hashlib

import numpy as np
import pytest

from ws3net import CheckpointError
from ws3net.checkpoint import load_checkpoint, read_spec, save_checkpoint
from ws3net.network import NetworkSpec, build_network

from test_network import TINY, tiny_input


def mutated_net(seed=40):
    """A tiny net with non-trivial weights, masks, and running stats."""
    net = build_network(NetworkSpec(**TINY))
    rng = np.random.default_rng(seed)
    for conv in net.conv_layers():
        conv.weights.snapshot_init()
        conv.weights.w += 0.1 * rng.normal(size=conv.weights.w.shape)
        if conv.prunable:
            conv.weights.mask[...] = (rng.random(conv.weights.mask.shape) < 0.7)
            conv.weights.apply_mask()
    net.forward(tiny_input(seed=seed), train=True)  # move running stats
    return net


def test_roundtrip_bit_exact(tmp_path):
    net = mutated_net()
    path = tmp_path / "net.wsck"
    save_checkpoint(path, net)
    loaded = load_checkpoint(path)
    assert loaded.spec == net.spec
    for a, b in zip(net.conv_layers(), loaded.conv_layers()):
        assert a.name == b.name
        assert np.array_equal(a.weights.w, b.weights.w)
        assert np.array_equal(a.weights.mask, b.weights.mask)
        assert np.array_equal(a.weights.w_init, b.weights.w_init)
    for va, vb in zip(net.param_views(), loaded.param_views()):
        assert va.name == vb.name
        assert np.array_equal(va.value, vb.value)
    t = tiny_input(seed=41)
    la, _ = net.forward(t, train=False)
    lb, _ = loaded.forward(t, train=False)
    assert np.array_equal(la.features, lb.features)


def test_save_is_deterministic(tmp_path):
    net = mutated_net()
    p1, p2 = tmp_path / "a.wsck", tmp_path / "b.wsck"
    save_checkpoint(p1, net)
    save_checkpoint(p2, net)
    assert p1.read_bytes() == p2.read_bytes()
    # an identically constructed and mutated net writes identical bytes
    p3 = tmp_path / "c.wsck"
    save_checkpoint(p3, mutated_net())
    assert p1.read_bytes() == p3.read_bytes()


def test_w_init_survives_roundtrip(tmp_path):
    spec = NetworkSpec(**TINY)
    fresh = build_network(spec)
    init_w = fresh.conv0.weights.w.copy()
    net = mutated_net()
    path = tmp_path / "net.wsck"
    save_checkpoint(path, net)
    loaded = load_checkpoint(path)
    assert np.array_equal(loaded.conv0.weights.w_init, init_w)
    assert not np.array_equal(loaded.conv0.weights.w, init_w)


def test_read_spec_fast_path(tmp_path):
    net = mutated_net()
    path = tmp_path / "net.wsck"
    save_checkpoint(path, net)
    spec = read_spec(path)
    assert spec == net.spec


def test_corruption_detected(tmp_path):
    net = mutated_net()
    path = tmp_path / "net.wsck"
    save_checkpoint(path, net)
    raw = bytearray(path.read_bytes())

    flipped = bytearray(raw)
    flipped[len(raw) // 2] ^= 0xFF
    bad = tmp_path / "bad.wsck"
    bad.write_bytes(flipped)
    with pytest.raises(CheckpointError, match="checksum"):
        load_checkpoint(bad)

    bad.write_bytes(raw[: len(raw) // 2])
    with pytest.raises(CheckpointError):
        load_checkpoint(bad)

    bad.write_bytes(b"XXXX" + bytes(raw[4:]))
    with pytest.raises(CheckpointError, match="not a checkpoint"):
        load_checkpoint(bad)

    bad.write_bytes(b"")
    with pytest.raises(CheckpointError):
        load_checkpoint(bad)


def test_record_name_mismatch_detected(tmp_path):
    net = mutated_net()
    path = tmp_path / "net.wsck"
    save_checkpoint(path, net)
    raw = bytearray(path.read_bytes())
    body = raw[:-32]
    i = bytes(body).index(b"conv0")
    body[i:i + 5] = b"convX"
    fixed = bytes(body) + hashlib.sha256(bytes(body)).digest()
    bad = tmp_path / "renamed.wsck"
    bad.write_bytes(fixed)
    with pytest.raises(CheckpointError, match="convX"):
        load_checkpoint(bad)
