import numpy as np
import pytest
import scipy.ndimage

from ws3net import (
    CoordinateManager,
    ShapeError,
    SparseTensor,
    ValidationError,
    build_kernel_map,
    stride_coords,
)
from ws3net.layers import (
    BatchNorm,
    ConvWeights,
    ReLU,
    ResidualBlock,
    SparseConv,
    batchnorm_backward,
    batchnorm_forward,
    sparse_conv_backward,
    sparse_conv_forward,
)

from conv_cases import CONV_CONFIGS, oracle_diff, random_case, run_config
from oracles import numerical_gradient, random_unique_coords, rel_error


def test_conv_matches_dense_oracle():
    for seed, (k, s, tr) in enumerate(CONV_CONFIGS):
        worst = run_config(100 + seed, k, s, tr, cases=25)
        assert worst < 1e-10, (k, s, tr, worst)


def test_conv_oracle_at_coarse_input_stride():
    # offsets must scale with the input stride, not with 1
    worst = run_config(7, 3, 1, False, cases=15, in_stride=2)
    assert worst < 1e-10
    worst = run_config(8, 2, 2, False, cases=15, in_stride=2)
    assert worst < 1e-10


def test_conv_matches_scipy_correlate():
    rng = np.random.default_rng(20)
    for _ in range(10):
        coords = random_unique_coords(rng, 50, extent=7, batches=1)
        n = coords.shape[0]
        c_in, c_out = int(rng.integers(1, 5)), int(rng.integers(1, 5))
        feats = rng.normal(size=(n, c_in))
        t = SparseTensor(coords, feats)
        w = rng.normal(size=(27, c_out, c_in))
        weights = ConvWeights(w)
        km = build_kernel_map(t, coords, kernel_size=3, stride=1)
        got = sparse_conv_forward(t, weights, km, coords).features

        # dense correlate over the bounding grid, restricted to occupied rows
        lo = coords[:, 1:].min(axis=0) - 1
        size = coords[:, 1:].max(axis=0) - lo + 2
        grid = np.zeros((c_in, size[0], size[1], size[2]))
        pos = coords[:, 1:] - lo
        grid[:, pos[:, 0], pos[:, 1], pos[:, 2]] = feats.T
        # offset i (lexicographic) sits at kernel cell off+1
        kern = w.reshape(3, 3, 3, c_out, c_in)
        want = np.zeros((n, c_out))
        for co in range(c_out):
            acc = np.zeros(tuple(size))
            for ci in range(c_in):
                acc += scipy.ndimage.correlate(
                    grid[ci], kern[:, :, :, co, ci], mode="constant", cval=0.0
                )
            want[:, co] = acc[pos[:, 0], pos[:, 1], pos[:, 2]]
        assert np.abs(got - want).max() < 1e-10


def test_conv_empty_offsets_and_empty_output():
    # isolated voxels under stride-2 K2: some offsets carry no pairs
    coords = np.array([[0, 0, 0, 0], [0, 4, 4, 4]], dtype=np.int64)
    t = SparseTensor(coords, np.ones((2, 3)))
    out = stride_coords(t, 2)
    km = build_kernel_map(t, out, 2, stride=2)
    rng = np.random.default_rng(0)
    weights = ConvWeights(rng.normal(size=(8, 2, 3)))
    y = sparse_conv_forward(t, weights, km, out)
    assert y.n == 2 and y.stride == 2
    assert np.allclose(y.features, np.ones((2, 3)) @ weights.w[0].T)


def test_masked_weight_values_are_inert():
    rng = np.random.default_rng(21)
    t, weights, km, out = random_case(rng, 3, 1, False, with_mask=True)
    base = sparse_conv_forward(t, weights, km, out).features
    poisoned = weights.w.copy()
    poisoned[weights.mask == 0] = 1e9
    w2 = ConvWeights(poisoned, mask=weights.mask.copy())
    again = sparse_conv_forward(t, w2, km, out).features
    assert np.array_equal(base, again)


def test_conv_backward_finite_difference():
    rng = np.random.default_rng(22)
    for k, s, tr in [(3, 1, False), (2, 2, False), (2, 2, True)]:
        in_stride = s if tr else 1
        t, weights, km, out = random_case(
            rng, k, s, tr, with_mask=True, max_extent=4, max_ch=3,
            in_stride=in_stride,
        )
        r = rng.normal(size=(km.n_out, weights.c_out))

        def loss_of_w(_):
            y = sparse_conv_forward(t, weights, km, out).features
            return float((y * r).sum())

        grad_in, grad_w = sparse_conv_backward(r, t.features, weights, km)
        num_w = numerical_gradient(loss_of_w, weights.w)
        assert rel_error(grad_w, num_w) < 1e-7

        feats = t.features.copy()

        def loss_of_x(x):
            tt = SparseTensor(t.coords, x, stride=t.stride, index=t.index)
            y = sparse_conv_forward(tt, weights, km, out).features
            return float((y * r).sum())

        num_x = numerical_gradient(loss_of_x, feats)
        assert rel_error(grad_in, num_x) < 1e-7
        # pruned entries receive no gradient
        assert np.all(grad_w[weights.mask == 0] == 0.0)


def test_conv_weights_validation_and_lazy_init():
    rng = np.random.default_rng(23)
    w = rng.normal(size=(8, 2, 3))
    with pytest.raises(ShapeError):
        ConvWeights(w, mask=np.ones((8, 3, 2), dtype=np.uint8))
    with pytest.raises(ValidationError):
        ConvWeights(w, mask=2 * np.ones(w.shape, dtype=np.uint8))
    with pytest.raises(ShapeError):
        ConvWeights(w[0])
    cw = ConvWeights(w.copy())
    assert cw._w_init is None
    cw.snapshot_init()
    cw.w += 1.0
    assert np.array_equal(cw.w_init, w)
    assert cw.density() == 1.0
    cw.mask[0, 0, 0] = 0
    cw.apply_mask()
    assert cw.w[0, 0, 0] == 0.0
    assert cw.nnz() == cw.size() - 1


def test_conv_shape_mismatches_raise():
    rng = np.random.default_rng(24)
    t, weights, km, out = random_case(rng, 3, 1, False)
    bad = ConvWeights(rng.normal(size=(27, 4, weights.c_in + 1)))
    with pytest.raises(ShapeError):
        sparse_conv_forward(t, bad, km, out)
    bad_vol = ConvWeights(rng.normal(size=(8, 4, weights.c_in)))
    with pytest.raises(ShapeError):
        sparse_conv_forward(t, bad_vol, km, out)
    with pytest.raises(ShapeError):
        sparse_conv_backward(np.zeros((km.n_out + 1, weights.c_out)),
                             t.features, weights, km)


def test_batchnorm_forward_statistics():
    rng = np.random.default_rng(25)
    x = rng.normal(loc=3.0, scale=2.0, size=(200, 4))
    bn = BatchNorm("bn", 4)
    t = SparseTensor(np.column_stack([
        np.zeros(200, dtype=np.int64),
        np.arange(200, dtype=np.int64),
        np.zeros((200, 2), dtype=np.int64),
    ]), x)
    y = bn.forward(t, train=True).features
    assert np.allclose(y.mean(axis=0), 0.0, atol=1e-12)
    # eps shifts the normalized variance to var/(var+eps), just below 1
    assert np.allclose(y.var(axis=0), 1.0, atol=1e-4)
    # running stats move toward batch stats by the momentum factor
    assert np.allclose(bn.running_mean, 0.1 * x.mean(axis=0))
    unbiased = x.var(axis=0) * 200 / 199
    assert np.allclose(bn.running_var, 0.9 * 1.0 + 0.1 * unbiased)
    # eval mode then uses running stats
    y2 = bn.forward(t, train=False).features
    want = bn.gamma * (x - bn.running_mean) / np.sqrt(bn.running_var + bn.eps)
    assert np.allclose(y2, want + bn.beta)
    with pytest.raises(ValidationError):
        batchnorm_forward(np.zeros((0, 4)), bn.gamma, bn.beta, bn.running_mean,
                          bn.running_var, bn.eps, bn.momentum, True)


def test_batchnorm_backward_finite_difference():
    rng = np.random.default_rng(26)
    for train in (True, False):
        n, c = 12, 3
        x = rng.normal(size=(n, c))
        gamma = rng.normal(size=c)
        beta = rng.normal(size=c)
        rm = rng.normal(size=c)
        rv = rng.uniform(0.5, 2.0, size=c)
        r = rng.normal(size=(n, c))

        def loss(xx):
            y, _ = batchnorm_forward(xx, gamma, beta, rm.copy(), rv.copy(),
                                     1e-5, 0.1, train)
            return float((y * r).sum())

        y, ctx = batchnorm_forward(x, gamma, beta, rm.copy(), rv.copy(),
                                   1e-5, 0.1, train)
        gx, gg, gb = batchnorm_backward(r, gamma, ctx)
        assert rel_error(gx, numerical_gradient(loss, x)) < 1e-6

        def loss_g(gm):
            y, _ = batchnorm_forward(x, gm, beta, rm.copy(), rv.copy(),
                                     1e-5, 0.1, train)
            return float((y * r).sum())

        assert rel_error(gg, numerical_gradient(loss_g, gamma)) < 1e-6
        assert np.allclose(gb, r.sum(axis=0))


def test_relu_and_module_fast_path():
    rng = np.random.default_rng(27)
    coords = random_unique_coords(rng, 50, extent=6)
    x = rng.normal(size=(coords.shape[0], 5))
    t = SparseTensor(coords, x)
    relu = ReLU()
    y = relu.forward(t)
    assert np.array_equal(y.features, np.maximum(x, 0.0))
    g = relu.backward(np.ones_like(x))
    assert np.array_equal(g, (x > 0).astype(np.float64))

    # pointwise module shortcut equals the general mapped path
    conv = SparseConv("pw", 5, 3, kernel_size=1, rng=np.random.default_rng(1))
    mgr = CoordinateManager(t)
    out_fast = conv.forward(t, mgr)
    km = build_kernel_map(t, t.coords, 1, 1)
    out_gen = sparse_conv_forward(t, conv.weights, km, t.coords)
    assert np.allclose(out_fast.features, out_gen.features, atol=1e-14)
    assert out_fast.index is t.index

    g_in = conv.backward(np.ones((t.n, 3)))
    _, gw = sparse_conv_backward(np.ones((t.n, 3)), x, conv.weights, km)
    assert np.allclose(conv.grad_w, gw)
    gi, _ = sparse_conv_backward(np.ones((t.n, 3)), x, conv.weights, km)
    assert np.allclose(g_in, gi)


def test_residual_block_finite_difference():
    rng = np.random.default_rng(28)
    coords = random_unique_coords(rng, 25, extent=4)
    n = coords.shape[0]
    x = rng.normal(size=(n, 3))
    block = ResidualBlock("b", 3, 4, rng=np.random.default_rng(2))
    r = rng.normal(size=(n, 4))

    def loss(xx):
        t = SparseTensor(coords, xx)
        mgr = CoordinateManager(t)
        y = block.forward(t, mgr, train=True)
        return float((y.features * r).sum())

    t = SparseTensor(coords, x.copy())
    mgr = CoordinateManager(t)
    block.forward(t, mgr, train=True)
    gx = block.backward(r)
    num = numerical_gradient(loss, x)
    assert rel_error(gx, num) < 1e-5

    names = [v.name for v in block.param_views()]
    assert "b.proj.w" in names and "b.conv1.w" in names
    same = ResidualBlock("s", 4, 4, rng=np.random.default_rng(3))
    assert same.proj is None
