import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from oracles import conv1d_loops
from sleepkit import UnsupportedLayerError
from sleepkit.nn import (
    BiLSTM,
    Conv1D,
    Dense,
    Dropout,
    LeakyReLU,
    MaxPool1D,
    ResConvBlock,
    SleepPPGConfig,
    Softmax,
    Tape,
    TCNBlock,
    WindowReshape,
    build_bm_dts,
    build_bm_fe,
    build_model,
    build_sleepppg_net,
    xavier_init,
)
from sleepkit.nn.init import fans
from sleepkit.nn.models import DTSConfig, FEConfig

F64 = np.float64
SLEEPPPG_PARAMS = 2_276_692


def run(layer, x, train=False, seed=0):
    tape = Tape(train=train, rng=np.random.default_rng(seed), record=True)
    return layer.forward(np.asarray(x, dtype=F64), tape), tape


def numeric_grad(f, arr, eps=1e-6):
    g = np.zeros_like(arr)
    flat, gf = arr.reshape(-1), g.reshape(-1)
    for i in range(flat.size):
        o = flat[i]
        flat[i] = o + eps
        fp = f()
        flat[i] = o - eps
        fm = f()
        flat[i] = o
        gf[i] = (fp - fm) / (2 * eps)
    return g


def check_layer_grads(layer, x, rng, train=False, tol=1e-6):
    layer.bind("t.")
    y, _ = run(layer, x, train)
    r = rng.standard_normal(y.shape)

    def loss():
        return float(np.sum(run(layer, x, train)[0] * r))

    _, tape = run(layer, x, train)
    dx = layer.backward(r, tape)
    np.testing.assert_allclose(dx, numeric_grad(loss, x), rtol=tol, atol=tol)
    for name, arr in layer.named_params():
        np.testing.assert_allclose(tape.grads[name], numeric_grad(loss, arr), rtol=tol, atol=tol)


# -- conv ------------------------------------------------------------------------

def test_conv_identity_1x1(rng):
    conv = Conv1D("c", 3, 3, 1, dtype=F64)
    conv.params["kernel"][0] = np.eye(3)
    x = rng.standard_normal((2, 10, 3))
    np.testing.assert_array_equal(run(conv, x)[0], x)


def test_conv_hand_case():
    conv = Conv1D("c", 1, 1, 3, dtype=F64)
    conv.params["kernel"][:] = 1.0
    y, _ = run(conv, np.array([1.0, 2.0, 3.0]).reshape(1, 3, 1))
    assert y.ravel().tolist() == [3.0, 6.0, 5.0]


def test_dilated_span():
    conv = Conv1D("c", 1, 1, 3, dilation=2, dtype=F64)
    conv.params["kernel"][:] = 1.0
    x = np.zeros((1, 21, 1))
    x[0, 10] = 1.0
    y, _ = run(conv, x)
    assert np.flatnonzero(y.ravel()).tolist() == [8, 10, 12]
    assert np.ptp(np.flatnonzero(y.ravel())) + 1 == 5


@given(k=st.sampled_from([1, 2, 3, 7]), d=st.integers(1, 4), t=st.integers(1, 30),
       c_in=st.integers(1, 3), c_out=st.integers(1, 3), seed=st.integers(0, 1000))
def test_conv_matches_loops(k, d, t, c_in, c_out, seed):
    r = np.random.default_rng(seed)
    conv = Conv1D("c", c_in, c_out, k, d, dtype=F64)
    conv.params["kernel"][:] = r.standard_normal((k, c_in, c_out))
    conv.params["bias"][:] = r.standard_normal(c_out)
    x = r.standard_normal((t, c_in))
    y, _ = run(conv, x[None])
    np.testing.assert_allclose(y[0], conv1d_loops(x, conv.params["kernel"], conv.params["bias"], d),
                               rtol=1e-12, atol=1e-12)


def test_conv_shape_mismatch():
    with pytest.raises(ValueError):
        run(Conv1D("c", 2, 1, 3, dtype=F64), np.zeros((1, 5, 3)))


# -- pooling and blocks --------------------------------------------------------------

def test_maxpool_cases():
    y, _ = run(MaxPool1D("p"), np.array([1.0, 3.0, 2.0, 0.0]).reshape(1, 4, 1))
    assert y.ravel().tolist() == [3.0, 2.0]
    y, _ = run(MaxPool1D("p"), np.full((1, 8, 2), 4.0))
    assert y.shape == (1, 4, 2) and np.all(y == 4.0)
    with pytest.raises(ValueError):
        run(MaxPool1D("p"), np.zeros((1, 5, 1)))


def test_eight_pools_to_4800():
    x = np.zeros((1, 1_228_800, 1), dtype=np.float32)
    pool = MaxPool1D("p")
    tape = Tape()
    for _ in range(8):
        x = pool.forward(x, tape)
    assert x.shape[1] == 4800


def test_resconv_zero():
    block = ResConvBlock("b", 3, 8, dtype=F64)
    y, _ = run(block, np.zeros((1, 16, 3)))
    assert y.shape == (1, 8, 8) and np.all(y == 0)


@given(t=st.integers(1, 40).map(lambda v: 2 * v), seed=st.integers(0, 10_000))
def test_resconv_halves_and_stays_finite(t, seed):
    r = np.random.default_rng(seed)
    block = ResConvBlock("b", 2, 4)
    block.bind()
    for name, arr in block.named_params():
        arr[...] = xavier_init(arr.shape, r.integers(1 << 30), np.float32) * 10
    x = (r.standard_normal((2, t, 2)) * 100).astype(np.float32)
    y = block.forward(x, Tape())
    assert y.shape == (2, t // 2, 4) and np.all(np.isfinite(y))


# -- gradients per layer ---------------------------------------------------------

@pytest.mark.parametrize("make", [
    lambda: Conv1D("c", 3, 2, 3, dtype=F64),
    lambda: Conv1D("c", 3, 2, 7, dilation=3, dtype=F64),
    lambda: Dense("d", 3, 4, dtype=F64),
    lambda: LeakyReLU("a"),
    lambda: MaxPool1D("p"),
    lambda: Softmax("s"),
    lambda: WindowReshape("w", 4),
    lambda: ResConvBlock("r", 3, 4, dtype=F64),
    lambda: TCNBlock("t", 3, 4, kernel_size=3, dilations=(1, 2), dtype=F64),
])
def test_layer_gradients(make, rng):
    layer = make()
    layer.bind("t.")
    for _, arr in layer.named_params():
        arr[...] = rng.standard_normal(arr.shape) * 0.5
    x = rng.standard_normal((2, 16, 3))
    check_layer_grads(layer, x, rng)


def test_dropout_gradient_uses_mask(rng):
    layer = Dropout("d", 0.5)
    x = rng.standard_normal((1, 50, 3))
    y, tape = run(layer, x, train=True, seed=3)
    dx = layer.backward(np.ones_like(x), tape)
    np.testing.assert_array_equal(dx != 0, y != 0)
    np.testing.assert_allclose(dx[dx != 0], 2.0)
    check_layer_grads(Dropout("d", 0.3), x, rng, train=True)


def test_dropout_modes(rng):
    layer = Dropout("d", 0.2)
    x = rng.standard_normal((4, 100, 8))
    np.testing.assert_array_equal(run(layer, x)[0], x)
    a, _ = run(layer, x, train=True, seed=9)
    b, _ = run(layer, x, train=True, seed=9)
    np.testing.assert_array_equal(a, b)
    assert 0.1 < np.mean(a == 0) < 0.3


# -- init ------------------------------------------------------------------------

def test_xavier_bounds_and_seed():
    shape = (7, 16, 32)
    a = xavier_init(shape, 5)
    np.testing.assert_array_equal(a, xavier_init(shape, 5))
    fi, fo = fans(shape)
    assert (fi, fo) == (7 * 16, 7 * 32)
    assert np.abs(a).max() <= np.sqrt(6 / (fi + fo))


def test_xavier_variance():
    shape = (1000, 1000)
    a = xavier_init(shape, 1, np.float64)
    assert a.var() == pytest.approx(2 / 2000, rel=0.05)


# -- architectures ----------------------------------------------------------------

def test_sleepppg_param_count_golden():
    m = build_sleepppg_net()
    assert m.n_params == SLEEPPPG_PARAMS
    assert build_sleepppg_net(seed=3).n_params == SLEEPPPG_PARAMS
    kinds = [layer.kind for _, layer in m.stages]
    assert kinds.count("ResConv") == 8 and kinds.count("TCN") == 2


def test_sleepppg_layer_hyperparameters():
    m = build_sleepppg_net()
    w = m.weights
    filters = [w[f"encoder.resconv{i}.main.conv1.kernel"].shape[-1] for i in range(1, 9)]
    assert filters == [16, 16, 32, 32, 64, 64, 128, 256]
    tcn = [n for n in w if n.startswith("sequence.tcn1.main.") and n.endswith("kernel")]
    assert len(tcn) == 6
    assert all(w[n].shape[0] == 7 for n in tcn)
    assert w["classifier.conv.kernel"].shape == (1, 128, 4)
    assert w["encoder.embed.kernel"].shape == (1024, 128)


def test_toy_forward_probabilities(rng):
    m = build_sleepppg_net(SleepPPGConfig.toy(), seed=1)
    x = rng.standard_normal((3, 2048))
    p = m.forward(x, rng.random((3, 2)))
    assert p.shape == (3, 8, 4)
    np.testing.assert_allclose(p.sum(-1), 1, atol=1e-5)
    assert np.all((p >= 0) & (p <= 1))


def test_infer_deterministic_and_train_seeded(rng):
    m = build_sleepppg_net(SleepPPGConfig.toy(), seed=1)
    x = rng.standard_normal(2048)
    d = np.array([0.5, 1.0])
    np.testing.assert_array_equal(m.forward(x, d), m.forward(x, d))
    a, _ = m.forward(x, d, mode="train", seed=4)
    b, _ = m.forward(x, d, mode="train", seed=4)
    np.testing.assert_array_equal(a, b)


def test_input_shape_checked():
    m = build_sleepppg_net(SleepPPGConfig.toy())
    with pytest.raises(ValueError):
        m.forward(np.zeros(1000))


def test_zero_upstream_gradient(rng):
    m = build_sleepppg_net(SleepPPGConfig.toy(), seed=2, dtype=F64)
    _, tape = m.forward(rng.standard_normal(2048), np.zeros(2), mode="train", seed=1)
    grads = m.backward(tape, np.zeros((8, 4)))
    assert set(grads) == set(m.weights)
    assert all(not g.any() for g in grads.values())


def test_fused_logit_gradient_matches_softmax_path(rng):
    m = build_sleepppg_net(SleepPPGConfig.toy(), seed=2, dtype=F64)
    x = rng.standard_normal((2, 2048))
    p, tape = m.forward(x, np.zeros((2, 2)), mode="train", seed=1)
    dp = rng.standard_normal(p.shape)
    full = m.backward(tape, dp)
    dz = p * (dp - np.sum(dp * p, axis=-1, keepdims=True))
    fused = m.backward(tape, dlogits=dz)
    for k in full:
        np.testing.assert_allclose(fused[k], full[k], rtol=1e-9, atol=1e-12)


def test_composite_gradient_sample(rng):
    """Spot check of a few weights per tensor; the full sweep runs in acceptance."""
    from oracles import finite_difference_check

    cfg = SleepPPGConfig.toy(resconv_filters=(2, 2), embedding=2, tcn_filters=2, tcn_dilations=(1, 2),
                             n_windows=4, samples_per_window=16)
    m = build_sleepppg_net(cfg, seed=3, dtype=F64)
    x = rng.standard_normal((2, 64))
    d = rng.random((2, 2))
    r = rng.standard_normal((2, 4, 4))
    worst, name, _, n = finite_difference_check(m, x, d, r)
    assert n == m.n_params
    assert worst < 1e-4, name


def test_backward_unsupported_for_bilstm(rng):
    m = build_bm_fe(FEConfig(n_windows=5))
    _, tape = m.forward(rng.standard_normal((5, 126)), record=True)
    with pytest.raises(UnsupportedLayerError):
        m.backward(tape, np.zeros((5, 4)))
    assert not m.differentiable


def test_bm_dts_shapes_and_time_distribution(rng):
    cfg = DTSConfig(n_windows=12)
    m = build_bm_dts(cfg, seed=0)
    p = m.forward(np.zeros((12, 256)), np.zeros(2))
    assert p.shape == (12, 4)
    np.testing.assert_allclose(p.sum(-1), 1, atol=1e-5)
    _, tape = m.forward(np.zeros((12, 256)), np.zeros(2), trace=True)
    assert ("encoder.embed", (12, 128)) in tape.shapes
    # the encoder has no cross-window context
    x = rng.standard_normal((1, 12, 256)).astype(np.float32)
    perm = rng.permutation(12)
    enc = [layer for g, layer in m.stages if g == "encoder"][:2]

    def encode(v):
        t = Tape()
        for layer in enc:
            v = layer.forward(v, t)
        return v

    np.testing.assert_allclose(encode(x)[:, perm], encode(x[:, perm]), rtol=1e-6, atol=1e-6)


def test_bm_dts_trainable(rng):
    cfg = DTSConfig(n_windows=4, window_width=32, resconv_filters=(2, 2, 2), embedding=4,
                    tcn_blocks=1, tcn_dilations=(1, 2), tcn_filters=4)
    m = build_bm_dts(cfg, seed=0, dtype=F64)
    from oracles import finite_difference_check

    worst, name, _, _ = finite_difference_check(m, rng.standard_normal((1, 4, 32)), rng.random((1, 2)),
                                                rng.standard_normal((1, 4, 4)))
    assert worst < 1e-4, name


def test_bm_fe_shapes():
    m = build_bm_fe(FEConfig(n_windows=10))
    _, tape = m.forward(np.zeros((10, 126)), trace=True)
    shapes = dict(tape.shapes)
    assert shapes["sequence.bilstm1"] == (10, 256)
    assert shapes["sequence.bilstm2"] == (10, 256)
    assert tape.shapes[-1][1] == (10, 4)


def test_bilstm_reversal_symmetry(rng):
    layer = BiLSTM("b", 3, 5, dtype=F64)
    layer.bind()
    for name, arr in layer.fwd.params.items():
        arr[...] = rng.standard_normal(arr.shape) * 0.5
        layer.bwd.params[name][...] = arr
    x = rng.standard_normal((1, 9, 3))
    y = layer.forward(x, Tape())
    yr = layer.forward(x[:, ::-1], Tape())
    swapped = np.concatenate([y[:, ::-1, 5:], y[:, ::-1, :5]], axis=-1)
    np.testing.assert_allclose(yr, swapped, rtol=1e-12)


def test_tcn_receptive_field_full_config():
    block = TCNBlock("t", 4, 4, kernel_size=7, dilations=(1, 2, 4, 8, 16, 32))
    assert block.receptive_field == 379


def test_tcn_perturbation_reach(rng):
    """Perturbing window l moves outputs only within the receptive field."""
    blocks = [TCNBlock(f"t{i}", 3, 3, kernel_size=7, dilations=(1, 2, 4, 8, 16, 32), dtype=F64)
              for i in range(2)]
    for b in blocks:
        b.bind()
        for _, arr in b.named_params():
            arr[...] = rng.standard_normal(arr.shape) * 0.3
    x = rng.standard_normal((1, 1200, 3))
    l = 600

    def out(v, n):
        t = Tape()
        for b in blocks[:n]:
            v = b.forward(v, t)
        return v

    x2 = x.copy()
    x2[0, l] += 1.0
    half = (blocks[0].receptive_field - 1) // 2  # 189 windows each side
    for n in (1, 2):
        changed = np.flatnonzero(np.any(out(x2, n) != out(x, n), axis=-1)[0])
        assert changed.min() >= l - n * half and changed.max() <= l + n * half
        assert changed.max() - l >= n * half - 1  # the reach is actually used
        assert np.all(np.abs(changed - l) <= n * 379)


def test_unknown_arch():
    from sleepkit import ConfigError

    with pytest.raises(ConfigError):
        build_model("transformer")
