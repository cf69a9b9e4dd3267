import numpy as np
import pytest

from mmfl.autograd import Tensor, apply
from mmfl.errors import BatchTooSmall, DimMismatch, InvalidSpec, MissingGradient, ShapeMismatch
from mmfl.layers import (
    Adam,
    BatchNorm,
    BatchWhitening,
    Conv2dLayer,
    Dense,
    LayerSpec,
    adam_step,
    batch_whiten_forward,
    compute_whitening_matrix,
    conv2d_forward,
    init_params,
)

from conftest import assert_grad_matches


def _well_conditioned_batch(rng, n, d):
    """Random batch whose covariance has eigengaps comfortably above 1e-3."""
    while True:
        x = rng.normal(size=(n, d)) @ rng.normal(size=(d, d)) * 0.5 + rng.normal(size=d)
        lam = np.linalg.eigvalsh(np.cov(x.T, bias=True))
        if np.diff(lam).min() > 1e-3 and lam.min() > 1e-2:
            return x


# -- initialization ---------------------------------------------------------------

def test_init_is_deterministic():
    spec = LayerSpec("dense", 6, 4)
    a, b = init_params(spec, 3), init_params(spec, 3)
    assert all(a[k].tobytes() == b[k].tobytes() for k in a)


def test_init_gamma_ones_beta_zeros():
    p = init_params(LayerSpec("bw", 5), 0)
    np.testing.assert_array_equal(p["gamma"], np.ones(5))
    np.testing.assert_array_equal(p["beta"], np.zeros(5))
    np.testing.assert_array_equal(p["running_cov"], np.eye(5))


def test_he_bound():
    w = init_params(LayerSpec("dense", 4, 3), 7)["weight"]
    assert np.abs(w).max() <= np.sqrt(6 / 4)
    assert np.abs(w).max() > 0.5 * np.sqrt(6 / 4)


def test_xavier_bound_for_linear_layers():
    w = init_params(LayerSpec("dense", 4, 3, activation=None), 7)["weight"]
    assert np.abs(w).max() <= np.sqrt(6 / 7)


@pytest.mark.parametrize("spec", [LayerSpec("dense", 0, 3), LayerSpec("conv2d", 2, 3, kernel=2),
                                  LayerSpec("pool", 2, 2), LayerSpec("dense", 2, 2, activation="tanh")])
def test_invalid_spec(spec):
    with pytest.raises(InvalidSpec):
        init_params(spec, 0)


# -- whitening matrix -------------------------------------------------------------

def test_whitening_identity_cov():
    w = compute_whitening_matrix(np.eye(3), eps=1e-12).data
    np.testing.assert_allclose(w, np.eye(3), atol=1e-6)


def test_whitening_diag_closed_form():
    w = compute_whitening_matrix(np.diag([4.0, 1.0]), eps=0.0).data
    np.testing.assert_allclose(w, np.diag([0.5, 1.0]), atol=1e-12)


@pytest.mark.parametrize("method", ["zca", "cholesky"])
def test_whitening_defining_property(rng, method):
    for _ in range(20):
        a = rng.normal(size=(5, 5))
        cov = a @ a.T + 0.1 * np.eye(5)
        eps = 1e-5
        w = compute_whitening_matrix(cov, eps, method).data
        np.testing.assert_allclose(w @ (cov + eps * np.eye(5)) @ w.T, np.eye(5), atol=1e-5)
        if method == "zca":
            np.testing.assert_allclose(w, w.T, atol=1e-10)
            assert np.linalg.eigvalsh(w).min() > 0


# -- batch whitening forward ------------------------------------------------------

def test_already_white_batch_passes_through(rng):
    z = rng.normal(size=(400, 3))
    z -= z.mean(axis=0)
    # exact whitening of z makes its covariance the identity
    cov = z.T @ z / len(z)
    lam, u = np.linalg.eigh(cov)
    z = z @ (u * lam ** -0.5) @ u.T
    layer = BatchWhitening(3, eps=1e-5)
    out = batch_whiten_forward(layer, Tensor(z), "train").data
    assert np.abs(out - z).max() < 1e-3


def test_zero_gamma_gives_constant_rows(rng):
    layer = BatchWhitening(3)
    layer.gamma.data = np.zeros(3, dtype=np.float32)
    layer.beta.data = np.array([1.5, -2.0, 0.25], dtype=np.float32)
    out = layer(Tensor(rng.normal(size=(8, 3)).astype(np.float32))).data
    np.testing.assert_array_equal(out, np.tile(layer.beta.data, (8, 1)))


@pytest.mark.parametrize("method", ["zca", "cholesky"])
def test_output_covariance_is_identity(rng, method):
    for _ in range(20):
        x = _well_conditioned_batch(rng, 8, 3)
        layer = BatchWhitening(3, eps=1e-5, method=method).astype(np.float64)
        out = layer(Tensor(x)).data
        cov = np.cov(out.T, bias=True)
        assert np.abs(cov - np.eye(3)).max() < 1e-3


def test_batch_too_small_and_dim_mismatch():
    layer = BatchWhitening(3)
    with pytest.raises(BatchTooSmall):
        layer(Tensor(np.ones((1, 3))))
    with pytest.raises(DimMismatch):
        layer(Tensor(np.ones((4, 2))))


def test_eval_mode_uses_running_stats_and_does_not_update(rng):
    layer = BatchWhitening(3).astype(np.float64)
    x = rng.normal(size=(10, 3))
    before = layer.state_dict()
    out = layer(Tensor(x), "eval").data
    # running stats at init are mean 0, cov I, so eval is nearly the identity
    np.testing.assert_allclose(out, x / np.sqrt(1 + 1e-5), atol=1e-12)
    after = layer.state_dict()
    assert all(before[k].tobytes() == after[k].tobytes() for k in before)


def test_batch_mode_leaves_running_stats(rng):
    layer = BatchWhitening(3).astype(np.float64)
    before = layer.state_dict()
    layer(Tensor(rng.normal(size=(10, 3))), "batch")
    assert all(before[k].tobytes() == v.tobytes() for k, v in layer.state_dict().items())


def test_running_mean_converges_geometrically(rng):
    momentum = 0.1
    layer = BatchWhitening(3, momentum=momentum).astype(np.float64)
    x = rng.normal(size=(16, 3)) + 5.0
    target = x.mean(axis=0)
    gaps = []
    for _ in range(30):
        layer(Tensor(x), "train")
        gaps.append(np.abs(layer.running_mean - target).max())
    ratios = np.array(gaps[1:]) / np.array(gaps[:-1])
    np.testing.assert_allclose(ratios, 1 - momentum, rtol=1e-8)
    np.testing.assert_array_equal(layer.running_cov, layer.running_cov.T)


# -- convolution ------------------------------------------------------------------

def test_identity_kernel(rng):
    layer = Conv2dLayer(1, 1, kernel=1)
    layer.kernels.data = np.ones((1, 1, 1, 1), dtype=np.float32)
    layer.bias.data = np.zeros(1, dtype=np.float32)
    x = rng.normal(size=(2, 1, 4, 4)).astype(np.float32)
    np.testing.assert_array_equal(conv2d_forward(layer, Tensor(x)).data, x)


def test_zero_kernels_constant_output(rng):
    layer = Conv2dLayer(2, 3)
    layer.kernels.data = np.zeros_like(layer.kernels.data)
    layer.bias.data = np.array([1.0, -1.0, 2.0], dtype=np.float32)
    out = layer(Tensor(rng.normal(size=(2, 2, 4, 4)).astype(np.float32))).data
    for o, b in enumerate([1.0, -1.0, 2.0]):
        assert (out[:, o] == b).all()


def _conv_oracle(x, w, b, stride=1):
    n, c, h, wd = x.shape
    o, _, kh, kw = w.shape
    ph, pw = kh // 2, kw // 2
    oh, ow = (h + 2 * ph - kh) // stride + 1, (wd + 2 * pw - kw) // stride + 1
    out = np.zeros((n, o, oh, ow))
    for ni in range(n):
        for oi in range(o):
            for r in range(oh):
                for s in range(ow):
                    acc = b[oi]
                    for ci in range(c):
                        for i in range(kh):
                            for j in range(kw):
                                rr, ss = r * stride + i - ph, s * stride + j - pw
                                if 0 <= rr < h and 0 <= ss < wd:
                                    acc += x[ni, ci, rr, ss] * w[oi, ci, i, j]
                    out[ni, oi, r, s] = acc
    return out


@pytest.mark.parametrize("stride", [1, 2])
def test_conv_matches_nested_loop_oracle(rng, stride):
    x = rng.integers(-3, 4, size=(2, 3, 4, 4)).astype(np.float64)
    w = rng.integers(-2, 3, size=(2, 3, 3, 3)).astype(np.float64)
    b = np.array([0.5, -1.0])
    out = apply("conv2d", [Tensor(x), Tensor(w), Tensor(b)], stride=stride).data
    # small integers make every partial sum exact
    np.testing.assert_array_equal(out, _conv_oracle(x, w, b, stride))


def test_conv_channel_mismatch():
    with pytest.raises(ShapeMismatch):
        Conv2dLayer(2, 3)(Tensor(np.ones((1, 3, 4, 4), dtype=np.float32)))


# -- gradient checks (float64) ------------------------------------------------------

def _project(rng, shape):
    return Tensor(rng.normal(size=shape))


@pytest.mark.parametrize("wrt", ["x", "kernels", "bias"])
def test_conv_gradients(wrt):
    for trial in range(20):
        rng = np.random.default_rng(trial)
        x = rng.normal(size=(2, 3, 4, 4))
        w = rng.normal(size=(4, 3, 3, 3))
        b = rng.normal(size=4)
        proj = _project(rng, (2, 4, 4, 4))
        args = {"x": x, "kernels": w, "bias": b}

        def f(t):
            vals = [Tensor(args[k]) if k != wrt else t for k in ("x", "kernels", "bias")]
            return (apply("conv2d", vals) * proj).sum()

        assert_grad_matches(f, Tensor(args[wrt]))


def test_dense_gradients():
    for trial in range(20):
        rng = np.random.default_rng(trial)
        layer = Dense(4, 3, rng=trial).astype(np.float64)
        x = rng.normal(size=(5, 4))
        proj = _project(rng, (5, 3))
        assert_grad_matches(lambda t: (layer(t) * proj).sum(), Tensor(x))

        def f_w(t):
            return ((Tensor(x) @ t + layer.bias.detach()) * proj).sum()

        assert_grad_matches(f_w, Tensor(layer.weight.data))


@pytest.mark.parametrize("method", ["zca", "cholesky"])
def test_batch_whitening_gradients_through_decomposition(method):
    for trial in range(20):
        rng = np.random.default_rng(trial)
        x = _well_conditioned_batch(rng, 10, 4)
        proj = _project(rng, (10, 4))

        def f(t):
            return (apply("batch_whiten", [t], eps=1e-5, method=method) * proj).sum()

        assert_grad_matches(f, Tensor(x))


def test_batch_whitening_gradient_on_repeated_eigenvalues(rng):
    # covariance exactly proportional to the identity: fully degenerate spectrum
    base = np.array([[1, 1], [1, -1], [-1, 1], [-1, -1]], dtype=np.float64)
    proj = _project(rng, (4, 2))

    def f(t):
        return (apply("batch_whiten", [t], eps=1e-5) * proj).sum()

    assert_grad_matches(f, Tensor(base))


def test_batch_whitening_layer_gamma_beta_gradients(rng):
    x = _well_conditioned_batch(rng, 10, 4)
    proj = _project(rng, (10, 4))
    layer = BatchWhitening(4).astype(np.float64)

    def f_gamma(t):
        layer.gamma.data = t.data
        return (layer(Tensor(x), "batch") * proj).sum()

    out = layer(Tensor(x), "batch")
    (out * proj).sum().backward()
    from mmfl.autograd import finite_difference_grad, relative_error
    g = layer.gamma.grad.copy()
    num = finite_difference_grad(f_gamma, Tensor(np.ones(4)), h=1e-6)
    assert relative_error(g, num).max() < 1e-4
    np.testing.assert_allclose(layer.beta.grad, proj.data.sum(axis=0), rtol=1e-12)


def test_batch_norm_gradients():
    for trial in range(20):
        rng = np.random.default_rng(trial)
        x = rng.normal(size=(6, 3)) * 2 + 1
        proj = _project(rng, (6, 3))
        assert_grad_matches(lambda t: (apply("batch_norm", [t]) * proj).sum(), Tensor(x))


def test_batch_norm_layer_modes(rng):
    layer = BatchNorm(3).astype(np.float64)
    x = rng.normal(size=(50, 3)) * 3 + 2
    out = layer(Tensor(x), "train").data
    np.testing.assert_allclose(out.mean(axis=0), 0, atol=1e-12)
    np.testing.assert_allclose(out.var(axis=0), 1, atol=1e-5)
    assert not np.allclose(layer.running_mean, 0)


# -- Adam -------------------------------------------------------------------------

def test_adam_zero_gradient_leaves_params():
    p = {"w": Tensor(np.array([1.0, -2.0], dtype=np.float32), requires_grad=True)}
    before = p["w"].data.copy()
    opt = Adam(p)
    adam_step(opt, p, {"w": np.zeros(2, dtype=np.float32)})
    np.testing.assert_array_equal(p["w"].data, before)


def test_adam_defaults():
    opt = Adam({})
    assert opt.lr == 0.001 and opt.beta1 == 0.9


def test_adam_first_step_moves_by_lr():
    p = {"w": Tensor(np.array([0.5]), requires_grad=True)}
    opt = Adam(p, lr=1e-3)
    adam_step(opt, p, {"w": np.array([1.0])})
    # m_hat = v_hat = 1 after bias correction
    assert p["w"].data[0] == pytest.approx(0.5 - 1e-3 / (1 + 1e-8), abs=1e-15)


def test_adam_is_deterministic(rng):
    g = [rng.normal(size=3) for _ in range(5)]
    results = []
    for _ in range(2):
        p = {"w": Tensor(np.zeros(3), requires_grad=True)}
        opt = Adam(p)
        for gi in g:
            opt.step({"w": gi})
        results.append(p["w"].data.tobytes())
    assert results[0] == results[1]


def test_adam_missing_gradient():
    p = {"w": Tensor(np.zeros(2), requires_grad=True)}
    with pytest.raises(MissingGradient):
        Adam(p).step({})
