import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from spinodal_kbnn.nn import (
    Concat,
    Conv2D,
    Dense,
    Flatten,
    LRSchedule,
    MaxPool2D,
    Network,
    OptimizerState,
    ShapeError,
    Tensor,
    TrainConfig,
    adam_step,
    backward,
    count_variables,
    fit_normalization,
    fit_regressor,
    forward,
    grad,
    input_gradient,
    load_network,
    lr_at,
    parameter_gradients,
    save_network,
)
from spinodal_kbnn.nn import autodiff as ad


def _dense(n_in, hidden, act="softplus", seed=0, out=1):
    return Network([Dense(h, act) for h in hidden] + [Dense(out)], (n_in,), seed=seed)


def _fd_param_check(net, loss, rng, probes=20, h=1e-6):
    names = net.trainable_names()
    g = dict(zip(names, grad(loss(), [net.params[n] for n in names])))
    errs = []
    for _ in range(probes):
        name = names[rng.integers(len(names))]
        p = net.params[name].data
        j = rng.integers(p.size)
        old = p.flat[j]
        p.flat[j] = old + h
        lp = float(loss().data)
        p.flat[j] = old - h
        lm = float(loss().data)
        p.flat[j] = old
        fd = (lp - lm) / (2 * h)
        errs.append(abs(fd - g[name].data.flat[j]) / max(abs(fd), 1e-7))
    return max(errs)


# -- forward / structure


def test_identity_dense():
    net = Network([Dense(1)], (1,))
    net.params["0.kernel"] = Tensor(np.ones((1, 1)), True)
    x = np.linspace(-3, 3, 7)[:, None]
    assert np.array_equal(forward(net, x), x)


def test_softplus_values():
    assert float(ad.softplus(Tensor(0.0)).data) == pytest.approx(0.6931472, abs=1e-7)
    assert abs(float(ad.softplus(Tensor(50.0)).data) - 50.0) < 1e-9
    assert np.isfinite(ad.softplus(Tensor(np.array([-800.0, 800.0]))).data).all()


def test_conv_ones_kernel():
    net = Network([Conv2D(1, 3, 1, 1, "linear")], (5, 5, 1))
    net.params["0.kernel"] = Tensor(np.ones((9, 1)), True)
    out = net.predict(np.ones((1, 5, 5, 1)))[0, :, :, 0]
    assert np.all(out[1:-1, 1:-1] == 9)
    assert out[0, 0] == out[0, -1] == out[-1, 0] == out[-1, -1] == 4


def test_count_variables():
    assert count_variables(_dense(5, [76])) == 533
    assert count_variables(_dense(5, [46] * 6)) == 11133
    assert count_variables(Network([Dense(1)], (1,))) == 2


def test_shape_errors():
    with pytest.raises(ShapeError):
        Network([Conv2D(2, 9, 1, 0)], (5, 5, 1))
    with pytest.raises(ShapeError):
        Network([Dense(3), Concat(), Dense(1)], (2,))
    net = _dense(3, [4])
    with pytest.raises(ShapeError):
        net.forward(np.ones((2, 5)))


def test_max_pool_matches_brute_force():
    rng = np.random.default_rng(1)
    for H, W, C, k, s, p in [(5, 5, 2, 2, 1, 1), (7, 6, 3, 3, 2, 1), (4, 4, 1, 2, 2, 0)]:
        x = rng.integers(0, 3, (2, H, W, C)).astype(float)  # many ties
        layer = MaxPool2D(k, s, p)
        ho, wo, _ = layer.out_shape((H, W, C))
        xt = Tensor(x, True)
        y = layer.forward(xt, {})
        g = grad(y.sum(), xt).data
        ref = np.zeros((2, ho, wo, C))
        gref = np.zeros_like(x)
        for b in range(2):
            for i in range(ho):
                for j in range(wo):
                    for c in range(C):
                        best, arg = -np.inf, None
                        for di in range(k):
                            for dj in range(k):
                                r, q = i * s - p + di, j * s - p + dj
                                if 0 <= r < H and 0 <= q < W and x[b, r, q, c] > best:
                                    best, arg = x[b, r, q, c], (r, q)
                        ref[b, i, j, c] = best
                        gref[b, arg[0], arg[1], c] += 1
        assert np.array_equal(y.data, ref)
        assert np.array_equal(g, gref)


# -- gradients


def test_linear_mse_gradient_closed_form():
    rng = np.random.default_rng(0)
    X, y = rng.standard_normal((12, 3)), rng.standard_normal(12)
    net = Network([Dense(1)], (3,))
    w = net.params["0.kernel"].data[:, 0]
    loss = ad.square(net.forward(X) - y[:, None]).mean()
    g = parameter_gradients(net, loss)
    assert np.allclose(g["0.kernel"].data[:, 0], 2 / 12 * X.T @ (X @ w - y), rtol=1e-12, atol=1e-14)


def test_zero_loss_gradient_gives_zero():
    net = _dense(4, [5])
    g = backward(net, np.ones((3, 4)), np.zeros((3, 1)))
    assert all(np.all(v == 0) for v in g.values())


def test_parameter_gradients_fd():
    rng = np.random.default_rng(3)
    net = _dense(4, [6, 5], seed=2)
    X, y = rng.standard_normal((10, 4)), rng.standard_normal((10, 1))
    assert _fd_param_check(net, lambda: ad.square(net.forward(X) - y).mean(), rng) <= 1e-6


def test_conv_parameter_gradients_fd():
    rng = np.random.default_rng(5)
    layers = [Conv2D(2, 3, 2, 1, "softplus"), MaxPool2D(2, 1, 1), Flatten(), Dense(3, "softplus"), Dense(1)]
    net = Network(layers, (7, 7, 1), seed=1)
    X, y = rng.standard_normal((3, 7, 7, 1)), rng.standard_normal((3, 1))
    assert _fd_param_check(net, lambda: ad.square(net.forward(X) - y).mean(), rng) <= 1e-6


def test_input_gradient_zero_when_ignored():
    net = _dense(3, [4])
    net.params["0.kernel"].data[:] = 0.0
    assert np.all(input_gradient(net, np.ones((2, 3))) == 0)


def test_gradient_of_quadratic_energy():
    k = 3.0
    E = Tensor(np.array([[0.2], [-0.5]]), True)
    out = ad.square(E) * (0.5 * k)
    assert np.allclose(grad(out.sum(), E).data, k * E.data)


def test_input_gradient_fd():
    rng = np.random.default_rng(7)
    net = _dense(3, [8, 8], seed=4)
    x = rng.standard_normal((5, 3))
    g = input_gradient(net, x)
    for _ in range(20):
        i, j = rng.integers(5), rng.integers(3)
        xp, xm = x.copy(), x.copy()
        xp[i, j] += 1e-6
        xm[i, j] -= 1e-6
        fd = (net.predict(xp)[i, 0] - net.predict(xm)[i, 0]) / 2e-6
        assert abs(fd - g[i, j]) <= 1e-6 * max(abs(fd), 1e-7)


def test_double_backprop_fd():
    rng = np.random.default_rng(0)
    layers = [Conv2D(2, 3, 2, 1, "relu"), MaxPool2D(2, 1, 1), Flatten(), Dense(4, "relu"), Concat()]
    layers += [Dense(5, "softplus"), Dense(1)]
    net = Network(layers, (7, 7, 1), aux_dim=3, seed=1)
    X, E, T = rng.standard_normal((4, 7, 7, 1)), rng.standard_normal((4, 3)), rng.standard_normal((4, 3))

    def loss():
        Et = Tensor(E, True)
        out = net.forward(X, Et)
        gE = grad(out.sum(), Et, create_graph=True)
        return ad.square(out).mean() + ad.square(gE - T).mean()

    assert _fd_param_check(net, loss, rng, probes=20) <= 1e-5


def test_double_backprop_quadratic_toy():
    # z = w * x^2 / 2 -> dz/dx = w x; loss = (w x - t)^2 -> dL/dw = 2 (w x - t) x
    w = Tensor(np.array(1.7), True)
    x = Tensor(np.array(0.6), True)
    z = w * ad.square(x) * 0.5
    dzdx = grad(z, x, create_graph=True)
    loss = ad.square(dzdx - 0.25)
    (gw,) = grad(loss, [w])
    assert float(gw.data) == pytest.approx(2 * (1.7 * 0.6 - 0.25) * 0.6, rel=1e-14)


# -- optimization


def test_lr_schedule():
    s = LRSchedule(1e-3, 0.7, 100)
    assert lr_at(s, 0) == 0.001
    assert lr_at(s, 99) == 0.001
    assert lr_at(s, 250) == pytest.approx(4.9e-4, rel=1e-12)


def test_adam_zero_gradient():
    st0 = OptimizerState()
    p = {"w": np.array([1.0, -2.0])}
    assert np.array_equal(adam_step(st0, p, {"w": np.zeros(2)}, 1e-3)["w"], p["w"])


def test_adam_first_and_second_step():
    g = np.array([0.3, -2.0, 5e-3])
    p = np.array([1.0, 1.0, 1.0])
    s = OptimizerState()
    p1 = adam_step(s, {"w": p}, {"w": g}, 1e-3)["w"]
    assert np.allclose(p - p1, 1e-3 * g / (np.sqrt(g**2) + 1e-8), rtol=0, atol=1e-6 * 1e-3)
    p2 = adam_step(s, {"w": p1}, {"w": g}, 1e-3)["w"]
    m = 0.9 * (0.1 * g) + 0.1 * g
    v = 0.999 * (0.001 * g**2) + 0.001 * g**2
    expect = p1 - 1e-3 * (m / (1 - 0.9**2)) / (np.sqrt(v / (1 - 0.999**2)) + 1e-8)
    assert np.allclose(p2, expect, rtol=1e-14, atol=0)


def test_normalization():
    rng = np.random.default_rng(0)
    x = np.column_stack([rng.normal(5, 2, 4000), np.full(4000, 3.0)])
    s = fit_normalization(x)
    z = s.apply(x)
    assert abs(z[:, 0].mean()) < 3 / np.sqrt(4000) and abs(z[:, 0].std() - 1) < 0.05
    assert np.all(z[:, 1] == 0) and s.std[1] == 1.0
    assert np.abs(s.invert(s.apply(x)) - x).max() < 1e-12


@settings(max_examples=20, deadline=None)
@given(st.lists(st.floats(-1e3, 1e3), min_size=2, max_size=30))
def test_normalization_round_trip(values):
    x = np.asarray(values)[:, None]
    s = fit_normalization(x)
    assert np.allclose(s.invert(s.apply(x)), x, rtol=1e-12, atol=1e-12 * max(1.0, np.abs(x).max()))


def test_constant_target_is_learnable():
    x = np.tile([[0.1, 0.2, 0.3]], (8, 1))
    y = np.full(8, 2.5)
    net = _dense(3, [4])
    net.input_scaling = fit_normalization(x)
    net.label_scaling = fit_normalization(y[:, None])
    hist = fit_regressor(net, x, y, TrainConfig(epochs=200, lr0=1e-2))
    assert hist["train_loss"][-1] < 1e-6
    assert np.allclose(net.predict(x), 2.5, atol=1e-6)


def test_training_reduces_loss_and_is_deterministic():
    rng = np.random.default_rng(0)
    x = rng.standard_normal((64, 2))
    y = np.sin(x[:, 0]) + x[:, 1] ** 2

    def run():
        net = _dense(2, [16], seed=3)
        net.input_scaling = fit_normalization(x)
        net.label_scaling = fit_normalization(y[:, None])
        h = fit_regressor(net, x, y, TrainConfig(epochs=150, lr0=1e-2, batch_size=16, seed=9))
        return net, h

    a, ha = run()
    b, hb = run()
    assert ha["train_loss"][-1] < 0.2 * ha["train_loss"][0]
    assert a.param_hash() == b.param_hash()


def test_frozen_layers_are_untouched():
    rng = np.random.default_rng(0)
    x, y = rng.standard_normal((16, 3)), rng.standard_normal(16)
    net = _dense(3, [4, 4])
    net.trainable = [False, True, True]
    before = net.params["0.kernel"].data.copy()
    fit_regressor(net, x, y, TrainConfig(epochs=20))
    assert np.array_equal(net.params["0.kernel"].data, before)


def test_checkpoint_round_trip(tmp_path):
    net = Network([Conv2D(2, 3, 1, 1, "relu"), Flatten(), Dense(4, "relu"), Concat(), Dense(1)], (5, 5, 1), aux_dim=3)
    net.input_scaling = fit_normalization(np.arange(10.0), per_feature=False, center=False)
    path = save_network(net, tmp_path, "m")
    back = load_network(path)
    assert back.param_hash() == net.param_hash()
    x, a = np.random.default_rng(0).standard_normal((2, 5, 5, 1)), np.ones((2, 3))
    assert np.array_equal(back.predict(x, a), net.predict(x, a))
    raw = (tmp_path / "m.0.kernel.bin").read_bytes()
    assert np.array_equal(np.frombuffer(raw, "<f8").reshape(9, 2), net.params["0.kernel"].data)
