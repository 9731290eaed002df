import numpy as np
import pytest

from ecslab import diffengine as de

from oracles import directional_fd, fd_central


def test_dual_product_rule():
    a = de.DualScalar(3.0, 2.0)
    b = de.DualScalar(5.0, -1.0)
    prod = a * b
    assert prod.value == 15.0
    assert prod.tangent == 3.0 * (-1.0) + 5.0 * 2.0


def test_dual_quotient_and_chain():
    x = de.DualScalar(2.0, 1.0)
    y = (x * x + 1.0) / x  # f = x + 1/x, f' = 1 - 1/x^2
    assert y.value == pytest.approx(2.5)
    assert y.tangent == pytest.approx(1.0 - 0.25)


def test_dual_elementwise_functions_match_fd():
    rng = np.random.default_rng(0)
    for fn, name in [(de.tanh, "tanh"), (de.exp, "exp"), (de.softplus, "softplus"),
                     (de.sqrt, "sqrt"), (de.log, "log")]:
        x0 = float(rng.uniform(0.2, 1.8))
        dual = fn(de.DualScalar(x0, 1.0))
        fd = fd_central(lambda v: float(de.value_of(fn(np.asarray(v)))), x0)
        assert dual.tangent == pytest.approx(fd, rel=1e-7), name


def test_forward_mode_linearity():
    # derivative of a*f + b*g equals a*f' + b*g'
    rng = np.random.default_rng(1)
    for _ in range(20):
        a, b = rng.normal(size=2)
        x = de.DualScalar(float(rng.uniform(0.3, 2.0)), 1.0)
        f = de.tanh(x)
        g = de.exp(-1.0 * x)
        combo = a * f + b * g
        assert combo.tangent == pytest.approx(a * f.tangent + b * g.tangent, rel=1e-14)


def test_derive_wrt_state_constant_model():
    out = de.derive_wrt_state(lambda tr, rhor: (1.0, 1.0), 0.8, 2.5)
    assert out["theta"] == 1.0
    for key in ("d_theta_d_tr", "d_theta_d_rhor", "d_phi_d_tr", "d_phi_d_rhor"):
        assert np.all(out[key] == 0.0)


def test_derive_wrt_state_bilinear():
    out = de.derive_wrt_state(lambda tr, rhor: (tr * rhor, tr + rhor), 2.0, 3.0)
    assert out["theta"] == 6.0
    assert out["d_theta_d_tr"] == 3.0
    assert out["d_theta_d_rhor"] == 2.0
    assert out["d_phi_d_tr"] == 1.0


def test_derive_wrt_state_batched():
    tr = np.array([0.7, 0.9, 1.1])
    rhor = np.array([0.5, 1.5, 2.5])
    out = de.derive_wrt_state(lambda a, b: (a * b, b / a), tr, rhor)
    assert np.allclose(out["d_theta_d_tr"], rhor)
    assert np.allclose(out["d_phi_d_rhor"], 1.0 / tr)


def test_grad_params_quadratic():
    params = {"p": np.array([1.0, -2.0, 3.0])}
    grads = de.grad_params(lambda leaves: (leaves["p"] * leaves["p"]).sum() * 0.5, params)
    assert np.allclose(grads["p"], params["p"])


def test_grad_params_constant_loss():
    params = {"a": np.ones((2, 2)), "b": np.zeros(3)}
    grads = de.grad_params(lambda leaves: de.Var(4.2), params)
    assert np.all(grads["a"] == 0.0)
    assert np.all(grads["b"] == 0.0)


def test_grad_params_pretrain_style_toy_matches_fd():
    # two-parameter toy of the |theta-1| + |phi-1| pretraining objective
    states = np.linspace(0.5, 1.5, 7).reshape(-1, 1)
    params = {"w": np.array([[0.3]]), "b": np.array([0.7])}

    def loss(leaves):
        theta = states @ de.transpose(leaves["w"]) + leaves["b"]
        phi = states @ de.transpose(leaves["w"]) - leaves["b"] + 2.0
        return de.absolute(theta - 1.0).mean() + de.absolute(phi - 1.0).mean()

    grads = de.grad_params(loss, params)
    rng = np.random.default_rng(2)
    for _ in range(5):
        direction = {k: rng.normal(size=v.shape) for k, v in params.items()}
        fd = directional_fd(lambda p: float(de.value_of(loss({k: de.Var(v) for k, v in p.items()}))),
                            params, direction)
        analytic = sum(np.sum(grads[k] * direction[k]) for k in params)
        assert analytic == pytest.approx(fd, rel=1e-6)


def test_nested_differentiation_matches_fd_of_fd():
    # d/dparam of dtheta/dtr for theta = w1 * tanh(w2 * tr * rhor)
    tr0, rhor0 = 0.8, 1.3
    params = {"w1": np.array(1.2), "w2": np.array(0.5)}

    def dtheta_dtr(p):
        def forward(tr, rhor):
            theta = p["w1"] * de.tanh(p["w2"] * tr * rhor)
            return theta, theta
        return de.derive_wrt_state(forward, tr0, rhor0)["d_theta_d_tr"]

    def loss(leaves):
        def forward(tr, rhor):
            theta = leaves["w1"] * de.tanh(leaves["w2"] * tr * rhor)
            return theta, theta
        return de.derive_wrt_state(forward, tr0, rhor0)["d_theta_d_tr"]

    grads = de.grad_params(loss, params)
    for key in params:
        def f(v):
            trial = {k: params[k].copy() for k in params}
            trial[key] = np.array(v)
            return float(de.value_of(dtheta_dtr(trial)))
        fd = fd_central(f, float(params[key]), h=1e-5)
        assert float(grads[key]) == pytest.approx(fd, rel=1e-3)


def test_determinism_bitwise():
    rng = np.random.default_rng(3)
    params = {"w": rng.normal(size=(4, 4)), "b": rng.normal(size=4)}
    x = rng.normal(size=(6, 4))

    def loss(leaves):
        return de.tanh(x @ de.transpose(leaves["w"]) + leaves["b"]).sum()

    g1 = de.grad_params(loss, params)
    g2 = de.grad_params(loss, params)
    for key in params:
        assert np.array_equal(g1[key], g2[key])


def test_non_smooth_primitives_rejected():
    with pytest.raises(de.NonSmoothPrimitive):
        de.DualScalar(3.0, 1.0) // 2
    with pytest.raises(de.NonSmoothPrimitive):
        de.Var(3.0) % 2
    with pytest.raises(de.NonSmoothPrimitive):
        de.Var(np.ones(3)) ** "x"


def test_var_ops_match_fd():
    rng = np.random.default_rng(4)
    a0 = rng.normal(size=(3, 4))
    b0 = rng.normal(size=(4, 2))
    c0 = rng.normal(size=(1, 2))

    def loss(leaves):
        y = leaves["a"] @ leaves["b"] + leaves["c"]
        z = de.concat([de.tanh(y), de.softplus(y)], axis=1)
        return (z * z).mean() + de.exp(-(leaves["c"] * leaves["c"])).sum()

    params = {"a": a0, "b": b0, "c": c0}
    grads = de.grad_params(loss, params)
    for _ in range(4):
        direction = {k: rng.normal(size=v.shape) for k, v in params.items()}
        fd = directional_fd(lambda p: float(de.value_of(loss({k: de.Var(v) for k, v in p.items()}))),
                            params, direction, eps=1e-6)
        analytic = sum(np.sum(grads[k] * direction[k]) for k in params)
        assert analytic == pytest.approx(fd, rel=1e-5)


def test_var_getitem_scatter_gather():
    x0 = np.arange(12.0).reshape(3, 4)

    def loss(leaves):
        x = leaves["x"]
        # basic slice, int row, and fancy-index gather all at once
        return x[:, 1:3].sum() + x[0].sum() + x[np.array([2, 2])].sum()

    grads = de.grad_params(loss, {"x": x0})
    expected = np.zeros_like(x0)
    expected[:, 1:3] += 1.0
    expected[0] += 1.0
    expected[2] += 2.0
    assert np.array_equal(grads["x"], expected)
