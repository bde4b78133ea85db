import numpy as np

from npvol import nets


def test_param_count():
    assert nets.mlp_param_count((4, 8, 3)) == 8 * 5 + 3 * 9


def test_pack_unpack_roundtrip():
    gen = np.random.default_rng(0)
    widths = (3, 5, 2)
    theta = gen.normal(size=nets.mlp_param_count(widths))
    layers = nets.unpack_mlp(theta, widths)
    assert np.array_equal(nets.pack_mlp(layers), theta)


def test_init_bounds():
    widths = (10, 20, 5)
    theta = nets.init_mlp(widths, seed=1)
    layers = nets.unpack_mlp(theta, widths)
    for j, (a, b) in enumerate(layers):
        n_in, n_out = widths[j], widths[j + 1]
        bound = np.sqrt(6.0 / (n_in + n_out))
        assert np.max(np.abs(a)) <= bound
        assert np.all(b == 0.0)


def test_relu_applied_to_hidden_only():
    widths = (2, 3, 2)
    layers = nets.unpack_mlp(np.zeros(nets.mlp_param_count(widths)), widths)
    layers[0][1][...] = [-1.0, 2.0, -3.0]
    layers[1][0][...] = np.array([[1.0, 1.0, 1.0], [0.0, 0.0, 0.0]])
    layers[1][1][...] = [-5.0, -5.0]
    out = nets.mlp_forward(layers, np.zeros((1, 2)))
    # hidden relu keeps only the +2, final layer is affine so -3 passes
    assert np.allclose(out, [[-3.0, -5.0]])


def test_gradient_matches_finite_differences():
    gen = np.random.default_rng(2)
    widths = (3, 6, 4)
    theta = nets.init_mlp(widths, seed=3)
    x = gen.normal(size=(5, 3))
    target = gen.normal(size=(5, 4))

    def loss(t):
        out = nets.mlp_forward(nets.unpack_mlp(t, widths), x)
        return float(np.sum((out - target) ** 2))

    layers = nets.unpack_mlp(theta, widths)
    out, cache = nets.mlp_forward(layers, x, want_cache=True)
    grad, grad_x = nets.mlp_backward(layers, cache, 2.0 * (out - target))

    h = 1e-6
    for i in np.linspace(0, theta.size - 1, 20, dtype=int):
        tp, tm = theta.copy(), theta.copy()
        tp[i] += h
        tm[i] -= h
        fd = (loss(tp) - loss(tm)) / (2 * h)
        assert abs(grad[i] - fd) < 1e-5 * max(1.0, abs(fd))

    # input gradient
    for i in range(3):
        xp, xm = x.copy(), x.copy()
        xp[0, i] += h
        xm[0, i] -= h
        lp = float(np.sum((nets.mlp_forward(layers, xp) - target) ** 2))
        lm = float(np.sum((nets.mlp_forward(layers, xm) - target) ** 2))
        fd = (lp - lm) / (2 * h)
        assert abs(grad_x[0, i] - fd) < 1e-5 * max(1.0, abs(fd))
