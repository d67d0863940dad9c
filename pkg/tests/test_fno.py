import numpy as np
import pytest

from nqprop import fno
from nqprop.integrators import NumericalError, TimeGrid
from nqprop.lindblad import DensityState, DimensionError


def naive_dft(u):
    g = u.shape[0]
    k = np.arange(g)
    return np.exp(-2j * np.pi * np.outer(k, k) / g) @ u


def naive_idft(m):
    g = m.shape[0]
    k = np.arange(g)
    return np.exp(2j * np.pi * np.outer(k, k) / g) @ m / g


def tiny_config(**kw):
    base = dict(n_fourier_layers=2, modes_kmax=8, hidden_channels=4, projection_hidden=6, state_dim=4, grid_points=8)
    base.update(kw)
    return fno.FnoConfig(**base)


def test_config_clipping_and_validation():
    assert fno.FnoConfig().modes == 26
    assert tiny_config().modes == 5
    assert fno.FnoConfig(grid_points=101).modes == 32
    with pytest.raises(ValueError):
        fno.FnoConfig(hidden_channels=0)


def test_init_params():
    cfg = tiny_config(hidden_channels=8)
    a, b = fno.init_params(cfg, 3), fno.init_params(cfg, 3)
    assert a.digest() == b.digest()
    assert a.digest() != fno.init_params(cfg, 4).digest()
    assert a["fourier.0.w2"].shape == (8, 8) and a["fourier.1.w2"].shape == (8, 8)
    assert a["fourier.0.w1"].shape == (5, 8, 8)
    for v in a.values():
        assert np.all(np.isfinite(v)) and np.max(np.abs(v)) < 1


def test_embed_input():
    grid = TimeGrid(30.0, 50)
    s = DensityState.site(2, 1)
    x = fno.embed_input(s, grid)
    assert x.shape == (51, 5)
    assert x[0, -1] == 0 and x[-1, -1] == 1 + 0j
    assert np.all(x[:, :4] == s.vec[None, :])


def test_dft_roundtrip_and_oracles():
    rng = np.random.default_rng(0)
    u = rng.standard_normal((51, 6)) + 1j * rng.standard_normal((51, 6))
    m = fno.dft_time(u)
    assert np.linalg.norm(fno.idft_time(m) - u) <= 1e-12 * np.linalg.norm(u)
    assert np.linalg.norm(m - naive_dft(u)) <= 1e-12 * np.linalg.norm(m)
    # Parseval
    assert abs(np.sum(np.abs(u) ** 2) - np.sum(np.abs(m) ** 2) / 51) <= 1e-10 * np.sum(np.abs(u) ** 2)
    const = fno.dft_time(np.full((51, 1), 2.0 + 1j))
    assert const[0, 0] == pytest.approx(51 * (2 + 1j))
    assert np.max(np.abs(const[1:])) < 1e-12
    wave = np.exp(2j * np.pi * 3 * np.arange(51) / 51)[:, None]
    assert np.max(np.abs(fno.dft_time(wave) - naive_dft(wave))) <= 1e-12 * 51


def _layer(c, k, rng, zero=False):
    shape1 = (k, c, c)
    if zero:
        return np.zeros(shape1, complex), np.zeros((c, c), complex), np.zeros(c, complex)
    w1 = rng.standard_normal(shape1) + 1j * rng.standard_normal(shape1)
    w2 = rng.standard_normal((c, c)) + 1j * rng.standard_normal((c, c))
    return w1, w2, rng.standard_normal(c) + 1j * rng.standard_normal(c)


def test_fourier_layer_identity_and_bias():
    rng = np.random.default_rng(1)
    w1, _, _ = _layer(3, 4, rng, zero=True)
    u = rng.uniform(0.1, 1, (10, 3)) + 1j * rng.uniform(0.1, 1, (10, 3))
    out = fno.fourier_layer((w1, np.eye(3, dtype=complex), np.zeros(3, complex)), u)
    assert np.array_equal(out, u)
    b = np.array([1 - 1j, -2 + 3j, 0.5 + 0.5j])
    out = fno.fourier_layer((w1, np.eye(3, dtype=complex), b), np.zeros((10, 3), complex))
    assert np.array_equal(out, np.broadcast_to(fno.relu(b), (10, 3)))


def test_fourier_layer_single_mode_matches_naive():
    rng = np.random.default_rng(2)
    g, c, k = 12, 3, 4
    w1, _, _ = _layer(c, k, rng)
    amp = rng.standard_normal(c) + 1j * rng.standard_normal(c)
    u = np.exp(2j * np.pi * 2 * np.arange(g) / g)[:, None] * amp[None, :]
    out = fno.fourier_layer((w1, np.zeros((c, c), complex), np.zeros(c, complex)), u)
    modes = naive_dft(u)
    kept = np.zeros_like(modes)
    for kk in range(k):
        kept[kk] = modes[kk] @ w1[kk]
    np.testing.assert_allclose(out, fno.relu(naive_idft(kept)), atol=1e-12)


def test_mode_truncation_is_exact():
    rng = np.random.default_rng(3)
    w1, _, _ = _layer(3, 4, rng)
    modes = rng.standard_normal((10, 3)) + 1j * rng.standard_normal((10, 3))
    ref = fno.spectral_conv(modes, w1)
    perturbed = modes.copy()
    perturbed[4:] += 100.0 * (rng.standard_normal((6, 3)) + 1j)
    assert np.array_equal(fno.spectral_conv(perturbed, w1), ref)
    perturbed[3] += 1.0
    assert not np.array_equal(fno.spectral_conv(perturbed, w1), ref)


def test_fourier_layer_shape_error():
    rng = np.random.default_rng(0)
    with pytest.raises(DimensionError):
        fno.fourier_layer(_layer(3, 2, rng), np.zeros((5, 4), complex))


def test_forward_shape_and_determinism():
    cfg = fno.FnoConfig(2, 32, 8, 16, 49, 51)
    p = fno.init_params(cfg, 0)
    grid = TimeGrid(30.0, 50)
    s = DensityState.site(7, 1)
    a, b = fno.fno_forward(p, s, grid), fno.fno_forward(p, s, grid)
    assert a.states.shape == (51, 49) and a.dim == 7
    assert np.array_equal(a.states, b.states)
    batch = fno.forward_batch(p, np.stack([s.vec, s.vec]), grid)
    assert batch.shape == (2, 51, 49)
    with pytest.raises(DimensionError):
        fno.fno_forward(p, s, TimeGrid(30.0, 40))
    p["fourier.0.w2"][0, 0] = np.nan
    with pytest.raises(NumericalError, match="layer 0"):
        fno.fno_forward(p, s, grid)


def _data_loss_fn(ref):
    def f(y):
        d = y - ref
        return 0.5 * np.sum(np.abs(d) ** 2), d

    return f


def test_zero_model_gradient_vanishes():
    cfg = tiny_config()
    p = fno.init_params(cfg, 0).zeros_like()
    grid = TimeGrid(4.2, 7)
    v0 = np.ones((2, 4), complex)
    grads, loss = fno.fno_gradient(p, v0, grid, _data_loss_fn(np.zeros((2, 8, 4))))
    assert loss == 0
    assert grads["fourier.0.w1"].shape[0] == cfg.modes
    for g in grads.values():
        assert not np.any(g)


def finite_difference_check(params, v0, grid, loss_fn, h=1e-5):
    """Worst relative FD mismatch per tensor.

    Entries far below the gradient scale sit under the central-difference
    roundoff, so the relative error uses ``1e-6 * max|grad|`` as a floor.
    """
    grads, _ = fno.fno_gradient(params, v0, grid, loss_fn)
    floor = 1e-6 * max(np.max(np.abs(np.concatenate([g.real.ravel(), g.imag.ravel()]))) for g in grads.values())
    worst = {}
    for name, tensor in params.items():
        for idx in np.ndindex(tensor.shape):
            for unit in (1.0, 1j):
                q = params.copy()
                q[name][idx] += h * unit
                up = fno.fno_gradient(q, v0, grid, loss_fn)[1]
                q[name][idx] -= 2 * h * unit
                down = fno.fno_gradient(q, v0, grid, loss_fn)[1]
                fd = (up - down) / (2 * h)
                an = grads[name][idx].real if unit == 1.0 else grads[name][idx].imag
                err = abs(fd - an) / max(abs(fd), abs(an), floor)
                worst[name] = max(worst.get(name, 0.0), err)
    return worst


def test_gradient_finite_differences():
    cfg = tiny_config()
    p = fno.init_params(cfg, 1)
    grid = TimeGrid(4.2, 7)
    rng = np.random.default_rng(5)
    v0 = rng.standard_normal((2, 4)) + 1j * rng.standard_normal((2, 4))
    ref = rng.standard_normal((2, 8, 4)) + 1j * rng.standard_normal((2, 8, 4))
    worst = finite_difference_check(p, v0, grid, _data_loss_fn(ref))
    assert set(worst) == set(p)
    assert max(worst.values()) <= 1e-4, worst


def test_gradient_deterministic():
    cfg = tiny_config()
    p = fno.init_params(cfg, 1)
    grid = TimeGrid(4.2, 7)
    v0 = np.ones((3, 4), complex)
    f = _data_loss_fn(np.zeros((3, 8, 4)))
    a, _ = fno.fno_gradient(p, v0, grid, f)
    b, _ = fno.fno_gradient(p, v0, grid, f)
    assert all(np.array_equal(a[k], b[k]) for k in a)


def test_checkpoint_roundtrip(tmp_path):
    cfg = tiny_config()
    p = fno.init_params(cfg, 9)
    path = tmp_path / "m.nqp"
    fno.save_checkpoint(p, path, metadata={"note": "x"}, extra={"aux": np.arange(3) * 1j})
    q, extra, header = fno.load_checkpoint(path, with_extra=True)
    assert q.config == cfg and list(q) == list(p)
    assert all(np.array_equal(p[k], q[k]) for k in p)
    assert np.array_equal(extra["aux"], np.arange(3) * 1j)
    assert header["format"] == "NQP1" and header["metadata"]["note"] == "x"
    assert path.read_bytes()[:4] == b"NQP1"
    parts = {(e["name"], e["part"]) for e in header["arrays"]}
    assert ("p_in.w0", "re") in parts and ("p_in.w0", "im") in parts
