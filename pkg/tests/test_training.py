import numpy as np
import pytest

from nqprop import fno, training
from nqprop import integrators as it
from nqprop import lindblad as lb


@pytest.fixture(scope="module")
def dephasing_system():
    return lb.System(lb.HermitianOperator(np.diag([0.0, 0.0])), (35.0, 35.0), "pd2")


@pytest.fixture(scope="module")
def small_dataset(dephasing_system):
    return it.generate_dataset(dephasing_system, it.TimeGrid(30.0, 50), 6, 4, seed=1)


def small_model():
    return fno.FnoConfig(n_fourier_layers=1, modes_kmax=4, hidden_channels=4, projection_hidden=8, state_dim=4, grid_points=51)


def test_data_loss_values(small_dataset):
    ref = small_dataset.train
    assert training.data_loss_from_output(ref, ref) == 0.0
    assert training.data_loss_from_output(2 * ref, ref) == pytest.approx(1.0, abs=1e-10)


def test_data_loss_of_model_sample(small_dataset):
    p = fno.init_params(small_model(), 0)
    s0, traj = next(small_dataset.samples())
    y = fno.forward_batch(p, s0.vec[None], traj.grid)
    assert training.data_loss(p, (s0, traj)) == training.data_loss_from_output(y, traj.states[None])


def test_fd_matrix_exact_on_quartics():
    d = training.fd_matrix(9, 0.3)
    t = np.arange(9) * 0.3
    for deg in range(5):
        np.testing.assert_allclose(d @ t**deg, deg * t ** max(deg - 1, 0) * (deg > 0), atol=1e-10)
    with pytest.raises(lb.DomainError):
        training.fd_matrix(4, 0.1)


def test_physics_loss_floor_on_exact_trajectories(fmo_liouvillian, grid):
    for seed in range(4):
        v0 = it.sample_gue_density(7, seed).vec
        y = it.expm_trajectory(fmo_liouvillian, v0, grid)
        r, i, _ = training.physics_loss_terms(y[None], v0[None], fmo_liouvillian.matrix, training.fd_matrix(51, 0.6))
        assert r[0] <= 1e-5
        assert i[0] == 0.0


def test_physics_loss_constant_model(fmo_liouvillian, grid):
    v0 = it.sample_gue_density(7, 3).vec
    y = np.broadcast_to(v0, (51, 49))
    r, i, _ = training.physics_loss_terms(y[None], v0[None], fmo_liouvillian.matrix, training.fd_matrix(51, 0.6))
    assert i[0] == 0.0
    assert r[0] == pytest.approx(1.0, abs=1e-9)
    with pytest.raises(lb.DomainError):
        training.physics_loss_from_output(np.zeros((51, 49)), np.zeros(49), fmo_liouvillian, grid)


def test_physics_loss_model_entry_point(dephasing_system):
    p = fno.init_params(small_model(), 0)
    grid = it.TimeGrid()
    s0 = it.sample_gue_density(2, 0)
    y = fno.forward_batch(p, s0.vec[None], grid)
    expected = training.physics_loss_from_output(y, s0.vec[None], dephasing_system.liouvillian(), grid)
    assert training.physics_loss(p, s0, dephasing_system.liouvillian(), grid) == expected


def test_onthefly_samples():
    a = training.onthefly_sample(10, 7, seed=3, epoch=5)
    assert a.shape == (10, 49)
    for v in a:
        m = v.reshape(7, 7)
        assert np.max(np.abs(m - m.conj().T)) <= 1e-12
        assert abs(np.linalg.norm(m) - 1) <= 1e-12
    assert np.array_equal(a, training.onthefly_sample(10, 7, seed=3, epoch=5))
    assert not np.array_equal(a, training.onthefly_sample(10, 7, seed=3, epoch=6))
    assert training.onthefly_sample(0, 7, 0, 0).shape == (0, 49)


def test_onthefly_disjoint_from_dataset(small_dataset):
    starts = {v.tobytes() for v in small_dataset.train[:, 0]}
    for epoch in range(1, 4):
        assert not starts & {v.tobytes() for v in training.onthefly_sample(20, 2, small_dataset.seed, epoch)}


def test_adam_single_step_matches_formula():
    cfg = fno.FnoConfig(1, 1, 1, 1, 1, 1)
    p = fno.init_params(cfg, 0)
    target = {k: np.full_like(v, 0.3 - 0.2j) for k, v in p.items()}
    start = p.copy()
    grads = p.zeros_like()
    for k in p:
        grads[k] = 2 * (p[k] - target[k])  # gradient of |p - target|^2
    opt = training.Adam(p, lr=0.01)
    opt.step(p, grads)
    b1, b2, eps, lr = 0.9, 0.999, 1e-8, 0.01
    for k in p:
        for part in (np.real, np.imag):
            g = part(grads[k])
            m = (1 - b1) * g / (1 - b1)
            v = (1 - b2) * g**2 / (1 - b2)
            expected = part(start[k]) - lr * m / (np.sqrt(v) + eps)
            np.testing.assert_allclose(part(p[k]), expected, rtol=0, atol=1e-12)
    # second step uses the bias corrections for t = 2
    g2 = {k: 2 * (p[k] - target[k]) for k in p}
    before = p.copy()
    grads2 = p.zeros_like()
    for k in p:
        grads2[k] = g2[k]
    opt.step(p, grads2)
    for k in p:
        g1r, g2r = grads[k].real, g2[k].real
        m = (b1 * (1 - b1) * g1r + (1 - b1) * g2r) / (1 - b1**2)
        v = (b2 * (1 - b2) * g1r**2 + (1 - b2) * g2r**2) / (1 - b2**2)
        np.testing.assert_allclose(p[k].real, before[k].real - lr * m / (np.sqrt(v) + eps), atol=1e-12)


def test_train_zero_epochs(small_dataset, dephasing_system):
    cfg = small_model()
    best, report = training.train(cfg, training.TrainConfig(epochs=0, seed=4), small_dataset, dephasing_system.liouvillian())
    assert best.digest() == fno.init_params(cfg, 4).digest()
    assert report.epochs == [] and report.best_epoch is None


def _tc(**kw):
    base = dict(epochs=20, batch_size=3, lr=3e-3, onthefly_samples=6, seed=2)
    base.update(kw)
    return training.TrainConfig(**base)


def test_train_deterministic_and_progresses(small_dataset, dephasing_system):
    l = dephasing_system.liouvillian()
    a, ra = training.train(small_model(), _tc(), small_dataset, l)
    b, rb = training.train(small_model(), _tc(), small_dataset, l)
    assert a.digest() == b.digest()
    assert [r[1:3] for r in ra.epochs] == [r[1:3] for r in rb.epochs]
    assert len(ra.epochs) == 20 and len(ra.validation_errors) == small_dataset.n_val
    vals = [v for _, v in ra.validation]
    assert min(vals[-2:]) <= min(vals[:2])
    assert all(np.isfinite(r[1]) and np.isfinite(r[2]) for r in ra.epochs)


def test_train_resume_continues(small_dataset, dephasing_system, tmp_path):
    l = dephasing_system.liouvillian()
    full, rfull = training.train(small_model(), _tc(epochs=6), small_dataset, l)
    training.train(small_model(), _tc(epochs=3, checkpoint_every=3), small_dataset, l, checkpoint_dir=tmp_path)
    resumed, rres = training.train(small_model(), _tc(epochs=6), small_dataset, l, resume_from=tmp_path / "state.nqp")
    assert [r[0] for r in rres.epochs] == [1, 2, 3, 4, 5, 6]
    assert [r[1:3] for r in rres.epochs] == [r[1:3] for r in rfull.epochs]
    assert resumed.digest() == full.digest()


def test_train_divergence_reports_epoch(small_dataset, dephasing_system, monkeypatch):
    calls = {"n": 0}
    real = training.batch_gradient

    def flaky(*a, **k):
        calls["n"] += 1
        if calls["n"] > 4:
            raise it.NumericalError("non-finite loss")
        return real(*a, **k)

    monkeypatch.setattr(training, "batch_gradient", flaky)
    with pytest.raises(training.TrainingDiverged) as exc:
        training.train(small_model(), _tc(epochs=5), small_dataset, dephasing_system.liouvillian())
    assert exc.value.epoch == 3


def test_validate(small_dataset, monkeypatch):
    p = fno.init_params(small_model(), 0)
    errs = training.validate(p, small_dataset)
    assert errs.shape == (small_dataset.n_val,) and np.all(errs > 0)
    monkeypatch.setattr(fno, "forward_batch", lambda params, v0, grid: small_dataset.validation[: len(v0)])
    assert np.all(training.validate(p, small_dataset, batch_size=100) == 0)


def test_loss_report_files(tmp_path):
    rep = training.LossReport([(1, 0.5, 0.25, 0.1)], [(1, 0.4)], [0.4], 1)
    rep.write_csv(tmp_path / "l.csv")
    rep.write_json(tmp_path / "l.json")
    lines = (tmp_path / "l.csv").read_text().splitlines()
    assert lines[0] == "epoch,l_data,l_phys,seconds" and lines[1].startswith("1,0.5,0.25,")
    import json

    assert json.loads((tmp_path / "l.json").read_text())["best_epoch"] == 1


def test_train_config_validation():
    with pytest.raises(ValueError):
        training.TrainConfig(lr=0)
    with pytest.raises(ValueError):
        training.TrainConfig(physics_weight=-1)
    assert training.TrainConfig().adam_betas == (0.9, 0.999)
