"""Data and physics-informed losses, Adam, and the training loop."""

from __future__ import annotations

import csv
import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import fno
from .integrators import STREAM_ONTHEFLY, Dataset, NumericalError, TimeGrid, gue_matrix
from .lindblad import DomainError, Liouvillian

log = logging.getLogger(__name__)

EPS = 1e-12
STREAM_SHUFFLE = 3


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 2000
    batch_size: int = 20
    lr: float = 1e-3
    adam_betas: tuple = (0.9, 0.999)
    adam_eps: float = 1e-8
    physics_weight: float = 1.0
    onthefly_samples: int = 400
    seed: int = 0
    checkpoint_every: int = 0
    validate_every: int = 1

    def __post_init__(self):
        object.__setattr__(self, "adam_betas", tuple(float(b) for b in self.adam_betas))
        if self.epochs < 0:
            raise ValueError("epochs must be >= 0")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if not self.lr > 0:
            raise ValueError("lr must be positive")
        if self.physics_weight < 0:
            raise ValueError("physics_weight must be >= 0")
        if self.onthefly_samples < 0:
            raise ValueError("onthefly_samples must be >= 0")


@dataclass
class LossReport:
    epochs: list = field(default_factory=list)  # (epoch, l_data, l_phys, seconds)
    validation: list = field(default_factory=list)  # (epoch, mean validation data loss)
    validation_errors: list = field(default_factory=list)  # per sample, best parameters
    best_epoch: int | None = None

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as f:
            w = csv.writer(f)
            w.writerow(["epoch", "l_data", "l_phys", "seconds"])
            for epoch, ld, lp, sec in self.epochs:
                w.writerow([epoch, f"{ld:.17g}", f"{lp:.17g}", f"{sec:.17g}"])

    def to_dict(self) -> dict:
        return {
            "epochs": [list(r) for r in self.epochs],
            "validation": [list(r) for r in self.validation],
            "validation_errors": list(self.validation_errors),
            "best_epoch": self.best_epoch,
        }

    def write_json(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=1))


# ---------------------------------------------------------------- losses


def _norms(a):
    return np.sqrt(np.sum(a.real**2 + a.imag**2, axis=-1))


def _unit(a, n):
    # gradient of the norm; zero where the norm vanishes
    safe = np.where(n > 0, n, 1.0)
    return np.where((n > 0)[..., None], a / safe[..., None], 0.0)


def data_loss_terms(y: np.ndarray, ref: np.ndarray):
    """Relative error per sample and its output gradient.

    ``y`` and ``ref`` have shape ``(B, G, N^2)``. The per-sample loss is the
    grid mean of ``|y_t - ref_t| / (|ref_t| + EPS)``.
    """
    diff = y - ref
    dn = _norms(diff)
    denom = _norms(ref) + EPS
    g_points = y.shape[1]
    per_sample = np.mean(dn / denom, axis=1)
    grad = _unit(diff, dn) / (denom[..., None] * g_points)
    return per_sample, grad


def data_loss_from_output(y: np.ndarray, ref: np.ndarray) -> float:
    return float(np.mean(data_loss_terms(y, ref)[0]))


def data_loss(params: fno.FnoParams, sample) -> float:
    """Relative data loss of one ``(initial state, Trajectory)`` sample."""
    s0, traj = sample
    y = fno.forward_batch(params, s0.vec[None, :], traj.grid)
    return data_loss_from_output(y, traj.states[None])


def fd_matrix(n_points: int, dt: float) -> np.ndarray:
    """Fourth-order first-derivative stencil (central inside, one-sided at the ends)."""
    if n_points < 5:
        raise DomainError("fourth-order stencil needs at least 5 grid points")
    d = np.zeros((n_points, n_points))
    d[0, :5] = [-25, 48, -36, 16, -3]
    d[1, :5] = [-3, -10, 18, -6, 1]
    for k in range(2, n_points - 2):
        d[k, k - 2 : k + 3] = [1, -8, 0, 8, -1]
    d[-2, -5:] = [-1, 6, -18, 10, 3]
    d[-1, -5:] = [3, -16, 36, -48, 25]
    return d / (12.0 * dt)


def physics_loss_terms(y: np.ndarray, v0: np.ndarray, lmat: np.ndarray, dmat: np.ndarray):
    """Residual and t=0 terms per sample, and the output gradient of their sum.

    Returns ``(residual (B,), identity (B,), grad (B, G, N^2))``.
    """
    g_points = y.shape[1]
    ly = y @ lmat.T
    res = np.einsum("gh,bhn->bgn", dmat, y) - ly
    rn = _norms(res)
    ln = _norms(ly) + EPS
    residual = np.mean(rn / ln, axis=1)
    g_res = _unit(res, rn) / (ln[..., None] * g_points)
    g_ly = -(rn / ln**2)[..., None] * _unit(ly, ln - EPS) / g_points
    grad = np.einsum("gh,bgn->bhn", dmat, g_res) + (g_ly - g_res) @ lmat.conj()

    v0n = _norms(v0)
    if np.any(v0n == 0):
        raise DomainError("initial state has zero norm")
    d0 = y[:, 0] - v0
    d0n = _norms(d0)
    identity = d0n / v0n
    grad[:, 0] += _unit(d0, d0n) / v0n[:, None]
    return residual, identity, grad


def physics_loss_from_output(y, v0, liouvillian: Liouvillian, grid: TimeGrid) -> float:
    """Physics loss for arbitrary trajectories ``y (B, G, N^2)`` with initial vectors ``v0``."""
    y = np.asarray(y, dtype=complex)
    if y.ndim == 2:
        y, v0 = y[None], np.asarray(v0)[None]
    r, i, _ = physics_loss_terms(y, v0, liouvillian.matrix, fd_matrix(grid.n_points, grid.dt))
    return float(np.mean(r + i))


def physics_loss(params: fno.FnoParams, s0, liouvillian: Liouvillian, grid: TimeGrid) -> float:
    v0 = s0.vec if hasattr(s0, "vec") else np.asarray(s0, dtype=complex)
    y = fno.forward_batch(params, v0[None, :], grid)
    return physics_loss_from_output(y, v0[None, :], liouvillian, grid)


def onthefly_sample(n: int, dim: int, seed: int, epoch: int = 0) -> np.ndarray:
    """``n`` unit-Frobenius GUE matrices, vectorized to shape ``(n, dim^2)``."""
    rng = np.random.default_rng([int(seed), STREAM_ONTHEFLY, int(epoch)])
    out = np.empty((n, dim * dim), dtype=complex)
    for i in range(n):
        a = gue_matrix(dim, rng)
        out[i] = (a / np.linalg.norm(a)).reshape(-1)
    return out


# ---------------------------------------------------------------- optimizer


class Adam:
    """Adam with bias correction, applied to real and imaginary parts independently."""

    def __init__(self, params: fno.FnoParams, lr=1e-3, betas=(0.9, 0.999), eps=1e-8):
        self.lr = lr
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.t = 0
        self.m = {k: np.zeros_like(v) for k, v in params.items()}
        self.v = {k: np.zeros_like(v) for k, v in params.items()}

    def step(self, params: fno.FnoParams, grads: fno.FnoParams) -> None:
        self.t += 1
        c1 = 1.0 - self.beta1**self.t
        c2 = 1.0 - self.beta2**self.t
        for k, g in grads.items():
            m = self.m[k] = self.beta1 * self.m[k] + (1.0 - self.beta1) * g
            v = self.v[k] = self.beta2 * self.v[k] + (1.0 - self.beta2) * (g.real**2 + 1j * g.imag**2)
            mh, vh = m / c1, v / c2
            params[k] = params[k] - self.lr * (
                mh.real / (np.sqrt(vh.real) + self.eps) + 1j * mh.imag / (np.sqrt(vh.imag) + self.eps)
            )

    def state_tensors(self) -> dict:
        out = {}
        for k in self.m:
            out["adam.m." + k] = self.m[k]
            out["adam.v." + k] = self.v[k]
        return out

    def load_state(self, tensors: dict, t: int) -> None:
        self.t = int(t)
        for k in self.m:
            self.m[k] = tensors["adam.m." + k].copy()
            self.v[k] = tensors["adam.v." + k].copy()


# ---------------------------------------------------------------- training


def batch_gradient(params, grid, lmat, dmat, v_data, ref, v_phys, weight):
    """Combined loss gradient for one optimizer step.

    Returns ``(grads, mean data loss, mean physics loss)``.
    """
    grads = params.zeros_like()
    l_data = l_phys = 0.0
    if len(v_data):
        y, cache = fno.forward_with_cache(params, v_data, grid)
        per, g_y = data_loss_terms(y, ref)
        l_data = float(np.mean(per))
        for k, g in fno.backward(params, cache, g_y / len(v_data)).items():
            grads[k] += g
    if weight > 0 and len(v_phys):
        y, cache = fno.forward_with_cache(params, v_phys, grid)
        r, i, g_y = physics_loss_terms(y, v_phys, lmat, dmat)
        l_phys = float(np.mean(r + i))
        for k, g in fno.backward(params, cache, g_y * (weight / len(v_phys))).items():
            grads[k] += g
    if not (np.isfinite(l_data) and np.isfinite(l_phys)):
        raise NumericalError("non-finite loss")
    return grads, l_data, l_phys


def validate(params: fno.FnoParams, dataset: Dataset, batch_size: int = 50) -> np.ndarray:
    """Per-sample relative data loss on the validation split."""
    errs = []
    for lo in range(0, dataset.n_val, batch_size):
        ref = dataset.validation[lo : lo + batch_size]
        y = fno.forward_batch(params, ref[:, 0], dataset.grid)
        errs.append(data_loss_terms(y, ref)[0])
    return np.concatenate(errs) if errs else np.zeros(0)


class TrainingDiverged(NumericalError):
    def __init__(self, epoch, msg):
        super().__init__(f"training diverged at epoch {epoch}: {msg}")
        self.epoch = epoch


def save_training_state(path, params, best, opt: Adam, epoch: int, report: LossReport, config: TrainConfig):
    extra = opt.state_tensors()
    extra.update({"best." + k: v for k, v in best.items()})
    meta = {
        "epoch": epoch,
        "adam_t": opt.t,
        "report": report.to_dict(),
        "train_config": asdict(config),
    }
    fno.save_checkpoint(params, path, metadata=meta, extra=extra)


def load_training_state(path):
    """Inverse of :func:`save_training_state`; returns ``(params, best, adam_tensors, meta)``."""
    params, extra, header = fno.load_checkpoint(path, with_extra=True)
    best = params.zeros_like()
    for k in best:
        best[k] = extra["best." + k]
    return params, best, extra, header["metadata"]


def train(
    fno_config: fno.FnoConfig,
    train_config: TrainConfig,
    dataset: Dataset,
    liouvillian: Liouvillian,
    checkpoint_dir=None,
    resume_from=None,
    init_seed: int | None = None,
):
    """Minimize mean data loss + ``physics_weight`` * mean physics loss with Adam.

    Returns ``(best_params, report)`` where ``best_params`` had the lowest
    validation loss seen. With ``checkpoint_dir`` and ``checkpoint_every > 0``
    a resumable training state is written every that many epochs.
    """
    grid = dataset.grid
    fno.check_grid(fno_config, grid)
    if fno_config.state_dim != dataset.system.dim**2:
        raise DomainError("model state_dim does not match the dataset system")
    cfg = train_config
    lmat = liouvillian.matrix
    dmat = fd_matrix(grid.n_points, grid.dt)

    params = fno.init_params(fno_config, cfg.seed if init_seed is None else init_seed)
    opt = Adam(params, cfg.lr, cfg.adam_betas, cfg.adam_eps)
    report = LossReport()
    best = params.copy()
    best_val = math.inf
    start = 0
    if resume_from is not None:
        params, best, tensors, meta = load_training_state(resume_from)
        if params.config != fno_config:
            raise DomainError("checkpoint config does not match the requested model")
        opt = Adam(params, cfg.lr, cfg.adam_betas, cfg.adam_eps)
        opt.load_state(tensors, meta["adam_t"])
        start = int(meta["epoch"])
        rep = meta["report"]
        report = LossReport(
            [tuple(r) for r in rep["epochs"]], [tuple(r) for r in rep["validation"]], [], rep["best_epoch"]
        )
        if report.validation:
            best_val = min(v for _, v in report.validation)

    n_train = dataset.n_train
    n_steps = max(1, math.ceil(n_train / cfg.batch_size))
    for epoch in range(start + 1, cfg.epochs + 1):
        t0 = time.perf_counter()
        order = np.random.default_rng([cfg.seed, STREAM_SHUFFLE, epoch]).permutation(n_train)
        phys = onthefly_sample(cfg.onthefly_samples, dataset.system.dim, cfg.seed, epoch)
        phys_chunks = np.array_split(phys, n_steps)
        sum_d = sum_p = 0.0
        for step in range(n_steps):
            idx = order[step * cfg.batch_size : (step + 1) * cfg.batch_size]
            ref = dataset.train[idx]
            try:
                grads, ld, lp = batch_gradient(
                    params, grid, lmat, dmat, ref[:, 0], ref, phys_chunks[step], cfg.physics_weight
                )
            except NumericalError as exc:
                raise TrainingDiverged(epoch, str(exc)) from exc
            opt.step(params, grads)
            sum_d += ld
            sum_p += lp
        report.epochs.append((epoch, sum_d / n_steps, sum_p / n_steps, time.perf_counter() - t0))

        if epoch % cfg.validate_every == 0 or epoch == cfg.epochs:
            val = float(np.mean(validate(params, dataset)))
            if not np.isfinite(val):
                raise TrainingDiverged(epoch, "non-finite validation loss")
            report.validation.append((epoch, val))
            if val < best_val:
                best_val, best, report.best_epoch = val, params.copy(), epoch
            log.info("epoch %d  l_data %.4g  l_phys %.4g  val %.4g", epoch, sum_d / n_steps, sum_p / n_steps, val)

        if checkpoint_dir is not None and cfg.checkpoint_every and epoch % cfg.checkpoint_every == 0:
            save_training_state(Path(checkpoint_dir) / "state.nqp", params, best, opt, epoch, report, cfg)

    if checkpoint_dir is not None and cfg.checkpoint_every and report.epochs:
        save_training_state(Path(checkpoint_dir) / "state.nqp", params, best, opt, report.epochs[-1][0], report, cfg)
    if report.best_epoch is not None:
        report.validation_errors = validate(best, dataset).tolist()
    return best, report
