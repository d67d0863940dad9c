"""Long-time propagation, populations, correlation functions and spectra.

Every backend propagates a batch of vectorized matrices over one window
``[0, t_max]`` of its grid; longer times chain windows, feeding the final
state of one window into the next.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass

import numpy as np

from . import fno
from .integrators import TimeGrid, expm_propagator, rk4_trajectory
from .lindblad import (
    ANGULAR_PER_CM,
    DensityState,
    DimensionError,
    DomainError,
    HermitianOperator,
    Liouvillian,
    commutator_superop,
    trace_row,
)


class Rk4Backend:
    name = "rk4"

    def __init__(self, liouvillian: Liouvillian, grid: TimeGrid):
        self.liouvillian = liouvillian
        self.grid = grid
        self.state_dim = liouvillian.matrix.shape[0]

    def window(self, v0: np.ndarray) -> np.ndarray:
        """States over one window for initial vectors ``(B, N^2)``; returns ``(B, G, N^2)``."""
        return rk4_trajectory(self.liouvillian, np.asarray(v0).T, self.grid).transpose(2, 0, 1)


class ExpmBackend:
    name = "expm"

    def __init__(self, liouvillian: Liouvillian, grid: TimeGrid):
        self.liouvillian = liouvillian
        self.grid = grid
        self.state_dim = liouvillian.matrix.shape[0]
        step = expm_propagator(liouvillian, grid.dt) if grid.n_steps else np.eye(self.state_dim)
        # G_{k dt} built from exact powers of the step propagator
        props = [np.eye(self.state_dim, dtype=complex)]
        for _ in range(grid.n_steps):
            props.append(step @ props[-1])
        self.propagators = np.stack(props)

    def window(self, v0: np.ndarray) -> np.ndarray:
        return np.einsum("gij,bj->bgi", self.propagators, np.asarray(v0, dtype=complex))


class FnoBackend:
    name = "fno"

    def __init__(self, params: fno.FnoParams, grid: TimeGrid, batch_size: int = 256):
        fno.check_grid(params.config, grid)
        self.params = params
        self.grid = grid
        self.state_dim = params.config.state_dim
        self.batch_size = batch_size

    def window(self, v0: np.ndarray) -> np.ndarray:
        v0 = np.atleast_2d(np.asarray(v0, dtype=complex))
        out = [
            fno.forward_batch(self.params, v0[lo : lo + self.batch_size], self.grid)
            for lo in range(0, len(v0), self.batch_size)
        ]
        return np.concatenate(out) if out else np.zeros((0, self.grid.n_points, self.state_dim), complex)


def make_backend(kind: str, liouvillian: Liouvillian, grid: TimeGrid, params=None):
    if kind == "rk4":
        return Rk4Backend(liouvillian, grid)
    if kind == "expm":
        return ExpmBackend(liouvillian, grid)
    if kind == "fno":
        if params is None:
            raise DomainError("the fno backend needs a checkpoint")
        return FnoBackend(params, grid)
    raise DomainError(f"unknown backend {kind!r}")


def _as_batch(s0, state_dim):
    v = s0.vec if isinstance(s0, DensityState) else np.asarray(s0, dtype=complex)
    v = np.atleast_2d(v)
    if v.shape[1] != state_dim:
        raise DimensionError(f"state length {v.shape[1]} != backend state length {state_dim}")
    return v


def long_trajectory(backend, v0, n_windows: int) -> np.ndarray:
    """States on ``[0, n_windows * t_max]`` for a batch; returns ``(B, n_windows*n_steps + 1, N^2)``."""
    v = _as_batch(v0, backend.state_dim)
    steps = backend.grid.n_steps
    out = np.empty((v.shape[0], n_windows * steps + 1, v.shape[1]), dtype=complex)
    out[:, 0] = v
    for w in range(n_windows):
        win = backend.window(v)
        out[:, w * steps + 1 : (w + 1) * steps + 1] = win[:, 1:]
        v = win[:, -1]
    return out


def long_time_propagate(backend, s0: DensityState, k_windows: int, offset_index: int = 0) -> DensityState:
    """Apply the full-window propagator ``k_windows`` times, then advance ``offset_index`` steps."""
    if k_windows < 0:
        raise DomainError("k_windows must be >= 0")
    if not 0 <= offset_index <= backend.grid.n_steps:
        raise DomainError("offset_index outside the window grid")
    v = _as_batch(s0, backend.state_dim)
    for _ in range(k_windows):
        v = backend.window(v)[:, -1]
    if offset_index:
        v = backend.window(v)[:, offset_index]
    return DensityState(v[0], physical=getattr(s0, "physical", True))


def time_axis(grid: TimeGrid, n_windows: int, stride: int = 1) -> np.ndarray:
    return np.arange(0, n_windows * grid.n_steps + 1, stride) * grid.dt


def populations(backend, s0, n_windows: int):
    """Site populations ``(T, N)`` on the long grid and the largest imaginary residue."""
    traj = long_trajectory(backend, s0, n_windows)[0]
    n = int(round(np.sqrt(traj.shape[1])))
    diag = traj[:, :: n + 1]
    return time_axis(backend.grid, n_windows), diag.real, float(np.max(np.abs(diag.imag)))


def population_trace(backend, s0, site: int, n_windows: int):
    """``(times, p_site, imaginary residue)`` for 1-based ``site``."""
    n = int(round(np.sqrt(backend.state_dim)))
    if not 1 <= site <= n:
        raise DomainError(f"site {site} outside 1..{n}")
    traj = long_trajectory(backend, s0, n_windows)[0]
    pn = traj[:, (site - 1) * (n + 1)]
    return time_axis(backend.grid, n_windows), pn.real, float(np.max(np.abs(pn.imag)))


@dataclass
class TcfGrid:
    order: int
    t1: np.ndarray
    values: np.ndarray
    t2: np.ndarray | None = None

    def __post_init__(self):
        expected = (len(self.t1),) if self.order == 1 else (len(self.t1), len(self.t2))
        if self.values.shape != expected:
            raise DimensionError(f"values shape {self.values.shape} != grid shape {expected}")

    @property
    def imag_residue(self) -> float:
        return float(np.max(np.abs(self.values.imag))) if self.values.size else 0.0


def tcf_first_order(backend, x: HermitianOperator, s0, n_windows: int, stride: int = 1) -> TcfGrid:
    """``Tr(X G_t1 (i/hbar)[X, rho0])`` on ``t1 = 0, stride*dt, ... , n_windows*t_max``."""
    v = _as_batch(s0, backend.state_dim)[0]
    if x.dim**2 != v.size:
        raise DimensionError("operator and state dimensions differ")
    excited = commutator_superop(x) @ v
    traj = long_trajectory(backend, excited, n_windows)[0][::stride]
    return TcfGrid(1, time_axis(backend.grid, n_windows, stride), traj @ trace_row(x))


def tcf_second_order(
    backend,
    x: HermitianOperator,
    s0,
    t1_windows: int,
    t2_windows: int,
    stride1: int = 1,
    stride2: int = 1,
    chunk: int = 64,
) -> TcfGrid:
    """``Tr(X G_t2 X_x G_t1 X_x rho0)`` on a rectangular grid of window-grid times.

    The ``t1`` states come from one long propagation; each is excited again and
    propagated over the ``t2`` range in batches of ``chunk``.
    """
    v = _as_batch(s0, backend.state_dim)[0]
    if x.dim**2 != v.size:
        raise DimensionError("operator and state dimensions differ")
    xc = commutator_superop(x)
    tr = trace_row(x)
    first = long_trajectory(backend, xc @ v, t1_windows)[0][::stride1]
    second = first @ xc.T
    t1 = time_axis(backend.grid, t1_windows, stride1)
    t2 = time_axis(backend.grid, t2_windows, stride2)
    values = np.empty((len(t1), len(t2)), dtype=complex)
    for lo in range(0, len(t1), chunk):
        traj = long_trajectory(backend, second[lo : lo + chunk], t2_windows)[:, ::stride2]
        values[lo : lo + chunk] = traj @ tr
    return TcfGrid(2, t1, values, t2)


@dataclass
class SpectrumGrid:
    frequencies: np.ndarray  # cm^-1, ascending
    intensity: np.ndarray
    frequencies2: np.ndarray | None = None


def wavenumber_axis(n: int, dt: float) -> np.ndarray:
    """DFT bin frequencies in cm^-1 (ascending), for ``n`` samples spaced ``dt`` fs."""
    omega = 2.0 * np.pi * np.fft.fftshift(np.fft.fftfreq(n, d=dt))
    return omega / ANGULAR_PER_CM


def _uniform_step(t: np.ndarray) -> float:
    if len(t) < 2:
        raise DomainError("spectrum needs at least two time points")
    d = np.diff(t)
    if not np.allclose(d, d[0], rtol=1e-9, atol=1e-12):
        raise DomainError("time grid is not uniform")
    return float(d[0])


def spectrum(tcf: TcfGrid, normalize: bool = False) -> SpectrumGrid:
    """Imaginary part of ``sum_t R(t) exp(+i w t)`` over each time axis (no windowing)."""
    dt1 = _uniform_step(tcf.t1)
    if tcf.order == 1:
        f = np.fft.ifft(tcf.values) * len(tcf.t1)
        inten = np.fft.fftshift(f).imag
        freqs2 = None
    else:
        dt2 = _uniform_step(tcf.t2)
        f = np.fft.ifft2(tcf.values) * tcf.values.size
        inten = np.fft.fftshift(f).imag
        freqs2 = wavenumber_axis(len(tcf.t2), dt2)
    if normalize:
        peak = np.max(np.abs(inten))
        if peak > 0:
            inten = inten / peak
    return SpectrumGrid(wavenumber_axis(len(tcf.t1), dt1), inten, freqs2)


# ---------------------------------------------------------------- CSV I/O


def _fmt(x) -> str:
    return f"{float(x):.17g}"


def write_populations_csv(path, t, p) -> None:
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["t_fs"] + [f"p_{i + 1}" for i in range(p.shape[1])])
        for ti, row in zip(t, p):
            w.writerow([_fmt(ti)] + [_fmt(v) for v in row])


def write_tcf_csv(path, tcf: TcfGrid) -> None:
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        if tcf.order == 1:
            w.writerow(["t1_fs", "re", "im"])
            for t, v in zip(tcf.t1, tcf.values):
                w.writerow([_fmt(t), _fmt(v.real), _fmt(v.imag)])
        else:
            w.writerow(["t1_fs", "t2_fs", "re", "im"])
            for i, t1 in enumerate(tcf.t1):
                for j, t2 in enumerate(tcf.t2):
                    v = tcf.values[i, j]
                    w.writerow([_fmt(t1), _fmt(t2), _fmt(v.real), _fmt(v.imag)])


def read_tcf_csv(path) -> TcfGrid:
    with open(path, newline="") as f:
        rows = list(csv.reader(f))
    head, body = rows[0], np.array(rows[1:], dtype=float)
    if head == ["t1_fs", "re", "im"]:
        return TcfGrid(1, body[:, 0], body[:, 1] + 1j * body[:, 2])
    if head == ["t1_fs", "t2_fs", "re", "im"]:
        t1 = np.unique(body[:, 0])
        t2 = np.unique(body[:, 1])
        vals = (body[:, 2] + 1j * body[:, 3]).reshape(len(t1), len(t2))
        return TcfGrid(2, t1, vals, t2)
    raise ValueError(f"{path}: unrecognized TCF header {head}")


def write_spectrum_csv(path, spec: SpectrumGrid) -> None:
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        if spec.frequencies2 is None:
            w.writerow(["wavenumber_cm1", "intensity"])
            for nu, v in zip(spec.frequencies, spec.intensity):
                w.writerow([_fmt(nu), _fmt(v)])
        else:
            w.writerow(["wavenumber1_cm1", "wavenumber2_cm1", "intensity"])
            for i, nu1 in enumerate(spec.frequencies):
                for j, nu2 in enumerate(spec.frequencies2):
                    w.writerow([_fmt(nu1), _fmt(nu2), _fmt(spec.intensity[i, j])])


def write_sidecar(path, meta: dict) -> None:
    with open(path, "w") as f:
        json.dump(meta, f, indent=1, sort_keys=True)
