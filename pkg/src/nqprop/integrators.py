"""Reference propagation: RK4, matrix exponential, random initial states, datasets."""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .lindblad import DensityState, DomainError, Liouvillian, System, system_from_config

DATASET_MAGIC = b"NQPD"

# RNG stream tags, kept distinct so datasets and on-the-fly samples never share draws
STREAM_TRAIN = 0
STREAM_VALIDATION = 1
STREAM_ONTHEFLY = 2


class NumericalError(ArithmeticError):
    pass


@dataclass(frozen=True)
class TimeGrid:
    """Uniform grid of ``n_steps + 1`` points on ``[0, t_max]`` (fs)."""

    t_max: float = 30.0
    n_steps: int = 50

    def __post_init__(self):
        if self.n_steps < 0:
            raise DomainError("n_steps must be >= 0")
        if self.n_steps > 0 and not self.t_max > 0:
            raise DomainError("t_max must be positive")

    @property
    def dt(self) -> float:
        return self.t_max / self.n_steps if self.n_steps else 0.0

    @property
    def n_points(self) -> int:
        return self.n_steps + 1

    @property
    def points(self) -> np.ndarray:
        return np.linspace(0.0, self.t_max, self.n_points)

    def to_dict(self) -> dict:
        return {"t_max": self.t_max, "n_steps": self.n_steps}


@dataclass(frozen=True)
class Trajectory:
    """Vectorized states on a grid; ``states`` has shape ``(n_points, N^2)``."""

    grid: TimeGrid
    states: np.ndarray

    @property
    def dim(self) -> int:
        return int(round(np.sqrt(self.states.shape[1])))

    def state(self, k: int) -> DensityState:
        return DensityState(self.states[k])

    def matrices(self) -> np.ndarray:
        n = self.dim
        return self.states.reshape(-1, n, n)


def _check_finite(v, what="state"):
    if not np.all(np.isfinite(v)):
        raise NumericalError(f"non-finite values in {what}")


def rk4_step(l: Liouvillian, s: DensityState | np.ndarray, dt: float):
    """One classical RK4 step of ``d(rho)/dt = L rho``.

    Accepts a DensityState or a raw array whose first axis is the state index
    (so several states can be advanced at once); returns the same kind.
    """
    if not dt > 0:
        raise DomainError("dt must be positive")
    if isinstance(s, DensityState):
        return DensityState(_rk4(l.matrix, s.vec, dt), physical=s.physical)
    return _rk4(l.matrix, np.asarray(s, dtype=complex), dt)


def _rk4(m, v, dt):
    _check_finite(v)
    k1 = m @ v
    k2 = m @ (v + 0.5 * dt * k1)
    k3 = m @ (v + 0.5 * dt * k2)
    k4 = m @ (v + dt * k3)
    return v + (dt / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)


def rk4_trajectory(l: Liouvillian, v0: np.ndarray, grid: TimeGrid) -> np.ndarray:
    """RK4 states on ``grid`` for the columns of ``v0`` (shape ``(N^2,)`` or ``(N^2, B)``).

    Returns shape ``(n_points, N^2)`` or ``(n_points, N^2, B)``.
    """
    v = np.array(v0, dtype=complex)
    out = np.empty((grid.n_points,) + v.shape, dtype=complex)
    out[0] = v
    for k in range(1, grid.n_points):
        v = _rk4(l.matrix, v, grid.dt)
        out[k] = v
    return out


def propagate(l: Liouvillian, s0: DensityState, grid: TimeGrid) -> Trajectory:
    if l.matrix.shape[0] != s0.vec.size:
        raise DomainError("Liouvillian and state dimensions differ")
    return Trajectory(grid, rk4_trajectory(l, s0.vec, grid))


def expm(a: np.ndarray) -> np.ndarray:
    """Matrix exponential by scaling and squaring around a Taylor kernel.

    The matrix is scaled by ``2**-s`` so its 1-norm is at most 0.5, where the
    series is summed until terms fall below machine precision.
    """
    a = np.asarray(a, dtype=complex)
    if not np.all(np.isfinite(a)):
        raise NumericalError("non-finite entries in matrix exponential input")
    norm = np.linalg.norm(a, 1)
    s = max(0, int(np.ceil(np.log2(norm / 0.5)))) if norm > 0 else 0
    b = a / 2.0**s
    result = np.eye(a.shape[0], dtype=complex)
    term = np.eye(a.shape[0], dtype=complex)
    for k in range(1, 40):
        term = term @ b / k
        result = result + term
        if np.linalg.norm(term, 1) <= np.finfo(float).eps * np.linalg.norm(result, 1):
            break
    for _ in range(s):
        result = result @ result
    return result


def expm_propagator(l: Liouvillian, t: float) -> np.ndarray:
    """``exp(t L)`` for ``t >= 0`` fs."""
    if t < 0:
        raise DomainError("propagation time must be non-negative")
    return expm(t * l.matrix)


def expm_trajectory(l: Liouvillian, v0: np.ndarray, grid: TimeGrid) -> np.ndarray:
    """Exact states on the grid, each ``exp(t_k L) v0`` computed independently."""
    v0 = np.asarray(v0, dtype=complex)
    out = np.empty((grid.n_points,) + v0.shape, dtype=complex)
    for k, t in enumerate(grid.points):
        out[k] = expm_propagator(l, t) @ v0
    return out


def gue_matrix(n: int, rng: np.random.Generator) -> np.ndarray:
    """Hermitian matrix from the Gaussian unitary ensemble."""
    z = rng.standard_normal((n, n)) + 1j * rng.standard_normal((n, n))
    return 0.5 * (z + z.conj().T)


def sample_stream(seed: int, stream: int, index: int) -> np.random.Generator:
    """Independent generator for sample ``index`` of a given stream."""
    return np.random.default_rng([int(seed), int(stream), int(index)])


def sample_gue_density(n: int, rng_seed) -> DensityState:
    """Random density matrix ``A^2 / Tr(A^2)`` with ``A`` drawn from the GUE.

    ``rng_seed`` may be an int, a seed sequence or a ``numpy.random.Generator``.
    """
    if n < 1:
        raise DomainError("n must be >= 1")
    rng = rng_seed if isinstance(rng_seed, np.random.Generator) else np.random.default_rng(rng_seed)
    a = gue_matrix(n, rng)
    rho = a @ a
    rho = 0.5 * (rho + rho.conj().T)
    return DensityState.from_matrix(rho / np.trace(rho).real)


@dataclass(frozen=True)
class Dataset:
    """Initial states and reference trajectories.

    ``train`` and ``validation`` have shape ``(n_samples, n_points, N^2)``;
    the initial state of sample ``i`` is ``train[i, 0]``.
    """

    system: System
    grid: TimeGrid
    train: np.ndarray
    validation: np.ndarray
    seed: int

    @property
    def n_train(self) -> int:
        return self.train.shape[0]

    @property
    def n_val(self) -> int:
        return self.validation.shape[0]

    def samples(self, split: str = "train"):
        """Yield ``(initial DensityState, Trajectory)`` pairs."""
        arr = self.train if split == "train" else self.validation
        for traj in arr:
            yield DensityState(traj[0]), Trajectory(self.grid, traj)


def _generate_split(l, n_dim, grid, n, seed, stream):
    if n == 0:
        return np.zeros((0, grid.n_points, n_dim * n_dim), dtype=complex)
    v0 = np.stack(
        [sample_gue_density(n_dim, sample_stream(seed, stream, i)).vec for i in range(n)], axis=1
    )
    # (n_points, N^2, n) -> (n, n_points, N^2); columns evolve independently
    return np.ascontiguousarray(rk4_trajectory(l, v0, grid).transpose(2, 0, 1))


def generate_dataset(system: System, grid: TimeGrid, n_train: int, n_val: int, seed: int) -> Dataset:
    if n_train < 1 or n_val < 1:
        raise DomainError("dataset sizes must be >= 1")
    l = system.liouvillian()
    train = _generate_split(l, system.dim, grid, n_train, seed, STREAM_TRAIN)
    val = _generate_split(l, system.dim, grid, n_val, seed, STREAM_VALIDATION)
    return Dataset(system, grid, train, val, int(seed))


def _write_container(path, magic, header: dict, arrays: list[np.ndarray]):
    """``magic | u64 header length | JSON header | little-endian float64 payload``."""
    blobs = [np.ascontiguousarray(a, dtype="<f8").tobytes() for a in arrays]
    head = json.dumps(header, sort_keys=True).encode()
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as f:
        f.write(magic)
        f.write(struct.pack("<Q", len(head)))
        f.write(head)
        for b in blobs:
            f.write(b)
    tmp.replace(path)


def _read_container(path, magic):
    raw = Path(path).read_bytes()
    if raw[:4] != magic:
        raise ValueError(f"{path}: not a {magic.decode()} file")
    (hlen,) = struct.unpack("<Q", raw[4:12])
    header = json.loads(raw[12 : 12 + hlen])
    return header, memoryview(raw)[12 + hlen :]


def _payload_array(payload, entry) -> np.ndarray:
    count = int(np.prod(entry["shape"])) if entry["shape"] else 1
    a = np.frombuffer(payload, dtype="<f8", count=count, offset=entry["offset"])
    return a.reshape(entry["shape"]).astype(float)


def save_dataset(ds: Dataset, path) -> None:
    """Write the dataset container (complex values as interleaved re/im float64)."""
    arrays, manifest, offset = [], [], 0
    for name, arr in (("train", ds.train), ("validation", ds.validation)):
        shape = list(arr.shape) + [2]
        manifest.append({"name": name, "shape": shape, "offset": offset})
        arrays.append(np.ascontiguousarray(arr).view(float))
        offset += 8 * int(np.prod(shape))
    header = {
        "format": "nqprop-dataset",
        "version": 1,
        "system": ds.system.to_dict(),
        "grid": ds.grid.to_dict(),
        "seed": ds.seed,
        "n_train": ds.n_train,
        "n_val": ds.n_val,
        "arrays": manifest,
    }
    _write_container(path, DATASET_MAGIC, header, arrays)


def load_dataset(path) -> Dataset:
    header, payload = _read_container(path, DATASET_MAGIC)
    arrays = {}
    for entry in header["arrays"]:
        a = _payload_array(payload, entry)
        arrays[entry["name"]] = a[..., 0] + 1j * a[..., 1]
    return Dataset(
        system_from_config(header["system"]),
        TimeGrid(**header["grid"]),
        arrays["train"],
        arrays["validation"],
        int(header["seed"]),
    )
