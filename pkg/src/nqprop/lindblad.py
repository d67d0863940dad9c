"""Physical model: Hamiltonians, pure-dephasing Lindblad generator and superoperators.

Units are cm^-1 for energies and rates and fs for time. A density matrix is
vectorized in row-major ``(j, j')`` order, so ``vec(A @ rho @ B)`` equals
``kron(A, B.T) @ vec(rho)``.
"""

from __future__ import annotations

import json
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

# speed of light in cm/fs
SPEED_OF_LIGHT_CM_FS = 2.99792458e10 * 1e-15
# angular frequency (rad/fs) per wavenumber (cm^-1)
ANGULAR_PER_CM = 2.0 * np.pi * SPEED_OF_LIGHT_CM_FS
# hbar in cm^-1 fs
HBAR_CM_FS = 1.0 / ANGULAR_PER_CM

HERMITIAN_ATOL = 1e-12

FMO_DEPHASING_CM = 35.0

_FMO_PRINTED = np.array(
    [
        [12410.0, -87.7, 5.5, -5.9, 6.7, -13.7, -9.9],
        [-87.7, 12530.0, 30.8, 8.2, 0.7, 11.8, 4.3],
        [5.5, 30.8, 12210.0, -53.5, -2.2, -9.6, 6.0],
        [-5.9, 8.2, -53.5, 12320.0, -70.7, -17.0, -63.6],
        [6.7, 0.7, -2.2, -70.7, 12480.0, 81.1, -1.3],
        [-13.7, 11.8, -9.6, -17.0, 81.1, 12630.0, 39.7],
        [-9.9, 4.3, 6.0, -63.3, -1.3, 39.7, 12440.0],
    ]
)


class DimensionError(ValueError):
    """Operands of incompatible Hilbert-space dimension."""


class DomainError(ValueError):
    """Argument outside the mathematical domain of an operation."""


@dataclass(frozen=True)
class HermitianOperator:
    """Dense N x N Hermitian matrix (cm^-1 for Hamiltonians, dimensionless otherwise)."""

    entries: np.ndarray

    def __post_init__(self):
        a = np.array(self.entries, dtype=complex)
        if a.ndim != 2 or a.shape[0] != a.shape[1] or a.shape[0] < 1:
            raise DimensionError(f"expected a square matrix, got shape {a.shape}")
        if not np.allclose(a, a.conj().T, rtol=0.0, atol=HERMITIAN_ATOL):
            raise DomainError("matrix is not Hermitian")
        a.setflags(write=False)
        object.__setattr__(self, "entries", a)

    @property
    def dim(self) -> int:
        return self.entries.shape[0]


@dataclass(frozen=True)
class DensityState:
    """Vectorized N x N matrix; ``physical=False`` marks e.g. commutator outputs."""

    vec: np.ndarray
    physical: bool = True

    def __post_init__(self):
        v = np.array(self.vec, dtype=complex).reshape(-1)
        n = int(round(np.sqrt(v.size)))
        if n * n != v.size or n < 1:
            raise DimensionError(f"vector length {v.size} is not a perfect square")
        v.setflags(write=False)
        object.__setattr__(self, "vec", v)

    @classmethod
    def from_matrix(cls, rho, physical: bool = True) -> "DensityState":
        rho = np.asarray(rho, dtype=complex)
        if rho.ndim != 2 or rho.shape[0] != rho.shape[1]:
            raise DimensionError(f"expected a square matrix, got shape {rho.shape}")
        return cls(rho.reshape(-1), physical)

    @classmethod
    def site(cls, n: int, k: int) -> "DensityState":
        """Pure excitation on site ``k`` (1-based)."""
        if not 1 <= k <= n:
            raise DomainError(f"site {k} outside 1..{n}")
        rho = np.zeros((n, n), dtype=complex)
        rho[k - 1, k - 1] = 1.0
        return cls.from_matrix(rho)

    @classmethod
    def maximally_mixed(cls, n: int) -> "DensityState":
        return cls.from_matrix(np.eye(n) / n)

    @property
    def dim(self) -> int:
        return int(round(np.sqrt(self.vec.size)))

    @property
    def matrix(self) -> np.ndarray:
        return self.vec.reshape(self.dim, self.dim)

    def trace(self) -> complex:
        return complex(np.trace(self.matrix))

    def hermiticity_error(self) -> float:
        m = self.matrix
        return float(np.max(np.abs(m - m.conj().T)))


@dataclass(frozen=True)
class Liouvillian:
    """Dense N^2 x N^2 generator in fs^-1 acting on row-major vectorized states."""

    matrix: np.ndarray

    def __post_init__(self):
        m = np.array(self.matrix, dtype=complex)
        if m.ndim != 2 or m.shape[0] != m.shape[1]:
            raise DimensionError(f"expected a square matrix, got shape {m.shape}")
        m.setflags(write=False)
        object.__setattr__(self, "matrix", m)

    @property
    def dim(self) -> int:
        """Hilbert-space dimension N (the matrix is N^2 x N^2)."""
        return int(round(np.sqrt(self.matrix.shape[0])))

    def apply(self, vec: np.ndarray) -> np.ndarray:
        return self.matrix @ vec


@dataclass(frozen=True)
class System:
    """Excitonic system: Hamiltonian (cm^-1) plus one pure-dephasing rate per site."""

    hamiltonian: HermitianOperator
    dephasing_rates: tuple
    name: str = "custom"
    _liouvillian: Liouvillian | None = field(default=None, repr=False, compare=False)

    @property
    def dim(self) -> int:
        return self.hamiltonian.dim

    def liouvillian(self) -> Liouvillian:
        if self._liouvillian is None:
            object.__setattr__(
                self, "_liouvillian", build_liouvillian(self.hamiltonian, self.dephasing_rates)
            )
        return self._liouvillian

    def to_dict(self) -> dict:
        h = self.hamiltonian.entries
        if np.all(h.imag == 0):
            ham = h.real.tolist()
        else:
            ham = [[[z.real, z.imag] for z in row] for row in h]
        return {"name": self.name, "hamiltonian": ham, "dephasing_rates": list(self.dephasing_rates)}


def build_fmo_hamiltonian() -> HermitianOperator:
    """Seven-site FMO electronic Hamiltonian in cm^-1.

    The tabulated matrix differs by 0.3 cm^-1 between entries (4,7) and (7,4);
    the two are replaced by their mean.
    """
    h = _FMO_PRINTED.copy()
    asym = np.abs(h - h.T).max()
    if asym > 0:
        warnings.warn(
            f"FMO Hamiltonian is non-Hermitian by {asym:.3g} cm^-1; symmetrizing to the mean",
            stacklevel=2,
        )
        h = 0.5 * (h + h.T)
    return HermitianOperator(h)


def fmo_system(rate: float = FMO_DEPHASING_CM) -> System:
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        h = build_fmo_hamiltonian()
    return System(h, (float(rate),) * h.dim, name="fmo7")


def _parse_matrix(raw) -> np.ndarray:
    a = np.asarray(raw, dtype=float)
    if a.ndim == 3 and a.shape[-1] == 2:
        return a[..., 0] + 1j * a[..., 1]
    if a.ndim != 2:
        raise DimensionError("hamiltonian must be an N x N array (or N x N x 2 for complex)")
    return a.astype(complex)


def system_from_config(spec) -> System:
    """Build a system from ``"fmo7"`` or a mapping with ``hamiltonian`` and ``dephasing_rates``."""
    if isinstance(spec, str):
        if spec == "fmo7":
            return fmo_system()
        raise DomainError(f"unknown named system {spec!r}")
    spec = dict(spec)
    if spec.get("name") == "fmo7" and "hamiltonian" not in spec:
        return fmo_system()
    unknown = set(spec) - {"name", "hamiltonian", "dephasing_rates"}
    if unknown:
        raise DomainError(f"unknown system keys: {sorted(unknown)}")
    h = HermitianOperator(_parse_matrix(spec["hamiltonian"]))
    rates = tuple(float(r) for r in spec["dephasing_rates"])
    if len(rates) != h.dim:
        raise DimensionError(f"{len(rates)} dephasing rates for a {h.dim}-site system")
    if any(r < 0 for r in rates):
        raise DomainError("dephasing rates must be non-negative")
    return System(h, rates, name=spec.get("name", "custom"))


def load_system(path: str | Path) -> System:
    return system_from_config(json.loads(Path(path).read_text()))


def build_liouvillian(h: HermitianOperator, rates) -> Liouvillian:
    """Generator of the Lindblad equation with projector jump operators ``|j><j|``.

    Energies and rates are converted from cm^-1 to rad/fs with ``2*pi*c``.
    """
    rates = np.asarray(rates, dtype=float)
    n = h.dim
    if rates.shape != (n,):
        raise DimensionError(f"need {n} dephasing rates, got shape {rates.shape}")
    if np.any(rates < 0):
        raise DomainError("dephasing rates must be non-negative")
    eye = np.eye(n)
    hh = h.entries
    unitary = -1j * ANGULAR_PER_CM * (np.kron(hh, eye) - np.kron(eye, hh.T))
    dissipator = np.zeros((n * n, n * n), dtype=complex)
    for j, lam in enumerate(rates):
        if lam == 0:
            continue
        p = np.zeros((n, n))
        p[j, j] = 1.0
        dissipator += (0.5 * lam * ANGULAR_PER_CM) * (
            2.0 * np.kron(p, p) - np.kron(p, eye) - np.kron(eye, p)
        )
    return Liouvillian(unitary + dissipator)


def commutator_superop(x: HermitianOperator) -> np.ndarray:
    """Matrix of ``rho -> (i/hbar) [X, rho]`` on vectorized states."""
    n = x.dim
    eye = np.eye(n)
    return (1j / HBAR_CM_FS) * (np.kron(x.entries, eye) - np.kron(eye, x.entries.T))


def apply_commutator(x: HermitianOperator, s: DensityState) -> DensityState:
    if x.dim != s.dim:
        raise DimensionError(f"operator dim {x.dim} != state dim {s.dim}")
    return DensityState(commutator_superop(x) @ s.vec, physical=False)


def trace_row(x: HermitianOperator) -> np.ndarray:
    """Row vector ``r`` with ``r @ vec(rho) == Tr(X rho)``."""
    return x.entries.T.reshape(-1)


def trace_functional(x: HermitianOperator, s: DensityState) -> complex:
    if x.dim != s.dim:
        raise DimensionError(f"operator dim {x.dim} != state dim {s.dim}")
    return complex(trace_row(x) @ s.vec)


def hopping_operator(n: int) -> HermitianOperator:
    """Nearest-neighbour hopping ``sum_j |j><j+1| + |j+1><j|``."""
    if n < 2:
        raise DomainError("hopping operator needs n >= 2")
    return HermitianOperator(np.eye(n, k=1) + np.eye(n, k=-1))


def identity_operator(n: int) -> HermitianOperator:
    return HermitianOperator(np.eye(n))
