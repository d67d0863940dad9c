"""Complex-valued Fourier neural operator used as a learned propagator.

The network maps an initial vectorized state and a time grid to the states on
that grid::

    embed -> P_in (linear, ReLU, linear) -> Fourier layers -> P_out (linear, ReLU, linear)

Each Fourier layer computes ``relu(IDFT(W1 . DFT(u)[:k_max]) + u W2 + b)``.
ReLU acts on real and imaginary parts separately. All parameters are complex.

Gradients are computed by a hand-written reverse pass. For a real loss ``f``
and complex parameter ``w`` the stored gradient is
``df/dRe(w) + 1j * df/dIm(w)``, which is what Adam consumes component-wise.
"""

from __future__ import annotations

import hashlib
import json
import time
from collections import OrderedDict
from dataclasses import asdict, dataclass

import numpy as np

from .integrators import (
    NumericalError,
    TimeGrid,
    Trajectory,
    _payload_array,
    _read_container,
    _write_container,
)
from .lindblad import DensityState, DimensionError

CHECKPOINT_MAGIC = b"NQP1"


@dataclass(frozen=True)
class FnoConfig:
    n_fourier_layers: int = 6
    modes_kmax: int = 32
    hidden_channels: int = 256
    projection_hidden: int = 512
    state_dim: int = 49
    grid_points: int = 51

    def __post_init__(self):
        for name, value in asdict(self).items():
            if int(value) != value or value < 1:
                raise ValueError(f"FnoConfig.{name} must be a positive integer, got {value!r}")

    @property
    def modes(self) -> int:
        """Retained Fourier modes after clipping to the grid."""
        return min(self.modes_kmax, self.grid_points // 2 + 1)

    @property
    def in_channels(self) -> int:
        return self.state_dim + 1


class FnoParams(OrderedDict):
    """Ordered mapping from tensor name to complex array, tagged with its config."""

    def __init__(self, config: FnoConfig, tensors=()):
        super().__init__(tensors)
        self.config = config

    def copy(self) -> "FnoParams":
        return FnoParams(self.config, ((k, v.copy()) for k, v in self.items()))

    def zeros_like(self) -> "FnoParams":
        return FnoParams(self.config, ((k, np.zeros_like(v)) for k, v in self.items()))

    def flat_size(self) -> int:
        return sum(v.size for v in self.values())

    def digest(self) -> str:
        h = hashlib.sha256()
        for k, v in self.items():
            h.update(k.encode())
            h.update(np.ascontiguousarray(v).tobytes())
        return h.hexdigest()


def param_shapes(config: FnoConfig) -> list[tuple[str, tuple]]:
    c, p, k = config.hidden_channels, config.projection_hidden, config.modes
    shapes = [
        ("p_in.w0", (config.in_channels, p)),
        ("p_in.b0", (p,)),
        ("p_in.w1", (p, c)),
        ("p_in.b1", (c,)),
    ]
    for layer in range(config.n_fourier_layers):
        shapes += [
            (f"fourier.{layer}.w1", (k, c, c)),
            (f"fourier.{layer}.w2", (c, c)),
            (f"fourier.{layer}.b", (c,)),
        ]
    shapes += [
        ("p_out.w0", (c, p)),
        ("p_out.b0", (p,)),
        ("p_out.w1", (p, config.state_dim)),
        ("p_out.b1", (config.state_dim,)),
    ]
    return shapes


def _fans(name, shape):
    if name.endswith(".w1") and name.startswith("fourier."):
        return shape[1], shape[2]
    if len(shape) == 2:
        return shape
    # biases take the fan of their layer: (previous width, width)
    return shape[0], shape[0]


def init_params(config: FnoConfig, seed: int = 0) -> FnoParams:
    """Complex Glorot-uniform initialization, deterministic in ``seed``."""
    rng = np.random.default_rng(seed)
    params = FnoParams(config)
    for name, shape in param_shapes(config):
        fan_in, fan_out = _fans(name, shape)
        bound = np.sqrt(6.0 / (fan_in + fan_out)) / np.sqrt(2.0)
        re = rng.uniform(-bound, bound, shape)
        im = rng.uniform(-bound, bound, shape)
        params[name] = re + 1j * im
    return params


def check_grid(config: FnoConfig, grid: TimeGrid):
    if grid.n_points != config.grid_points:
        raise DimensionError(
            f"grid has {grid.n_points} points but the model was built for {config.grid_points}"
        )


def embed_input(s0, grid: TimeGrid) -> np.ndarray:
    """Channels per grid point: ``vec(rho0)`` (constant in time) then ``t / t_max``.

    ``s0`` is a DensityState, a vector, or a batch of vectors ``(B, N^2)``;
    the result has shape ``(n_points, N^2 + 1)`` or ``(B, n_points, N^2 + 1)``.
    """
    v = s0.vec if isinstance(s0, DensityState) else np.asarray(s0, dtype=complex)
    single = v.ndim == 1
    v = np.atleast_2d(v)
    g = grid.n_points
    tau = grid.points / grid.t_max if grid.n_steps else np.zeros(1)
    out = np.empty((v.shape[0], g, v.shape[1] + 1), dtype=complex)
    out[:, :, :-1] = v[:, None, :]
    out[:, :, -1] = tau
    return out[0] if single else out


def dft_time(u: np.ndarray) -> np.ndarray:
    """Forward DFT along the time axis (axis 0 for a grid function, 1 for a batch)."""
    return np.fft.fft(u, axis=-2)


def idft_time(modes: np.ndarray) -> np.ndarray:
    return np.fft.ifft(modes, axis=-2)


def relu(z: np.ndarray) -> np.ndarray:
    return np.maximum(z.real, 0.0) + 1j * np.maximum(z.imag, 0.0)


def _relu_back(g, pre):
    return g.real * (pre.real > 0) + 1j * (g.imag * (pre.imag > 0))


def spectral_conv(modes: np.ndarray, w1: np.ndarray) -> np.ndarray:
    """Per-mode channel mixing of the lowest ``k`` modes, zero above; returns time domain.

    ``modes`` has shape ``(..., G, C)``; only ``modes[..., :k, :]`` is read.
    """
    k = w1.shape[0]
    mixed = np.zeros(modes.shape[:-1] + (w1.shape[2],), dtype=complex)
    mixed[..., :k, :] = np.einsum("...kc,kcd->...kd", modes[..., :k, :], w1)
    return idft_time(mixed)


def fourier_layer(params_l, u: np.ndarray) -> np.ndarray:
    """Apply one Fourier layer; ``params_l = (w1, w2, b)`` and ``u`` is ``(..., G, C)``."""
    w1, w2, b = params_l
    if u.shape[-1] != w2.shape[0]:
        raise DimensionError(f"layer expects {w2.shape[0]} channels, got {u.shape[-1]}")
    return relu(spectral_conv(dft_time(u), w1) + u @ w2 + b)


def _layer_params(params: FnoParams, layer: int):
    p = f"fourier.{layer}."
    return params[p + "w1"], params[p + "w2"], params[p + "b"]


def _forward(params: FnoParams, x: np.ndarray, keep: bool):
    """Batched forward pass on embedded input ``x`` of shape ``(B, G, N^2 + 1)``."""
    cache = [] if keep else None

    def lin(h, w, b):
        return h @ w + b

    pre = lin(x, params["p_in.w0"], params["p_in.b0"])
    h = relu(pre)
    if keep:
        cache.append(("p_in.0", x, pre))
    x1 = h
    h = lin(x1, params["p_in.w1"], params["p_in.b1"])
    if keep:
        cache.append(("p_in.1", x1, None))
    for layer in range(params.config.n_fourier_layers):
        w1, w2, b = _layer_params(params, layer)
        modes = dft_time(h)
        pre = spectral_conv(modes, w1) + h @ w2 + b
        if not np.all(np.isfinite(pre)):
            raise NumericalError(f"non-finite activations in Fourier layer {layer}")
        if keep:
            cache.append((f"fourier.{layer}", h, modes, pre))
        h = relu(pre)
    x2 = h
    pre = lin(x2, params["p_out.w0"], params["p_out.b0"])
    h = relu(pre)
    if keep:
        cache.append(("p_out.0", x2, pre))
    x3 = h
    y = lin(x3, params["p_out.w1"], params["p_out.b1"])
    if keep:
        cache.append(("p_out.1", x3, None))
    if not np.all(np.isfinite(y)):
        raise NumericalError("non-finite activations in the output projection")
    return y, cache


def _backward(params: FnoParams, cache, g_y: np.ndarray) -> FnoParams:
    grads = params.zeros_like()
    g = g_y
    for entry in reversed(cache):
        tag = entry[0]
        if tag.startswith("fourier."):
            _, h, modes, pre = entry
            w1, w2, _b = _layer_params(params, int(tag.split(".")[1]))
            g = _relu_back(g, pre)
            grads[tag + ".b"] += g.sum(axis=(0, 1))
            grads[tag + ".w2"] += np.einsum("bgc,bgd->cd", h.conj(), g)
            k = w1.shape[0]
            g_len = g.shape[1]
            # spectral path: v = ifft(pad(z)), z = modes[:k] . w1, modes = fft(h)
            g_z = np.fft.fft(g, axis=1)[:, :k] / g_len
            grads[tag + ".w1"] += np.einsum("bkc,bkd->kcd", modes[:, :k].conj(), g_z)
            g_modes = np.zeros_like(modes)
            g_modes[:, :k] = np.einsum("bkd,kcd->bkc", g_z, w1.conj())
            g = g @ w2.conj().T + np.fft.ifft(g_modes, axis=1) * g_len
        else:
            _, x, pre = entry
            block, idx = tag.split(".")
            w = params[f"{block}.w{idx}"]
            if pre is not None:
                g = _relu_back(g, pre)
            grads[f"{block}.b{idx}"] += g.sum(axis=(0, 1))
            grads[f"{block}.w{idx}"] += np.einsum("bgi,bgo->io", x.conj(), g)
            g = g @ w.conj().T
    return grads


def forward_batch(params: FnoParams, v0: np.ndarray, grid: TimeGrid) -> np.ndarray:
    """Model states for a batch of initial vectors ``(B, N^2)``; returns ``(B, G, N^2)``."""
    check_grid(params.config, grid)
    v0 = np.atleast_2d(np.asarray(v0, dtype=complex))
    if v0.shape[1] != params.config.state_dim:
        raise DimensionError(f"state length {v0.shape[1]} != model state_dim {params.config.state_dim}")
    y, _ = _forward(params, embed_input(v0, grid), keep=False)
    return y


def forward_with_cache(params: FnoParams, v0: np.ndarray, grid: TimeGrid):
    check_grid(params.config, grid)
    v0 = np.atleast_2d(np.asarray(v0, dtype=complex))
    return _forward(params, embed_input(v0, grid), keep=True)


def backward(params: FnoParams, cache, g_y: np.ndarray) -> FnoParams:
    """Parameter gradients given ``g_y = dL/dRe(y) + 1j dL/dIm(y)`` for the output."""
    return _backward(params, cache, g_y)


def fno_forward(params: FnoParams, s0: DensityState, grid: TimeGrid) -> Trajectory:
    return Trajectory(grid, forward_batch(params, s0.vec[None, :], grid)[0])


def fno_gradient(params: FnoParams, v0: np.ndarray, grid: TimeGrid, loss_fn):
    """Loss and parameter gradients for a batch.

    ``loss_fn(y)`` receives model output ``(B, G, N^2)`` and returns
    ``(loss, g_y)``, the scalar loss and its output gradient.
    """
    y, cache = forward_with_cache(params, v0, grid)
    loss, g_y = loss_fn(y)
    if not np.isfinite(loss):
        raise NumericalError("non-finite loss")
    return backward(params, cache, g_y), float(loss)


def save_checkpoint(params: FnoParams, path, metadata: dict | None = None, extra=None) -> None:
    """Write an NQP1 checkpoint.

    Real and imaginary parts of each tensor are separate float64 arrays. ``extra``
    is an optional mapping of additional named tensors (e.g. optimizer moments).
    """
    arrays, manifest, offset = [], [], 0
    tensors = list(params.items()) + list((extra or {}).items())
    for name, t in tensors:
        t = np.asarray(t)
        for part, values in (("re", t.real), ("im", t.imag)):
            manifest.append({"name": name, "part": part, "shape": list(t.shape), "offset": offset})
            arrays.append(values)
            offset += 8 * t.size
    header = {
        "format": "NQP1",
        "config": asdict(params.config),
        "metadata": {"created_unix": time.time(), **(metadata or {})},
        "n_param_tensors": len(params),
        "arrays": manifest,
    }
    _write_container(path, CHECKPOINT_MAGIC, header, arrays)


def load_checkpoint(path, with_extra: bool = False):
    """Read an NQP1 checkpoint; returns params, or ``(params, extra, header)``."""
    header, payload = _read_container(path, CHECKPOINT_MAGIC)
    config = FnoConfig(**header["config"])
    tensors: dict[str, np.ndarray] = {}
    for entry in header["arrays"]:
        a = _payload_array(payload, entry)
        if entry["part"] == "re":
            tensors[entry["name"]] = a.astype(complex)
        else:
            tensors[entry["name"]] = tensors[entry["name"]] + 1j * a
    names = [e["name"] for e in header["arrays"] if e["part"] == "re"]
    n = header["n_param_tensors"]
    params = FnoParams(config, ((k, tensors[k]) for k in names[:n]))
    expected = dict(param_shapes(config))
    for k, v in params.items():
        if expected.get(k) != v.shape:
            raise ValueError(f"{path}: tensor {k} has shape {v.shape}, config expects {expected.get(k)}")
    if with_extra:
        return params, {k: tensors[k] for k in names[n:]}, header
    return params


def config_digest(config: FnoConfig) -> str:
    return hashlib.sha256(json.dumps(asdict(config), sort_keys=True).encode()).hexdigest()[:16]
