"""Command-line interface: ``nqprop <subcommand>``.

Failures print one line ``error[CODE]: message`` to stderr and exit nonzero.
"""

from __future__ import annotations

import argparse
import contextlib
import csv
import json
import logging
import sys
import time
from dataclasses import asdict, replace
from pathlib import Path

import numpy as np

from . import __version__, fno, tcf, training
from .config import ConfigError, RunConfig, default_output_dir, file_sha256, write_manifest
from .integrators import NumericalError, generate_dataset, load_dataset, save_dataset
from .lindblad import DensityState, DimensionError, DomainError, HermitianOperator, hopping_operator

EXIT_CODES = {
    "E_CONFIG": 2,
    "E_IO": 3,
    "E_DOMAIN": 4,
    "E_MISMATCH": 5,
    "E_NUMERIC": 6,
}


class CliError(Exception):
    def __init__(self, code: str, message: str):
        super().__init__(message)
        self.code = code


def _load_config(args) -> RunConfig:
    cfg = RunConfig.load(args.config) if args.config else RunConfig()
    if getattr(args, "seed", None) is not None:
        cfg.seed = args.seed
    return cfg


def _out_path(args, cfg, default_name) -> Path:
    if args.out:
        path = Path(args.out)
    else:
        path = default_output_dir(cfg) / default_name
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise CliError("E_IO", f"cannot create {path.parent}: {exc}") from exc
    return path


def _manifest_path(path: Path) -> Path:
    return path.with_name(path.name + ".manifest.json")


def parse_state(spec: str, n: int) -> DensityState:
    """``site:k`` (1-based), ``mixed``, or a JSON file holding an N x N matrix."""
    if spec.startswith("site:"):
        try:
            k = int(spec[5:])
        except ValueError as exc:
            raise CliError("E_CONFIG", f"bad state spec {spec!r}") from exc
        return DensityState.site(n, k)
    if spec == "mixed":
        return DensityState.maximally_mixed(n)
    path = Path(spec)
    if not path.exists():
        raise CliError("E_CONFIG", f"state spec {spec!r} is neither site:k, mixed, nor a file")
    a = np.asarray(json.loads(path.read_text()), dtype=float)
    m = a[..., 0] + 1j * a[..., 1] if a.ndim == 3 else a.astype(complex)
    if m.shape != (n, n):
        raise CliError("E_MISMATCH", f"state matrix has shape {m.shape}, system needs {(n, n)}")
    return DensityState.from_matrix(m)


def parse_operator(spec: str, n: int) -> HermitianOperator:
    if spec == "hopping":
        return hopping_operator(n)
    if spec == "identity":
        return HermitianOperator(np.eye(n))
    path = Path(spec)
    if not path.exists():
        raise CliError("E_CONFIG", f"operator {spec!r} is neither hopping, identity, nor a file")
    return HermitianOperator(np.asarray(json.loads(path.read_text()), dtype=complex))


def _backend(args, cfg):
    system = cfg.build_system()
    grid = cfg.time_grid()
    kind = args.backend or cfg.backend
    params = None
    if kind == "fno":
        if not args.checkpoint:
            raise CliError("E_CONFIG", "--backend fno requires --checkpoint")
        params = fno.load_checkpoint(args.checkpoint)
        if params.config.state_dim != system.dim**2 or params.config.grid_points != grid.n_points:
            raise CliError("E_MISMATCH", "checkpoint does not match the configured system/grid")
    try:
        return system, tcf.make_backend(kind, system.liouvillian(), grid, params)
    except DomainError as exc:
        raise CliError("E_CONFIG", str(exc)) from exc


def _backend_meta(args, backend, cfg):
    meta = {"backend": backend.name, "grid": cfg.grid, "config_sha256": cfg.digest()}
    if backend.name == "fno":
        meta["checkpoint_sha256"] = file_sha256(args.checkpoint)
    return meta


# ---------------------------------------------------------------- commands


def cmd_gen_data(args) -> int:
    started = time.time()
    cfg = _load_config(args)
    if args.n_train is not None:
        cfg.dataset["n_train"] = args.n_train
    if args.n_val is not None:
        cfg.dataset["n_val"] = args.n_val
    grid = cfg.time_grid()
    ds = generate_dataset(cfg.build_system(), grid, cfg.dataset["n_train"], cfg.dataset["n_val"], cfg.seed)
    out = _out_path(args, cfg, "dataset.nqpd")
    save_dataset(ds, out)
    print(
        f"wrote {out}: {ds.n_train} train + {ds.n_val} validation samples, "
        f"{grid.n_points}-point grid on [0, {grid.t_max:g}] fs (dt = {grid.dt:g} fs)"
    )
    write_manifest(_manifest_path(out), cfg, "gen-data", [args.config] if args.config else [], [out], started)
    return 0


def cmd_train(args) -> int:
    started = time.time()
    cfg = _load_config(args)
    overrides = {}
    if args.epochs is not None:
        overrides["epochs"] = args.epochs
    if args.checkpoint_every is not None:
        overrides["checkpoint_every"] = args.checkpoint_every
    tc = replace(cfg.train_config(), **overrides)
    ds = load_dataset(args.dataset)
    grid = cfg.time_grid()
    if ds.grid != grid:
        raise CliError("E_MISMATCH", f"dataset grid {ds.grid} differs from configured grid {grid}")
    fc = cfg.fno_config()
    out_dir = Path(args.out_dir) if args.out_dir else default_output_dir(cfg) / "train"
    out_dir.mkdir(parents=True, exist_ok=True)
    if not tc.checkpoint_every:
        tc = replace(tc, checkpoint_every=max(1, tc.epochs))
    try:
        best, report = training.train(fc, tc, ds, ds.system.liouvillian(), checkpoint_dir=out_dir, resume_from=args.resume)
    except training.TrainingDiverged as exc:
        raise CliError("E_NUMERIC", str(exc)) from exc
    meta = {"train_config": asdict(tc), "best_epoch": report.best_epoch, "dataset_sha256": file_sha256(args.dataset)}
    fno.save_checkpoint(best, out_dir / "best.nqp", metadata=meta)
    state = out_dir / "state.nqp"
    final = fno.load_checkpoint(state) if state.exists() else best
    fno.save_checkpoint(final, out_dir / "final.nqp", metadata=meta)
    report.write_csv(out_dir / "loss.csv")
    report.write_json(out_dir / "loss.json")
    names = ("best.nqp", "final.nqp", "state.nqp", "loss.csv", "loss.json")
    outputs = [out_dir / n for n in names if (out_dir / n).exists()]
    n_done = len(report.epochs)
    val = np.mean(report.validation_errors) if report.validation_errors else float("nan")
    print(f"trained {n_done} epochs; best epoch {report.best_epoch}; mean validation error {val:.4%}")
    inputs = [args.dataset] + ([args.config] if args.config else [])
    write_manifest(out_dir / "manifest.json", cfg, "train", inputs, outputs, started)
    return 0


def cmd_validate(args) -> int:
    started = time.time()
    cfg = _load_config(args)
    params = fno.load_checkpoint(args.checkpoint)
    ds = load_dataset(args.dataset)
    if params.config.grid_points != ds.grid.n_points or params.config.state_dim != ds.system.dim**2:
        raise CliError("E_MISMATCH", "checkpoint does not match the dataset system/grid")
    errs = training.validate(params, ds)
    out = _out_path(args, cfg, "validation.csv")
    with open(out, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["sample", "relative_error"])
        for i, e in enumerate(errs):
            w.writerow([i, f"{e:.17g}"])
    print(f"{len(errs)} samples: mean {errs.mean():.4%}, min {errs.min():.4%}, max {errs.max():.4%}")
    write_manifest(_manifest_path(out), cfg, "validate", [args.checkpoint, args.dataset], [out], started)
    return 0


def cmd_propagate(args) -> int:
    started = time.time()
    cfg = _load_config(args)
    system, backend = _backend(args, cfg)
    s0 = parse_state(args.state, system.dim)
    t, p, residue = tcf.populations(backend, s0, args.windows)
    out = _out_path(args, cfg, "populations.csv")
    tcf.write_populations_csv(out, t, p)
    meta = _backend_meta(args, backend, cfg)
    meta.update(state=args.state, windows=args.windows, imag_residue=residue)
    tcf.write_sidecar(out.with_suffix(".json"), meta)
    print(f"wrote {out}: {len(t)} rows, max |sum p - 1| = {np.max(np.abs(p.sum(axis=1) - 1)):.3g}")
    write_manifest(_manifest_path(out), cfg, "propagate", [], [out], started)
    return 0


def cmd_tcf(args) -> int:
    started = time.time()
    cfg = _load_config(args)
    system, backend = _backend(args, cfg)
    s0 = parse_state(args.state, system.dim)
    x = parse_operator(args.operator, system.dim)
    t0 = time.perf_counter()
    if args.order == 1:
        result = tcf.tcf_first_order(backend, x, s0, args.windows, args.stride)
    else:
        t2w = args.t2_windows if args.t2_windows is not None else args.windows
        result = tcf.tcf_second_order(backend, x, s0, args.windows, t2w, args.stride, args.stride)
    seconds = time.perf_counter() - t0
    out = _out_path(args, cfg, f"tcf{args.order}.csv")
    tcf.write_tcf_csv(out, result)
    meta = _backend_meta(args, backend, cfg)
    meta.update(
        order=args.order,
        state=args.state,
        operator=args.operator,
        t1_points=len(result.t1),
        t2_points=None if result.t2 is None else len(result.t2),
        stride=args.stride,
        imag_residue=result.imag_residue,
    )
    tcf.write_sidecar(out.with_suffix(".json"), meta)
    print(f"wrote {out}: order {args.order}, {result.values.size} values, {backend.name} took {seconds:.2f} s")
    write_manifest(_manifest_path(out), cfg, "tcf", [], [out], started)
    return 0


def cmd_spectrum(args) -> int:
    started = time.time()
    cfg = _load_config(args)
    data = tcf.read_tcf_csv(args.tcf)
    spec = tcf.spectrum(data, normalize=args.normalize)
    out = _out_path(args, cfg, f"spectrum{data.order}.csv")
    tcf.write_spectrum_csv(out, spec)
    print(f"wrote {out}: {spec.intensity.size} values")
    write_manifest(_manifest_path(out), cfg, "spectrum", [args.tcf], [out], started)
    return 0


def cmd_info(args) -> int:
    cfg = _load_config(args)
    if args.default_config:
        sys.stdout.write(RunConfig().dumps())
        return 0
    if args.checkpoint:
        params, _extra, header = fno.load_checkpoint(args.checkpoint, with_extra=True)
        print(json.dumps({"config": header["config"], "metadata": header["metadata"],
                          "parameters": params.flat_size()}, indent=1, default=str))
        return 0
    if args.dataset:
        ds = load_dataset(args.dataset)
        print(f"{args.dataset}: system {ds.system.name} (N={ds.system.dim}), "
              f"{ds.n_train} train / {ds.n_val} validation, grid {ds.grid}, seed {ds.seed}")
        return 0
    system = cfg.build_system()
    grid = cfg.time_grid()
    fc = cfg.fno_config()
    n_params = sum(int(np.prod(s)) for _, s in fno.param_shapes(fc))
    print(f"nqprop {__version__}")
    print(f"system: {system.name}, N = {system.dim}, dephasing rates {list(system.dephasing_rates)} cm^-1")
    print(f"grid: {grid.n_points} points on [0, {grid.t_max:g}] fs, dt = {grid.dt:g} fs")
    print(f"model: {fc.n_fourier_layers} Fourier layers, {fc.modes} modes, {fc.hidden_channels} channels, "
          f"{n_params} complex parameters")
    return 0


# ---------------------------------------------------------------- parser


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="nqprop", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=f"nqprop {__version__}")
    p.add_argument("--threads", type=int, default=None, help="cap BLAS worker threads")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, out=True):
        sp.add_argument("--config", help="run configuration JSON (defaults to the FMO recipe)")
        sp.add_argument("--seed", type=int, default=None)
        if out:
            sp.add_argument("--out", help="output file (default: output dir / standard name)")

    sp = sub.add_parser("gen-data", help="sample initial states and write reference trajectories")
    common(sp)
    sp.add_argument("--n-train", type=int)
    sp.add_argument("--n-val", type=int)
    sp.set_defaults(func=cmd_gen_data)

    sp = sub.add_parser("train", help="train the neural propagator")
    common(sp, out=False)
    sp.add_argument("--dataset", required=True)
    sp.add_argument("--out-dir")
    sp.add_argument("--epochs", type=int)
    sp.add_argument("--checkpoint-every", type=int)
    sp.add_argument("--resume", help="training state file (state.nqp) to continue from")
    sp.set_defaults(func=cmd_train)

    sp = sub.add_parser("validate", help="per-sample validation error of a checkpoint")
    common(sp)
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--dataset", required=True)
    sp.set_defaults(func=cmd_validate)

    def backend_args(sp):
        sp.add_argument("--backend", choices=("rk4", "expm", "fno"))
        sp.add_argument("--checkpoint", help="NQP1 checkpoint for the fno backend")
        sp.add_argument("--state", default="site:1", help="site:k, mixed, or a JSON matrix file")
        sp.add_argument("--windows", type=int, default=50, help="number of t_max windows")

    sp = sub.add_parser("propagate", help="site populations over many windows")
    common(sp)
    backend_args(sp)
    sp.set_defaults(func=cmd_propagate)

    sp = sub.add_parser("tcf", help="first- or second-order time-correlation function")
    common(sp)
    backend_args(sp)
    sp.add_argument("--order", type=int, choices=(1, 2), default=1)
    sp.add_argument("--operator", default="hopping", help="hopping, identity, or a JSON matrix file")
    sp.add_argument("--t2-windows", type=int)
    sp.add_argument("--stride", type=int, default=1, help="keep every stride-th grid time")
    sp.set_defaults(func=cmd_tcf)

    sp = sub.add_parser("spectrum", help="Fourier spectrum of a TCF CSV")
    common(sp)
    sp.add_argument("--tcf", required=True)
    sp.add_argument("--normalize", action="store_true")
    sp.set_defaults(func=cmd_spectrum)

    sp = sub.add_parser("info", help="describe the configuration, a checkpoint, or a dataset")
    common(sp, out=False)
    sp.add_argument("--default-config", action="store_true", help="print the default config JSON")
    sp.add_argument("--checkpoint")
    sp.add_argument("--dataset")
    sp.set_defaults(func=cmd_info)
    return p


def _thread_limit(n):
    if n is None:
        return contextlib.nullcontext()
    from threadpoolctl import threadpool_limits

    return threadpool_limits(limits=n)


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        with _thread_limit(args.threads):
            return args.func(args)
    except CliError as exc:
        code = exc.code
        msg = str(exc)
    except ConfigError as exc:
        code, msg = "E_CONFIG", str(exc)
    except (DimensionError,) as exc:
        code, msg = "E_MISMATCH", str(exc)
    except DomainError as exc:
        code, msg = "E_DOMAIN", str(exc)
    except NumericalError as exc:
        code, msg = "E_NUMERIC", str(exc)
    except (OSError, ValueError) as exc:
        code, msg = "E_IO", str(exc)
    print(f"error[{code}]: {' '.join(msg.split())}", file=sys.stderr)
    return EXIT_CODES[code]


if __name__ == "__main__":
    sys.exit(main())
