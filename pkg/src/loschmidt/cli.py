"""Reproducible experiment runner.

Commands:
  run <config>                execute a protocol, write echo/LDOS CSVs + manifest
  oracle <config>             exact reference series for the same pipeline
  compare <dir-a> <dir-b>     per-point echo differences between two runs

Identical (config, seed) pairs produce byte-identical CSVs; the manifest
additionally records wall time and shot totals.  Set the thread count of the
BLAS backend (e.g. OPENBLAS_NUM_THREADS) before launching Python; the
LOSCHMIDT_THREADS value is recorded in the manifest for provenance.
"""
from __future__ import annotations

import argparse
import json
import os
import sys
import time

import numpy as np

from . import __version__
from .analysis import default_energy_grid, filter_coefficients, ldos
from .config import ConfigError, ExperimentConfig
from .protocols import AmplitudeLostError, ProtocolResult, run_protocol
from .series import EchoSeries, format_float, read_echo_csv, write_echo_csv

EXIT_SCHEMA = 2
EXIT_SIMULATION = 3


def _write_atomic(path: str, text: str) -> None:
    tmp = path + ".tmp"
    with open(tmp, "w") as fh:
        fh.write(text)
    os.replace(tmp, path)


def _write_ldos_csv(path: str, spectrum) -> None:
    lines = ["E,D,dD"]
    for e, d, dd in zip(spectrum.energies, spectrum.density, spectrum.uncertainty):
        lines.append(f"{format_float(e)},{format_float(d)},{format_float(dd)}")
    _write_atomic(path, "\n".join(lines) + "\n")


def _ldos_outputs(config: ExperimentConfig, series: EchoSeries):
    h = config.model.build()
    spec = config.ldos
    coeffs = filter_coefficients(spec.delta, config.t_max, spec.r_points)
    bound = h.one_norm()
    e_min = spec.e_min if spec.e_min is not None else -bound
    e_max = spec.e_max if spec.e_max is not None else bound
    grid = default_energy_grid(e_min, e_max, spec.delta, spec.n_points)
    return ldos(series, coeffs, grid)


def _run_result_files(config: ExperimentConfig, result: ProtocolResult, out_dir: str, elapsed: float):
    os.makedirs(out_dir, exist_ok=True)
    write_echo_csv_atomic(os.path.join(out_dir, "echo.csv"), result.series)
    outputs = ["echo.csv"]
    if result.raw_series is not None:
        write_echo_csv_atomic(os.path.join(out_dir, "echo_raw.csv"), result.raw_series)
        outputs.append("echo_raw.csv")
    if config.ldos is not None:
        spectrum = _ldos_outputs(config, result.series)
        _write_ldos_csv(os.path.join(out_dir, "ldos.csv"), spectrum)
        outputs.append("ldos.csv")
    manifest = {
        "artifact_version": __version__,
        "resolved_config": config.to_dict(),
        "seed": config.seed,
        "outputs": outputs,
        "wall_time_s": elapsed,
        "threads_env": os.environ.get("LOSCHMIDT_THREADS"),
        "info": _json_safe(result.info),
    }
    _write_atomic(os.path.join(out_dir, "manifest.json"), json.dumps(manifest, indent=2, sort_keys=True) + "\n")


def write_echo_csv_atomic(path: str, series: EchoSeries) -> None:
    tmp = path + ".tmp"
    write_echo_csv(tmp, series)
    os.replace(tmp, path)


def _json_safe(obj):
    if isinstance(obj, dict):
        return {str(k): _json_safe(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_json_safe(v) for v in obj]
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, (np.floating,)):
        return float(obj)
    return obj


def _cmd_run(args) -> int:
    try:
        config = ExperimentConfig.from_file(args.config)
        if args.seed is not None:
            config = config.with_seed(args.seed)
        if args.protocol_override:
            data = config.to_dict()
            data["protocol"] = args.protocol_override
            config = ExperimentConfig.from_dict(data)
    except (ConfigError, OSError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_SCHEMA
    out_dir = args.out or config.output_dir or os.path.splitext(args.config)[0] + ".out"
    t0 = time.time()
    try:
        result = run_protocol(config)
    except (AmplitudeLostError, ValueError) as exc:
        print(f"simulation error: {exc}", file=sys.stderr)
        return EXIT_SIMULATION
    _run_result_files(config, result, out_dir, time.time() - t0)
    print(f"wrote {out_dir} ({len(result.series.entries)} series points)")
    return 0


def _match_rows(a: EchoSeries, b: EchoSeries):
    rows_b = {round(e.t, 9): e for e in b.entries}
    pairs = []
    for ea in a.entries:
        eb = rows_b.get(round(ea.t, 9))
        if eb is not None:
            pairs.append((ea, eb))
    return pairs


def _cmd_compare(args) -> int:
    a = read_echo_csv(os.path.join(args.dir_a, "echo.csv"))
    b = read_echo_csv(os.path.join(args.dir_b, "echo.csv"))
    pairs = _match_rows(a, b)
    if not pairs:
        print("compare error: no overlapping grid points", file=sys.stderr)
        return EXIT_SIMULATION
    d_phi = np.array([ea.phi - eb.phi for ea, eb in pairs])
    d_r = np.array([ea.r - eb.r for ea, eb in pairs])
    sigma = np.array(
        [np.sqrt(ea.dphi**2 + eb.dphi**2) for ea, eb in pairs]
    )
    with np.errstate(divide="ignore", invalid="ignore"):
        normed = np.where(sigma > 0, np.abs(d_phi) / sigma, np.where(np.abs(d_phi) > 0, np.inf, 0.0))
    print(f"overlapping points: {len(pairs)}")
    print(f"max |dphi| = {np.max(np.abs(d_phi)):.6e}  rms = {np.sqrt(np.mean(d_phi**2)):.6e}")
    print(f"max |dr|   = {np.max(np.abs(d_r)):.6e}  rms = {np.sqrt(np.mean(d_r**2)):.6e}")
    finite = normed[np.isfinite(normed)]
    if finite.size:
        print(f"max sigma-normalized dphi = {np.max(finite):.3f}")
    if args.sigma_threshold is not None and finite.size and np.max(finite) > args.sigma_threshold:
        print(f"deviation exceeds {args.sigma_threshold} sigma", file=sys.stderr)
        return 1
    return 0


def _cmd_oracle(args) -> int:
    args.protocol_override = "oracle"
    return _cmd_run(args)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="loschmidt", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p_run = sub.add_parser("run", help="execute the configured protocol")
    p_run.add_argument("config")
    p_run.add_argument("--out", default=None, help="output directory")
    p_run.add_argument("--seed", type=int, default=None, help="override the config seed")
    p_run.set_defaults(func=_cmd_run, protocol_override=None)

    p_orc = sub.add_parser("oracle", help="exact reference run for the same config")
    p_orc.add_argument("config")
    p_orc.add_argument("--out", default=None)
    p_orc.add_argument("--seed", type=int, default=None)
    p_orc.set_defaults(func=_cmd_oracle)

    p_cmp = sub.add_parser("compare", help="per-point differences between two runs")
    p_cmp.add_argument("dir_a")
    p_cmp.add_argument("dir_b")
    p_cmp.add_argument("--sigma-threshold", type=float, default=None)
    p_cmp.set_defaults(func=_cmd_compare)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    return args.func(args)


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
