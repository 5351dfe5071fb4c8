"""
Command-line experiment runner.

Usage::

    bsolock <Experiment> [--config FILE] [--seed N] [--out PATH] [--set key=value ...]

Each experiment has a complete default parameter table (``DEFAULTS``).
Values come from the defaults, then the YAML config file, then ``--set``
flags. A run writes a CSV (``#`` header with every resolved parameter,
17 significant digits, LF endings) and ``<out>.manifest.json``; passing the
manifest back as ``--config`` reproduces the CSV byte for byte.
"""
from __future__ import annotations

import argparse
import json
import math
import platform
import sys
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Callable

import numpy as np
import scipy
import yaml

from . import __version__
from .channel import Channel, ChannelModel, audit_transcript
from .dynamics import (
    DriveField,
    Envelope,
    PulseSpec,
    bso_scan,
    closed_form,
    drive_for_end_eta,
    evolve_batch,
    Frame,
    solve_floquet,
    time_reverse,
    integrate_exact,
    StateVector,
)
from .errors import BsoLockError, ConfigError, ParseError, UnknownKey
from .locking import LockController, build_arrays, default_time_scan, lock_loop, run_lock_scan
from .protocol import ProtocolConfig, run_phase_recovery, run_protocol

EXPERIMENTS = ("BsoScan", "SolverCompare", "Reversal", "Teleport", "PhaseRecover", "LockScan", "LockLoop")

_CHANNEL = {"latency": 1.0, "jitter": 0.0, "drop": 0.0}

#: Default parameters per experiment. Angles in radians, rates in units of omega_A.
DEFAULTS: dict[str, dict[str, Any]] = {
    "BsoScan": {"eta": 0.02, "points": 32, "switch_periods": 200.0},
    "SolverCompare": {"eta": 0.02, "phi": 0.37, "points": 201, "n_max": 4, "switch_periods": 200.0},
    "Reversal": {"eta": 0.05, "phi": 0.3, "m_max": 20},
    "Teleport": {"eta": 0.05, "phi": math.pi / 8, "chi": 0.0, "pairs": 100_000, **_CHANNEL},
    "PhaseRecover": {"eta": 0.05, "phi": 0.3, "chi": 0.0, "pairs": 1_000_000, "offset": math.pi / 4, **_CHANNEL},
    "LockScan": {
        "eta": 0.01, "N": 8, "delta": 1e-3, "samples": 10_000, "scan_points": 16,
        "exact": False, "phi": 0.4, "chi": 1.1,
    },
    "LockLoop": {
        "eta": 0.01, "N": 8, "initial_delta": 1e-3, "gain": 0.5, "max_step": math.inf,
        "iterations": 20, "samples": 10_000, "scan_points": 16, "exact": False, "phi": 0.4, "chi": 1.1,
    },
}


@dataclass
class ExperimentConfig:
    experiment: str
    parameters: dict[str, Any]
    seed: int = 0
    output_path: str = ""

    def __post_init__(self):
        if not self.output_path:
            self.output_path = f"{self.experiment}.csv"


def _coerce(key: str, value: Any, default: Any, where: str) -> Any:
    try:
        if isinstance(default, bool):
            if isinstance(value, bool):
                return value
            text = str(value).strip().lower()
            if text in ("true", "1", "yes", "on"):
                return True
            if text in ("false", "0", "no", "off"):
                return False
            raise ValueError(text)
        if isinstance(default, int):
            if isinstance(value, bool) or (isinstance(value, float) and not value.is_integer()):
                raise ValueError(value)
            return int(value) if not isinstance(value, str) else int(value.strip())
        if isinstance(value, bool):
            raise ValueError(value)
        return float(value)
    except (TypeError, ValueError):
        raise ParseError(f"{where}: invalid value {value!r} for key '{key}'") from None


def _load_file(path: str) -> tuple[dict, str | None, int | None]:
    """Parameters, experiment name (manifests only) and seed from a YAML file or manifest."""
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ParseError(f"{path}: {exc.strerror}") from None
    try:
        data = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        mark = getattr(exc, "problem_mark", None)
        line = f" line {mark.line + 1}" if mark is not None else ""
        raise ParseError(f"{path}{line}: {getattr(exc, 'problem', exc)}") from None
    if data is None:
        return {}, None, None
    if not isinstance(data, dict):
        raise ParseError(f"{path}: expected a mapping of key: value")
    if "parameters" in data and "experiment" in data:
        return dict(data["parameters"]), data["experiment"], data.get("seed")
    seed = data.pop("seed", None)
    return data, None, seed


def parse_config(
    experiment: str,
    config_path: str | None = None,
    overrides: list[str] | None = None,
    seed: int | None = None,
    output_path: str | None = None,
) -> ExperimentConfig:
    """Resolve defaults, then the config file, then ``key=value`` overrides.

    Raises:
        UnknownKey: a key is not in the experiment's parameter table.
        ParseError: unreadable file, malformed line or value.
    """
    if experiment not in DEFAULTS:
        raise UnknownKey(f"unknown experiment '{experiment}' (choose from {', '.join(EXPERIMENTS)})")
    table = DEFAULTS[experiment]
    params = dict(table)
    file_seed = None
    if config_path:
        values, name, file_seed = _load_file(config_path)
        if name is not None and name != experiment:
            raise ConfigError(f"{config_path}: manifest is for {name}, not {experiment}")
        for key, value in values.items():
            if key not in table:
                raise UnknownKey(f"{config_path}: unknown key '{key}' for {experiment}")
            params[key] = _coerce(key, value, table[key], config_path)
    for item in overrides or []:
        if "=" not in item:
            raise ParseError(f"--set {item!r}: expected key=value")
        key, value = (s.strip() for s in item.split("=", 1))
        if key not in table:
            raise UnknownKey(f"--set: unknown key '{key}' for {experiment}")
        params[key] = _coerce(key, value, table[key], f"--set {key}")
    if seed is None:
        seed = _coerce("seed", file_seed, 0, config_path or "config") if file_seed is not None else 0
    if not 0 <= seed < 2**64:
        raise ParseError(f"seed {seed} is not an unsigned 64-bit integer")
    return ExperimentConfig(experiment, params, int(seed), output_path or "")


# ---------------------------------------------------------------------------
# Output


def _fmt(x) -> str:
    if isinstance(x, (bool, np.bool_)):
        return "true" if x else "false"
    if isinstance(x, (int, np.integer)):
        return str(int(x))
    return format(float(x), ".17g")


@dataclass
class Table:
    columns: list[str]
    rows: list[list]
    summary: dict[str, Any] = field(default_factory=dict)
    transcript: list | None = None


def write_csv(path: Path, cfg: ExperimentConfig, table: Table) -> None:
    lines = [f"# experiment: {cfg.experiment}", f"# seed: {cfg.seed}", f"# version: {__version__}"]
    lines += [f"# {k}: {_fmt(v)}" for k, v in sorted(cfg.parameters.items())]
    lines += [f"# {k}: {_fmt(v)}" for k, v in table.summary.items()]
    lines.append(",".join(table.columns))
    lines += [",".join(_fmt(v) for v in row) for row in table.rows]
    with open(path, "w", newline="\n") as fh:
        fh.write("\n".join(lines) + "\n")


def write_manifest(path: Path, cfg: ExperimentConfig, outputs: list[str]) -> None:
    manifest = {
        "experiment": cfg.experiment,
        "seed": cfg.seed,
        "parameters": {k: (v if not (isinstance(v, float) and math.isinf(v)) else str(v)) for k, v in cfg.parameters.items()},
        "outputs": outputs,
        "versions": {
            "bsolock": __version__,
            "numpy": np.__version__,
            "scipy": scipy.__version__,
            "python": platform.python_version(),
        },
    }
    with open(path, "w", newline="\n") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
        fh.write("\n")


# ---------------------------------------------------------------------------
# Experiments


def _bso_scan(p, seed) -> Table:
    drive, pulse = drive_for_end_eta(p["eta"], switch_periods=p["switch_periods"])
    phases = np.arange(p["points"]) * math.pi / p["points"]
    res = bso_scan(drive, phases, pulse)
    fit = res.fit
    rows = [[ph, pop, fit.depth, fit.offset] for ph, pop in res]
    return Table(
        ["phi", "excited_population", "fit_amplitude", "fit_offset"], rows,
        {"eta_end": res.eta_end, "fit_phase": fit.phase, "population_amplitude": fit.amplitude},
    )


def solver_comparison(eta: float, phi: float, points: int, n_max: int, switch_periods: float):
    """Exact, Floquet and closed-form amplitudes over a pi pulse ending at ``eta``."""
    drive, pulse = drive_for_end_eta(eta, math.pi, switch_periods=switch_periods, phi=phi)
    times = np.linspace(0.0, pulse.duration, points)
    psi = np.array([[1.0, 0.0]], complex)
    exact = np.empty((points, 2), complex)
    exact[0] = psi[0]
    for k in range(1, points):
        psi = evolve_batch(psi, drive, [phi], times[k - 1], times[k], frame=Frame.LAB)
        exact[k] = psi[0]
    floquet = solve_floquet(drive, 0.0, pulse.duration, n_max=n_max, times=times).reconstruct_lab()
    c0, c1 = closed_form(drive, times)
    closed = np.column_stack([c0, c1])
    return times, drive, exact, floquet, closed


def _solver_compare(p, seed) -> Table:
    times, drive, exact, floquet, closed = solver_comparison(p["eta"], p["phi"], p["points"], p["n_max"], p["switch_periods"])
    cols = ["t", "area"]
    for name in ("exact", "floquet", "closed"):
        cols += [f"{name}_c0_re", f"{name}_c0_im", f"{name}_c1_re", f"{name}_c1_im"]
    cols += ["dev_floquet", "dev_closed"]
    rows = []
    for k, t in enumerate(times):
        row = [t, drive.area(t)]
        for arr in (exact, floquet, closed):
            row += [arr[k, 0].real, arr[k, 0].imag, arr[k, 1].real, arr[k, 1].imag]
        row += [np.max(np.abs(floquet[k] - exact[k])), np.max(np.abs(closed[k] - exact[k]))]
        rows.append(row)
    dev_c = max(r[-1] for r in rows)
    return Table(cols, rows, {"max_dev_floquet": max(r[-2] for r in rows), "max_dev_closed": dev_c, "bound_5eta2": 5 * p["eta"] ** 2})


def reversal_fidelity(eta: float, phi: float, T: float, rwa: bool = False) -> float:
    """Fidelity after forward evolution for ``T`` and phase-flipped evolution for ``T``."""
    drive = DriveField(4.0 * eta, phi=phi, rwa=rwa)
    start = StateVector.ground()
    fwd = integrate_exact(start, drive, 0.0, T)
    back = time_reverse(fwd, drive, T)
    return start.fidelity(back)


def _reversal(p, seed) -> Table:
    rows = []
    for m in range(1, p["m_max"] + 1):
        t_on = m * math.pi
        t_off = (m + 0.5) * math.pi
        rows.append([
            m, t_on, reversal_fidelity(p["eta"], p["phi"], t_on),
            t_off, reversal_fidelity(p["eta"], p["phi"], t_off),
            reversal_fidelity(p["eta"], p["phi"], t_off, rwa=True),
        ])
    return Table(["m", "T_on", "fidelity_on", "T_off", "fidelity_off", "fidelity_rwa"], rows)


def _protocol_config(p, seed, pairs_key="pairs") -> ProtocolConfig:
    return ProtocolConfig(
        alice_field=DriveField(0.01, phi=p["phi"], rwa=True),
        bob_field=DriveField(0.01, phi=p["chi"], rwa=True),
        eta_measure=p["eta"],
        pairs=p[pairs_key],
        seed=seed,
        phase_offset_run2=p.get("offset", math.pi / 4),
    )


def _channel(p, seed) -> Channel:
    return Channel(ChannelModel(p["latency"], p["jitter"], p["drop"], seed))


def _teleport(p, seed) -> Table:
    cfg = _protocol_config(p, seed)
    ch = _channel(p, seed)
    led = run_protocol(cfg, ch)
    first = 0.5 * (1 + 2 * p["eta"] * math.sin(2 * p["phi"]))
    row = [cfg.pairs, led.M, led.L, led.zeta_raw, led.zeta, led.zeta_stderr, led.p_bob, first, led.t_measure]
    cols = ["pairs", "M", "L", "zeta_raw", "zeta", "zeta_stderr", "p_bob_born", "p_first_order", "t_measure"]
    return Table(cols, [row], {"audit_violations": len(audit_transcript(ch.transcript))}, ch.transcript)


def _phase_recover(p, seed) -> Table:
    cfg = _protocol_config(p, seed)
    ch = _channel(p, seed)
    est, a, b = run_phase_recovery(cfg, ch)
    row = [p["phi"] % math.pi, est.sin2phi_hat, est.cos2phi_hat, est.phi_mod_pi, est.stderr, a.M, a.L, b.M, b.L]
    cols = ["phi_true_mod_pi", "sin2phi_hat", "cos2phi_hat", "phi_mod_pi", "stderr", "M_sin", "L_sin", "M_cos", "L_cos"]
    return Table(cols, [row], {"audit_violations": len(audit_transcript(ch.transcript))}, ch.transcript)


def _lock_config(p, seed) -> ProtocolConfig:
    return ProtocolConfig(
        alice_field=DriveField(0.01, phi=p["phi"], rwa=True),
        bob_field=DriveField(0.01, phi=p["chi"], rwa=True),
        eta_measure=p["eta"],
        seed=seed,
    )


def _lock_scan(p, seed) -> Table:
    omega_B = 1.0 + p["delta"]
    arrays = build_arrays(p["N"], 1.0, omega_B)
    prof = run_lock_scan(
        arrays, _lock_config(p, seed), p["samples"], default_time_scan(omega_B, p["scan_points"]),
        exact_born=p["exact"],
    )
    rows = [
        [x, prof.success_probability[i], prof.sample_count[i], prof.fringe_phase[i], prof.fringe_phase_stderr[i]]
        for i, x in enumerate(prof.positions)
    ]
    chi2, dof = prof.flatness_chi2()
    return Table(
        ["x", "success_probability", "sample_count", "fringe_phase", "fringe_phase_stderr"], rows,
        {"delta_omega_hat": prof.delta_omega_hat, "stderr": prof.stderr, "aliased": prof.aliased,
         "flatness_chi2": chi2, "flatness_dof": dof},
    )


def _lock_loop(p, seed) -> Table:
    ch = Channel(ChannelModel(seed=seed))
    ctrl = LockController(gain=p["gain"], max_step=p["max_step"])
    hist = lock_loop(
        ctrl, p["initial_delta"], p["iterations"], _lock_config(p, seed), N=p["N"],
        samples_per_atom=p["samples"], exact_born=p["exact"], time_scan_points=p["scan_points"], channel=ch,
    )
    rows = [
        [k, hist.delta[k], hist.delta_omega_hat[k], hist.stderr[k], hist.omega_B[k + 1], hist.delta[k + 1]]
        for k in hist.iteration
    ]
    return Table(
        ["iteration", "delta_before", "delta_omega_hat", "stderr", "omega_B", "delta_after"], rows,
        {"non_convergence": hist.non_convergence, "aliased": hist.aliased},
        ch.transcript,
    )


RUNNERS: dict[str, Callable[[dict, int], Table]] = {
    "BsoScan": _bso_scan,
    "SolverCompare": _solver_compare,
    "Reversal": _reversal,
    "Teleport": _teleport,
    "PhaseRecover": _phase_recover,
    "LockScan": _lock_scan,
    "LockLoop": _lock_loop,
}


def run_experiment(cfg: ExperimentConfig) -> int:
    """Run one experiment and write its outputs; returns the process exit code."""
    try:
        table = RUNNERS[cfg.experiment](cfg.parameters, cfg.seed)
    except (BsoLockError, ValueError) as exc:
        print(f"error: {cfg.experiment}: {exc}", file=sys.stderr)
        return 1
    out = Path(cfg.output_path)
    out.parent.mkdir(parents=True, exist_ok=True)
    write_csv(out, cfg, table)
    outputs = [out.name]
    if table.transcript is not None:
        tpath = out.with_name(out.name + ".transcript.jsonl")
        with open(tpath, "w", newline="\n") as fh:
            for rec in table.transcript:
                fh.write(rec.to_json() + "\n")
        outputs.append(tpath.name)
    write_manifest(out.with_name(out.name + ".manifest.json"), cfg, outputs)
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="bsolock", description="Bloch-Siegert phase teleportation experiments.")
    sub = parser.add_subparsers(dest="experiment", required=True, metavar="EXPERIMENT")
    for name in EXPERIMENTS:
        keys = ", ".join(f"{k}={_fmt(v)}" for k, v in DEFAULTS[name].items())
        sp = sub.add_parser(name, help=f"defaults: {keys}")
        sp.add_argument("--config", help="YAML file of key: value pairs, or a run manifest")
        sp.add_argument("--seed", type=int, help="unsigned 64-bit seed (default 0)")
        sp.add_argument("--out", help=f"CSV path (default {name}.csv)")
        sp.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", help="override one parameter")
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = parse_config(args.experiment, args.config, args.set, args.seed, args.out)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    return run_experiment(cfg)
