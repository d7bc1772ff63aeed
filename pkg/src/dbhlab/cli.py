"""Batch runner: JSON configs in, CSV tables, a JSON manifest and gnuplot
data files out.

Energies in a config are given either as U_mhz (linear frequency in MHz)
or as ratios to U; times are in ns. Conversion to rad/ns happens once, in
:meth:`ExperimentConfig.resolve`.
"""

from __future__ import annotations

import argparse
import dataclasses
import hashlib
import json
import logging
import math
import os
import sys
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import __version__
from .errors import DomainError
from .lattice import LatticeSpec, sample_disorder, sector_dimension
from .units import mhz_to_rad_per_ns, rad_per_ns_to_mhz, U_DEVICE_MHZ

KINDS = ("phase-grid", "compressibility", "bragg", "tomography-bench", "meanfield", "sw-derive")
OUT_ENV = "DBHLAB_OUT"
DENSE_CAP = 2000
TOTAL_CAP = 500_000


class ConfigError(ValueError):
    def __init__(self, field_name: str, message: str):
        super().__init__(f"{field_name}: {message}")
        self.field = field_name


@dataclass
class ExperimentConfig:
    kind: str
    nx: int = 4
    ny: int = 1
    ntotal: int | None = None
    nmax: int = 2
    U_mhz: float = U_DEVICE_MHZ
    J_over_U: list = field(default_factory=list)
    W_over_U: list = field(default_factory=lambda: [0.0])
    seeds: list | None = None
    n_seeds: int = 1
    master_seed: int = 0
    state: str = "ground"  # or "prepared"
    t_ramp: float = 100.0
    t_resonance: float = 5.0
    t_hold: float = 10.0
    t_field: float = 250.0
    protocols: list = field(default_factory=lambda: ["FC", "ZFC"])
    dmu_over_U: float | None = None
    modes: list = field(default_factory=lambda: [[1, 0]])
    omega_over_U: list = field(default_factory=list)
    drive_amp_over_U: float = 0.005
    drive_duration: float = 250.0
    bragg_method: str = "driven"  # or "linear"
    eps_over_U: float = 0.02
    thetas: list = field(default_factory=lambda: [0.0, math.pi / 8, math.pi / 4, 3 * math.pi / 8, math.pi / 2])
    shots: int = 0
    gammas: list = field(default_factory=list)
    k_points: int = 41
    device: dict = field(default_factory=dict)
    kmax: list = field(default_factory=lambda: [3, 4, 5])
    floor_khz: float = 50.0
    dense_cap: int = DENSE_CAP
    total_cap: int = TOTAL_CAP

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        if "config" in d and "kind" not in d:  # a manifest
            d = d["config"]
        names = {f.name for f in dataclasses.fields(cls)}
        unknown = sorted(set(d) - names)
        if unknown:
            raise ConfigError(unknown[0], "unknown field")
        if "kind" not in d:
            raise ConfigError("kind", "missing")
        return cls(**d)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, indent=1)

    @property
    def digest(self) -> str:
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode()).hexdigest()

    @property
    def lattice(self) -> LatticeSpec:
        return LatticeSpec(self.nx, self.ny)

    @property
    def particles(self) -> int:
        return self.nx * self.ny if self.ntotal is None else self.ntotal

    def seed_list(self) -> list:
        if self.seeds is not None:
            return [int(s) for s in self.seeds]
        ss = np.random.SeedSequence(int(self.master_seed))
        return [int(x) for x in ss.generate_state(self.n_seeds, dtype=np.uint64)]

    def check(self):
        if self.kind not in KINDS:
            raise ConfigError("kind", f"must be one of {', '.join(KINDS)}")
        if self.nx < 1 or self.ny < 1:
            raise ConfigError("nx/ny", "lattice dimensions must be positive")
        if self.nmax < 1:
            raise ConfigError("nmax", "must be at least 1")
        if self.U_mhz <= 0:
            raise ConfigError("U_mhz", "must be positive")
        if self.ntotal is not None and not 0 <= self.ntotal <= self.nx * self.ny * self.nmax:
            raise ConfigError("ntotal", "outside [0, nsites * nmax]")
        lattice_kinds = ("phase-grid", "compressibility", "bragg")
        if self.kind in lattice_kinds or (self.kind == "meanfield" and not self.gammas):
            if not self.J_over_U:
                raise ConfigError("J_over_U", "empty J list")
        for name in ("J_over_U", "W_over_U", "gammas"):
            if any(float(v) < 0 for v in getattr(self, name)):
                raise ConfigError(name, "values must be non-negative")
        if self.kind in lattice_kinds and not self.W_over_U:
            raise ConfigError("W_over_U", "empty W list")
        if self.seeds is None and self.n_seeds < 1:
            raise ConfigError("n_seeds", "must be at least 1")
        if self.state not in ("ground", "prepared"):
            raise ConfigError("state", "must be 'ground' or 'prepared'")
        for name in ("t_ramp", "t_resonance", "t_hold", "t_field", "drive_duration"):
            if getattr(self, name) < 0:
                raise ConfigError(name, "times must be non-negative")
        if self.kind == "compressibility":
            bad = [p for p in self.protocols if str(p).upper() not in ("FC", "ZFC")]
            if bad or not self.protocols:
                raise ConfigError("protocols", "use FC and/or ZFC")
            if self.dmu_over_U is not None and self.dmu_over_U <= 0:
                raise ConfigError("dmu_over_U", "must be positive")
        if self.kind == "bragg":
            if not self.omega_over_U:
                raise ConfigError("omega_over_U", "empty frequency grid")
            if any(b <= a for a, b in zip(self.omega_over_U, self.omega_over_U[1:])):
                raise ConfigError("omega_over_U", "must be strictly increasing")
            if self.bragg_method not in ("driven", "linear"):
                raise ConfigError("bragg_method", "must be 'driven' or 'linear'")
            for m in self.modes:
                if len(m) != 2 or (m[0] == 0 and m[1] == 0) or min(m) < 0:
                    raise ConfigError("modes", f"bad mode {m}")
        if self.shots < 0:
            raise ConfigError("shots", "must be non-negative")
        if self.kind == "sw-derive":
            if not self.device:
                raise ConfigError("device", "missing device description")
            if not self.kmax or min(self.kmax) < 1:
                raise ConfigError("kmax", "need positive cluster sizes")

    def resolve(self) -> dict:
        """Internal-unit parameters (rad/ns, ns)."""
        U = mhz_to_rad_per_ns(self.U_mhz)
        plan = {
            "U": U,
            "J": [U * float(j) for j in self.J_over_U],
            "W": [U * float(w) for w in self.W_over_U],
            "dmu": None if self.dmu_over_U is None else U * self.dmu_over_U,
            "omega": [U * float(w) for w in self.omega_over_U],
            "drive_amp": U * self.drive_amp_over_U,
            "eps": U * self.eps_over_U,
        }
        if self.device:
            plan["device"] = _device_from_config(self.device)
        return plan


def _device_from_config(d: dict):
    from .devicemodel import chain_device

    try:
        wq = [mhz_to_rad_per_ns(x) for x in np.atleast_1d(d["omega_q_mhz"])]
        wc = [mhz_to_rad_per_ns(x) for x in np.atleast_1d(d["omega_c_mhz"])]
        return chain_device(
            int(d["nqudits"]),
            wq if len(wq) > 1 else wq[0],
            mhz_to_rad_per_ns(d["eta_q_mhz"]),
            wc if len(wc) > 1 else wc[0],
            mhz_to_rad_per_ns(d["eta_c_mhz"]),
            float(d["k_qc"]),
            float(d.get("k_qq", 0.0)),
            float(d.get("k_cc", 0.0)),
        )
    except KeyError as e:
        raise ConfigError(f"device.{e.args[0]}", "missing") from None
    except DomainError as e:
        raise ConfigError("device", str(e)) from None


# ---------------------------------------------------------------------------
# Validation


def validate(cfg: ExperimentConfig) -> dict:
    """Dimension and memory estimate; ``accepted`` is False above the caps."""
    cfg.check()
    report = {"kind": cfg.kind, "accepted": True, "reasons": []}
    if cfg.kind in ("phase-grid", "compressibility", "bragg"):
        ns = cfg.nx * cfg.ny
        dim = sector_dimension(ns, cfg.particles, cfg.nmax)
        nbonds = len(cfg.lattice.adjacency)
        dense = dim <= cfg.dense_cap
        # sparse H (complex value + int index per nonzero) plus ~30 work vectors
        sparse_bytes = dim * (2 * nbonds + 1) * 20 + 30 * 16 * dim
        report.update(
            dimension=dim,
            solver="dense" if dense else "lanczos",
            memory_bytes=(8 * dim * dim if dense else sparse_bytes),
        )
        if dim > cfg.total_cap:
            report["accepted"] = False
            report["reasons"].append(f"sector dimension {dim} exceeds the cap {cfg.total_cap}")
    return report


# ---------------------------------------------------------------------------
# Tasks (top-level so they can be sent to worker processes)


def _model(cfg_d, U):
    from .model import BoseHubbardModel

    cfg = ExperimentConfig.from_dict(cfg_d)
    return BoseHubbardModel(cfg.lattice, cfg.particles, cfg.nmax, U), cfg


def task_phase_point(cfg_d, plan, J, W, seed):
    from .dynamics import adiabatic_prepare
    from .spectra import (
        condensate_fraction,
        correlator_profile,
        doublon_fraction,
        energy_decomposition,
        entanglement_entropy,
        ipr,
        solve_low_spectrum,
        spdm,
    )

    model, cfg = _model(cfg_d, plan["U"])
    U = plan["U"]
    mu = sample_disorder(W, 0.0, model.lattice.nsites, seed).mu
    if cfg.state == "prepared":
        psi = adiabatic_prepare(model, J, mu, cfg.t_ramp, cfg.t_resonance, cfg.t_hold).state
    else:
        psi = solve_low_spectrum(model.hamiltonian(J, mu), 1).ground_state
    C = spdm(psi, model.basis)
    e = energy_decomposition(psi, model.terms(J, mu), model.basis)
    return {
        "row": [
            J / U,
            W / U,
            seed,
            doublon_fraction(psi, model.basis),
            condensate_fraction(C, model.ntotal).fraction,
            entanglement_entropy(psi, model.basis, lattice=model.lattice),
            ipr(psi),
            e.K / U,
            e.V_int / U,
            e.V_delta / U,
        ],
        "profile": correlator_profile(C, model.lattice).tolist(),
    }


def task_kappa(cfg_d, plan, J, W, seed, protocol):
    from .probes import TiltSpec, compressibility_run, default_tilt

    model, cfg = _model(cfg_d, plan["U"])
    U = plan["U"]
    tilt = TiltSpec(plan["dmu"] if plan["dmu"] is not None else default_tilt(U))
    mu = sample_disorder(W, 0.0, model.lattice.nsites, seed).mu
    r = compressibility_run(
        protocol, model, J, mu, tilt, t_ramp=cfg.t_ramp, t_field=cfg.t_field, t_resonance=cfg.t_resonance, t_hold=cfg.t_hold
    )
    return {"row": [J / U, W / U, protocol, seed, r.kappa]}


def _bragg_state(model, cfg, J, mu):
    from .dynamics import adiabatic_prepare
    from .spectra import solve_low_spectrum

    if cfg.state == "prepared":
        return adiabatic_prepare(model, J, mu, cfg.t_ramp, cfg.t_resonance, cfg.t_hold).state
    return solve_low_spectrum(model.hamiltonian(J, mu), 1).ground_state


def task_bragg(cfg_d, plan, J, W, seed, p, q):
    """One susceptibility curve (all frequencies of one mode share the
    undriven reference run)."""
    from .dynamics import PropagatorConfig
    from .probes import driven_sweep, find_resonance, linear_response_chi, mode_label, mode_pattern
    from .spectra import solve_low_spectrum

    model, cfg = _model(cfg_d, plan["U"])
    U = plan["U"]
    mu = sample_disorder(W, 0.0, model.lattice.nsites, seed).mu
    omegas = np.array(plan["omega"])
    if cfg.bragg_method == "linear":
        eig = solve_low_spectrum(model.hamiltonian(J, mu), model.dim)
        curve = linear_response_chi(eig, model.occ, mode_pattern(model.lattice, p, q), omegas, plan["eps"])
    else:
        psi = _bragg_state(model, cfg, J, mu)
        curve = driven_sweep(
            model, psi, J, mu, omegas, plan["drive_amp"], p, q, cfg.drive_duration, PropagatorConfig(method="cf4")
        )
    res = find_resonance(curve)
    lab = mode_label(model.lattice, p, q)
    k = math.hypot(lab.kx, lab.ky)
    k_alt = math.hypot(lab.kx_main, lab.ky_main)
    rows = []
    for w, c in zip(curve.omega, curve.chi):
        flag = int(res.found and res.bracket and res.bracket[0] <= w <= res.bracket[1])
        rows.append([J / U, W / U, seed, p, q, k, k_alt, w / U, c.real * U, c.imag * U, flag])
    return {"rows": rows, "resonance": res.omega / U if res.found else None}


def task_tomography(cfg_d, plan, theta, seed):
    from .tomography import benchmark_circuit, measure_correlator, predicted_c01, two_qutrit_basis

    cfg = ExperimentConfig.from_dict(cfg_d)
    est = measure_correlator(benchmark_circuit(theta), two_qutrit_basis(), 0, 1, shots=cfg.shots, seed=seed)
    pred = abs(predicted_c01(theta))
    return {"row": [theta, est.abs_C, est.abs_C_moduli, pred, abs(est.abs_C - pred)]}


def task_meanfield(cfg_d, plan, gamma):
    from .meanfield import dispersion_overlay, point_from_gamma, speed_of_sound

    cfg = ExperimentConfig.from_dict(cfg_d)
    pt = point_from_gamma(gamma, 1.0)
    cs = speed_of_sound(pt) if gamma >= 1 else float("nan")
    ks = np.linspace(0.0, math.pi, cfg.k_points)
    disp = dispersion_overlay(ks, 1.0, gamma).tolist() if gamma >= 1 else [float("nan")] * len(ks)
    return {
        "row": [gamma, pt.J, pt.phi, pt.psi, pt.mu, pt.omega0, cs],
        "dispersion": list(zip(ks.tolist(), disp)),
    }


# ---------------------------------------------------------------------------
# Orchestration


def _fmt(v) -> str:
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    return str(v)


def write_csv(path: Path, header: list, units: str, rows: list):
    with open(path, "w") as f:
        f.write(f"# {units}\n")
        f.write(",".join(header) + "\n")
        for r in rows:
            f.write(",".join(_fmt(v) for v in r) + "\n")


def _sha256(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def _execute(tasks: list, threads: int) -> list:
    """Run (key, fn, args) tasks; returns (key, result | None, error, seconds)
    sorted by key regardless of completion order."""

    out = []
    if threads <= 1:
        for key, fn, args in tasks:
            r, err, dt = _timed_remote(fn, args)
            out.append((key, r, err, dt))
    else:
        with ProcessPoolExecutor(max_workers=threads) as pool:
            futs = [(key, pool.submit(_timed_remote, fn, args)) for key, fn, args in tasks]
            for key, fut in futs:
                r, err, dt = fut.result()
                out.append((key, r, err, dt))
    return sorted(out, key=lambda x: x[0])


def _timed_remote(fn, args):
    t = time.perf_counter()
    try:
        return fn(*args), None, time.perf_counter() - t
    except Exception as e:
        return None, f"{type(e).__name__}: {e}", time.perf_counter() - t


def run(cfg: ExperimentConfig, out_dir: Path, threads: int = 1) -> dict:
    """Run one experiment; returns the manifest (also written to disk)."""
    cfg.check()
    rep = validate(cfg)
    if not rep["accepted"]:
        raise ConfigError("lattice", "; ".join(rep["reasons"]))
    out_dir.mkdir(parents=True, exist_ok=True)
    plan = cfg.resolve()
    cfg_d = cfg.to_dict()
    seeds = cfg.seed_list()
    t0 = time.perf_counter()
    files = {}
    extra = {}
    if cfg.kind == "phase-grid":
        tasks = [
            ((a, b, s), task_phase_point, (cfg_d, _plain(plan), J, W, seed))
            for a, J in enumerate(plan["J"])
            for b, W in enumerate(plan["W"])
            for s, seed in enumerate(seeds)
        ]
        results = _execute(tasks, threads)
        ok = [(k, r) for k, r, e, _ in results if r is not None]
        header = ["J", "W", "seed", "doublon_fraction", "condensate_fraction", "entropy", "ipr", "energy_K", "energy_Vint", "energy_Vdelta"]
        files["phase_grid.csv"] = (header, "J, W and energies in units of U; entropy in nats", [r["row"] for _, r in ok])
        extra["plot"] = emit_plot_data({"kind": "phase-grid", "results": ok, "cfg": cfg}, out_dir)
    elif cfg.kind == "compressibility":
        tasks = [
            ((a, b, s, p), task_kappa, (cfg_d, _plain(plan), J, W, seed, proto.upper()))
            for a, J in enumerate(plan["J"])
            for b, W in enumerate(plan["W"])
            for s, seed in enumerate(seeds)
            for p, proto in enumerate(cfg.protocols)
        ]
        results = _execute(tasks, threads)
        ok = [(k, r) for k, r, e, _ in results if r is not None]
        rows = [r["row"] for _, r in ok]
        files["compressibility.csv"] = (["J", "W", "protocol", "seed", "kappa"], "J, W in units of U; kappa dimensionless", rows)
        files["kappa_delta.csv"] = (
            ["J", "W", "kappa_FC", "kappa_ZFC", "delta_kappa"],
            "seed-averaged; delta_kappa = kappa_FC - kappa_ZFC",
            _delta_table(rows),
        )
        extra["plot"] = emit_plot_data({"kind": "compressibility", "rows": rows}, out_dir)
    elif cfg.kind == "bragg":
        tasks = [
            ((a, b, s, m), task_bragg, (cfg_d, _plain(plan), J, W, seed, int(p), int(q)))
            for a, J in enumerate(plan["J"])
            for b, W in enumerate(plan["W"])
            for s, seed in enumerate(seeds)
            for m, (p, q) in enumerate(cfg.modes)
        ]
        results = _execute(tasks, threads)
        ok = [(k, r) for k, r, e, _ in results if r is not None]
        rows = [row for _, r in ok for row in r["rows"]]
        files["bragg.csv"] = (
            ["J", "W", "seed", "p", "q", "k", "k_alt", "omega", "re_chi", "im_chi", "resonance"],
            "J, W, omega in units of U; chi in units of 1/U; k = pi p/L and k_alt = 2 pi p/L in rad per site",
            rows,
        )
        extra["resonances"] = [[*k, r["resonance"]] for k, r in ok]
        extra["plot"] = emit_plot_data({"kind": "bragg", "rows": rows}, out_dir)
    elif cfg.kind == "tomography-bench":
        tasks = [((a,), task_tomography, (cfg_d, {}, float(th), seeds[0])) for a, th in enumerate(cfg.thetas)]
        results = _execute(tasks, threads)
        ok = [(k, r) for k, r, e, _ in results if r is not None]
        files["tomography_bench.csv"] = (
            ["theta", "abs_C01", "abs_C01_moduli", "predicted", "abs_error"],
            f"theta in rad; shots={cfg.shots}",
            [r["row"] for _, r in ok],
        )
        extra["plot"] = emit_plot_data({"kind": "tomography-bench", "rows": [r["row"] for _, r in ok]}, out_dir)
    elif cfg.kind == "meanfield":
        from .meanfield import ALPHA_C

        gammas = cfg.gammas or [4.0 * j / ALPHA_C for j in cfg.J_over_U]
        tasks = [((a,), task_meanfield, (cfg_d, {}, float(g))) for a, g in enumerate(gammas)]
        results = _execute(tasks, threads)
        ok = [(k, r) for k, r, e, _ in results if r is not None]
        files["meanfield.csv"] = (
            ["gamma", "J", "phi", "psi", "mu", "omega0", "c_s"],
            "energies in units of U; c_s in U per inverse lattice spacing",
            [r["row"] for _, r in ok],
        )
        extra["plot"] = emit_plot_data({"kind": "meanfield", "results": ok}, out_dir)
    else:
        from .devicemodel import EXPORT_FLOOR, convergence_sweep, export_extended_bh, truncation_sensitivity
        from .units import khz_to_rad_per_ns

        device = plan["device"]
        t = time.perf_counter()
        err = None
        rows = []
        try:
            ks = sorted(min(k, device.nnodes) for k in set(cfg.kmax))
            ks = sorted(set(ks))
            res, deltas = convergence_sweep(device, ks, method="reduced")
            report = export_extended_bh(
                res[ks[-1]], device, floor=khz_to_rad_per_ns(cfg.floor_khz) if cfg.floor_khz else EXPORT_FLOOR,
                convergence=deltas,
            )
            for cat, entries in report.terms.items():
                for e in entries:
                    rows.append([cat, "-".join(map(str, e.sites)), e.orientation or "-", rad_per_ns_to_mhz(e.value)])
            extra["convergence_khz"] = {str(k): 1e3 * rad_per_ns_to_mhz(v) for k, v in deltas.items()}
            extra["residual_count"] = len(report.residual)
            block = device.subdevice(range(min(device.nnodes, 3)))
            extra["truncation_khz"] = {k: 1e3 * rad_per_ns_to_mhz(v) for k, v in truncation_sensitivity(block).items()}
        except Exception as e:
            err = f"{type(e).__name__}: {e}"
        results = [(("device",), None if err else True, err, time.perf_counter() - t)]
        files["effective_terms.csv"] = (["category", "sites", "orientation", "value_mhz"], "values in MHz (linear frequency); mu in the frame rotating at the mean qudit frequency", rows)
    index = {}
    for name, (header, units, rows) in files.items():
        path = out_dir / name
        write_csv(path, header, units, rows)
        index[name] = _sha256(path)
    for name in extra.get("plot", []):
        index[name] = _sha256(out_dir / name)
    manifest = {
        "config": cfg_d,
        "config_sha256": cfg.digest,
        "version": __version__,
        "seeds": seeds,
        "tasks": [{"key": list(k), "seconds": dt, "error": e} for k, _, e, dt in results],
        "failures": [{"key": list(k), "error": e} for k, _, e, _ in results if e],
        "files": index,
        "wall_seconds": time.perf_counter() - t0,
    }
    manifest.update({k: v for k, v in extra.items() if k != "plot"})
    (out_dir / "manifest.json").write_text(json.dumps(manifest, indent=1, default=_json_default))
    return manifest


def _plain(plan: dict) -> dict:
    return {k: v for k, v in plan.items() if k != "device"}


def _json_default(o):
    if isinstance(o, (np.integer,)):
        return int(o)
    if isinstance(o, (np.floating,)):
        return float(o)
    raise TypeError(type(o))


def _delta_table(rows):
    acc = {}
    for J, W, proto, _, kappa in rows:
        acc.setdefault((J, W), {}).setdefault(proto, []).append(kappa)
    out = []
    for (J, W), d in sorted(acc.items()):
        fc = float(np.mean(d["FC"])) if "FC" in d else float("nan")
        zfc = float(np.mean(d["ZFC"])) if "ZFC" in d else float("nan")
        out.append([J, W, fc, zfc, fc - zfc])
    return out


# ---------------------------------------------------------------------------
# Plot data


def _write_dat(path: Path, header: str, rows):
    with open(path, "w") as f:
        for line in header.strip().splitlines():
            f.write(f"# {line}\n")
        for r in rows:
            if r is None:
                f.write("\n")  # gnuplot block separator
            else:
                f.write(" ".join(_fmt(v) for v in r) + "\n")


def emit_plot_data(results: dict, out_dir: Path) -> list:
    """Whitespace-delimited gnuplot files, one per panel; returns the names."""
    kind = results["kind"]
    names = []
    if kind == "phase-grid":
        acc = {}
        prof = {}
        for (a, b, _), r in results["results"]:
            row = r["row"]
            acc.setdefault((row[0], row[1]), []).append((row[3], row[4], row[5]))
            prof.setdefault((row[0], row[1]), []).append(r["profile"])
        hm = [[J, W, *np.mean(v, axis=0)] for (J, W), v in sorted(acc.items())]
        _write_dat(out_dir / "heatmap.dat", "phase-grid heatmap\ncolumns: J/U W/U doublon_fraction condensate_fraction entropy(nats)", hm)
        rows = []
        for (J, W), ps in sorted(prof.items()):
            m = np.mean(ps, axis=0)
            rows.extend([J, W, d, m[d]] for d in range(len(m)))
            rows.append(None)
        _write_dat(out_dir / "correlator_decay.dat", "seed-averaged |<a_i^dag a_j>| vs Manhattan distance\ncolumns: J/U W/U distance mean_abs_C", rows)
        names = ["heatmap.dat", "correlator_decay.dat"]
    elif kind == "compressibility":
        for proto in ("FC", "ZFC"):
            acc = {}
            for J, W, p, _, k in results["rows"]:
                if p == proto:
                    acc.setdefault((J, W), []).append(k)
            if acc:
                _write_dat(
                    out_dir / f"kappa_{proto}.dat",
                    f"{proto} compressibility map\ncolumns: J/U W/U mean_kappa",
                    [[J, W, float(np.mean(v))] for (J, W), v in sorted(acc.items())],
                )
                names.append(f"kappa_{proto}.dat")
        delta = _delta_table(results["rows"])
        _write_dat(out_dir / "kappa_delta.dat", "FC - ZFC compressibility\ncolumns: J/U W/U delta_kappa", [[r[0], r[1], r[4]] for r in delta])
        names.append("kappa_delta.dat")
    elif kind == "bragg":
        rows = [[r[5], r[7], r[8], r[9], r[10]] for r in results["rows"]]
        _write_dat(out_dir / "bragg.dat", "reactive response map\ncolumns: k omega/U Re_chi*U Im_chi*U resonance_flag", rows)
        names = ["bragg.dat"]
    elif kind == "tomography-bench":
        _write_dat(out_dir / "tomography_bench.dat", "fSim benchmark\ncolumns: theta abs_C01 predicted", [[r[0], r[1], r[3]] for r in results["rows"]])
        names = ["tomography_bench.dat"]
    elif kind == "meanfield":
        rows = []
        for _, r in results["results"]:
            g = r["row"][0]
            rows.extend([g, k, w] for k, w in r["dispersion"])
            rows.append(None)
        _write_dat(out_dir / "dispersion.dat", "Bogoliubov lower branch along (k, 0)\ncolumns: gamma k omega_minus/U", rows)
        names = ["dispersion.dat"]
    else:
        raise DomainError(f"no plot data for {kind!r}")
    return names


# ---------------------------------------------------------------------------
# Command line


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="dbhlab", description="Desk-scale Bose-Hubbard simulation pipelines.")
    sub = ap.add_subparsers(dest="command", required=True)
    for name in KINDS + ("validate",):
        p = sub.add_parser(name)
        p.add_argument("--config", type=Path, help="JSON config (a manifest is accepted too)")
        p.add_argument("--out", type=Path, help=f"output directory (default ${OUT_ENV} or ./dbhlab_out)")
        p.add_argument("--threads", type=int, default=1)
        p.add_argument("--seed", type=int, help="master seed (overrides the config)")
        p.add_argument("--shots", type=int, help="measurement shots, 0 = exact")
        p.add_argument("-v", "--verbose", action="store_true")
    return ap


def load_config(path: Path | None, kind: str | None) -> ExperimentConfig:
    d = {}
    if path is not None:
        try:
            d = json.loads(Path(path).read_text())
        except (OSError, json.JSONDecodeError) as e:
            raise ConfigError("--config", str(e)) from None
        if "config" in d and "kind" not in d:
            d = d["config"]
    if kind is not None:
        if d.get("kind", kind) != kind:
            raise ConfigError("kind", f"config is for {d['kind']!r}, command is {kind!r}")
        d["kind"] = kind
    try:
        return ExperimentConfig.from_dict(d)
    except TypeError as e:
        raise ConfigError("config", str(e)) from None


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        cfg = load_config(args.config, None if args.command == "validate" else args.command)
        if args.seed is not None:
            cfg.master_seed = args.seed
            cfg.seeds = None
        if args.shots is not None:
            cfg.shots = args.shots
        if args.command == "validate":
            rep = validate(cfg)
            print(json.dumps(rep, indent=1))
            return 0 if rep["accepted"] else 3
        out = args.out or Path(os.environ.get(OUT_ENV, "dbhlab_out"))
        manifest = run(cfg, out, max(1, args.threads))
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return 2
    nfail = len(manifest["failures"])
    print(f"{cfg.kind}: {len(manifest['tasks'])} tasks, {nfail} failed, output in {out}")
    return 0 if nfail == 0 else 1


if __name__ == "__main__":
    sys.exit(main())
