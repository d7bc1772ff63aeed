"""Compressibility and Bragg-spectroscopy response experiments.

Both probes couple to site densities. The tilt raises the chemical
potential along a half cosine, mu_i -> mu_i + dmu cos(pi x_i / L), so a
compressible state moves density toward x = 0 and kappa > 0. The Bragg
drive adds A_d sin(omega_d t) sum_j gamma_j n_j to the Hamiltonian.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import NamedTuple, Sequence

import numpy as np
from scipy.integrate import solve_ivp

from .dynamics import Params, PropagatorConfig, RampSchedule, Segment, adiabatic_prepare, propagate
from .errors import DomainError
from .lattice import LatticeSpec, sample_disorder
from .model import BoseHubbardModel
from .spectra import EigenSolution, solve_low_spectrum
from .units import U_DEVICE, mhz_to_rad_per_ns

DEFAULT_TILT_MHZ = 30.0


def tilt_pattern(lattice: LatticeSpec) -> np.ndarray:
    if lattice.nx < 2:
        raise DomainError("the cosine tilt needs at least two columns")
    return np.cos(math.pi * lattice.xs / lattice.L)


def default_tilt(U: float) -> float:
    """30 MHz on the device, scaled with U relative to U/(2 pi) = 190 MHz."""
    return mhz_to_rad_per_ns(DEFAULT_TILT_MHZ) * U / U_DEVICE


@dataclass(frozen=True)
class TiltSpec:
    amplitude: float
    subtract_natural: bool = True


def natural_tilt(mu, lattice: LatticeSpec) -> float:
    """A = (2/N) sum_i mu_i cos(pi x_i / L)."""
    mu = np.broadcast_to(np.asarray(mu, float), (lattice.nsites,))
    return float(2.0 / lattice.nsites * np.dot(mu, tilt_pattern(lattice)))


def apply_tilt(mu, tilt: TiltSpec, lattice: LatticeSpec) -> np.ndarray:
    """V_i = mu_i + (dmu - A) cos(pi x_i / L); A = 0 unless subtract_natural."""
    mu = np.broadcast_to(np.asarray(mu, float), (lattice.nsites,))
    A = natural_tilt(mu, lattice) if tilt.subtract_natural else 0.0
    return mu + (tilt.amplitude - A) * tilt_pattern(lattice)


def compressibility(densities, dmu: float, lattice: LatticeSpec) -> float:
    """kappa = (2 / (N dmu)) sum_j <n_j> cos(pi x_j / L)."""
    if dmu == 0:
        raise DomainError("tilt amplitude must be non-zero")
    n = np.asarray(densities, float)
    return float(2.0 / (lattice.nsites * dmu) * np.dot(n, tilt_pattern(lattice)))


class KappaResult(NamedTuple):
    kappa: float
    densities: np.ndarray
    state: np.ndarray
    fidelity: float  # overlap with the tilted ground state


def compressibility_run(
    protocol: str,
    model: BoseHubbardModel,
    J: float,
    mu,
    tilt: TiltSpec,
    t_ramp: float = 100.0,
    t_field: float = 250.0,
    t_resonance: float = 5.0,
    t_hold: float = 10.0,
    config: PropagatorConfig | None = None,
    shape: str = "smoothstep",
) -> KappaResult:
    """One disorder realization under the FC or ZFC order.

    FC: the tilted potentials are set while J = 0, then J is ramped up.
    ZFC: prepare at the untilted potentials, then ramp the tilt on over
    ``t_field`` at fixed J.
    """
    lat = model.lattice
    mu = np.broadcast_to(np.asarray(mu, float), (lat.nsites,))
    V = apply_tilt(mu, tilt, lat)
    if protocol.upper() == "FC":
        prep = adiabatic_prepare(model, J, V, t_ramp, t_resonance, t_hold, config, mu_start=V, shape=shape)
        psi = prep.state
    elif protocol.upper() == "ZFC":
        prep = adiabatic_prepare(model, J, mu, t_ramp, t_resonance, t_hold, config, shape=shape)
        start = Params(J, mu)
        sched = RampSchedule([Segment(0.0, t_field, start, Params(J, V), shape), Segment(t_field, t_field + t_hold, Params(J, V), Params(J, V), "linear")])
        psi = propagate(prep.state, sched, 0.0, sched.t_end, config, model=model)
    else:
        raise DomainError(f"unknown protocol {protocol!r}; use FC or ZFC")
    gs = solve_low_spectrum(model.hamiltonian(J, V), 1).ground_state
    n = model.densities(psi)
    return KappaResult(compressibility(n, tilt.amplitude, lat), n, psi, float(abs(np.vdot(gs, psi)) ** 2))


@dataclass
class KappaEnsemble:
    protocol: str
    J: float
    W: float
    seeds: list
    kappas: np.ndarray

    @property
    def mean(self) -> float:
        return float(np.mean(self.kappas))

    @property
    def stderr(self) -> float:
        k = self.kappas
        return float(np.std(k, ddof=1) / math.sqrt(len(k))) if len(k) > 1 else 0.0


def run_compressibility_protocol(
    protocol: str,
    lattice: LatticeSpec,
    J: float,
    W: float,
    seeds: Sequence[int],
    tilt: TiltSpec | None = None,
    U: float = 1.0,
    ntotal: int | None = None,
    nmax: int = 2,
    center: float = 0.0,
    model: BoseHubbardModel | None = None,
    **schedule,
) -> KappaEnsemble:
    """Disorder-averaged kappa for one protocol."""
    model = model or BoseHubbardModel(lattice, lattice.nsites if ntotal is None else ntotal, nmax, U)
    tilt = tilt or TiltSpec(default_tilt(model.U))
    ks = []
    for s in seeds:
        mu = sample_disorder(W, center, lattice.nsites, s).mu
        ks.append(compressibility_run(protocol, model, J, mu, tilt, **schedule).kappa)
    return KappaEnsemble(protocol.upper(), J, W, list(seeds), np.array(ks))


# ---------------------------------------------------------------------------
# Bragg spectroscopy


@dataclass(frozen=True)
class DriveSpec:
    amplitude: float
    frequency: float
    p: int = 1
    q: int = 0
    duration: float = 250.0

    def __post_init__(self):
        if self.p == 0 and self.q == 0:
            raise DomainError("the uniform mode (p, q) = (0, 0) is excluded")
        if self.p < 0 or self.q < 0:
            raise DomainError("mode indices must be non-negative")


class ModeLabel(NamedTuple):
    kx: float  # pi p / L
    ky: float  # pi q / M
    kx_main: float  # 2 pi p / L, the alternative labeling of the same mode
    ky_main: float


def mode_pattern(lattice: LatticeSpec, p: int, q: int = 0) -> np.ndarray:
    """Unit-norm standing wave cos(pi p x / L) cos(pi q y / M)."""
    if p == 0 and q == 0:
        raise DomainError("the uniform mode (p, q) = (0, 0) is excluded")
    L, M = lattice.nx - 1, lattice.ny - 1
    if (p and L == 0) or (q and M == 0):
        raise DomainError(f"mode ({p}, {q}) does not fit a {lattice.nx}x{lattice.ny} lattice")
    gx = np.cos(math.pi * p * lattice.xs / L) if p else np.ones(lattice.nsites)
    gy = np.cos(math.pi * q * lattice.ys / M) if q else np.ones(lattice.nsites)
    g = gx * gy
    return g / np.linalg.norm(g)


def mode_label(lattice: LatticeSpec, p: int, q: int = 0) -> ModeLabel:
    L, M = max(lattice.nx - 1, 1), max(lattice.ny - 1, 1)
    return ModeLabel(math.pi * p / L, math.pi * q / M, 2 * math.pi * p / L, 2 * math.pi * q / M)


@dataclass
class SusceptibilityCurve:
    omega: np.ndarray
    chi: np.ndarray
    label: ModeLabel | None = None
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.omega = np.asarray(self.omega, float)
        self.chi = np.asarray(self.chi, complex)
        if len(self.omega) > 1 and not np.all(np.diff(self.omega) > 0):
            raise DomainError("frequency grid must be strictly increasing")


class ModeWeights(NamedTuple):
    omega_k0: np.ndarray
    weights: np.ndarray  # |<k|nu|0>|^2


def mode_weights(eig: EigenSolution, occ: np.ndarray, pattern: np.ndarray) -> ModeWeights:
    """Excitation energies and |<k|nu_m|0>|^2 for nu_m = sum_i gamma_i n_i."""
    if len(eig) < 1:
        raise DomainError("the eigensystem must contain the ground state")
    nu = occ @ pattern  # diagonal of nu_m over the basis
    g = eig.eigenvectors[:, 0]
    amps = eig.eigenvectors[:, 1:].conj().T @ (nu * g)
    return ModeWeights(eig.eigenvalues[1:] - eig.eigenvalues[0], np.abs(amps) ** 2)


def linear_response_chi(eig: EigenSolution, occ, pattern, omega, eps: float) -> SusceptibilityCurve:
    """chi(w) = sum_k |<k|nu|0>|^2 2 w_k0 / ((w + i eps)^2 - w_k0^2)."""
    mw = mode_weights(eig, occ, pattern)
    w = np.asarray(omega, float)[:, None] + 1j * eps
    chi = np.sum(mw.weights[None, :] * 2 * mw.omega_k0[None, :] / (w**2 - mw.omega_k0[None, :] ** 2), axis=1)
    return SusceptibilityCurve(omega, chi, meta={"eps": eps})


def dominant_pole(eig: EigenSolution, occ, pattern) -> float:
    mw = mode_weights(eig, occ, pattern)
    return float(mw.omega_k0[int(np.argmax(mw.weights))])


def fourier_extract(signal, t, omega: float, T: float | None = None) -> complex:
    """(1/T) * integral_0^T exp(-i omega t) signal(t) dt by the trapezoid rule."""
    t = np.asarray(t, float)
    T = t[-1] - t[0] if T is None else T
    return complex(np.trapezoid(np.exp(-1j * omega * t) * np.asarray(signal), t) / T)


def chi_from_sine_drive(E: complex, amplitude: float) -> complex:
    """Invert the long-time response to A sin(w t): E ~ A conj(chi) / (2i)."""
    return complex(np.conj(2j * E / amplitude))


@dataclass
class DrivenResponse:
    t: np.ndarray
    delta_n: np.ndarray  # (len(t), nsites)
    mode_signal: np.ndarray
    chi: complex  # drive-frequency estimate of the mode susceptibility


def driven_response(
    model: BoseHubbardModel,
    state,
    J: float,
    mu,
    drive: DriveSpec,
    config: PropagatorConfig | None = None,
    dt_sample: float = 0.25,
    reference: tuple[np.ndarray, np.ndarray] | None = None,
) -> DrivenResponse:
    """Evolve under H + A sin(w t) sum_j gamma_j n_j and subtract the undriven run.

    ``reference`` may pass precomputed (t, densities) of the undriven run so
    a frequency sweep needs it only once.
    """
    lat = model.lattice
    gamma = mode_pattern(lat, drive.p, drive.q)
    mu = np.broadcast_to(np.asarray(mu, float), (lat.nsites,))
    T = drive.duration
    n_s = int(round(T / dt_sample))
    ts = np.linspace(0.0, T, n_s + 1)
    obs = lambda t, psi: model.densities(psi)
    if reference is None:
        reference = undriven_reference(model, state, J, mu, T, config, dt_sample)
    p = Params(J, mu, drive_amp=drive.amplitude, drive_freq=drive.frequency, drive_pattern=gamma)
    sched = RampSchedule.constant(p, 0.0, T)
    _, n_drv = propagate(state, sched, 0.0, T, config, model=model, sample_times=ts, observer=obs)
    dn = np.array(n_drv) - reference[1]
    sig = dn @ gamma
    E = fourier_extract(sig, ts, drive.frequency, T)
    chi = chi_from_sine_drive(E, drive.amplitude) if drive.amplitude else 0j
    return DrivenResponse(ts, dn, sig, chi)


def undriven_reference(model, state, J, mu, T, config=None, dt_sample=0.25):
    n_s = int(round(T / dt_sample))
    ts = np.linspace(0.0, T, n_s + 1)
    sched = RampSchedule.constant(Params(J, mu), 0.0, T)
    _, n_ref = propagate(state, sched, 0.0, T, config, model=model, sample_times=ts, observer=lambda t, psi: model.densities(psi))
    return ts, np.array(n_ref)


def driven_sweep(model, state, J, mu, omegas, amplitude, p=1, q=0, duration=250.0, config=None, dt_sample=0.25) -> SusceptibilityCurve:
    ref = undriven_reference(model, state, J, mu, duration, config, dt_sample)
    chis = [
        driven_response(model, state, J, mu, DriveSpec(amplitude, w, p, q, duration), config, dt_sample, ref).chi
        for w in omegas
    ]
    return SusceptibilityCurve(omegas, np.array(chis), mode_label(model.lattice, p, q), {"amplitude": amplitude, "T": duration})


@dataclass
class Resonance:
    found: bool
    omega: float = float("nan")
    bracket: tuple = ()
    anchor: float = float("nan")  # grid frequency of max |Im chi|


def find_resonance(curve: SusceptibilityCurve, use: str = "imag") -> Resonance:
    """Zero crossing of Re chi nearest the peak of |Im chi| (or of |chi|)."""
    w, c = curve.omega, curve.chi
    r = c.real
    peak = np.abs(c.imag) if use == "imag" else np.abs(c)
    anchor = int(np.argmax(peak))
    s = np.sign(r)
    idx = np.nonzero(s[:-1] * s[1:] < 0)[0]
    exact = np.nonzero(r == 0)[0]
    if len(idx) == 0 and len(exact) == 0:
        return Resonance(False, anchor=float(w[anchor]))
    cands = []
    for i in idx:
        w0 = w[i] - r[i] * (w[i + 1] - w[i]) / (r[i + 1] - r[i])
        cands.append((abs(w0 - w[anchor]), w0, (float(w[i]), float(w[i + 1]))))
    for i in exact:
        cands.append((abs(w[i] - w[anchor]), w[i], (float(w[i]), float(w[i]))))
    _, w0, br = min(cands, key=lambda x: x[0])
    return Resonance(True, float(w0), br, float(w[anchor]))


class TwoLevelResult(NamedTuple):
    t: np.ndarray
    chi_t: np.ndarray
    chi: complex  # drive-frequency estimate


def two_level_response(omega_k0, amplitude, gamma_s, gamma, omega_d, T, nu_kk: float = 0.0, n_t: int = 4001) -> TwoLevelResult:
    """Ground state and one excited mode under A cos(w_d t) coupling with decay.

    Integrates i dc/dt = [[-i G0, A cos], [A cos, w_k0 - i Gk]] c from
    c = (1, 0) with G0 = (gamma_s - gamma)/2, Gk = (gamma_s + gamma)/2 and
    returns chi_k(t) = (2 Re(c0* ck) + nu_kk |ck|^2) / (A (|c0|^2 + |ck|^2)).
    For a cos drive the long-time response is A Re(chi e^{-i w t}), so the
    drive-frequency estimate is conj(2 E) with E the normalized Fourier
    component of chi_k(t).
    """
    t = np.linspace(0.0, T, n_t)
    if amplitude == 0:
        return TwoLevelResult(t, np.zeros(n_t), 0j)
    G0 = 0.5 * (gamma_s - gamma)
    Gk = 0.5 * (gamma_s + gamma)

    def rhs(tt, y):
        c0 = y[0] + 1j * y[1]
        ck = y[2] + 1j * y[3]
        d = amplitude * math.cos(omega_d * tt)
        dc0 = -1j * (-1j * G0 * c0 + d * ck)
        dck = -1j * (d * c0 + (omega_k0 - 1j * Gk) * ck)
        return [dc0.real, dc0.imag, dck.real, dck.imag]

    sol = solve_ivp(rhs, (0.0, T), [1.0, 0.0, 0.0, 0.0], t_eval=t, method="DOP853", rtol=1e-10, atol=1e-12)
    c0 = sol.y[0] + 1j * sol.y[1]
    ck = sol.y[2] + 1j * sol.y[3]
    norm = np.abs(c0) ** 2 + np.abs(ck) ** 2
    chi_t = (2.0 * np.real(np.conj(c0) * ck) + nu_kk * np.abs(ck) ** 2) / (amplitude * norm)
    E = fourier_extract(chi_t, t, omega_d, T)
    return TwoLevelResult(t, chi_t, complex(np.conj(2.0 * E)))


def two_level_curve(omega_k0, amplitude, omegas, T, gamma_s=0.0, gamma=0.0, n_t=4001) -> SusceptibilityCurve:
    chis = [two_level_response(omega_k0, amplitude, gamma_s, gamma, w, T, n_t=n_t).chi for w in omegas]
    return SusceptibilityCurve(omegas, np.array(chis), meta={"amplitude": amplitude})
