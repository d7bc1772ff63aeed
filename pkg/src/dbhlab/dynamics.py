"""Time evolution under scheduled Bose-Hubbard Hamiltonians.

A schedule gives, at every time, the hopping J, the per-site chemical
potentials mu, a tilt (amplitude times a fixed site pattern, added to mu)
and a drive A*sin(omega*(t - t0)) times a site pattern, entering as
+drive * n_i. The resulting Hamiltonian is

    H(t) = -J hop + U sum n(n-1)/2 - sum_i mu_eff_i(t) n_i
    mu_eff = mu + tilt * tilt_pattern - A sin(omega (t - t0)) * drive_pattern
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Callable, NamedTuple, Sequence

import numpy as np
import scipy.linalg as sla

from .errors import ConvergenceError, DomainError
from .model import BoseHubbardModel
from .spectra import solve_low_spectrum

SHAPES = ("linear", "smoothstep")


def _shape(s: float, shape: str) -> float:
    if shape == "linear":
        return s
    if shape == "smoothstep":
        return s * s * (3.0 - 2.0 * s)
    raise DomainError(f"unknown ramp shape {shape!r}")


@dataclass(frozen=True, eq=False)
class Params:
    """One full parameter set of the scheduled Hamiltonian."""

    J: float
    mu: np.ndarray
    tilt: float = 0.0
    tilt_pattern: np.ndarray | None = None
    drive_amp: float = 0.0
    drive_freq: float = 0.0
    drive_pattern: np.ndarray | None = None
    drive_t0: float = 0.0

    def __post_init__(self):
        object.__setattr__(self, "mu", np.array(self.mu, dtype=float, ndmin=1))

    def with_(self, **kw) -> "Params":
        return replace(self, **kw)

    def mu_eff(self, t: float) -> np.ndarray:
        mu = self.mu
        if self.tilt != 0.0 and self.tilt_pattern is not None:
            mu = mu + self.tilt * np.asarray(self.tilt_pattern)
        if self.drive_amp != 0.0 and self.drive_pattern is not None:
            mu = mu - self.drive_amp * math.sin(self.drive_freq * (t - self.drive_t0)) * np.asarray(self.drive_pattern)
        return mu

    def static(self) -> "Params":
        """Same parameters without the drive."""
        return replace(self, drive_amp=0.0)


def _interp(a: Params, b: Params, f: float) -> Params:
    def lerp(x, y):
        return x + (y - x) * f

    mu = lerp(a.mu, b.mu) if len(a.mu) == len(b.mu) else (b.mu if f > 0 else a.mu)
    return Params(
        J=lerp(a.J, b.J),
        mu=mu,
        tilt=lerp(a.tilt, b.tilt),
        tilt_pattern=b.tilt_pattern if b.tilt_pattern is not None else a.tilt_pattern,
        drive_amp=lerp(a.drive_amp, b.drive_amp),
        drive_freq=b.drive_freq if b.drive_amp or not a.drive_amp else a.drive_freq,
        drive_pattern=b.drive_pattern if b.drive_pattern is not None else a.drive_pattern,
        drive_t0=b.drive_t0 if b.drive_amp else a.drive_t0,
    )


@dataclass(frozen=True)
class Segment:
    t_start: float
    t_end: float
    start: Params
    end: Params
    shape: str = "smoothstep"


def _close(a: Params, b: Params, tol=1e-12) -> bool:
    return (
        abs(a.J - b.J) <= tol * max(1.0, abs(a.J))
        and a.mu.shape == b.mu.shape
        and np.allclose(a.mu, b.mu, rtol=0, atol=tol * max(1.0, np.abs(a.mu).max(initial=0)))
        and abs(a.tilt - b.tilt) <= tol * max(1.0, abs(a.tilt))
        and abs(a.drive_amp - b.drive_amp) <= tol * max(1.0, abs(a.drive_amp))
    )


class RampSchedule:
    """Contiguous piecewise interpolation between parameter snapshots."""

    def __init__(self, segments: Sequence[Segment]):
        if not segments:
            raise DomainError("a schedule needs at least one segment")
        for s in segments:
            if not s.t_end > s.t_start:
                raise DomainError(f"segment [{s.t_start}, {s.t_end}] has non-positive length")
            if s.shape not in SHAPES:
                raise DomainError(f"unknown ramp shape {s.shape!r}")
        for a, b in zip(segments, segments[1:]):
            if abs(a.t_end - b.t_start) > 1e-12 * max(1.0, abs(a.t_end)):
                raise DomainError(f"segments not contiguous at t={a.t_end} / {b.t_start}")
            if not _close(a.end, b.start):
                raise DomainError(f"parameters jump at t={a.t_end}")
        self.segments = tuple(segments)

    @classmethod
    def constant(cls, params: Params, t_start: float, t_end: float) -> "RampSchedule":
        return cls([Segment(t_start, t_end, params, params, "linear")])

    @classmethod
    def chain(cls, start: Params, steps, t_start: float = 0.0) -> "RampSchedule":
        """Build from (duration, end_params, shape) triples; zero durations are skipped."""
        segs = []
        t, cur = t_start, start
        for dur, end, shape in steps:
            if dur <= 0:
                continue
            segs.append(Segment(t, t + dur, cur, end, shape))
            t, cur = t + dur, end
        if not segs:
            segs.append(Segment(t_start, t_start + 1.0, start, start, "linear"))
        return cls(segs)

    @property
    def t_start(self) -> float:
        return self.segments[0].t_start

    @property
    def t_end(self) -> float:
        return self.segments[-1].t_end

    @property
    def breakpoints(self) -> list[float]:
        return [s.t_start for s in self.segments] + [self.t_end]

    def at(self, t: float) -> Params:
        if t <= self.t_start:
            return self.segments[0].start
        for s in self.segments:
            if t <= s.t_end:
                f = _shape((t - s.t_start) / (s.t_end - s.t_start), s.shape)
                return _interp(s.start, s.end, f)
        return self.segments[-1].end

    def reversed(self) -> "RampSchedule":
        """The mirror-image schedule t -> t_start + t_end - t."""
        T0, T1 = self.t_start, self.t_end
        segs = []
        for s in reversed(self.segments):
            segs.append(_ReversedSegment(T0 + T1 - s.t_end, T0 + T1 - s.t_start, s))
        return _ReversedSchedule(segs, self)


class _ReversedSegment(NamedTuple):
    t_start: float
    t_end: float
    orig: Segment


class _ReversedSchedule(RampSchedule):
    def __init__(self, segs, orig):
        self.segments = tuple(segs)
        self._orig = orig

    def at(self, t):
        return self._orig.at(self._orig.t_start + self._orig.t_end - t)

    def reversed(self):
        return self._orig


@dataclass(frozen=True)
class PropagatorConfig:
    """method: 'krylov' (midpoint rule, second order) or 'cf4'
    (two-exponential commutator-free, fourth order)."""

    method: str = "krylov"
    dt: float = 0.5  # maximum step, or the fixed step when adaptive is False
    krylov_dim: int = 20
    tol: float = 1e-9
    adaptive: bool = True
    dense_dim: int = 128  # at or below this size exponentials are exact
    max_rejections: int = 60

    def __post_init__(self):
        if self.dt <= 0:
            raise DomainError("dt must be positive")
        if self.tol <= 0:
            raise DomainError("tol must be positive")
        if self.method not in ("krylov", "cf4"):
            raise DomainError(f"unknown propagation method {self.method!r}")

    @property
    def order(self) -> int:
        return 2 if self.method == "krylov" else 4


# ---------------------------------------------------------------------------
# Exponentials


def expm_krylov(matvec, v, tau: complex, m: int = 20, tol: float = 1e-12):
    """exp(tau * H) v for Hermitian H via Lanczos, substepping on error.

    Returns (w, number_of_substeps). The a posteriori estimate is the usual
    beta * h_{m+1,m} * |e_m^T exp(tau T) e_1|.
    """
    n = len(v)
    w = np.array(v, dtype=complex)
    remaining = 1.0
    frac = 1.0
    nsub = 0
    while remaining > 1e-15:
        beta = np.linalg.norm(w)
        if beta == 0:
            return w, nsub
        V = np.zeros((min(m, n) + 1, n), dtype=complex)
        alpha = np.zeros(min(m, n))
        betas = np.zeros(min(m, n))
        V[0] = w / beta
        k = 0
        breakdown = False
        for k in range(min(m, n)):
            u = matvec(V[k])
            alpha[k] = np.vdot(V[k], u).real
            u = u - alpha[k] * V[k] - (betas[k - 1] * V[k - 1] if k > 0 else 0)
            # full reorthogonalization keeps V orthonormal
            u = u - V[: k + 1].T @ (V[: k + 1].conj() @ u)
            betas[k] = np.linalg.norm(u)
            if betas[k] < 1e-13 * max(1.0, abs(alpha[k])):
                breakdown = True
                break
            if k + 1 < V.shape[0]:
                V[k + 1] = u / betas[k]
        kk = k + 1
        T = np.diag(alpha[:kk]) + np.diag(betas[: kk - 1], 1) + np.diag(betas[: kk - 1], -1)
        ev, Q = np.linalg.eigh(T)
        while True:
            step = frac * remaining
            y = Q @ (np.exp(step * tau * ev) * Q[0].conj())
            err = 0.0 if breakdown or kk == n else beta * betas[kk - 1] * abs(y[-1])
            if err <= tol or step < 1e-6:
                break
            frac *= 0.5
        w = beta * (V[:kk].T @ y)
        remaining -= step
        frac = 1.0
        nsub += 1
    return w, nsub


class _Stepper:
    def __init__(self, model: BoseHubbardModel, schedule: RampSchedule, config: PropagatorConfig):
        self.model = model
        self.schedule = schedule
        self.config = config
        self.dense = model.dim <= config.dense_dim
        if self.dense:
            self._hop = model.hop.toarray().real

    def _ham_parts(self, t):
        p = self.schedule.at(t)
        return p.J, self.model.diagonal(p.mu_eff(t))

    def _exp(self, J, diag, h, psi):
        if self.dense:
            H = -J * self._hop + np.diag(diag)
            ev, Q = np.linalg.eigh(H)
            return Q @ (np.exp(-1j * h * ev) * (Q.T @ psi))
        hop = self.model.hop

        def mv(x):
            return -J * (hop @ x) + diag * x

        w, _ = expm_krylov(mv, psi, -1j * h, self.config.krylov_dim, tol=self.config.tol * 1e-2)
        return w

    def step(self, t, h, psi):
        if self.config.method == "krylov":
            J, d = self._ham_parts(t + 0.5 * h)
            return self._exp(J, d, h, psi)
        s3 = math.sqrt(3.0)
        c1, c2 = 0.5 - s3 / 6, 0.5 + s3 / 6
        a1, a2 = (3 - 2 * s3) / 12, (3 + 2 * s3) / 12
        J1, d1 = self._ham_parts(t + c1 * h)
        J2, d2 = self._ham_parts(t + c2 * h)
        psi = self._exp(a2 * J1 + a1 * J2, a2 * d1 + a1 * d2, h, psi)
        return self._exp(a1 * J1 + a2 * J2, a1 * d1 + a2 * d2, h, psi)


class PropagationStats(NamedTuple):
    accepted: int
    rejected: int


def propagate(
    state,
    schedule: RampSchedule,
    t0: float,
    t1: float,
    config: PropagatorConfig | None = None,
    *,
    model: BoseHubbardModel,
    sample_times: Sequence[float] | None = None,
    observer: Callable | None = None,
    return_stats: bool = False,
):
    """Evolve ``state`` from t0 to t1 (t1 < t0 runs backwards).

    Steps never straddle schedule breakpoints or sample times. With
    ``observer`` and ``sample_times`` the return value is
    ``(state, [observer(t, psi) for t in sorted(set(sample_times))])``.
    """
    config = config or PropagatorConfig()
    psi = np.array(state, dtype=complex)
    if len(psi) != model.dim:
        raise DomainError("state does not live in the model basis")
    sample_times = [] if sample_times is None else [float(x) for x in np.atleast_1d(sample_times)]
    if any(x < min(t0, t1) - 1e-12 or x > max(t0, t1) + 1e-12 for x in sample_times):
        raise DomainError("sample times must lie inside the propagation interval")
    if t1 == t0:
        out = (psi, [observer(t0, psi) for _ in sorted(set(sample_times))]) if observer else psi
        return (out, PropagationStats(0, 0)) if return_stats else out
    stepper = _Stepper(model, schedule, config)
    sgn = 1.0 if t1 > t0 else -1.0
    lo, hi = min(t0, t1), max(t0, t1)
    stops = {t1}
    stops.update(b for b in schedule.breakpoints if lo < b < hi)
    samples = sorted(set(sample_times), key=lambda x: sgn * x)
    stops.update(s for s in samples if lo < s < hi)
    stops = sorted(stops, key=lambda x: sgn * x)
    observed = {}
    if observer is not None:
        for s in samples:
            if s == t0:
                observed[s] = observer(t0, psi)
    t = t0
    span = hi - lo
    h = min(config.dt, span)
    accepted = rejected = 0
    streak = 0
    p = config.order
    for stop in stops:
        while sgn * (stop - t) > 1e-12 * max(1.0, abs(stop)):
            hh = min(h, abs(stop - t))
            last = hh >= abs(stop - t) - 1e-12 * max(1.0, abs(stop))
            if not config.adaptive:
                psi = stepper.step(t, sgn * hh, psi)
                t = stop if last else t + sgn * hh
                accepted += 1
                continue
            full = stepper.step(t, sgn * hh, psi)
            half = stepper.step(t, sgn * hh / 2, psi)
            half = stepper.step(t + sgn * hh / 2, sgn * hh / 2, half)
            err = float(np.linalg.norm(full - half))
            if err <= config.tol:
                psi = half
                t = stop if last else t + sgn * hh
                accepted += 1
                streak = 0
                fac = 2.0 if err == 0 else min(2.0, max(0.2, 0.9 * (config.tol / err) ** (1.0 / (p + 1))))
                if not last or fac < 1:
                    h = min(config.dt, hh * fac)
            else:
                rejected += 1
                streak += 1
                h = hh * max(0.2, 0.9 * (config.tol / err) ** (1.0 / (p + 1)))
                if streak > config.max_rejections or h < 1e-13 * span:
                    raise ConvergenceError(
                        f"step size collapsed near t={t}", residuals=[err], last_time=t
                    )
        if observer is not None and stop in samples:
            observed[stop] = observer(stop, psi)
    if observer is not None:
        result = (psi, [observed[s] for s in sorted(set(sample_times), key=lambda x: sgn * x)])
    else:
        result = psi
    return (result, PropagationStats(accepted, rejected)) if return_stats else result


# ---------------------------------------------------------------------------
# Protocols


def fidelity(a, b) -> float:
    return float(abs(np.vdot(a, b)) ** 2)


@dataclass
class Preparation:
    state: np.ndarray
    t_end: float
    schedule: RampSchedule
    final_params: Params
    energy: float
    ground_energy: float
    fidelity: float
    ground_state: np.ndarray = field(repr=False)


def preparation_schedule(
    nsites: int,
    J: float,
    mu_target,
    t_ramp: float = 100.0,
    t_resonance: float = 5.0,
    t_hold: float = 10.0,
    mu_idle=None,
    mu_start=None,
    shape: str = "smoothstep",
) -> RampSchedule:
    """J=0 move from idle to resonance, simultaneous J/mu ramp, hold."""
    mu_target = np.broadcast_to(np.asarray(mu_target, float), (nsites,))
    mu_idle = np.zeros(nsites) if mu_idle is None else np.broadcast_to(np.asarray(mu_idle, float), (nsites,))
    mu_start = np.zeros(nsites) if mu_start is None else np.broadcast_to(np.asarray(mu_start, float), (nsites,))
    p_idle = Params(0.0, mu_idle)
    p_res = Params(0.0, mu_start)
    p_tgt = Params(J, mu_target)
    return RampSchedule.chain(
        p_idle,
        [(t_resonance, p_res, shape), (t_ramp, p_tgt, shape), (t_hold, p_tgt, "linear")],
    )


def adiabatic_prepare(
    model: BoseHubbardModel,
    J: float,
    mu_target=0.0,
    t_ramp: float = 100.0,
    t_resonance: float = 5.0,
    t_hold: float = 10.0,
    config: PropagatorConfig | None = None,
    mu_idle=None,
    mu_start=None,
    shape: str = "smoothstep",
) -> Preparation:
    """Start in |1...1> at J=0 and ramp to (J, mu_target).

    The state is compared with the true lowest eigenstate of the target
    Hamiltonian in the same number sector.
    """
    ns = model.lattice.nsites
    sched = preparation_schedule(ns, J, mu_target, t_ramp, t_resonance, t_hold, mu_idle, mu_start, shape)
    psi0 = model.mott_state()
    psi = propagate(psi0, sched, sched.t_start, sched.t_end, config, model=model)
    final = sched.at(sched.t_end)
    H = model.hamiltonian(final.J, final.mu)
    sol = solve_low_spectrum(H, 1)
    gs = sol.ground_state
    energy = float(np.vdot(psi, H @ psi).real)
    return Preparation(psi, sched.t_end, sched, final, energy, sol.ground_energy, fidelity(psi, gs), gs)


def ramp_down(
    model: BoseHubbardModel,
    state,
    from_params: Params,
    duration: float,
    idle_mu=None,
    config: PropagatorConfig | None = None,
):
    """Linear J -> 0 and mu -> idle over ``duration``; zero duration is the identity."""
    if duration < 0:
        raise DomainError("ramp-down duration must be non-negative")
    if duration == 0:
        return np.array(state, dtype=complex)
    ns = model.lattice.nsites
    idle = np.zeros(ns) if idle_mu is None else np.broadcast_to(np.asarray(idle_mu, float), (ns,))
    start = from_params.static()
    end = start.with_(J=0.0, mu=idle, tilt=0.0)
    sched = RampSchedule([Segment(0.0, duration, start, end, "linear")])
    return propagate(state, sched, 0.0, duration, config, model=model)
