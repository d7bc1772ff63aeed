"""Emulation of the qutrit two-point correlator measurement.

Single-site Givens rotations map the coherences entering <a_i^dag a_j>
onto population correlations <(n_i - 1)(n_j - 1)>. Scanning the rotation
phases and fitting the four cosine components recovers the coherences

    c1 = <X_i^10 X_j^01>, c2 = <X_i^10 X_j^12>,
    c3 = <X_i^21 X_j^01>, c4 = <X_i^21 X_j^12>,    X^mn = |m><n|,

and C_ij = c1 + sqrt2 c2 + sqrt2 c3 + 2 c4. With the rotation
W(phi, chi) the measured value is

    (3/2) Z = Re[e^{i(phi_i-phi_j)} c1 + sqrt2 e^{i(phi_i-chi_j)} c2
                 + sqrt2 e^{i(chi_i-phi_j)} c3 + 2 e^{i(chi_i-chi_j)} c4].
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np
from scipy.linalg import expm

from .errors import DomainError
from .lattice import FockBasis

BETA = 2.0 * math.acos(1.0 / math.sqrt(3.0))
WEIGHTS = np.array([1.0, math.sqrt(2.0), math.sqrt(2.0), 2.0])
COHERENCE_LABELS = ("10,01", "10,12", "21,01", "21,12")
PHASE_COMBOS = ("phi_i - phi_j", "phi_i - chi_j", "chi_i - phi_j", "chi_i - chi_j")
N_OP = np.diag([0.0, 1.0, 2.0])
A_OP = np.diag([1.0, math.sqrt(2.0)], 1)


@dataclass(frozen=True)
class QutritGate:
    matrix: np.ndarray
    label: str = ""

    def __matmul__(self, other: "QutritGate") -> "QutritGate":
        return QutritGate(self.matrix @ other.matrix, f"{self.label}*{other.label}")

    @property
    def dagger(self) -> "QutritGate":
        return QutritGate(self.matrix.conj().T, f"{self.label}^dag")


def _x(m, n):
    X = np.zeros((3, 3), dtype=complex)
    X[m, n] = 1.0
    return X


def givens(m: int, n: int, alpha: float, phi: float) -> QutritGate:
    """exp(-i (alpha/2)(e^{-i phi} X^mn + e^{i phi} X^nm))."""
    if m == n or m not in (0, 1, 2) or n not in (0, 1, 2):
        raise DomainError(f"Givens levels must be distinct and in 0..2, got {m}, {n}")
    G = np.exp(-1j * phi) * _x(m, n) + np.exp(1j * phi) * _x(n, m)
    return QutritGate(expm(-0.5j * alpha * G), f"U{m}{n}({alpha:.4g},{phi:.4g})")


def w_gate(phi: float, chi: float) -> QutritGate:
    """U^01_{pi/2}(phi) U^12_beta(chi) U^01_{pi/3}(phi)."""
    M = givens(0, 1, math.pi / 2, phi).matrix @ givens(1, 2, BETA, chi).matrix @ givens(0, 1, math.pi / 3, phi).matrix
    return QutritGate(M, f"W({phi:.4g},{chi:.4g})")


def v_gate(phi: float) -> QutritGate:
    g = w_gate(phi, phi)
    return QutritGate(g.matrix, f"V({phi:.4g})")


def rotated_observable(phi: float, chi: float) -> np.ndarray:
    """W^dag (n - 1) W."""
    W = w_gate(phi, chi).matrix
    return W.conj().T @ (N_OP - np.eye(3)) @ W


def atomic_evolution(detuning_phase: float, eta: float, tau: float) -> np.ndarray:
    """exp(-i h tau) for h = dw n + (eta/2) n(n-1); ``detuning_phase`` = integral of dw."""
    n = np.arange(3)
    return np.diag(np.exp(-1j * (detuning_phase * n + 0.5 * eta * tau * n * (n - 1))))


# ---------------------------------------------------------------------------
# Sampling


def _require_qutrits(basis: FockBasis):
    if any(c != 2 for c in basis.cutoffs):
        raise DomainError("tomography emulation needs a qutrit basis (cutoff 2 on every site)")


def pair_blocks(state, basis: FockBasis, i: int, j: int) -> dict[int, np.ndarray]:
    """Reduced density matrices of sites (i, j), split by the particle
    number on the remaining sites. Local index is 3*n_i + n_j."""
    _require_qutrits(basis)
    if i == j:
        raise DomainError("pair sites must differ")
    occ = basis.states
    rest = [s for s in range(basis.nsites) if s not in (i, j)]
    local = 3 * occ[:, i] + occ[:, j]
    if rest:
        rest_key = np.zeros(len(occ), dtype=np.int64)
        for s in rest:
            rest_key = rest_key * 3 + occ[:, s]
        rest_tot = occ[:, rest].sum(axis=1)
    else:
        rest_key = np.zeros(len(occ), dtype=np.int64)
        rest_tot = np.zeros(len(occ), dtype=np.int64)
    uniq, g = np.unique(rest_key, return_inverse=True)
    M = np.zeros((len(uniq), 9), dtype=complex)
    M[g, local] = state
    tot_of_group = np.zeros(len(uniq), dtype=np.int64)
    tot_of_group[g] = rest_tot
    blocks = {}
    for r in np.unique(tot_of_group):
        Mr = M[tot_of_group == r]
        blocks[int(r)] = Mr.T @ Mr.conj()
    return blocks


@dataclass
class CorrelationEstimate:
    value: float
    stderr: float
    kept: int  # samples after post-selection (0 in exact mode)


def _pair_distribution(blocks, Gi, Gj):
    """Joint probabilities p[r][n_i, n_j] after the local rotations."""
    G = np.kron(Gi, Gj)
    out = {}
    for r, rho in blocks.items():
        p = np.real(np.diag(G @ rho @ G.conj().T)).clip(min=0.0)
        out[r] = p.reshape(3, 3)
    return out


_CORR = np.outer(np.arange(3) - 1.0, np.arange(3) - 1.0)


def measure_pair(
    state,
    basis: FockBasis,
    i: int,
    j: int,
    gate_i: np.ndarray | None = None,
    gate_j: np.ndarray | None = None,
    shots: int = 0,
    postselect: bool = False,
    rng: np.random.Generator | None = None,
) -> CorrelationEstimate:
    """<(n_i - 1)(n_j - 1)> after rotating sites i and j.

    shots = 0 returns the exact expectation. With shots > 0, occupation
    outcomes are drawn from the rotated distribution; with ``postselect``
    only outcomes whose total equals the basis particle number are kept.
    Rotations generally do not conserve number, so post-selection is meant
    for population runs with identity gates.
    """
    Gi = np.eye(3) if gate_i is None else np.asarray(gate_i)
    Gj = np.eye(3) if gate_j is None else np.asarray(gate_j)
    dist = _pair_distribution(pair_blocks(state, basis, i, j), Gi, Gj)
    ntotal = basis.ntotal
    if shots == 0:
        if postselect:
            if ntotal is None:
                raise DomainError("post-selection needs a fixed-number basis")
            num = den = 0.0
            for r, p in dist.items():
                for ni in range(3):
                    nj = ntotal - r - ni
                    if 0 <= nj <= 2:
                        num += p[ni, nj] * _CORR[ni, nj]
                        den += p[ni, nj]
            if den <= 0:
                raise DomainError("post-selection discards every outcome")
            return CorrelationEstimate(num / den, 0.0, 0)
        total = sum(p for p in dist.values())
        return CorrelationEstimate(float(np.sum(total * _CORR)), 0.0, 0)
    rng = rng or np.random.default_rng()
    keys = sorted(dist)
    probs = np.concatenate([dist[r].ravel() for r in keys])
    probs = probs / probs.sum()
    counts = rng.multinomial(shots, probs)
    vals = np.tile(_CORR.ravel(), len(keys))
    if postselect:
        if ntotal is None:
            raise DomainError("post-selection needs a fixed-number basis")
        tot = np.concatenate([r + np.add.outer(np.arange(3), np.arange(3)).ravel() for r in keys])
        counts = np.where(tot == ntotal, counts, 0)
    kept = int(counts.sum())
    if kept == 0:
        raise DomainError(f"all {shots} samples were discarded by post-selection")
    mean = float(np.dot(counts, vals) / kept)
    var = float(np.dot(counts, (vals - mean) ** 2) / max(kept - 1, 1))
    return CorrelationEstimate(mean, math.sqrt(var / kept), kept)


def measure_rotated_correlations(
    state,
    basis: FockBasis,
    gates: Mapping[int, np.ndarray | QutritGate],
    pairs: Sequence[tuple[int, int]] | None = None,
    shots: int = 0,
    postselect: bool = False,
    seed: int | None = None,
) -> dict[tuple[int, int], CorrelationEstimate]:
    """Per-pair rotated density correlations; ungated sites are left alone."""
    _require_qutrits(basis)
    mats = {s: (g.matrix if isinstance(g, QutritGate) else np.asarray(g)) for s, g in gates.items()}
    for s in mats:
        if not 0 <= s < basis.nsites:
            raise DomainError(f"gate on site {s} outside the lattice")
    if pairs is None:
        sites = sorted(mats)
        pairs = [(a, b) for k, a in enumerate(sites) for b in sites[k + 1 :]]
    rng = np.random.default_rng(seed)
    return {
        (i, j): measure_pair(state, basis, i, j, mats.get(i), mats.get(j), shots, postselect, rng)
        for i, j in pairs
    }


# ---------------------------------------------------------------------------
# Phase scans and reconstruction


def default_scan_settings() -> np.ndarray:
    """phi_i in 2 pi k/8, chi_i and chi_j in 2 pi k/4, phi_j = 0 (128 rows).

    Every coherence then has its own set of phase combinations, so the
    four cosine components separate.
    """
    rows = []
    for a in range(8):
        for b in range(4):
            for c in range(4):
                rows.append((2 * math.pi * a / 8, 2 * math.pi * b / 4, 0.0, 2 * math.pi * c / 4))
    return np.array(rows)


@dataclass
class PhaseScan:
    pair: tuple[int, int]
    settings: np.ndarray  # rows of (phi_i, chi_i, phi_j, chi_j)
    values: np.ndarray
    stderr: np.ndarray
    shots: int = 0
    postselect: bool = False


def run_phase_scan(
    state,
    basis: FockBasis,
    i: int,
    j: int,
    settings=None,
    shots: int = 0,
    postselect: bool = False,
    seed: int | None = None,
    pre_evolution: tuple[np.ndarray, np.ndarray] | None = None,
) -> PhaseScan:
    """Measure Z_ij on every phase setting.

    ``pre_evolution`` optionally applies single-site unitaries to (i, j)
    before the rotations, e.g. free atomic evolution.
    """
    settings = default_scan_settings() if settings is None else np.asarray(settings, float)
    blocks = pair_blocks(state, basis, i, j)
    if pre_evolution is not None:
        P = np.kron(pre_evolution[0], pre_evolution[1])
        blocks = {r: P @ rho @ P.conj().T for r, rho in blocks.items()}
    rng = np.random.default_rng(seed)
    vals = np.zeros(len(settings))
    errs = np.zeros(len(settings))
    ntotal = basis.ntotal
    for k, (pi_, ci, pj, cj) in enumerate(settings):
        Gi = w_gate(pi_, ci).matrix
        Gj = w_gate(pj, cj).matrix
        if shots == 0 and not postselect:
            G = np.kron(Gi, Gj)
            O = G.conj().T @ np.diag(_CORR.ravel()) @ G
            vals[k] = sum(np.real(np.trace(rho @ O)) for rho in blocks.values())
            continue
        dist = _pair_distribution(blocks, Gi, Gj)
        keys = sorted(dist)
        probs = np.concatenate([dist[r].ravel() for r in keys])
        vals_k = np.tile(_CORR.ravel(), len(keys))
        tot = np.concatenate([r + np.add.outer(np.arange(3), np.arange(3)).ravel() for r in keys])
        if shots == 0:
            m = tot == ntotal
            if probs[m].sum() <= 0:
                raise DomainError("post-selection discards every outcome")
            vals[k] = np.dot(probs[m], vals_k[m]) / probs[m].sum()
            continue
        counts = rng.multinomial(shots, probs / probs.sum())
        if postselect:
            counts = np.where(tot == ntotal, counts, 0)
        kept = counts.sum()
        if kept == 0:
            raise DomainError(f"all samples discarded at setting {k}")
        vals[k] = np.dot(counts, vals_k) / kept
        var = np.dot(counts, (vals_k - vals[k]) ** 2) / max(kept - 1, 1)
        errs[k] = math.sqrt(var / kept)
    return PhaseScan((i, j), settings, vals, errs, shots, postselect)


def _design(settings):
    pi_, ci, pj, cj = settings.T
    thetas = np.stack([pi_ - pj, pi_ - cj, ci - pj, ci - cj], axis=1)
    cols = []
    for k in range(4):
        cols.append(WEIGHTS[k] * np.cos(thetas[:, k]))
        cols.append(-WEIGHTS[k] * np.sin(thetas[:, k]))
    return np.stack(cols, axis=1)


@dataclass
class CorrelatorEstimate:
    coherences: np.ndarray  # complex c1..c4
    C: complex  # c1 + sqrt2 c2 + sqrt2 c3 + 2 c4
    abs_C: float
    abs_C_moduli: float  # rho1 + sqrt2 rho2 + sqrt2 rho3 + 2 rho4
    residual: float
    rank: int

    @property
    def rho(self) -> np.ndarray:
        return np.abs(self.coherences)


def reconstruct_correlator(scan: PhaseScan, dynamical_phases=None) -> CorrelatorEstimate:
    """Least-squares fit of the four coherences from a phase scan.

    ``abs_C`` uses the fitted complex coherences and equals |<a_i^dag a_j>|
    when the coherences are phase-referenced (no free evolution, or known
    ``dynamical_phases`` (a, b, c, d) removed). ``abs_C_moduli`` is the sum
    of coherence moduli, which needs no phase reference and is unchanged by
    free evolution; it equals |C| when the four coherences share a phase.
    """
    D = _design(scan.settings)
    sv = np.linalg.svd(D, compute_uv=False)
    rank = int(np.sum(sv > 1e-10 * sv[0]))
    if rank < 8:
        _, _, vh = np.linalg.svd(D)
        null = vh[rank:]
        missing = [PHASE_COMBOS[k] for k in range(4) if np.abs(null[:, 2 * k : 2 * k + 2]).max() > 1e-8]
        raise DomainError(f"phase scan cannot separate the coherences; vary: {', '.join(missing)}")
    x, *_ = np.linalg.lstsq(D, 1.5 * scan.values, rcond=None)
    c = x[0::2] + 1j * x[1::2]
    if dynamical_phases is not None:
        c = c * np.exp(1j * np.asarray(dynamical_phases, float))
    C = complex(np.dot(WEIGHTS, c))
    resid = float(np.linalg.norm(D @ x - 1.5 * scan.values))
    return CorrelatorEstimate(c, C, abs(C), float(np.dot(WEIGHTS, np.abs(c))), resid, rank)


def exact_coherences(state, basis: FockBasis, i: int, j: int) -> np.ndarray:
    """Direct c1..c4 from the reduced pair state (oracle for the fit)."""
    blocks = pair_blocks(state, basis, i, j)
    rho = sum(blocks.values())
    ops = [(1, 0, 0, 1), (1, 0, 1, 2), (2, 1, 0, 1), (2, 1, 1, 2)]
    out = []
    for mi, ni, mj, nj in ops:
        O = np.kron(_x(mi, ni), _x(mj, nj))
        out.append(np.trace(rho @ O))
    return np.array(out)


def coherence_phases(site_i: tuple[float, float], site_j: tuple[float, float], tau: float) -> np.ndarray:
    """Phases (a, b, c, d) picked up by c1..c4 under free atomic evolution.

    Each site is (integrated detuning, eta). Multiplying fitted coherences by
    exp(i * phases) recovers the values at the start of the wait.
    """
    def energies(site):
        dphi, eta = site
        n = np.arange(3)
        return dphi * n + 0.5 * eta * tau * n * (n - 1)

    Ei, Ej = energies(site_i), energies(site_j)
    # <X^mn(t)> = e^{i(E_m - E_n)} <X^mn(0)>
    ph = [
        (Ei[1] - Ei[0]) + (Ej[0] - Ej[1]),
        (Ei[1] - Ei[0]) + (Ej[1] - Ej[2]),
        (Ei[2] - Ei[1]) + (Ej[0] - Ej[1]),
        (Ei[2] - Ei[1]) + (Ej[1] - Ej[2]),
    ]
    return -np.array(ph)


def measure_correlator(state, basis: FockBasis, i: int, j: int, shots: int = 0, seed: int | None = None) -> CorrelatorEstimate:
    return reconstruct_correlator(run_phase_scan(state, basis, i, j, shots=shots, seed=seed))


# ---------------------------------------------------------------------------
# fSim benchmark


def two_qutrit_basis() -> FockBasis:
    """All nine two-qutrit occupation states, index 3*n0 + n1."""
    return FockBasis.capped([2, 2])


def fsim(theta: float) -> np.ndarray:
    """Partial swap on the {|10>, |01>} block of two qutrits (9x9)."""
    M = np.eye(9, dtype=complex)
    a, b = 3, 1  # |10>, |01>
    c, s = math.cos(theta), math.sin(theta)
    M[a, a] = M[b, b] = c
    M[a, b] = M[b, a] = -1j * s
    return M


def _on_site0(G):
    return np.kron(G, np.eye(3))


def benchmark_circuit(theta: float) -> np.ndarray:
    """pi pulse on qutrit 0, fSim(theta), pi pulses in 1-2 then 0-1 of qutrit 0.

    Returns -i sin(theta)|11> + cos(theta)|20> over :func:`two_qutrit_basis`
    (the constant global phase -1 left by the pi pulses is removed).
    """
    psi = np.zeros(9, dtype=complex)
    psi[0] = 1.0
    psi = _on_site0(givens(0, 1, math.pi, 0.0).matrix) @ psi
    psi = fsim(theta) @ psi
    psi = _on_site0(givens(1, 2, math.pi, 0.0).matrix) @ psi
    psi = _on_site0(givens(0, 1, math.pi, 0.0).matrix) @ psi
    return -psi


def predicted_c01(theta: float) -> complex:
    """Closed-form correlator of the benchmark state, (i/sqrt2) sin(2 theta).

    Evaluating <a_0^dag a_1> on the circuit output gives the complex
    conjugate of this value; the moduli agree.
    """
    return 1j / math.sqrt(2.0) * math.sin(2.0 * theta)


def swap_angle(J: float, t_h: float, t_r: float) -> float:
    """Trapezoid pulse area J(t_h + t_r), folded into [0, pi/2]."""
    theta = math.fmod(abs(J * (t_h + t_r)), math.pi)
    return math.pi - theta if theta > math.pi / 2 else theta
