"""Transmon device model: bare circuit Hamiltonian, exact Schrieffer-Wolff
elimination of the couplers, linked-cluster aggregation and export of the
extended Bose-Hubbard coefficients.

Frequencies are angular (rad/ns). Effective operators are stored as
normal-ordered monomials a^dag^alpha a^beta on the qudits, keyed by
``(alpha, beta)`` with alpha, beta tuples of (qudit, power) pairs.
"""

from __future__ import annotations

import itertools
import math
import warnings
from collections import defaultdict
from dataclasses import dataclass, field
from functools import cached_property
from typing import Iterable, Sequence

import numpy as np
import scipy.linalg as sla

from .errors import AmbiguousAssignmentError, DomainError
from .lattice import BoseTerm, BoseTermList, FockBasis, assemble
from .units import khz_to_rad_per_ns

QUDIT_CUTOFF = 4
COUPLER_CUTOFF = 3
MAX_TOTAL = 7
MAX_SECTOR = 3
EXPORT_FLOOR = khz_to_rad_per_ns(50.0)


# ---------------------------------------------------------------------------
# Two-qudit coupling through a tunable coupler


def coupling_g(w1, w2, wc, kd, k1, k2):
    """Coupler-mediated qudit-qudit coupling to second order."""
    wq = 0.5 * (w1 + w2)
    return (kd - k1 * k2 * wq**2 / (wc**2 - wq**2)) * math.sqrt(w1 * w2) / 2.0


def coupler_off_frequency(w1, w2, kd, k1, k2):
    """Coupler frequency at which coupling_g vanishes."""
    if kd <= 0:
        raise DomainError("a positive direct coupling kd is needed for g = 0")
    return 0.5 * (w1 + w2) * math.sqrt(1.0 + k1 * k2 / kd)


# ---------------------------------------------------------------------------
# Bare device


@dataclass(frozen=True)
class Node:
    kind: str  # "qudit" or "coupler"
    omega: float
    eta: float
    pos: tuple = (0, 0)

    def __post_init__(self):
        if self.kind not in ("qudit", "coupler"):
            raise DomainError(f"node kind must be 'qudit' or 'coupler', got {self.kind!r}")
        if not self.omega > 0:
            raise DomainError("node frequencies must be positive")


@dataclass(frozen=True)
class BareDevice:
    """Transmon nodes, symmetric capacitive couplings and truncation.

    ``couplings`` maps node pairs to efficiencies k_ij. Two nodes are
    adjacent for cluster purposes when their grid positions are at
    Manhattan distance 1.
    """

    nodes: tuple
    couplings: dict
    qudit_cutoff: int = QUDIT_CUTOFF
    coupler_cutoff: int = COUPLER_CUTOFF
    max_total: int | None = MAX_TOTAL
    detuning_ratio: float = 5.0

    def __post_init__(self):
        nodes = tuple(self.nodes)
        object.__setattr__(self, "nodes", nodes)
        norm = {}
        for (i, j), k in dict(self.couplings).items():
            if i == j or not (0 <= i < len(nodes) and 0 <= j < len(nodes)):
                raise DomainError(f"bad coupling pair {(i, j)}")
            key = (min(i, j), max(i, j))
            if key in norm and not math.isclose(norm[key], k, rel_tol=1e-12, abs_tol=0.0):
                raise DomainError(f"asymmetric coupling on {key}: {norm[key]} vs {k}")
            norm[key] = float(k)
        object.__setattr__(self, "couplings", norm)
        for (i, j), k in norm.items():
            a, b = nodes[i], nodes[j]
            if {a.kind, b.kind} == {"qudit", "coupler"} and k != 0:
                g = k * math.sqrt(a.omega * b.omega)
                if abs(a.omega - b.omega) < self.detuning_ratio * abs(g):
                    warnings.warn(
                        f"coupler detuning {abs(a.omega - b.omega):.3g} is not large against g = {g:.3g} on {(i, j)}",
                        RuntimeWarning,
                        stacklevel=2,
                    )

    @property
    def nnodes(self) -> int:
        return len(self.nodes)

    @property
    def qudits(self) -> tuple:
        return tuple(i for i, n in enumerate(self.nodes) if n.kind == "qudit")

    @property
    def couplers(self) -> tuple:
        return tuple(i for i, n in enumerate(self.nodes) if n.kind == "coupler")

    @property
    def cutoffs(self) -> tuple:
        return tuple(self.qudit_cutoff if n.kind == "qudit" else self.coupler_cutoff for n in self.nodes)

    @property
    def adjacency(self) -> tuple:
        out = []
        for i, j in itertools.combinations(range(self.nnodes), 2):
            pi, pj = self.nodes[i].pos, self.nodes[j].pos
            if sum(abs(a - b) for a, b in zip(pi, pj)) == 1:
                out.append((i, j))
        return tuple(out)

    def subdevice(self, nodes: Iterable[int]) -> "BareDevice":
        """The device restricted to a node subset (kept in the given order)."""
        nodes = tuple(nodes)
        index = {n: a for a, n in enumerate(nodes)}
        couplings = {(index[i], index[j]): k for (i, j), k in self.couplings.items() if i in index and j in index}
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", RuntimeWarning)
            return BareDevice(
                tuple(self.nodes[n] for n in nodes),
                couplings,
                self.qudit_cutoff,
                self.coupler_cutoff,
                self.max_total,
                self.detuning_ratio,
            )


def chain_device(
    nqudits: int,
    omega_q,
    eta_q: float,
    omega_c,
    eta_c: float,
    k_qc: float,
    k_qq: float = 0.0,
    k_cc: float = 0.0,
    **kw,
) -> BareDevice:
    """Qudit-coupler-qudit-... chain; couplers sit between neighbouring qudits.

    ``k_qq`` couples neighbouring qudits directly and ``k_cc`` neighbouring
    couplers. ``omega_q`` and ``omega_c`` may be scalars or per-node lists.
    """
    if nqudits < 1:
        raise DomainError("need at least one qudit")
    wq = np.broadcast_to(np.asarray(omega_q, float), (nqudits,))
    wc = np.broadcast_to(np.asarray(omega_c, float), (max(nqudits - 1, 0),))
    nodes = []
    couplings = {}
    for q in range(nqudits):
        nodes.append(Node("qudit", float(wq[q]), eta_q, (2 * q, 0)))
        if q < nqudits - 1:
            nodes.append(Node("coupler", float(wc[q]), eta_c, (2 * q + 1, 0)))
    for q in range(nqudits - 1):
        a, c, b = 2 * q, 2 * q + 1, 2 * q + 2
        couplings[(a, c)] = k_qc
        couplings[(c, b)] = k_qc
        if k_qq:
            couplings[(a, b)] = k_qq
        if k_cc and q < nqudits - 2:
            couplings[(c, c + 2)] = k_cc
    return BareDevice(tuple(nodes), couplings, **kw)


def dimer_device(w1, w2, wc, kd, k1, k2, eta_q=-1.2, eta_c=-1.2, **kw) -> BareDevice:
    """Two qudits and their coupler, parameterized as in coupling_g.

    The circuit's direct qudit-qudit efficiency is kd + k1 k2: the k1 k2
    part cancels the constant that the coupler's counter-rotating exchange
    adds, so that the effective coupling tends to coupling_g.
    """
    nodes = (
        Node("qudit", w1, eta_q, (0, 0)),
        Node("coupler", wc, eta_c, (1, 0)),
        Node("qudit", w2, eta_q, (2, 0)),
    )
    return BareDevice(nodes, {(0, 1): k1, (1, 2): k2, (0, 2): kd + k1 * k2}, **kw)


def bare_terms(device: BareDevice) -> BoseTermList:
    """sum_i omega_i n_i + eta_i/2 n_i(n_i-1) + sum_ij k_ij/2 sqrt(w_i w_j)(a_i + a_i^dag)(a_j + a_j^dag)."""
    terms = []
    for i, n in enumerate(device.nodes):
        terms.append(BoseTerm(n.omega, ((i, "number"),)))
        terms.append(BoseTerm(0.5 * n.eta, ((i, "n2"),)))
    for (i, j), k in device.couplings.items():
        if k == 0:
            continue
        c = 0.5 * k * math.sqrt(device.nodes[i].omega * device.nodes[j].omega)
        for ti, tj in itertools.product(("raise", "lower"), repeat=2):
            terms.append(BoseTerm(c, ((i, ti), (j, tj))))
    return BoseTermList(tuple(terms), hermitian=True, allow_nonconserving=True)


@dataclass
class BareSystem:
    device: BareDevice
    basis: FockBasis
    H: object  # scipy sparse

    @cached_property
    def spectrum(self):
        """Full eigendecomposition of the (real symmetric) bare Hamiltonian."""
        Hd = self.H.toarray()
        if np.abs(Hd.imag).max(initial=0.0) == 0.0:
            Hd = Hd.real
        return sla.eigh(Hd)


def bare_hamiltonian(device: BareDevice) -> BareSystem:
    basis = FockBasis.capped(device.cutoffs, device.max_total)
    return BareSystem(device, basis, assemble(bare_terms(device), basis))


# ---------------------------------------------------------------------------
# Exact Schrieffer-Wolff transformation


def qudit_basis(nqudits: int, nmax: int = MAX_SECTOR) -> FockBasis:
    """Qudit-only states with at most ``nmax`` excitations in total."""
    return FockBasis.capped([nmax] * nqudits, nmax)


def _p0_indices(bare: BareSystem, qb: FockBasis, n: int) -> tuple[np.ndarray, np.ndarray]:
    """(rows in qb, rows in the bare basis) of the n-excitation qudit states."""
    dev = bare.device
    rows = np.nonzero(qb.totals() == n)[0]
    occ = np.zeros((len(rows), dev.nnodes), dtype=np.int64)
    occ[:, list(dev.qudits)] = qb.states[rows]
    idx = bare.basis.lookup(occ)
    if np.any(idx < 0):
        raise DomainError("bare truncation is too small to hold the qudit sector")
    return rows, idx


def _principal_sqrt_unitary(M: np.ndarray, branch_tol: float = 1e-6) -> np.ndarray:
    T, Z = sla.schur(M, output="complex")
    lam = np.diag(T)
    near = np.abs(lam + 1.0) < branch_tol
    if near.any():
        warnings.warn(
            f"{int(near.sum())} eigenvalue(s) of (2P-I)(2P0-I) within {branch_tol} of -1; "
            "the principal square root is ill-defined there",
            RuntimeWarning,
            stacklevel=3,
        )
    return (Z * np.sqrt(lam)) @ Z.conj().T


@dataclass
class SWSector:
    n: int
    rows: np.ndarray  # rows of the qudit basis in this sector
    H_eff: np.ndarray
    dressed_energies: np.ndarray
    overlaps: np.ndarray  # ||P0 v||^2 of the selected eigenvectors


def select_dressed(bare: BareSystem, p0_idx: np.ndarray, gap_tol: float = 0.2) -> np.ndarray:
    """Indices of the eigenvectors spanning the dressed image of P0.

    The d eigenvectors with the largest weight in P0 are taken. The choice is
    ambiguous when the weakest selected and the strongest rejected weights
    are closer than ``gap_tol``.
    """
    _, V = bare.spectrum
    d = len(p0_idx)
    w = np.sum(np.abs(V[p0_idx, :]) ** 2, axis=0)
    order = np.argsort(-w, kind="stable")
    if d < len(w) and w[order[d - 1]] - w[order[d]] < gap_tol:
        lo, hi = w[order[d]], w[order[d - 1]]
        boundary = [k for k in order if hi - gap_tol <= w[k] <= lo + gap_tol]
        contested = sorted({int(p0_idx[np.argmax(np.abs(V[p0_idx, k]))]) for k in boundary})
        states = [tuple(int(x) for x in bare.basis.states[i]) for i in contested]
        raise AmbiguousAssignmentError(
            f"eigenvectors with P0 weights {hi:.3f} and {lo:.3f} compete for the sector; contested states {states}",
            contested=states,
        )
    return np.sort(order[:d])


def exact_sw(bare: BareSystem, n: int, qb: FockBasis | None = None, gap_tol: float = 0.2) -> SWSector:
    """Effective Hamiltonian of the n-excitation qudit sector.

    U is the principal square root of (2P - I)(2P0 - I) and
    H_eff = P0 U^dag H U P0 restricted to the sector.
    """
    dev = bare.device
    if n < 0:
        raise DomainError("sector must be non-negative")
    qb = qb or qudit_basis(len(dev.qudits), max(n, MAX_SECTOR))
    rows, p0 = _p0_indices(bare, qb, n)
    E, V = bare.spectrum
    sel = select_dressed(bare, p0, gap_tol)
    D = bare.basis.dim
    Vs = V[:, sel]
    P = Vs @ Vs.conj().T
    R0 = -np.eye(D)
    R0[p0, p0] = 1.0
    R = 2.0 * P - np.eye(D)
    U = _principal_sqrt_unitary(R @ R0)
    UP0 = U[:, p0]
    H = bare.H.toarray()
    Heff = UP0.conj().T @ H @ UP0
    Heff = 0.5 * (Heff + Heff.conj().T)
    if np.isrealobj(H) or np.abs(Heff.imag).max(initial=0.0) < 1e-12 * max(1.0, np.abs(Heff).max(initial=0.0)):
        Heff = Heff.real
    ov = np.sum(np.abs(V[np.ix_(p0, sel)]) ** 2, axis=0)
    return SWSector(n, rows, Heff, E[sel], ov)


def exact_sw_reduced(bare: BareSystem, n: int, qb: FockBasis | None = None, gap_tol: float = 0.2) -> np.ndarray:
    """Same effective operator through U P0 = P P0 (P0 P P0)^(-1/2).

    This avoids the full-space square root and serves as a cross-check.
    """
    qb = qb or qudit_basis(len(bare.device.qudits), max(n, MAX_SECTOR))
    _, p0 = _p0_indices(bare, qb, n)
    E, V = bare.spectrum
    sel = select_dressed(bare, p0, gap_tol)
    Vs = V[:, sel]
    A = Vs[p0, :]  # <p0|v>
    # P P0 restricted: columns V_s A^dag; Gram matrix P0 P P0 = A A^dag
    G = A @ A.conj().T
    w, Q = np.linalg.eigh(G)
    Ginv = (Q / np.sqrt(w)) @ Q.conj().T
    X = A.conj().T @ Ginv  # coordinates of U P0 in the selected eigenbasis
    Heff = X.conj().T @ (E[sel][:, None] * X)
    return 0.5 * (Heff + Heff.conj().T)


@dataclass
class EffectiveOperator:
    """Block-diagonal effective qudit Hamiltonian over sectors 0..nmax."""

    qudits: tuple  # device node indices of the qudits
    basis: FockBasis
    matrix: np.ndarray
    sectors: list = field(default_factory=list)


def effective_hamiltonian(
    device: BareDevice, nmax: int = MAX_SECTOR, gap_tol: float = 0.2, method: str = "sqrt"
) -> EffectiveOperator:
    """Direct sum of the exact SW sectors n = 0..nmax.

    ``method="sqrt"`` forms U as a full-space matrix square root;
    ``"reduced"`` uses the equivalent sector-sized formula, which is much
    cheaper for large clusters.
    """
    if method not in ("sqrt", "reduced"):
        raise DomainError(f"unknown SW method {method!r}")
    bare = bare_hamiltonian(device)
    qb = qudit_basis(len(device.qudits), nmax)
    M = np.zeros((qb.dim, qb.dim))
    sectors = []
    for n in range(nmax + 1):
        if method == "sqrt":
            s = exact_sw(bare, n, qb, gap_tol)
            rows, block = s.rows, s.H_eff
            sectors.append(s)
        else:
            rows = np.nonzero(qb.totals() == n)[0]
            block = exact_sw_reduced(bare, n, qb, gap_tol)
        M = M.astype(np.result_type(M, block))
        M[np.ix_(rows, rows)] = block
    return EffectiveOperator(device.qudits, qb, M, sectors)


# ---------------------------------------------------------------------------
# Normal-ordered monomials


def _monomial_term(alpha, beta, coeff=1.0) -> BoseTerm:
    factors = [(s, "raise") for s, p in alpha for _ in range(p)]
    factors += [(s, "lower") for s, p in beta for _ in range(p)]
    return BoseTerm(coeff, tuple(factors))


def _occ_key(occ) -> tuple:
    return tuple((int(s), int(p)) for s, p in enumerate(occ) if p)


def normal_ordered_coefficients(matrix: np.ndarray, basis: FockBasis, labels: Sequence[int] | None = None) -> dict:
    """Expand a number-conserving operator on a capped basis into monomials.

    Monomials are solved degree by degree: between states of total d only
    the monomial a^dag^x a^y with |x| = |y| = d and all lower-degree ones
    have matrix elements, so each coefficient follows from one entry of the
    residual. ``labels`` renames local sites (e.g. to global qudit ids).
    """
    labels = list(range(basis.nsites)) if labels is None else list(labels)
    tot = basis.totals()
    nmax = int(tot.max(initial=0))
    coeffs = {}
    R = np.array(matrix, dtype=complex)
    for d in range(nmax + 1):
        rows = np.nonzero(tot == d)[0]
        block = R[np.ix_(rows, rows)]
        new = []
        for a, ra in enumerate(rows):
            xa = basis.states[ra]
            fa = math.prod(math.factorial(int(v)) for v in xa)
            for b, rb in enumerate(rows):
                c = block[a, b]
                if c == 0:
                    continue
                xb = basis.states[rb]
                fb = math.prod(math.factorial(int(v)) for v in xb)
                c = c / math.sqrt(fa * fb)
                new.append((_occ_key(xa), _occ_key(xb), c))
        if d < nmax and new:
            terms = BoseTermList(tuple(_monomial_term(al, be, c) for al, be, c in new))
            R = R - assemble(terms, basis).toarray()
        for al, be, c in new:
            key = (tuple((labels[s], p) for s, p in al), tuple((labels[s], p) for s, p in be))
            coeffs[key] = coeffs.get(key, 0) + c
    return coeffs


def coefficients_to_terms(coeffs: dict, relabel: dict | None = None) -> BoseTermList:
    terms = []
    for (al, be), c in sorted(coeffs.items()):
        if relabel is not None:
            al = tuple((relabel[s], p) for s, p in al)
            be = tuple((relabel[s], p) for s, p in be)
        terms.append(_monomial_term(al, be, c))
    return BoseTermList(tuple(terms), hermitian=True)


def effective_coefficients(device: BareDevice, nmax: int = MAX_SECTOR, labels=None, method: str = "sqrt") -> dict:
    op = effective_hamiltonian(device, nmax, method=method)
    labels = op.qudits if labels is None else labels
    return normal_ordered_coefficients(op.matrix, op.basis, labels)


# ---------------------------------------------------------------------------
# Linked clusters


@dataclass(frozen=True)
class Cluster:
    nodes: tuple
    generation: int  # size at which the cluster was first grown

    @property
    def size(self) -> int:
        return len(self.nodes)


def _neighbours(adjacency) -> dict:
    nb = defaultdict(set)
    for i, j in adjacency:
        nb[i].add(j)
        nb[j].add(i)
    return nb


def is_connected(nodes: Iterable[int], adjacency) -> bool:
    nodes = set(nodes)
    if not nodes:
        return False
    nb = _neighbours([(i, j) for i, j in adjacency if i in nodes and j in nodes])
    start = next(iter(nodes))
    seen, stack = {start}, [start]
    while stack:
        for m in nb[stack.pop()]:
            if m not in seen:
                seen.add(m)
                stack.append(m)
    return seen == nodes


def enumerate_clusters(nnodes: int, adjacency, kmax: int, within: Iterable[int] | None = None) -> list[Cluster]:
    """All connected node subsets with at most ``kmax`` nodes, ordered by
    size and then lexicographically."""
    if kmax < 1:
        raise DomainError("kmax must be at least 1")
    allowed = set(range(nnodes)) if within is None else set(within)
    nb = _neighbours(adjacency)
    level = {frozenset([i]) for i in allowed}
    found = set(level)
    for _ in range(kmax - 1):
        nxt = set()
        for c in level:
            for i in c:
                for m in nb[i]:
                    if m in allowed and m not in c:
                        nxt.add(c | {m})
        nxt -= found
        found |= nxt
        level = nxt
        if not level:
            break
    return [Cluster(tuple(sorted(c)), len(c)) for c in sorted(found, key=lambda c: (len(c), sorted(c)))]


def cluster_effective(device: BareDevice, cluster: Cluster, nmax: int = MAX_SECTOR, method: str = "sqrt") -> dict:
    """Monomial coefficients of H_eff(c), labelled by device qudit indices."""
    sub = device.subdevice(cluster.nodes)
    labels = [cluster.nodes[i] for i in sub.qudits]
    if not labels:
        return {}
    return effective_coefficients(sub, nmax, labels, method)


def _add(acc: dict, other: dict, sign: float = 1.0):
    for k, v in other.items():
        acc[k] = acc.get(k, 0) + sign * v


def cluster_weights(clusters: Sequence[Cluster], heff: dict, adjacency) -> dict:
    """W(c) = H_eff(c) - sum over connected proper subclusters of W(c').

    ``heff`` maps cluster node tuples to monomial dictionaries.
    """
    weights = {}
    for c in sorted(clusters, key=lambda c: (c.size, c.nodes)):
        if c.nodes not in heff:
            raise DomainError(f"no effective Hamiltonian for cluster {c.nodes}")
        w = dict(heff[c.nodes])
        if c.size > 1:
            subs = enumerate_clusters(max(c.nodes) + 1, adjacency, c.size - 1, within=c.nodes)
            for s in subs:
                if s.nodes not in weights:
                    raise DomainError(f"subcluster {s.nodes} of {c.nodes} is missing")
                _add(w, weights[s.nodes], -1.0)
        weights[c.nodes] = w
    return weights


def aggregate_coefficients(weights: dict) -> dict:
    total = {}
    for w in weights.values():
        _add(total, w)
    return total


def aggregate(weights: dict, device: BareDevice) -> BoseTermList:
    """Sum of all cluster weights as a term list on qudit sites 0..nq-1."""
    relabel = {q: a for a, q in enumerate(device.qudits)}
    return coefficients_to_terms(aggregate_coefficients(weights), relabel)


def linked_cluster_expansion(device: BareDevice, kmax: int, nmax: int = MAX_SECTOR, method: str = "sqrt") -> dict:
    """Aggregated monomial coefficients from all linked clusters up to kmax."""
    adj = device.adjacency
    clusters = enumerate_clusters(device.nnodes, adj, kmax)
    heff = {c.nodes: cluster_effective(device, c, nmax, method) for c in clusters}
    return aggregate_coefficients(cluster_weights(clusters, heff, adj))


def convergence_sweep(
    device: BareDevice, kmax_values: Sequence[int], nmax: int = MAX_SECTOR, method: str = "sqrt"
) -> tuple[dict, dict]:
    """Expansions at several kmax and the max per-term change between
    consecutive values (keyed by the larger kmax)."""
    adj = device.adjacency
    kmax_values = sorted(kmax_values)
    clusters = enumerate_clusters(device.nnodes, adj, kmax_values[-1])
    heff = {c.nodes: cluster_effective(device, c, nmax, method) for c in clusters}
    results = {}
    for k in kmax_values:
        sub = [c for c in clusters if c.size <= k]
        results[k] = aggregate_coefficients(cluster_weights(sub, heff, adj))
    deltas = {}
    for a, b in zip(kmax_values, kmax_values[1:]):
        keys = set(results[a]) | set(results[b])
        deltas[b] = max((abs(results[b].get(k, 0) - results[a].get(k, 0)) for k in keys), default=0.0)
    return results, deltas


def truncation_sensitivity(device: BareDevice, nmax: int = MAX_SECTOR, method: str = "reduced") -> dict:
    """Max per-term change of the effective coefficients when every cutoff
    (per-node and total) is moved by +1 and by -1."""
    if device.max_total is None:
        raise DomainError("the diagnostic needs a total-excitation cap")
    ref = effective_coefficients(device, nmax, method=method)
    out = {}
    for step in (+1, -1):
        dev = BareDevice(
            device.nodes,
            device.couplings,
            device.qudit_cutoff + step,
            device.coupler_cutoff + step,
            device.max_total + step,
            device.detuning_ratio,
        )
        other = effective_coefficients(dev, nmax, method=method)
        keys = set(ref) | set(other)
        out["plus" if step > 0 else "minus"] = max((abs(other.get(k, 0) - ref.get(k, 0)) for k in keys), default=0.0)
    return out


# ---------------------------------------------------------------------------
# Extended Bose-Hubbard export

CATEGORIES = ("J", "mu", "U", "V", "K", "W", "X", "V'", "W'", "J2", "X2", "T")


@dataclass(frozen=True)
class TermEntry:
    category: str
    sites: tuple  # qudit indices (0..nq-1)
    value: float
    orientation: str = ""
    monomial: tuple = ()


@dataclass
class EffectiveTermReport:
    terms: dict  # category -> list[TermEntry]
    residual: list
    offset: float
    frame: float
    convergence: dict = field(default_factory=dict)

    def values(self, category: str) -> np.ndarray:
        return np.array([t.value for t in self.terms.get(category, [])])

    @property
    def stats(self) -> dict:
        out = {}
        for cat in CATEGORIES:
            v = self.values(cat)
            if len(v):
                out[cat] = {"mean": float(v.mean()), "min": float(v.min()), "max": float(v.max()), "count": len(v)}
        return out

    def populated(self) -> set:
        return {c for c in CATEGORIES if self.terms.get(c)}


def _pair_geometry(pi, pj, spacing):
    dx, dy = (pj[0] - pi[0]) / spacing, (pj[1] - pi[1]) / spacing
    if abs(dx) + abs(dy) == 1:
        return "nn", ""
    if abs(dx) == 1 and abs(dy) == 1:
        return "nnn", "diag+" if dx * dy > 0 else "diag-"
    if (abs(dx) == 2 and dy == 0) or (dx == 0 and abs(dy) == 2):
        return "nnn", "inline"
    return "far", ""


def _classify(al, be, pos, spacing):
    """(category, sites, scale, orientation) or None for the residual.

    ``scale`` converts the monomial coefficient to the category's value.
    """
    a, b = dict(al), dict(be)
    sites = sorted(set(a) | set(b))
    if a == b:  # diagonal: products of n_i(n_i-1)...
        if len(sites) == 1:
            p = a[sites[0]]
            return {1: ("mu", sites, -1.0, ""), 2: ("U", sites, 2.0, ""), 3: ("W", sites, 6.0, "")}.get(p)
        if len(sites) == 2:
            i, j = sites
            kind, _ = _pair_geometry(pos[i], pos[j], spacing)
            if kind != "nn":
                return None
            pw = (a[i], a[j])
            if pw == (1, 1):
                return ("V", [i, j], 1.0, "")
            if pw == (2, 1):
                return ("K", [i, j], 1.0, "")
            if pw == (1, 2):
                return ("K", [j, i], 1.0, "")
        return None
    # hopping: one quantum moves from j to i, the rest are spectators
    diff = {s: a.get(s, 0) - b.get(s, 0) for s in sites}
    up = [s for s, v in diff.items() if v == 1]
    dn = [s for s, v in diff.items() if v == -1]
    if len(up) != 1 or len(dn) != 1 or any(v not in (-1, 0, 1) for v in diff.values()):
        return None
    i, j = up[0], dn[0]
    spect = {s: b.get(s, 0) for s in sites if s not in (i, j)}
    p, q = b.get(i, 0), a.get(j, 0)  # spectator powers on i and j
    kind, orient = _pair_geometry(pos[i], pos[j], spacing)
    if spect:
        if len(spect) == 1 and p == 0 and q == 0 and kind == "nnn":
            (k, pk), = spect.items()
            if pk == 1 and _pair_geometry(pos[i], pos[k], spacing)[0] == "nn" and _pair_geometry(pos[k], pos[j], spacing)[0] == "nn":
                return ("T", [k, i, j], -1.0, orient)
        return None
    if kind == "nn":
        cat = {(0, 0): "J", (1, 0): "X", (0, 1): "X", (1, 1): "V'", (2, 0): "W'", (0, 2): "W'"}.get((p, q))
        return (cat, [i, j], -1.0, "") if cat else None
    if kind == "nnn":
        cat = {(0, 0): "J2", (1, 0): "X2", (0, 1): "X2"}.get((p, q))
        return (cat, [i, j], -1.0, orient) if cat else None
    return None


def export_extended_bh(
    coeffs: dict,
    device: BareDevice,
    floor: float = EXPORT_FLOOR,
    drop_small: bool = True,
    frame: float | None = None,
    herm_tol: float = 1e-9,
    convergence: dict | None = None,
) -> EffectiveTermReport:
    """Sort aggregated monomials into the extended Bose-Hubbard templates.

    ``coeffs`` is keyed by device qudit indices. ``frame`` (default: mean
    qudit frequency) is subtracted from the on-site energies, i.e. the
    report is in the frame rotating at that frequency, and mu_i = frame - w_i.
    Each Hermitian pair of monomials is reported once, with i < j for
    hoppings. Magnitudes below ``floor`` go to the residual when
    ``drop_small`` is set.
    """
    qudits = device.qudits
    local = {q: a for a, q in enumerate(qudits)}
    pos = [device.nodes[q].pos for q in qudits]
    if len(pos) > 1:
        spacing = min(
            sum(abs(x - y) for x, y in zip(pos[a], pos[b])) for a, b in itertools.combinations(range(len(pos)), 2)
        )
    else:
        spacing = 1
    if frame is None:
        frame = float(np.mean([device.nodes[q].omega for q in qudits]))
    c = {}
    for (al, be), v in coeffs.items():
        key = (tuple((local[s], p) for s, p in al), tuple((local[s], p) for s, p in be))
        c[key] = c.get(key, 0) + v
    for (al, be), v in c.items():
        partner = c.get((be, al), 0)
        if abs(v - np.conj(partner)) > herm_tol * max(1.0, abs(v)):
            raise DomainError(f"exported terms are not Hermitian at {(al, be)}")
    terms = {cat: [] for cat in CATEGORIES}
    residual = []
    offset = 0.0
    for (al, be), v in sorted(c.items()):
        if not al and not be:
            offset = float(np.real(v))
            continue
        if (be, al) in c and (be, al) < (al, be):
            continue  # report each Hermitian pair once
        cls = _classify(al, be, pos, spacing)
        if cls is None:
            residual.append(TermEntry("residual", (), complex(v), "", (al, be)))
            continue
        cat, sites, scale, orient = cls
        val = scale * float(np.real(v))
        if cat == "mu":
            val = frame - float(np.real(v))
        if drop_small and abs(val) < floor and cat not in ("mu", "U"):
            residual.append(TermEntry(cat, tuple(sites), val, orient, (al, be)))
            continue
        terms[cat].append(TermEntry(cat, tuple(sites), val, orient, (al, be)))
    return EffectiveTermReport(terms, residual, offset, frame, dict(convergence or {}))
