"""Low-lying spectra and static observables of states over a FockBasis."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import NamedTuple, Sequence

import numpy as np
import scipy.linalg as sla
import scipy.sparse as sp

from .errors import ConvergenceError, DomainError
from .lattice import BoseTermList, FockBasis, LatticeSpec, assemble

DENSE_THRESHOLD = 2000
DEGENERACY_GAP = 1e-9


@dataclass
class EigenSolution:
    eigenvalues: np.ndarray
    eigenvectors: np.ndarray  # columns are states
    residuals: np.ndarray

    def __len__(self):
        return len(self.eigenvalues)

    def state(self, k: int) -> np.ndarray:
        return self.eigenvectors[:, k]

    @property
    def ground_state(self) -> np.ndarray:
        return self.eigenvectors[:, 0]

    @property
    def ground_energy(self) -> float:
        return float(self.eigenvalues[0])


def _canonical_cluster(Q: np.ndarray) -> np.ndarray:
    """Deterministic orthonormal basis of span(Q).

    Greedy rule: take the lowest basis index with a non-negligible row in
    the remaining subspace, project that basis vector onto the subspace to
    get the next vector (real positive at that index), then restrict the
    subspace to its orthogonal complement. Index 0 is the lexicographically
    first Fock state, so vectors come out ordered by first overlap.
    """
    d = Q.shape[1]
    if d == 1:
        return _fix_phase(Q)
    out = []
    R = Q.copy()
    while R.shape[1] > 0:
        norms = np.linalg.norm(R, axis=1)
        thresh = 1e-6 * norms.max()
        p = int(np.argmax(norms > thresh))
        row = R[p, :].conj()
        coeff = row / np.linalg.norm(row)
        out.append(R @ coeff)
        if R.shape[1] == 1:
            break
        # columns c with c^H coeff = 0 (rows of vh are orthonormal to vh[0] ~ coeff)
        _, _, vh = np.linalg.svd(coeff[None, :])
        comp = vh[1:].T
        R = R @ comp
    V = np.column_stack(out)
    # re-orthonormalize (Gram-Schmidt in order keeps the greedy ordering)
    V, r = np.linalg.qr(V)
    V = V * np.sign(np.diag(r)).conj()
    return V


def _fix_phase(V: np.ndarray) -> np.ndarray:
    """Make the largest-magnitude component of each column real positive."""
    V = V.copy()
    for k in range(V.shape[1]):
        mag = np.abs(V[:, k])
        p = int(np.argmax(mag >= mag.max() * (1 - 1e-10)))
        ph = V[p, k] / abs(V[p, k])
        V[:, k] /= ph
    return V


def _canonicalize(evals, evecs):
    order = np.argsort(evals, kind="stable")
    evals, evecs = evals[order], evecs[:, order]
    out = evecs.astype(complex, copy=True)
    k = 0
    n = len(evals)
    while k < n:
        m = k + 1
        while m < n and evals[m] - evals[m - 1] < DEGENERACY_GAP * max(1.0, abs(evals[m])):
            m += 1
        if m - k == 1:
            out[:, k : k + 1] = _fix_phase(out[:, k : k + 1])
        else:
            out[:, k:m] = _canonical_cluster(out[:, k:m])
        k = m
    return evals, out


def _residuals(H, evals, evecs):
    R = H @ evecs - evecs * evals[None, :]
    return np.linalg.norm(R, axis=0)


def _orth_against(v, V, passes=2):
    for _ in range(passes):
        if V.shape[1]:
            v = v - V @ (V.conj().T @ v)
    return v


def lanczos_lowest(H, kcount, ncv=None, tol=1e-10, maxiter=300, seed=0):
    """Restarted Lanczos with full reorthogonalization.

    The Krylov basis is kept explicitly (reorthogonalized twice per step)
    and the projected matrix is formed from stored H*V columns. On restart
    the lowest Ritz vectors are kept and the residual of the lowest
    unconverged pair seeds the next expansion. After convergence a fresh
    random start in the orthogonal complement checks for eigenvalues the
    single-vector recursion can miss (e.g. exact degeneracies).
    """
    n = H.shape[0]
    ncv = ncv or min(n, max(2 * kcount + 20, 40))
    keep = min(ncv - 2, kcount + max(kcount // 2, 5))
    rng = np.random.default_rng(seed)

    def matvec(v):
        return H @ v

    def fresh(V):
        for _ in range(5):
            v = _orth_against(rng.standard_normal(n) + 1j * rng.standard_normal(n), V)
            nv = np.linalg.norm(v)
            if nv > 1e-8:
                return v / nv
        return None

    V = np.zeros((n, 0), complex)
    AV = np.zeros((n, 0), complex)
    v = fresh(V)
    verified = False
    theta = y = None
    for it in range(maxiter):
        while V.shape[1] < ncv and v is not None:
            V = np.column_stack([V, v])
            w = matvec(v)
            AV = np.column_stack([AV, w])
            w = _orth_against(w, V)
            nw = np.linalg.norm(w)
            if nw < 1e-12 * max(1.0, np.abs(AV).max()):
                v = fresh(V) if V.shape[1] < n else None
            else:
                v = w / nw
        T = V.conj().T @ AV
        T = 0.5 * (T + T.conj().T)
        theta, y = np.linalg.eigh(T)
        X = V @ y
        R = AV @ y - X * theta[None, :]
        res = np.linalg.norm(R, axis=0)
        k = min(kcount, len(theta))
        scale = np.maximum(1.0, np.abs(theta[:k]))
        conv = res[:k] < tol * scale
        if k == kcount and conv.all():
            if verified or V.shape[1] >= n:
                return theta[:k], X[:, :k], res[:k]
            # verification pass in the complement of the converged block
            verified = True
            V = X[:, :keep].copy()
            AV = AV @ y[:, :keep]
            v = fresh(V)
            continue
        verified = False
        V = X[:, :keep].copy()
        AV = AV @ y[:, :keep]
        bad = int(np.argmin(conv)) if not conv.all() else 0
        v = _orth_against(R[:, bad], V)
        nv = np.linalg.norm(v)
        v = v / nv if nv > 1e-14 else fresh(V)
    raise ConvergenceError(f"Lanczos did not converge in {maxiter} restarts", residuals=res[:kcount])


def solve_low_spectrum(H, kcount: int, dense_threshold: int = DENSE_THRESHOLD, tol: float = 1e-10) -> EigenSolution:
    """The kcount lowest eigenpairs of a Hermitian operator."""
    n = H.shape[0]
    if kcount < 1 or kcount > n:
        raise DomainError(f"kcount={kcount} must lie in [1, {n}]")
    if n <= dense_threshold:
        Hd = H.toarray() if sp.issparse(H) else np.asarray(H)
        if np.iscomplexobj(Hd) and not np.any(Hd.imag):
            Hd = Hd.real
        # a few extra levels so degenerate partners of the last one are seen
        top = min(n, kcount + 8)
        while True:
            if top == n:
                evals, evecs = np.linalg.eigh(Hd)
            else:
                evals, evecs = sla.eigh(Hd, subset_by_index=[0, top - 1], driver="evr")
            m = kcount
            while m < top and evals[m] - evals[m - 1] < DEGENERACY_GAP * max(1.0, abs(evals[m])):
                m += 1
            if m < top or top == n:
                break
            top = min(n, 2 * top)
        evals, evecs = _canonicalize(evals[:m], evecs[:, :m])
    else:
        H = sp.csr_matrix(H)
        evals, evecs, _ = lanczos_lowest(H, kcount, tol=tol)
        evals, evecs = _canonicalize(evals, evecs)
    evals, evecs = evals[:kcount], evecs[:, :kcount]
    res = _residuals(H, evals, evecs)
    bad = res > 1e-8 * np.maximum(1.0, np.abs(evals))
    if bad.any():
        raise ConvergenceError("eigenpair residuals above tolerance", residuals=res)
    return EigenSolution(np.asarray(evals, float), evecs, res)


# ---------------------------------------------------------------------------
# Observables


def expectation(op, state) -> complex:
    return complex(np.vdot(state, op @ state))


def site_densities(state, basis: FockBasis) -> np.ndarray:
    return (np.abs(state) ** 2) @ basis.states.astype(float)


def spdm(state, basis: FockBasis) -> np.ndarray:
    """C[i, j] = <a_i^dag a_j>."""
    ns = basis.nsites
    occ = basis.states
    p = np.abs(state) ** 2
    C = np.zeros((ns, ns), dtype=complex)
    C[np.arange(ns), np.arange(ns)] = p @ occ
    cut = np.array(basis.cutoffs)
    for j in range(ns):
        nj = occ[:, j]
        src_ok = nj > 0
        for i in range(ns):
            if i == j:
                continue
            ni = occ[:, i]
            ok = src_ok & (ni < cut[i])
            if not ok.any():
                continue
            idx = np.nonzero(ok)[0]
            tgt_keys = basis.keys[idx] - basis.weights[j] + basis.weights[i]
            tgt = basis.lookup_keys(tgt_keys)
            good = tgt >= 0
            idx, tgt = idx[good], tgt[good]
            amp = np.sqrt(nj[idx] * (ni[idx] + 1.0))
            C[i, j] = np.sum(np.conj(state[tgt]) * amp * state[idx])
    return C


class CondensateResult(NamedTuple):
    fraction: float
    wavefunction: np.ndarray
    largest_eigenvalue: float


def condensate_fraction(C, ntotal) -> CondensateResult:
    """Largest SPDM eigenvalue over the particle number, with its eigenvector."""
    if ntotal <= 0:
        raise DomainError("condensate fraction is undefined for zero particles")
    C = 0.5 * (C + np.conj(C).T)
    w, v = np.linalg.eigh(C)
    vec = _fix_phase(v[:, -1:])[:, 0]
    return CondensateResult(float(w[-1] / ntotal), vec, float(w[-1]))


def correlator_profile(C, lattice: LatticeSpec, mode: str = "full") -> np.ndarray:
    """Mean |C_ij| per Manhattan distance d = 0..max.

    ``mode="full"`` averages over all unordered pairs; ``mode="corner"``
    takes pairs (0, j) from the corner site only.
    """
    C = np.asarray(C)
    dmax = lattice.max_distance
    sums = np.zeros(dmax + 1)
    counts = np.zeros(dmax + 1)
    ns = lattice.nsites
    if mode == "full":
        pairs = ((i, j) for i in range(ns) for j in range(i, ns))
    elif mode == "corner":
        pairs = ((0, j) for j in range(ns))
    else:
        raise DomainError(f"unknown profile mode {mode!r}")
    for i, j in pairs:
        d = lattice.manhattan(i, j)
        sums[d] += abs(C[i, j])
        counts[d] += 1
    with np.errstate(invalid="ignore"):
        return np.where(counts > 0, sums / np.maximum(counts, 1), np.nan)


def doublon_fraction(state, basis: FockBasis) -> float:
    """Site-averaged <n(n-1)>/2."""
    occ = basis.states.astype(float)
    p = np.abs(state) ** 2
    return float(np.mean(p @ (occ * (occ - 1) / 2)))


def _classify(term) -> str:
    if any(tag in ("raise", "lower") for _, tag in term.factors):
        return "K"
    if len(term.factors) == 1 and term.factors[0][1] == "number":
        return "V_delta"
    return "V_int"


class EnergyDecomposition(NamedTuple):
    K: float
    V_int: float
    V_delta: float

    @property
    def total(self) -> float:
        return self.K + self.V_int + self.V_delta


def energy_decomposition(state, terms: BoseTermList, basis: FockBasis) -> EnergyDecomposition:
    """Split <H> into hopping, interaction and on-site potential parts.

    Terms with a raising or lowering factor count as kinetic, single number
    factors as on-site potential, everything else as interaction. The parts
    therefore add up to <H> for any term list, whatever its sign convention.
    """
    groups = {"K": [], "V_int": [], "V_delta": []}
    for t in terms.terms:
        groups[_classify(t)].append(t)
    vals = {}
    for name, ts in groups.items():
        if ts:
            op = assemble(BoseTermList(tuple(ts), allow_nonconserving=terms.allow_nonconserving), basis)
            vals[name] = float(np.real(expectation(op, state)))
        else:
            vals[name] = 0.0
    return EnergyDecomposition(vals["K"], vals["V_int"], vals["V_delta"])


def default_left_sites(lattice: LatticeSpec) -> np.ndarray:
    half = math.ceil(lattice.nx / 2)
    return np.nonzero(lattice.xs < half)[0]


def schmidt_coefficients(state, basis: FockBasis, left_sites: Sequence[int]) -> np.ndarray:
    left = np.array(sorted(left_sites), dtype=int)
    right = np.array([s for s in range(basis.nsites) if s not in set(left)], dtype=int)
    occ = basis.states
    radix = np.array(basis.cutoffs) + 1

    def key(cols):
        k = np.zeros(len(occ), dtype=np.int64)
        for c in cols:
            k = k * radix[c] + occ[:, c]
        return k

    _, li = np.unique(key(left), return_inverse=True)
    _, ri = np.unique(key(right), return_inverse=True)
    M = np.zeros((li.max() + 1, ri.max() + 1), dtype=complex)
    M[li, ri] = state
    return np.linalg.svd(M, compute_uv=False)


def entanglement_entropy(state, basis: FockBasis, left_sites=None, lattice: LatticeSpec | None = None) -> float:
    """Von Neumann entropy (nats) of the reduced state on ``left_sites``.

    Defaults to the left ceil(nx/2) columns of ``lattice``.
    """
    if left_sites is None:
        if lattice is None:
            raise DomainError("need either left_sites or a lattice for the default cut")
        left_sites = default_left_sites(lattice)
    s = schmidt_coefficients(state, basis, left_sites)
    p = s**2
    p = p[p > 1e-300]
    return float(max(0.0, -np.sum(p * np.log(p))))


def ipr(state) -> float:
    return float(np.sum(np.abs(state) ** 4))
