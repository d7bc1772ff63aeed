"""Rectangular lattices, Fock bases, disorder, and bosonic term lists.

Every Hamiltonian in the package is written as a :class:`BoseTermList` and
turned into a sparse matrix over a :class:`FockBasis` with :func:`assemble`.
"""

from __future__ import annotations

import math
from collections import deque
from dataclasses import dataclass, field
from functools import lru_cache
from typing import Iterable, Sequence

import numpy as np
import scipy.sparse as sp

from .errors import DomainError

# ---------------------------------------------------------------------------
# Lattice geometry


@dataclass(frozen=True)
class LatticeSpec:
    """Open-boundary nx-by-ny grid; site index = x + nx*y."""

    nx: int
    ny: int = 1

    def __post_init__(self):
        if self.nx < 1 or self.ny < 1:
            raise DomainError(f"lattice dimensions must be positive, got {self.nx}x{self.ny}")

    @property
    def nsites(self) -> int:
        return self.nx * self.ny

    @property
    def L(self) -> int:
        """Tilt wavelength denominator, nx - 1."""
        return self.nx - 1

    def site(self, x: int, y: int = 0) -> int:
        return x + self.nx * y

    def coords(self, i: int) -> tuple[int, int]:
        return i % self.nx, i // self.nx

    @property
    def xs(self) -> np.ndarray:
        return np.arange(self.nsites) % self.nx

    @property
    def ys(self) -> np.ndarray:
        return np.arange(self.nsites) // self.nx

    @property
    def adjacency(self) -> tuple[tuple[int, int], ...]:
        return _grid_bonds(self.nx, self.ny)

    @property
    def parity(self) -> np.ndarray:
        """Sublattice bit (x + y) mod 2 for each site."""
        return (self.xs + self.ys) % 2

    def manhattan(self, i: int, j: int) -> int:
        xi, yi = self.coords(i)
        xj, yj = self.coords(j)
        return abs(xi - xj) + abs(yi - yj)

    @property
    def max_distance(self) -> int:
        return (self.nx - 1) + (self.ny - 1)

    def mirror_x(self) -> np.ndarray:
        """Permutation sending each site to its left-right mirror image."""
        x, y = self.xs, self.ys
        return (self.nx - 1 - x) + self.nx * y


@lru_cache(maxsize=None)
def _grid_bonds(nx, ny):
    bonds = []
    for y in range(ny):
        for x in range(nx):
            i = x + nx * y
            if x + 1 < nx:
                bonds.append((i, i + 1))
            if y + 1 < ny:
                bonds.append((i, i + nx))
    return tuple(sorted(bonds))


def two_coloring(nsites: int, bonds: Iterable[tuple[int, int]]) -> np.ndarray:
    """Return a 0/1 coloring with every bond joining different colors.

    Raises DomainError if the bond graph has an odd cycle.
    """
    nbrs = [[] for _ in range(nsites)]
    for i, j in bonds:
        nbrs[i].append(j)
        nbrs[j].append(i)
    color = -np.ones(nsites, dtype=int)
    for start in range(nsites):
        if color[start] >= 0:
            continue
        color[start] = 0
        queue = deque([start])
        while queue:
            i = queue.popleft()
            for j in nbrs[i]:
                if color[j] < 0:
                    color[j] = 1 - color[i]
                    queue.append(j)
                elif color[j] == color[i]:
                    raise DomainError(f"bond graph is not bipartite (odd cycle through sites {i}, {j})")
    return color


# ---------------------------------------------------------------------------
# Fock bases


@lru_cache(maxsize=256)
def _tail_states(cutoffs: tuple, total: int) -> np.ndarray:
    """All occupation vectors over `cutoffs` summing to `total`, lex ordered."""
    if not cutoffs:
        return np.zeros((1, 0), dtype=np.int64) if total == 0 else np.zeros((0, 0), dtype=np.int64)
    c0, rest = cutoffs[0], cutoffs[1:]
    blocks = []
    for v in range(0, min(c0, total) + 1):
        tail = _tail_states(rest, total - v)
        if len(tail):
            head = np.full((len(tail), 1), v, dtype=np.int64)
            blocks.append(np.hstack([head, tail]))
    if not blocks:
        return np.zeros((0, len(cutoffs)), dtype=np.int64)
    return np.vstack(blocks)


def sector_dimension(nsites: int, ntotal: int, nmax: int) -> int:
    """Coefficient of x^ntotal in (1 + x + ... + x^nmax)^nsites (exact integer)."""
    if ntotal < 0 or ntotal > nmax * nsites:
        return 0
    poly = [1]
    site = [1] * (nmax + 1)
    for _ in range(nsites):
        new = [0] * (len(poly) + nmax)
        for a, ca in enumerate(poly):
            if ca:
                for b in range(nmax + 1):
                    new[a + b] += ca * site[b]
        poly = new[: ntotal + 1]
    return poly[ntotal] if ntotal < len(poly) else 0


class FockBasis:
    """Lexicographically ordered occupation vectors (site 0 most significant).

    Either a fixed-number sector (``ntotal``) or a capped space holding every
    vector with total <= ``max_total``. States are identified by an integer
    key, the mixed-radix value of the occupation vector, which is also the
    index into the full product space; key order equals lexicographic order.
    """

    def __init__(self, cutoffs: Sequence[int], ntotal: int | None = None, max_total: int | None = None):
        self.cutoffs = tuple(int(c) for c in cutoffs)
        if any(c < 0 for c in self.cutoffs):
            raise DomainError("occupation cutoffs must be non-negative")
        self.ntotal = ntotal
        self.max_total = max_total
        if ntotal is not None:
            if ntotal < 0 or ntotal > sum(self.cutoffs):
                raise DomainError(f"ntotal={ntotal} outside [0, {sum(self.cutoffs)}]")
            states = _tail_states(self.cutoffs, int(ntotal))
        else:
            cap = sum(self.cutoffs) if max_total is None else min(int(max_total), sum(self.cutoffs))
            if cap < 0:
                raise DomainError("max_total must be non-negative")
            blocks = [_tail_states(self.cutoffs, n) for n in range(cap + 1)]
            states = np.vstack([b for b in blocks if len(b)])
        radix = np.array([c + 1 for c in self.cutoffs], dtype=np.int64)
        weights = np.ones(len(radix), dtype=np.int64)
        for k in range(len(radix) - 2, -1, -1):
            weights[k] = weights[k + 1] * radix[k + 1]
        self.weights = weights
        self.full_dim = int(np.prod(radix.astype(object))) if len(radix) else 1
        keys = states @ weights if states.shape[1] else np.zeros(len(states), dtype=np.int64)
        order = np.argsort(keys, kind="stable")
        self.states = np.ascontiguousarray(states[order])
        self.states.setflags(write=False)
        self.keys = keys[order]
        self.keys.setflags(write=False)

    @classmethod
    def capped(cls, cutoffs, max_total=None):
        return cls(cutoffs, ntotal=None, max_total=max_total)

    @property
    def nsites(self) -> int:
        return len(self.cutoffs)

    @property
    def nmax(self) -> int:
        return max(self.cutoffs) if self.cutoffs else 0

    @property
    def dim(self) -> int:
        return len(self.states)

    def __len__(self):
        return self.dim

    def key_of(self, occ) -> np.ndarray:
        occ = np.asarray(occ, dtype=np.int64)
        return occ @ self.weights

    def lookup_keys(self, keys) -> np.ndarray:
        """Indices of the given keys, -1 where absent."""
        keys = np.asarray(keys, dtype=np.int64)
        pos = np.searchsorted(self.keys, keys)
        pos = np.clip(pos, 0, max(self.dim - 1, 0))
        found = self.keys[pos] == keys
        return np.where(found, pos, -1)

    def lookup(self, occ) -> np.ndarray | int:
        """Index of an occupation vector (or of each row of an array), -1 if absent."""
        occ = np.asarray(occ, dtype=np.int64)
        single = occ.ndim == 1
        occ2 = occ[None, :] if single else occ
        bad = np.any((occ2 < 0) | (occ2 > np.array(self.cutoffs)), axis=1)
        idx = self.lookup_keys(occ2 @ self.weights)
        idx = np.where(bad, -1, idx)
        return int(idx[0]) if single else idx

    def basis_state(self, occ) -> np.ndarray:
        i = self.lookup(occ)
        if i < 0:
            raise DomainError(f"occupation {tuple(occ)} is not in this basis")
        v = np.zeros(self.dim, dtype=complex)
        v[i] = 1.0
        return v

    def totals(self) -> np.ndarray:
        return self.states.sum(axis=1)

    def embed(self, vec, full_dim: int | None = None) -> np.ndarray:
        """Place a vector over this basis into the full product space."""
        out = np.zeros(self.full_dim if full_dim is None else full_dim, dtype=complex)
        out[self.keys] = vec
        return out


def build_basis(lattice: LatticeSpec, ntotal: int, nmax: int = 2) -> FockBasis:
    if ntotal < 0 or ntotal > nmax * lattice.nsites:
        raise DomainError(f"ntotal={ntotal} outside [0, {nmax * lattice.nsites}] for {lattice.nsites} sites")
    return FockBasis([nmax] * lattice.nsites, ntotal=ntotal)


# ---------------------------------------------------------------------------
# Bosonic term lists

TAGS = ("raise", "lower", "number", "n2", "n3")
_ADJOINT_TAG = {"raise": "lower", "lower": "raise", "number": "number", "n2": "n2", "n3": "n3"}


@dataclass(frozen=True)
class BoseTerm:
    """coeff * f_1 f_2 ... f_k, factors applied right to left."""

    coeff: complex
    factors: tuple

    def adjoint(self) -> "BoseTerm":
        return BoseTerm(np.conj(self.coeff), tuple((s, _ADJOINT_TAG[t]) for s, t in reversed(self.factors)))

    @property
    def net_change(self) -> int:
        return sum(1 if t == "raise" else -1 if t == "lower" else 0 for _, t in self.factors)

    @property
    def sites(self) -> tuple:
        return tuple(sorted({s for s, _ in self.factors}))


@dataclass(frozen=True)
class BoseTermList:
    terms: tuple = ()
    hermitian: bool = False
    allow_nonconserving: bool = False

    def __post_init__(self):
        terms = tuple(t if isinstance(t, BoseTerm) else BoseTerm(complex(t[0]), tuple(t[1])) for t in self.terms)
        for t in terms:
            for s, tag in t.factors:
                if tag not in TAGS:
                    raise DomainError(f"unknown operator tag {tag!r}")
        object.__setattr__(self, "terms", terms)

    def __len__(self):
        return len(self.terms)

    def __iter__(self):
        return iter(self.terms)

    def __add__(self, other: "BoseTermList") -> "BoseTermList":
        return BoseTermList(
            self.terms + other.terms,
            hermitian=self.hermitian and other.hermitian,
            allow_nonconserving=self.allow_nonconserving or other.allow_nonconserving,
        )

    def scaled(self, c) -> "BoseTermList":
        herm = self.hermitian and np.isreal(c)
        return BoseTermList(tuple(BoseTerm(c * t.coeff, t.factors) for t in self.terms), herm, self.allow_nonconserving)

    def adjoint(self) -> "BoseTermList":
        return BoseTermList(tuple(t.adjoint() for t in self.terms), self.hermitian, self.allow_nonconserving)

    @property
    def number_conserving(self) -> bool:
        return all(t.net_change == 0 for t in self.terms)

    def max_site(self) -> int:
        return max((s for t in self.terms for s, _ in t.factors), default=-1)


def hopping_term(i, j, coeff) -> tuple[BoseTerm, BoseTerm]:
    """coeff * (a_i^dag a_j + a_j^dag a_i)."""
    return (
        BoseTerm(coeff, ((i, "raise"), (j, "lower"))),
        BoseTerm(np.conj(coeff), ((j, "raise"), (i, "lower"))),
    )


def bose_hubbard_terms(lattice: LatticeSpec, J, U, mu) -> BoseTermList:
    """-J sum_<ij>(a_i^dag a_j + h.c.) + (U/2) sum n_i(n_i-1) - sum mu_i n_i."""
    mu = np.broadcast_to(np.asarray(mu, dtype=float), (lattice.nsites,))
    terms = []
    for i, j in lattice.adjacency:
        terms.extend(hopping_term(i, j, -J))
    for i in range(lattice.nsites):
        terms.append(BoseTerm(U / 2, ((i, "n2"),)))
    for i in range(lattice.nsites):
        terms.append(BoseTerm(-mu[i], ((i, "number"),)))
    return BoseTermList(tuple(terms), hermitian=True)


def _apply_factors(factors, states, cutoffs):
    occ = states.copy()
    amp = np.ones(len(occ))
    alive = np.ones(len(occ), dtype=bool)
    for s, tag in reversed(factors):
        n = occ[:, s]
        if tag == "lower":
            alive &= n > 0
            amp *= np.sqrt(np.maximum(n, 0))
            occ[:, s] = n - 1
        elif tag == "raise":
            alive &= n < cutoffs[s]
            amp *= np.sqrt(np.maximum(n + 1, 0))
            occ[:, s] = n + 1
        elif tag == "number":
            amp *= n
        elif tag == "n2":
            amp *= n * (n - 1)
        else:
            amp *= n * (n - 1) * (n - 2)
    return occ, amp, alive


def assemble(terms: BoseTermList, basis: FockBasis) -> sp.csr_matrix:
    """Sparse matrix of a term list over a basis.

    Raising past a site's cutoff gives zero. Terms that change the particle
    number must be flagged on the term list; in a fixed-number basis they
    contribute nothing.
    """
    dim = basis.dim
    if terms.max_site() >= basis.nsites:
        raise DomainError(f"factor on site {terms.max_site()} but basis has {basis.nsites} sites")
    if not terms.allow_nonconserving and not terms.number_conserving:
        raise DomainError("term list changes particle number; set allow_nonconserving=True")
    rows, cols, vals = [], [], []
    src = np.arange(dim)
    cut = np.array(basis.cutoffs)
    for t in terms.terms:
        if t.coeff == 0:
            continue
        occ, amp, alive = _apply_factors(t.factors, basis.states, cut)
        tgt = np.full(dim, -1)
        if alive.any():
            tgt[alive] = basis.lookup_keys(occ[alive] @ basis.weights)
        keep = (tgt >= 0) & (amp != 0)
        rows.append(tgt[keep])
        cols.append(src[keep])
        vals.append(t.coeff * amp[keep])
    if rows:
        r, c, v = np.concatenate(rows), np.concatenate(cols), np.concatenate(vals)
    else:
        r = c = np.zeros(0, dtype=int)
        v = np.zeros(0, dtype=complex)
    # coo -> csr sums duplicate coordinates
    return sp.coo_matrix((v.astype(complex), (r, c)), shape=(dim, dim)).tocsr()


def negate_and_gauge(terms: BoseTermList, lattice: LatticeSpec | None = None, bonds=None) -> BoseTermList:
    """Term list of -H followed by a_i -> -a_i on one sublattice.

    The sublattice flip restores the sign of nearest-neighbour hopping, so
    the net effect on a Bose-Hubbard list is U -> -U, mu -> -mu, J unchanged.
    ``bonds`` overrides the lattice adjacency when checking bipartiteness.
    """
    if bonds is None:
        if lattice is None:
            raise DomainError("need a lattice or an explicit bond list")
        bonds = lattice.adjacency
    nsites = lattice.nsites if lattice is not None else terms.max_site() + 1
    nsites = max([nsites] + [max(b) + 1 for b in bonds])
    color = two_coloring(nsites, bonds)
    out = []
    for t in terms.terms:
        flips = sum(1 for s, tag in t.factors if tag in ("raise", "lower") and color[s] == 1)
        sign = -1.0 if flips % 2 else 1.0
        out.append(BoseTerm(-sign * t.coeff, t.factors))
    return BoseTermList(tuple(out), terms.hermitian, terms.allow_nonconserving)


# ---------------------------------------------------------------------------
# Disorder


@dataclass(frozen=True)
class DisorderRealization:
    seed: int
    W: float
    center: float
    mu: np.ndarray = field(repr=False)


def _philox(seed: int) -> np.random.Generator:
    return np.random.Generator(np.random.Philox(key=int(seed) & (2**64 - 1)))


def sample_disorder(W: float, center: float, nsites: int, seed: int) -> DisorderRealization:
    """Uniform on-site potentials on [center - W/2, center + W/2).

    Stream rule: site i takes the i-th 64-bit output of Philox-4x64 keyed by
    ``seed`` (53 bits used per double). The value for any site is thus fixed
    by (seed, i) alone and does not depend on how sites are split among
    workers.
    """
    if W < 0:
        raise DomainError("disorder width must be non-negative")
    u = _philox(seed).random(nsites)
    mu = center + W * (u - 0.5)
    mu.setflags(write=False)
    return DisorderRealization(int(seed), float(W), float(center), mu)


def disorder_site_value(W: float, center: float, seed: int, site: int) -> float:
    """The value sample_disorder assigns to one site, drawn independently."""
    u = _philox(seed).random(site + 1)[site]
    return center + W * (u - 0.5)
