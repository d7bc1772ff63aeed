"""Cached Bose-Hubbard operator pieces for one fixed-number sector.

H(J, mu) = -J * hop + U * pair + sum_i (-mu_i) n_i, where ``hop`` is the
nearest-neighbour hopping sum and ``pair`` the diagonal of sum n(n-1)/2.
Time-dependent problems only change J and mu, so the sparse hopping matrix
is built once and shared read-only.
"""

from __future__ import annotations

import numpy as np
import scipy.sparse as sp

from .errors import DomainError
from .lattice import BoseTermList, FockBasis, LatticeSpec, assemble, bose_hubbard_terms, build_basis, hopping_term


class BoseHubbardModel:
    def __init__(self, lattice: LatticeSpec, ntotal: int, nmax: int = 2, U: float = 1.0):
        self.lattice = lattice
        self.U = float(U)
        self.basis: FockBasis = build_basis(lattice, ntotal, nmax)
        terms = []
        for i, j in lattice.adjacency:
            terms.extend(hopping_term(i, j, 1.0))
        self.hop = assemble(BoseTermList(tuple(terms), hermitian=True), self.basis)
        self.occ = self.basis.states.astype(float)
        self.pair = 0.5 * np.sum(self.occ * (self.occ - 1.0), axis=1)

    @property
    def ntotal(self) -> int:
        return self.basis.ntotal

    @property
    def dim(self) -> int:
        return self.basis.dim

    def _mu(self, mu) -> np.ndarray:
        mu = np.broadcast_to(np.asarray(mu, dtype=float), (self.lattice.nsites,))
        return mu

    def diagonal(self, mu) -> np.ndarray:
        return self.U * self.pair - self.occ @ self._mu(mu)

    def hamiltonian(self, J: float, mu=0.0) -> sp.csr_matrix:
        return (-J * self.hop + sp.diags(self.diagonal(mu))).tocsr()

    def dense(self, J: float, mu=0.0) -> np.ndarray:
        return self.hamiltonian(J, mu).toarray()

    def terms(self, J: float, mu=0.0) -> BoseTermList:
        return bose_hubbard_terms(self.lattice, J, self.U, self._mu(mu))

    def mott_state(self) -> np.ndarray:
        """|1...1> (requires unit filling)."""
        if self.ntotal != self.lattice.nsites:
            raise DomainError("the unit-filling product state needs ntotal == nsites")
        return self.basis.basis_state(np.ones(self.lattice.nsites, dtype=int))

    def densities(self, state) -> np.ndarray:
        return (np.abs(state) ** 2) @ self.occ
