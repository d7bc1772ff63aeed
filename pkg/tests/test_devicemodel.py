import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from dbhlab.devicemodel import (
    CATEGORIES,
    BareDevice,
    Cluster,
    Node,
    bare_hamiltonian,
    chain_device,
    cluster_effective,
    cluster_weights,
    coefficients_to_terms,
    convergence_sweep,
    coupler_off_frequency,
    coupling_g,
    dimer_device,
    effective_coefficients,
    effective_hamiltonian,
    enumerate_clusters,
    exact_sw,
    exact_sw_reduced,
    export_extended_bh,
    is_connected,
    linked_cluster_expansion,
    truncation_sensitivity,
)
from dbhlab.errors import AmbiguousAssignmentError, DomainError
from dbhlab.lattice import assemble
from dbhlab.units import khz_to_rad_per_ns

TP = 2 * math.pi
WQ, WC = TP * 6.0, TP * 8.0
K_QC = TP * 0.1 / math.sqrt(WQ * WC)  # 100 MHz qudit-coupler coupling
ETA_Q, ETA_C = -TP * 0.19, -TP * 0.2


def small_chain(nq=2, **kw):
    wq = [WQ, WQ + TP * 0.01, WQ - TP * 0.015, WQ + TP * 0.005][:nq]
    return chain_device(nq, wq, ETA_Q, WC, ETA_C, K_QC, k_qq=2e-3 + K_QC**2, **kw)


# --- coupling_g ----------------------------------------------------------------


@given(
    kd=st.floats(1e-4, 1e-2),
    k1=st.floats(1e-2, 5e-2),
    k2=st.floats(1e-2, 5e-2),
    w1=st.floats(20.0, 45.0),
    dw=st.floats(-2.0, 2.0),
)
def test_coupling_vanishes_at_off_frequency(kd, k1, k2, w1, dw):
    w2 = w1 + dw
    woff = coupler_off_frequency(w1, w2, kd, k1, k2)
    g = coupling_g(w1, w2, woff, kd, k1, k2)
    assert abs(g) <= 1e-12 * kd * math.sqrt(w1 * w2) / 2
    # negative between the qudits and the off point, positive above it
    wq = 0.5 * (w1 + w2)
    assert coupling_g(w1, w2, 0.5 * (wq + woff), kd, k1, k2) < 0
    assert coupling_g(w1, w2, 1.01 * woff, kd, k1, k2) > 0


def test_off_frequency_example():
    assert coupler_off_frequency(WQ, WQ, 0.01, 0.1, 0.1) == pytest.approx(math.sqrt(2) * WQ)
    with pytest.raises(DomainError):
        coupler_off_frequency(WQ, WQ, 0.0, 0.1, 0.1)


# --- bare device -----------------------------------------------------------------


def test_device_validation():
    with pytest.raises(DomainError):
        Node("resonator", 1.0, 0.0)
    with pytest.raises(DomainError):
        Node("qudit", -1.0, 0.0)
    q = Node("qudit", WQ, ETA_Q, (0, 0))
    c = Node("coupler", WC, ETA_C, (1, 0))
    with pytest.raises(DomainError):
        BareDevice((q, c), {(0, 1): 0.01, (1, 0): 0.02})
    with pytest.raises(DomainError):
        BareDevice((q, c), {(0, 0): 0.01})
    with pytest.warns(RuntimeWarning, match="detuning"):
        BareDevice((q, Node("coupler", WQ + 0.01, ETA_C, (1, 0))), {(0, 1): 0.05})
    assert BareDevice((q, c), {(1, 0): 0.01}).couplings == {(0, 1): 0.01}


def test_duffing_ladder():
    dev = BareDevice((Node("qudit", WQ, ETA_Q),), {})
    bare = bare_hamiltonian(dev)
    E = np.sort(np.real(bare.H.diagonal()))
    assert np.allclose(E, [0, WQ, 2 * WQ + ETA_Q, 3 * WQ + 3 * ETA_Q, 4 * WQ + 6 * ETA_Q])


def test_uncoupled_device_is_diagonal():
    dev = small_chain(3, max_total=None)
    dev = BareDevice(dev.nodes, {}, max_total=7)
    bare = bare_hamiltonian(dev)
    H = bare.H.toarray()
    assert np.count_nonzero(H - np.diag(np.diag(H))) == 0
    n = bare.basis.states
    w = np.array([x.omega for x in dev.nodes])
    eta = np.array([x.eta for x in dev.nodes])
    assert np.allclose(np.diag(H).real, n @ w + (eta / 2) @ (n * (n - 1)).T)
    assert n.sum(axis=1).max() == 7
    assert all(n[:, q].max() == 4 for q in dev.qudits)
    assert all(n[:, c].max() == 3 for c in dev.couplers)


def test_bare_hamiltonian_hermitian_and_nonconserving():
    bare = bare_hamiltonian(small_chain(2))
    H = bare.H.toarray()
    assert np.abs(H - H.conj().T).max() < 1e-12
    tot = bare.basis.states.sum(axis=1)
    i, j = np.nonzero(H)
    assert np.any(np.abs(tot[i] - tot[j]) == 2)  # counter-rotating terms


# --- exact SW --------------------------------------------------------------------


def test_zero_qudit_coupler_coupling_gives_bare_qudits():
    dev = chain_device(2, [WQ, WQ + 0.1], ETA_Q, WC, ETA_C, 0.0)
    op = effective_hamiltonian(dev)
    n = op.basis.states
    w = np.array([WQ, WQ + 0.1])
    assert np.allclose(op.matrix, np.diag(n @ w + (ETA_Q / 2) * (n * (n - 1)).sum(axis=1)), atol=1e-10)


@pytest.mark.parametrize("n", [0, 1, 2, 3])
def test_sw_hermitian_and_spectrum_preserving(n):
    bare = bare_hamiltonian(small_chain(2))
    s = exact_sw(bare, n)
    assert np.abs(s.H_eff - s.H_eff.conj().T).max() < 1e-10
    ev = np.linalg.eigvalsh(s.H_eff)
    assert np.allclose(ev, np.sort(s.dressed_energies), atol=1e-9)
    E = bare.spectrum[0]
    assert all(np.abs(E - e).min() < 1e-9 for e in ev)
    assert np.all(s.overlaps > 0.5)


@pytest.mark.parametrize("n", [1, 2, 3])
def test_reduced_formula_matches_square_root(n):
    bare = bare_hamiltonian(small_chain(2))
    assert np.abs(exact_sw(bare, n).H_eff - exact_sw_reduced(bare, n)).max() < 1e-9


def test_sector_direct_sum_methods_agree():
    dev = small_chain(2)
    a = effective_hamiltonian(dev, method="sqrt")
    b = effective_hamiltonian(dev, method="reduced")
    assert np.abs(a.matrix - b.matrix).max() < 1e-9
    with pytest.raises(DomainError):
        effective_hamiltonian(dev, method="magic")


def test_dimer_hopping_matches_perturbative_coupling():
    D = TP * 2.0
    wc = WQ + D
    kk = (D / 20.0) / math.sqrt(WQ * wc)
    for kd in (0.0, 1e-3, 5e-3):
        s = exact_sw(bare_hamiltonian(dimer_device(WQ, WQ, wc, kd, kk, kk)), 1)
        g = coupling_g(WQ, WQ, wc, kd, kk, kk)
        assert abs(s.H_eff[0, 1] - g) / abs(g) < (1 / 20) ** 2


def test_ambiguous_assignment_is_reported():
    # a coupler resonant with the qudit mixes them 50/50
    with pytest.warns(RuntimeWarning):
        dev = BareDevice((Node("qudit", WQ, ETA_Q, (0, 0)), Node("coupler", WQ, ETA_C, (1, 0))), {(0, 1): 0.01})
    with pytest.raises(AmbiguousAssignmentError) as info:
        exact_sw(bare_hamiltonian(dev), 1)
    assert info.value.contested


def test_truncation_sensitivity():
    d = truncation_sensitivity(small_chain(2))
    # one more level barely matters, one fewer does
    assert d["plus"] < khz_to_rad_per_ns(1.0) < d["minus"]
    with pytest.raises(DomainError):
        truncation_sensitivity(small_chain(2, max_total=None))


# --- normal ordering ------------------------------------------------------------


def test_normal_ordered_expansion_reproduces_matrix():
    op = effective_hamiltonian(small_chain(2))
    coeffs = effective_coefficients(small_chain(2), labels=[0, 1])
    M = assemble(coefficients_to_terms(coeffs), op.basis).toarray()
    assert np.abs(M - op.matrix).max() < 1e-10


# --- clusters ----------------------------------------------------------------------


def test_path_cluster_enumeration():
    adj = [(0, 1), (1, 2)]
    cl = enumerate_clusters(3, adj, 2)
    assert [c.nodes for c in cl] == [(0,), (1,), (2,), (0, 1), (1, 2)]
    assert len(enumerate_clusters(3, adj, 1)) == 3
    assert [c.nodes for c in enumerate_clusters(3, adj, 3)][-1] == (0, 1, 2)
    with pytest.raises(DomainError):
        enumerate_clusters(3, adj, 0)


@given(seed=st.integers(0, 1000), kmax=st.integers(1, 4))
def test_clusters_are_connected_and_unique(seed, kmax):
    rng = np.random.default_rng(seed)
    n = 6
    adj = [(i, j) for i in range(n) for j in range(i + 1, n) if rng.random() < 0.4]
    cl = enumerate_clusters(n, adj, kmax)
    assert len({c.nodes for c in cl}) == len(cl)
    assert all(is_connected(c.nodes, adj) and c.size <= kmax for c in cl)
    # brute force count of connected subsets
    import itertools

    count = sum(
        is_connected(s, adj) for k in range(1, kmax + 1) for s in itertools.combinations(range(n), k)
    )
    assert count == len(cl)


def test_missing_subcluster_is_an_error():
    dev = small_chain(2)
    adj = dev.adjacency
    clusters = enumerate_clusters(dev.nnodes, adj, 2)
    heff = {c.nodes: cluster_effective(dev, c) for c in clusters}
    del heff[(0, 1)]
    with pytest.raises(DomainError, match="no effective"):
        cluster_weights(clusters, heff, adj)
    with pytest.raises(DomainError, match="missing"):
        cluster_weights([Cluster((0, 1), 2)], {(0, 1): {}}, adj)


def test_full_cluster_aggregate_is_exact():
    dev = small_chain(2)
    op = effective_hamiltonian(dev)
    agg = linked_cluster_expansion(dev, kmax=dev.nnodes)
    relabel = {q: a for a, q in enumerate(dev.qudits)}
    M = assemble(coefficients_to_terms(agg, relabel), op.basis).toarray()
    assert np.abs(M - op.matrix).max() < 1e-10


def test_disjoint_parts_have_no_spanning_weight():
    dev = small_chain(3)
    # isolate coupler 3 and drop the direct 2-4 coupling: {0, 1, 2} and {4} decouple
    cut = {k: v for k, v in dev.couplings.items() if 3 not in k and k != (2, 4)}
    dev = BareDevice(dev.nodes, cut)
    adj = dev.adjacency
    clusters = enumerate_clusters(dev.nnodes, adj, 3)
    heff = {c.nodes: cluster_effective(dev, c) for c in clusters}
    w = cluster_weights(clusters, heff, adj)
    for c in clusters:
        if 3 in c.nodes and c.size > 1:
            assert max((abs(v) for v in w[c.nodes].values()), default=0.0) < 1e-10


def test_chain_converges_with_cluster_size():
    dev = small_chain(4)
    res, deltas = convergence_sweep(dev, [3, 4, 5, 6, 7], method="reduced")
    assert set(deltas) == {4, 5, 6, 7}

    def err(k):
        keys = set(res[k]) | set(res[7])
        return max(abs(res[k].get(x, 0) - res[7].get(x, 0)) for x in keys)

    assert err(5) < khz_to_rad_per_ns(10.0)
    # next-nearest hopping first appears at five nodes, so 3 and 4 tie
    assert err(3) >= err(4) > err(5) >= err(6)


# --- export -------------------------------------------------------------------------


def test_ideal_bose_hubbard_exports_only_j_mu_u():
    dev = chain_device(3, WQ, ETA_Q, WC, ETA_C, 0.0)
    q = dev.qudits
    J, U = TP * 0.01, ETA_Q
    coeffs = {}
    for a in q:
        coeffs[(((a, 1),), ((a, 1),))] = WQ
        coeffs[(((a, 2),), ((a, 2),))] = U / 2
    for a, b in zip(q, q[1:]):
        coeffs[(((a, 1),), ((b, 1),))] = -J
        coeffs[(((b, 1),), ((a, 1),))] = -J
    rep = export_extended_bh(coeffs, dev)
    assert rep.populated() == {"J", "mu", "U"}
    assert np.allclose(rep.values("J"), J)
    assert np.allclose(rep.values("U"), U)
    assert np.allclose(rep.values("mu"), 0.0)
    assert rep.residual == []
    assert set(rep.stats) == {"J", "mu", "U"}
    assert set(CATEGORIES) >= rep.populated()


def test_non_hermitian_export_rejected():
    dev = chain_device(2, WQ, ETA_Q, WC, ETA_C, 0.0)
    a, b = dev.qudits
    with pytest.raises(DomainError, match="Hermitian"):
        export_extended_bh({(((a, 1),), ((b, 1),)): 0.1, (((b, 1),), ((a, 1),)): 0.2}, dev)


def test_dimer_report_is_deterministic_and_shifts_u():
    D = TP * 1.0
    wc = WQ + D
    kk = (D / 10.0) / math.sqrt(WQ * wc)
    dev = dimer_device(WQ, WQ + TP * 0.02, wc, 0.0, kk, kk, eta_q=ETA_Q, eta_c=ETA_C)

    def report():
        return export_extended_bh(linked_cluster_expansion(dev, kmax=3), dev, drop_small=False)

    r1, r2 = report(), report()
    assert r1.terms == r2.terms and r1.residual == r2.residual and r1.offset == r2.offset
    J = abs(r1.values("J")[0])
    shift = np.abs(r1.values("U") - ETA_Q)
    # dispersive U shift sits at the order of the hopping itself
    assert np.all(shift > 0.05 * J) and np.all(shift < 20 * J)
