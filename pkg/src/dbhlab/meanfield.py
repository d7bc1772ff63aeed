"""Three-level Gutzwiller mean-field theory of the Bose-Hubbard model.

Uniform square lattice (coordination z = 4), local states |0>, |1>, |2>.
The hopping that enters the single-site problem is z*J; with it the
closed-form angle, order parameter, ground energy and Bogoliubov
frequencies below are mutually consistent.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy import optimize

from .errors import DomainError

ALPHA_C = 3.0 - 2.0 * math.sqrt(2.0)
SQRT2 = math.sqrt(2.0)
Z_SQUARE = 4

A_OP = np.diag([1.0, SQRT2], 1)  # truncated lowering operator
N_OP = np.diag([0.0, 1.0, 2.0])


@dataclass(frozen=True)
class MeanFieldPoint:
    gamma: float
    U: float
    J: float
    phi: float
    psi: float
    mu: float
    omega0: float
    alpha_c: float = ALPHA_C

    @property
    def chi0(self) -> np.ndarray:
        return local_state(self.phi)

    @property
    def is_superfluid(self) -> bool:
        return self.gamma > 1.0


def gamma_of(J: float, U: float, alpha_c: float = ALPHA_C) -> float:
    return 4.0 * J / (alpha_c * U)


def local_state(phi: float) -> np.ndarray:
    """cos(phi)|1> + sin(phi)(|0> + |2>)/sqrt(2)."""
    s = math.sin(phi) / SQRT2
    return np.array([s, math.cos(phi), s])


def order_parameter(chi: np.ndarray) -> float:
    """psi = <chi|(a + a^dag)|chi>/2."""
    return float(0.5 * chi @ (A_OP + A_OP.T) @ chi)


def closed_form_phi(gamma: float) -> float:
    return 0.5 * math.acos(1.0 / gamma) if gamma > 1.0 else 0.0


def closed_form_psi(gamma: float, alpha_c: float = ALPHA_C) -> float:
    if gamma <= 1.0:
        return 0.0
    return math.sqrt(1.0 - 1.0 / gamma**2) / math.sqrt(8.0 * alpha_c)


def chemical_potential(gamma: float, U: float, alpha_c: float = ALPHA_C) -> float:
    return 0.5 * U * (1.0 - alpha_c - 0.5 * alpha_c * (gamma - 1.0))


def ground_energy(gamma: float, U: float, alpha_c: float = ALPHA_C) -> float:
    """Lowest eigenvalue of the single-site mean-field Hamiltonian at the
    equilibrium mu and psi. On the Mott side (psi = 0) it is -mu."""
    if gamma <= 1.0:
        return -chemical_potential(gamma, U, alpha_c)
    return 0.5 * U * (1.0 - SQRT2 - (1.0 + SQRT2) * alpha_c * gamma)


def variational_point(J: float, U: float) -> MeanFieldPoint:
    if U <= 0:
        raise DomainError("U must be positive")
    if J < 0:
        raise DomainError("J must be non-negative")
    g = gamma_of(J, U)
    return MeanFieldPoint(
        gamma=g,
        U=U,
        J=J,
        phi=closed_form_phi(g),
        psi=closed_form_psi(g),
        mu=chemical_potential(g, U),
        omega0=ground_energy(g, U),
    )


def point_from_gamma(gamma: float, U: float = 1.0) -> MeanFieldPoint:
    return variational_point(gamma * ALPHA_C * U / 4.0, U)


def mean_field_hamiltonian(point: MeanFieldPoint, z: int = Z_SQUARE) -> np.ndarray:
    """(U/2) n(n-1) - mu n - zJ psi (a + a^dag) on the three local levels."""
    U, mu = point.U, point.mu
    return 0.5 * U * N_OP @ (N_OP - np.eye(3)) - mu * N_OP - z * point.J * point.psi * (A_OP + A_OP.T)


def energy_functional(phi: float, J: float, U: float, mu: float = 0.0, z: int = Z_SQUARE) -> float:
    """Per-site Gutzwiller energy <H> = <U n(n-1)/2 - mu n> - zJ psi^2,
    built from the local vector and operator matrices."""
    chi = local_state(phi)
    psi = chi @ A_OP @ chi
    onsite = chi @ (0.5 * U * N_OP @ (N_OP - np.eye(3)) - mu * N_OP) @ chi
    return float(onsite - z * J * psi**2)


def _energy_derivative(phi, J, U, mu, z):
    chi = local_state(phi)
    s, c = math.sin(phi), math.cos(phi)
    dchi = np.array([c / SQRT2, -s, c / SQRT2])
    h = 0.5 * U * N_OP @ (N_OP - np.eye(3)) - mu * N_OP
    psi = chi @ A_OP @ chi
    dpsi = dchi @ (A_OP + A_OP.T) @ chi
    return float(2.0 * dchi @ h @ chi - 2.0 * z * J * psi * dpsi)


def minimize_energy_numeric(J: float, U: float, z: int = Z_SQUARE) -> float:
    """Minimizing angle of the energy functional on [0, pi/2].

    A bounded scalar search locates the basin, then the stationarity
    condition is solved by root bracketing to machine precision.
    """
    mu = 0.0  # <n> = 1 for every phi, so mu only shifts the energy
    f = lambda p: energy_functional(p, J, U, mu, z)
    res = optimize.minimize_scalar(f, bounds=(0.0, 0.5 * math.pi), method="bounded", options={"xatol": 1e-10})
    x = float(res.x)
    if f(0.0) <= f(x) + 1e-15:
        # Mott side: check phi = 0 is a local minimum
        if _energy_derivative(1e-6, J, U, mu, z) >= 0:
            return 0.0
    d = lambda p: _energy_derivative(p, J, U, mu, z)
    lo, hi = max(x - 1e-3, 1e-12), min(x + 1e-3, 0.5 * math.pi - 1e-12)
    if d(lo) < 0 < d(hi):
        return float(optimize.brentq(d, lo, hi, xtol=1e-15, rtol=4 * np.finfo(float).eps))
    return x


# ---------------------------------------------------------------------------
# Excitations


def xi_of(kx, ky):
    return np.sin(np.asarray(kx) / 2) ** 2 + np.sin(np.asarray(ky) / 2) ** 2


def _AB(xi, gamma, alpha_c):
    a, g = alpha_c, gamma
    A = 8 * a * xi * (2 * SQRT2 + a * xi) + 0.5 * a * (g - 1) * (
        16 * SQRT2 * (1 + g) + 2 * (9 + a + 3 * (1 + a) * g) * xi + a * (7 + g) * xi**2
    )
    B = 16 * a**2 * xi * (
        SQRT2 * a * (g**2 - 1) ** 2 * (xi - 3)
        + 2 * (1 + g) ** 2 * (SQRT2 * a * (g - 1) ** 2 + 4 * (xi + (g**2 - 1)))
    )
    return A, B


def _frequencies(xi, gamma, alpha_c, U):
    A, B = _AB(xi, gamma, alpha_c)
    disc = A * A - B
    scale = np.maximum(A * A, 1e-300)
    if np.any(disc < -1e-12 * scale):
        raise DomainError("A^2 < B: no real Bogoliubov frequencies at these parameters")
    root = np.sqrt(np.maximum(disc, 0.0))
    lo = np.sqrt(np.maximum(A - root, 0.0))
    hi = np.sqrt(np.maximum(A + root, 0.0))
    return 0.25 * U * lo, 0.25 * U * hi


def dispersion(kx, ky, point: MeanFieldPoint):
    """Closed-form (omega_minus, omega_plus) at wavevector (kx, ky)."""
    if point.gamma < 1.0:
        raise DomainError("the Bogoliubov frequencies are derived for gamma >= 1")
    return _frequencies(xi_of(kx, ky), point.gamma, point.alpha_c, point.U)


def heff_matrix(kx, ky, point: MeanFieldPoint, z: int = Z_SQUARE) -> np.ndarray:
    """The 6x6 linearized Gutzwiller problem for (u_k, v_k)."""
    phi = point.phi
    c, s = math.cos(phi), math.sin(phi)
    chi_c = np.array([c, s, 0.0])
    chi_a = np.array([0.0, s / SQRT2, SQRT2 * c])
    X = np.outer(chi_a, chi_a) + np.outer(chi_c, chi_c)
    Y = np.outer(chi_a, chi_c) + np.outer(chi_c, chi_a)
    sz = np.diag([1.0, -1.0])
    isy = np.array([[0.0, 1.0], [-1.0, 0.0]])
    hmf = mean_field_hamiltonian(point, z)
    xi = float(xi_of(kx, ky))
    Jz = z * point.J
    return np.kron(sz, hmf - point.omega0 * np.eye(3)) - Jz * (1.0 - xi) * (np.kron(sz, X) + np.kron(isy, Y))


def heff_bogoliubov(kx, ky, point: MeanFieldPoint, z: int = Z_SQUARE):
    """Eigenvalues of the 6x6 problem and the two positive frequencies.

    Returns (eigenvalues sorted by real part, (omega_minus, omega_plus)).
    The two condensate-mode eigenvalues at zero are discarded instead of
    performing an explicit Jordan reduction.
    """
    ev = np.linalg.eigvals(heff_matrix(kx, ky, point, z))
    ev = ev[np.argsort(ev.real)]
    # the four largest |Re| form the two +-omega pairs
    w = np.sort(np.abs(ev.real))[::-1][:4]
    w_plus = 0.5 * (w[0] + w[1])
    w_minus = 0.5 * (w[2] + w[3])
    return ev, (w_minus, w_plus)


def speed_of_sound(point: MeanFieldPoint) -> float:
    """Slope of omega_minus at k -> 0 (full expression, not its leading term)."""
    a, g, U = point.alpha_c, point.gamma, point.U
    inner = 1.0 - a * (g - 1.0) / (4.0 * SQRT2 * (g + 1.0))
    return 0.25 * U * math.sqrt(SQRT2 * a) * (g + 1.0) * math.sqrt(inner)


def dispersion_overlay(k, U: float = 1.0, gamma: float | None = None, alpha_c: float = ALPHA_C, J: float | None = None):
    """omega_minus along a list of wavevectors with free (alpha_c, gamma).

    ``k`` is a sequence of scalars (taken as (k, 0)) or of (kx, ky) pairs.
    Either ``gamma`` or ``J`` must be given; with J, gamma = 4J/(alpha_c U).
    """
    if gamma is None:
        if J is None:
            raise DomainError("give gamma or J")
        gamma = gamma_of(J, U, alpha_c)
    if gamma < 1.0:
        raise DomainError("the overlay curve needs gamma >= 1")
    k = np.asarray(k, dtype=float)
    if k.ndim == 1:
        kx, ky = k, np.zeros_like(k)
    else:
        kx, ky = k[:, 0], k[:, 1]
    return _frequencies(xi_of(kx, ky), gamma, alpha_c, U)[0]
