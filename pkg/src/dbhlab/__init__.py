"""Exact-diagonalization toolkit for small driven, disordered Bose-Hubbard
lattices and the transmon devices that emulate them."""

__version__ = "0.1.0"
