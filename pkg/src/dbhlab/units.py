"""Unit conventions.

Internally every energy is an angular frequency in rad/ns and every time is
in ns. Configuration files quote linear frequencies in MHz, i.e. the value of
omega/(2 pi); conversion happens once, on ingestion.
"""

import math

TWO_PI = 2.0 * math.pi

#: Reference interaction strength of the device, U/(2 pi) = 190 MHz.
U_DEVICE_MHZ = 190.0


def mhz_to_rad_per_ns(f_mhz):
    return TWO_PI * 1e-3 * f_mhz


def rad_per_ns_to_mhz(omega):
    return omega / (TWO_PI * 1e-3)


def khz_to_rad_per_ns(f_khz):
    return TWO_PI * 1e-6 * f_khz


U_DEVICE = mhz_to_rad_per_ns(U_DEVICE_MHZ)
