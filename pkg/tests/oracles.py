"""
Independent reference calculations for the test suite.

Nothing here imports the package under test. The lab-frame Schrödinger
equation is integrated with scipy's adaptive DOP853 at tight tolerances,
and the exponential-switch drive is solved for with its own root finder.
The frozen numbers below were produced by ``python3 tests/oracles.py``.
"""
from __future__ import annotations

import math

import numpy as np
from scipy.integrate import solve_ivp
from scipy.optimize import brentq


def lab_evolve(g0, omega, phi, t0, t1, psi0=(1.0, 0.0), rtol=1e-12, atol=1e-13):
    """Amplitudes at ``t1`` under H = diag(0, omega) - g0(t) cos(omega t + phi) sigma_x."""

    def rhs(t, y):
        g = -g0(t) * math.cos(omega * t + phi)
        return -1j * np.array([g * y[1], g * y[0] + omega * y[1]])

    sol = solve_ivp(rhs, (t0, t1), np.asarray(psi0, complex), method="DOP853", rtol=rtol, atol=atol)
    return sol.y[:, -1]


def exp_switch_drive(eta_end, area, omega=1.0, switch_periods=200.0):
    """(g0M, tau, T): exponential switch-on reaching ``4 omega eta_end`` when the area hits ``area``."""
    tau = switch_periods / omega
    target = 4 * omega * eta_end

    def duration(g0m):
        return brentq(lambda t: g0m * (t - tau * (1 - math.exp(-t / tau))) - area, 0.0, 1e7, xtol=1e-14)

    g0m = brentq(lambda g: g * (1 - math.exp(-duration(g) / tau)) - target, target * (1 + 1e-12), 1e3, xtol=1e-15)
    return g0m, tau, duration(g0m)


def bso_population(eta_end, phi, omega=1.0, switch_periods=200.0):
    """Excited population after the pi/2 pulse of the switched drive."""
    g0m, tau, T = exp_switch_drive(eta_end, math.pi / 2, omega, switch_periods)
    psi = lab_evolve(lambda t: g0m * (1 - math.exp(-t / tau)), omega, phi, 0.0, T)
    return abs(psi[1]) ** 2


def step_amplitudes(eta, phi, T, omega=1.0):
    g0 = 4 * omega * eta
    return lab_evolve(lambda t: g0, omega, phi, 0.0, T)


def reversal_fidelity(eta, phi, T, omega=1.0):
    g0 = 4 * omega * eta
    fwd = lab_evolve(lambda t: g0, omega, phi, 0.0, T)
    back = lab_evolve(lambda t: g0, omega, phi + math.pi, T, 2 * T, fwd)
    return abs(back[0]) ** 2


# Frozen values ------------------------------------------------------------

BSO_PHASES = (0.0, math.pi / 8, math.pi / 4, 3 * math.pi / 8)
#: bso_population(0.02, phi) for phi in BSO_PHASES
BSO_POPULATION_ETA_002 = (0.5132531251411485, 0.5195893343301591, 0.5143344831838246, 0.500596113640752)
#: step_amplitudes(0.05, 0.3, pi / (2 * 0.2)), amplitudes of |0> and |1>
STEP_HALF_PI_ETA_005 = (0.7440707199540805 + 0.03129153803758294j, 0.6527851013205559 - 0.13874874719481398j)
#: reversal_fidelity(0.05, 0.3, T) at T = 3 pi and T = 3.5 pi
REVERSAL_ETA_005 = {3.0: 0.9981656613346271, 3.5: 0.9854524811919525}


if __name__ == "__main__":
    print("BSO", tuple(float(bso_population(0.02, p)) for p in BSO_PHASES))
    print("STEP", tuple(complex(a) for a in step_amplitudes(0.05, 0.3, math.pi / 0.4)))
    print("REV", {m: float(reversal_fidelity(0.05, 0.3, m * math.pi)) for m in (3.0, 3.5)})
