"""
Driven two-level dynamics without the rotating-wave approximation.

Conventions
-----------
Units have hbar = 1. A two-level atom has a lower level (index 0, energy 0)
and an upper level (index 1, energy ``omega + detuning``). The magnetic drive
contributes ``g(t) sigma_x`` with

    g(t) = -g0(t) cos(omega t + phi)

where ``g0(t)`` follows the envelope of the :class:`DriveField`. In the frame
rotating with the drive, ``|xi~> = Q |xi>`` with ``Q = diag(1, exp(i(omega t + phi)))``,
the Hamiltonian is ``alpha sigma_+ + alpha* sigma_-`` where

    alpha(t) = -(g0(t)/2) [exp(-2i(omega t + phi)) + 1].

The second term is the co-rotating part; the first is the counter-rotating
part that the RWA drops. Its interference with the co-rotating part produces
the Bloch-Siegert oscillation: a population modulation of relative size
``2 eta`` at twice the drive phase, with ``eta = g0 / (4 omega)``.

Three solvers are provided and are meant to be checked against one another:

* :func:`integrate_exact` -- fixed-step 4th-order Magnus integrator with an
  analytic 2x2 exponential (RK4 available as an alternative route);
* :func:`solve_floquet` -- the coupled harmonic ladder for ``a_n, b_n``;
* :func:`closed_form` -- the first-order adiabatic-elimination result.
"""
from __future__ import annotations

import enum
import logging
import math
from dataclasses import dataclass, replace
from typing import Iterator, Sequence

import numpy as np
from scipy.integrate import solve_ivp
from scipy.linalg import expm
from scipy.optimize import brentq

from .errors import (
    NotNormalized,
    PerturbativeRegimeViolated,
    StepTooCoarse,
    TruncationTooSmall,
)

log = logging.getLogger(__name__)

#: Default number of integrator steps per drive period (dt_max = 2 pi / (40 omega)).
STEPS_PER_PERIOD = 40
_SQRT3 = math.sqrt(3.0)


class Envelope(enum.Enum):
    STEP = "step"
    EXP_SWITCH = "exp_switch"


class Frame(enum.Enum):
    LAB = "lab"
    ROTATING = "rotating"


@dataclass(frozen=True)
class DriveField:
    """One oscillator's magnetic drive.

    Attributes:
        g0M: Peak Rabi rate.
        omega: Drive angular frequency.
        phi: Drive phase.
        tau_sw: Switching time of the exponential envelope.
        envelope: ``Envelope.STEP`` (on at full strength from ``t_on``) or
            ``Envelope.EXP_SWITCH`` (``g0M (1 - exp(-(t - t_on)/tau_sw))``).
        detuning: Atomic splitting minus drive frequency. Carried but
            normally zero.
        t_on: Time at which the drive is switched on.
        rwa: Attenuated-field flag. When set, every solver drops the
            counter-rotating term.
    """

    g0M: float
    omega: float = 1.0
    phi: float = 0.0
    tau_sw: float | None = None
    envelope: Envelope = Envelope.STEP
    detuning: float = 0.0
    t_on: float = 0.0
    rwa: bool = False

    def __post_init__(self):
        if self.g0M < 0:
            raise ValueError(f"g0M must be >= 0, got {self.g0M}")
        if not self.omega > 0:
            raise ValueError(f"omega must be > 0, got {self.omega}")
        if self.envelope is Envelope.EXP_SWITCH and not (self.tau_sw and self.tau_sw > 0):
            raise ValueError("tau_sw must be > 0 for the exponential envelope")

    @property
    def eta(self) -> float:
        return self.g0M / (4.0 * self.omega)

    def g0(self, t):
        """Envelope value at time ``t`` (scalar or array)."""
        s = np.asarray(t, dtype=float) - self.t_on
        if self.envelope is Envelope.STEP:
            out = np.where(s >= 0, self.g0M, 0.0)
        else:
            out = np.where(s >= 0, self.g0M * -np.expm1(-np.maximum(s, 0.0) / self.tau_sw), 0.0)
        return out if out.ndim else float(out)

    def area(self, t):
        """Pulse area accumulated since switch-on, i.e. the integral of g0."""
        s = np.maximum(np.asarray(t, dtype=float) - self.t_on, 0.0)
        if self.envelope is Envelope.STEP:
            out = self.g0M * s
        else:
            tau = self.tau_sw
            out = self.g0M * (s + tau * np.expm1(-s / tau))
        return out if out.ndim else float(out)

    def g0_avg(self, t):
        """Running average of g0 since switch-on (the rate that sets the pulse area).

        For the exponential envelope this is ``g0M [1 - (tau_sw/s)(1 - exp(-s/tau_sw))]``
        with ``s = t - t_on``.
        """
        s = np.asarray(t, dtype=float) - self.t_on
        if self.envelope is Envelope.STEP:
            out = np.where(s > 0, self.g0M, 0.0)
        else:
            with np.errstate(divide="ignore", invalid="ignore"):
                out = np.where(s > 0, self.area(t) / np.where(s > 0, s, 1.0), 0.0)
        return out if out.ndim else float(out)

    def eta_at(self, t):
        """Instantaneous perturbation parameter g0(t) / (4 omega)."""
        return self.g0(t) / (4.0 * self.omega)

    def shifted(self, dphi: float) -> "DriveField":
        return replace(self, phi=self.phi + dphi)

    def with_(self, **changes) -> "DriveField":
        return replace(self, **changes)


@dataclass
class StateVector:
    """Complex amplitudes of a 2- or 3-level atom at time ``t``."""

    amplitudes: np.ndarray
    frame: Frame = Frame.LAB
    t: float = 0.0

    def __post_init__(self):
        self.amplitudes = np.asarray(self.amplitudes, dtype=complex).copy()
        if self.amplitudes.shape not in ((2,), (3,)):
            raise ValueError(f"state must have 2 or 3 amplitudes, got {self.amplitudes.shape}")

    @classmethod
    def ground(cls, levels: int = 2, frame: Frame = Frame.LAB, t: float = 0.0) -> "StateVector":
        amps = np.zeros(levels, complex)
        amps[0] = 1.0
        return cls(amps, frame, t)

    def norm(self) -> float:
        return float(np.linalg.norm(self.amplitudes))

    def populations(self) -> np.ndarray:
        return np.abs(self.amplitudes) ** 2

    def fidelity(self, other: "StateVector") -> float:
        return float(abs(np.vdot(self.amplitudes, other.amplitudes)) ** 2)


@dataclass(frozen=True)
class PulseSpec:
    """Target rotation angle and duration of one pulse.

    ``area`` is measured against the envelope-averaged rate, so a pi/2 pulse
    satisfies ``g0_avg(tau) * tau = pi/2``.
    """

    area: float
    duration: float
    reversal_integer_m: int | None = None

    @classmethod
    def for_area(cls, field: DriveField, area: float) -> "PulseSpec":
        """Duration that accumulates ``area`` under ``field``'s envelope."""
        if field.g0M <= 0:
            raise ValueError("a pulse needs g0M > 0")
        if field.envelope is Envelope.STEP:
            return cls(area, area / field.g0M)
        hi = area / field.g0M + field.tau_sw
        while field.area(field.t_on + hi) < area:
            hi *= 2
        s = brentq(lambda s: field.area(field.t_on + s) - area, 0.0, hi, xtol=1e-14, rtol=1e-15)
        return cls(area, s)

    @classmethod
    def reversal(cls, field: DriveField, m: int, area: float) -> "PulseSpec":
        """Pulse of duration m pi / omega carrying ``area`` (see :func:`tune_for_reversal`)."""
        if m < 1:
            raise ValueError("reversal integer m must be >= 1")
        return cls(area, m * math.pi / field.omega, m)


def tune_for_reversal(field: DriveField, m: int, area: float = math.pi / 2) -> tuple[DriveField, PulseSpec]:
    """Choose g0M so that a pulse of duration m pi/omega has the requested area.

    With ``area = pi/2`` and a step envelope this gives ``g0 = omega / (2m)``.
    """
    pulse = PulseSpec.reversal(field, m, area)
    unit = replace(field, g0M=1.0)
    g0M = area / unit.area(field.t_on + pulse.duration)
    return replace(field, g0M=g0M), pulse


def default_dt_max(omega: float) -> float:
    return 2.0 * math.pi / (STEPS_PER_PERIOD * omega)


# ---------------------------------------------------------------------------
# Hamiltonians


def _alpha(field: DriveField, t: float, phis):
    """Rotating-frame coupling alpha(t) for an array of phases."""
    g0 = field.g0(t)
    if field.rwa:
        return np.full(np.shape(phis), -0.5 * g0, dtype=complex)
    theta = field.omega * t + phis
    return -0.5 * g0 * (np.exp(-2j * theta) + 1.0)


def _pauli_terms(field: DriveField, t: float, phis, frame: Frame):
    """(h0, hx, hy, hz) of H = h0 + h.sigma for each phase in ``phis``."""
    alpha = _alpha(field, t, phis)
    if frame is Frame.LAB:
        off = alpha * np.exp(1j * (field.omega * t + phis))
        split = field.omega + field.detuning
    else:
        off = alpha
        split = field.detuning
    return 0.5 * split, off.real, -off.imag, -0.5 * split


def _matrix(terms) -> np.ndarray:
    h0, hx, hy, hz = (np.asarray(x) for x in terms)
    return np.array([[h0 + hz, hx - 1j * hy], [hx + 1j * hy, h0 - hz]], dtype=complex)


def lab_hamiltonian(field: DriveField, t: float) -> np.ndarray:
    """2x2 lab-frame Hamiltonian ``eps (s0 - sz)/2 + g(t) sx`` with ``eps = omega + detuning``."""
    if t < 0:
        raise ValueError("t must be >= 0")
    return _matrix(_pauli_terms(field, t, np.float64(field.phi), Frame.LAB))


def rotating_hamiltonian(field: DriveField, t: float) -> np.ndarray:
    """2x2 Hamiltonian in the frame rotating at the drive frequency and phase."""
    if t < 0:
        raise ValueError("t must be >= 0")
    return _matrix(_pauli_terms(field, t, np.float64(field.phi), Frame.ROTATING))


def to_rotating(state: StateVector, field: DriveField) -> StateVector:
    """Apply Q = diag(1, exp(i(omega t + phi))) to a lab-frame two-level state."""
    if state.frame is Frame.ROTATING:
        return state
    q = np.exp(1j * (field.omega * state.t + field.phi))
    return StateVector(state.amplitudes * np.array([1.0, q]), Frame.ROTATING, state.t)


def to_lab(state: StateVector, field: DriveField) -> StateVector:
    if state.frame is Frame.LAB:
        return state
    q = np.exp(-1j * (field.omega * state.t + field.phi))
    return StateVector(state.amplitudes * np.array([1.0, q]), Frame.LAB, state.t)


# ---------------------------------------------------------------------------
# Batched propagation core


def _broadcast(x, psi):
    return np.reshape(x, np.shape(x) + (1,) * (psi.ndim - 2))


def _magnus_step(psi, t, h, field, phis, frame):
    c = _SQRT3 / 6.0
    a0, ax, ay, az = _pauli_terms(field, t + (0.5 - c) * h, phis, frame)
    b0, bx, by, bz = _pauli_terms(field, t + (0.5 + c) * h, phis, frame)
    k = _SQRT3 * h * h / 6.0
    # G = h/2 (H1 + H2) + (sqrt3 h^2 / 6) (v2 x v1) . sigma
    g0 = 0.5 * h * (a0 + b0)
    gx = 0.5 * h * (ax + bx) + k * (by * az - bz * ay)
    gy = 0.5 * h * (ay + by) + k * (bz * ax - bx * az)
    gz = 0.5 * h * (az + bz) + k * (bx * ay - by * ax)
    n = np.sqrt(gx * gx + gy * gy + gz * gz)
    cos_n = np.cos(n)
    sinc_n = np.sinc(n / np.pi)
    ph = np.exp(-1j * g0)
    u00 = ph * (cos_n - 1j * sinc_n * gz)
    u01 = ph * (-1j * sinc_n * (gx - 1j * gy))
    u10 = ph * (-1j * sinc_n * (gx + 1j * gy))
    u11 = ph * (cos_n + 1j * sinc_n * gz)
    p0, p1 = psi[:, 0], psi[:, 1]
    out = np.empty_like(psi)
    out[:, 0] = _broadcast(u00, psi) * p0 + _broadcast(u01, psi) * p1
    out[:, 1] = _broadcast(u10, psi) * p0 + _broadcast(u11, psi) * p1
    return out


def _rk4_step(psi, t, h, field, phis, frame):
    def rhs(tt, y):
        h0, hx, hy, hz = (_broadcast(np.broadcast_to(x, np.shape(phis)), y) for x in _pauli_terms(field, tt, phis, frame))
        out = np.empty_like(y)
        out[:, 0] = -1j * ((h0 + hz) * y[:, 0] + (hx - 1j * hy) * y[:, 1])
        out[:, 1] = -1j * ((hx + 1j * hy) * y[:, 0] + (h0 - hz) * y[:, 1])
        return out

    k1 = rhs(t, psi)
    k2 = rhs(t + h / 2, psi + 0.5 * h * k1)
    k3 = rhs(t + h / 2, psi + 0.5 * h * k2)
    k4 = rhs(t + h, psi + h * k3)
    return psi + (h / 6.0) * (k1 + 2 * k2 + 2 * k3 + k4)


_STEPPERS = {"magnus4": _magnus_step, "rk4": _rk4_step}


def _run(psi, field, phis, t0, t1, n_steps, frame, method):
    step = _STEPPERS[method]
    h = (t1 - t0) / n_steps
    for k in range(n_steps):
        psi = step(psi, t0 + k * h, h, field, phis, frame)
    return psi


def evolve_batch(
    psi,
    field: DriveField,
    phis,
    t0: float,
    t1: float,
    frame: Frame = Frame.ROTATING,
    dt_max: float | None = None,
    method: str = "magnus4",
    tol: float = 1e-10,
    refine: bool = True,
    max_refinements: int = 10,
) -> np.ndarray:
    """Propagate a batch of two-level states, one drive phase per batch row.

    ``psi`` has shape ``(B, 2)`` or ``(B, 2, K)`` (K columns propagated together,
    e.g. the identity to obtain propagators); ``phis`` has shape ``(B,)`` and
    replaces ``field.phi``.

    With ``refine`` the step is halved until two successive refinements agree
    to ``tol`` in every amplitude, or stop improving. Under the RWA a step
    envelope gives a constant rotating-frame Hamiltonian, which is
    exponentiated exactly.
    """
    if dt_max is None:
        dt_max = default_dt_max(field.omega)
    if dt_max > default_dt_max(field.omega) * (1 + 1e-12):
        raise StepTooCoarse(
            f"dt_max={dt_max:g} exceeds 2 pi/(40 omega)={default_dt_max(field.omega):g}"
        )
    if method not in _STEPPERS:
        raise ValueError(f"unknown method {method!r}")
    psi = np.asarray(psi, dtype=complex)
    phis = np.asarray(phis, dtype=float)
    if t1 == t0:
        return psi.copy()
    if field.rwa and field.envelope is Envelope.STEP and t0 >= field.t_on:
        # constant rotating-frame Hamiltonian: one exact exponential
        q = lambda t: _broadcast(np.exp(1j * (field.omega * t + phis)), psi)
        if frame is Frame.LAB:
            psi = psi.copy()
            psi[:, 1] *= q(t0)
        out = _magnus_step(psi, t0, t1 - t0, field, phis, Frame.ROTATING)
        if frame is Frame.LAB:
            out[:, 1] /= q(t1)
        return out
    kw = dict(frame=frame, dt_max=dt_max, method=method, tol=tol, refine=refine, max_refinements=max_refinements)
    # Constant envelope: H is periodic (pi/omega rotating, 2 pi/omega lab), so long
    # runs reduce to a power of the one-period propagator.
    period = (math.pi if frame is Frame.ROTATING else 2 * math.pi) / field.omega
    k = int((t1 - t0) // period)
    if field.envelope is Envelope.STEP and t0 >= field.t_on and k >= 8:
        phis = np.broadcast_to(phis, (psi.shape[0],))
        eye = np.broadcast_to(np.eye(2, dtype=complex), (psi.shape[0], 2, 2)).copy()
        u_period = evolve_batch(eye, field, phis, t0, t0 + period, **kw)
        u_rest = evolve_batch(eye, field, phis, t0, t1 - k * period, **kw)
        u = u_rest @ np.linalg.matrix_power(u_period, k)
        return np.einsum("bij,bj...->bi...", u, psi)
    n = max(1, math.ceil((t1 - t0) / dt_max - 1e-9))
    out = _run(psi, field, phis, t0, t1, n, frame, method)
    if not refine:
        return out
    prev = math.inf
    for _ in range(max_refinements):
        n *= 2
        finer = _run(psi, field, phis, t0, t1, n, frame, method)
        err = float(np.max(np.abs(finer - out)))
        out = finer
        if err <= tol:
            break
        if err >= prev:
            # round-off floor: further halving only adds noise
            log.debug("step refinement at round-off floor %.3g with %d steps", err, n)
            break
        prev = err
    else:
        log.warning("step refinement stopped at %d steps with residual %.3g", n, err)
    return out


def propagator(
    field: DriveField,
    t0: float,
    t1: float,
    frame: Frame = Frame.LAB,
    phis=None,
    **kw,
) -> np.ndarray:
    """2x2 propagator U(t1, t0); shape ``(B, 2, 2)`` when ``phis`` is an array."""
    scalar = phis is None
    phis = np.atleast_1d(field.phi if scalar else phis).astype(float)
    eye = np.broadcast_to(np.eye(2, dtype=complex), (phis.size, 2, 2)).copy()
    u = evolve_batch(eye, field, phis, t0, t1, frame=frame, **kw)
    return u[0] if scalar else u


# ---------------------------------------------------------------------------
# Solvers


def integrate_exact(
    state: StateVector,
    field: DriveField,
    t0: float,
    t1: float,
    dt_max: float | None = None,
    levels: tuple[int, int] | None = None,
    method: str = "magnus4",
    tol: float = 1e-10,
    refine: bool = True,
) -> StateVector:
    """Propagate ``state`` from ``t0`` to ``t1`` in the state's own frame.

    Three-level states are driven on the transition ``levels`` (default
    ``(0, 2)``); the spectator level has zero energy and is left untouched.

    Raises:
        StepTooCoarse: ``dt_max`` does not resolve the 2 omega micromotion.
        NotNormalized: the input norm is off by more than 1e-6.
    """
    if not t1 > t0:
        raise ValueError("t1 must be greater than t0")
    norm = state.norm()
    if abs(norm - 1.0) > 1e-6:
        raise NotNormalized(f"input norm {norm!r}")
    amps = state.amplitudes
    if levels is None:
        levels = (0, 1) if amps.size == 2 else (0, 2)
    sub = amps[list(levels)][None, :]
    sub = evolve_batch(
        sub, field, np.array([field.phi]), t0, t1, frame=state.frame,
        dt_max=dt_max, method=method, tol=tol, refine=refine,
    )[0]
    out = amps.copy()
    out[list(levels)] = sub
    result = StateVector(out, state.frame, t1)
    log.debug("integrate_exact: norm drift %.3g", abs(result.norm() - norm))
    return result


def trajectory_exact(
    state: StateVector, field: DriveField, times: Sequence[float], **kw
) -> np.ndarray:
    """Amplitudes at each of ``times`` (first entry must equal ``state.t``)."""
    times = np.asarray(times, dtype=float)
    out = np.empty((times.size, state.amplitudes.size), complex)
    out[0] = state.amplitudes
    cur = state
    for k in range(1, times.size):
        cur = integrate_exact(cur, field, times[k - 1], times[k], **kw)
        out[k] = cur.amplitudes
    return out


@dataclass
class FloquetLadder:
    """Harmonic-ladder trajectory: ``xi~(t) = sum_n (a_n, b_n) exp(-2 i n (omega t + phi))``."""

    n_max: int
    times: np.ndarray
    a: np.ndarray  # (T, 2 n_max + 1), column j holds n = j - n_max
    b: np.ndarray
    omega: float
    phi: float

    @property
    def orders(self) -> np.ndarray:
        return np.arange(-self.n_max, self.n_max + 1)

    def coefficients(self, k: int = -1) -> dict[int, tuple[complex, complex]]:
        return {int(n): (self.a[k, j], self.b[k, j]) for j, n in enumerate(self.orders)}

    def reconstruct(self) -> np.ndarray:
        """Rotating-frame amplitudes, shape (T, 2)."""
        theta = self.omega * self.times + self.phi
        basis = np.exp(-2j * np.outer(theta, self.orders))
        return np.stack([(self.a * basis).sum(1), (self.b * basis).sum(1)], axis=1)

    def reconstruct_lab(self) -> np.ndarray:
        amps = self.reconstruct()
        amps[:, 1] *= np.exp(-1j * (self.omega * self.times + self.phi))
        return amps


def _ladder_matrices(field: DriveField, n_max: int):
    size = 2 * n_max + 1
    orders = np.arange(-n_max, n_max + 1)
    diag = np.concatenate([2j * orders * field.omega, 2j * orders * field.omega - 1j * field.detuning])
    coup = np.zeros((2 * size, 2 * size), complex)
    for j in range(size):
        # a_n <- b_n + b_{n-1};  b_n <- a_n + a_{n+1}
        coup[j, size + j] = 1.0
        coup[size + j, j] = 1.0
        if not field.rwa:
            if j - 1 >= 0:
                coup[j, size + j - 1] = 1.0
            if j + 1 < size:
                coup[size + j, j + 1] = 1.0
    return np.diag(diag), 0.5j * coup


def _solve_ladder(field, t0, times, n_max, rtol, atol):
    size = 2 * n_max + 1
    D, C = _ladder_matrices(field, n_max)
    y0 = np.zeros(2 * size, complex)
    y0[n_max] = 1.0
    times = np.asarray(times, dtype=float)
    if field.envelope is Envelope.STEP and field.t_on <= t0:
        M = D + field.g0M * C
        ys = [expm(M * (t - t0)) @ y0 for t in times]
        Y = np.array(ys)
    else:
        sol = solve_ivp(
            lambda t, y: (D + field.g0(t) * C) @ y,
            (t0, float(times[-1])), y0, t_eval=times,
            method="DOP853", rtol=rtol, atol=atol,
        )
        if not sol.success:
            raise RuntimeError(f"ladder integration failed: {sol.message}")
        Y = sol.y.T
    return FloquetLadder(n_max, times, Y[:, :size], Y[:, size:], field.omega, field.phi)


def solve_floquet(
    field: DriveField,
    t0: float,
    t1: float,
    n_max: int = 4,
    n_out: int = 201,
    times: Sequence[float] | None = None,
    check_truncation: bool = False,
    rtol: float = 1e-11,
    atol: float = 1e-13,
) -> FloquetLadder:
    """Integrate the truncated a_n/b_n ladder starting from a_0 = 1 at ``t0``.

    The harmonic coefficients vary only on the envelope time scale, so the
    ladder is propagated with exact matrix exponentials for a step envelope
    and with a high-order adaptive solver otherwise.

    Raises:
        TruncationTooSmall: with ``check_truncation``, if doubling ``n_max``
            moves any reconstructed amplitude by more than 1e-5.
    """
    if n_max < 1:
        raise ValueError("n_max must be >= 1")
    if times is None:
        times = np.linspace(t0, t1, n_out)
    ladder = _solve_ladder(field, t0, times, n_max, rtol, atol)
    if check_truncation:
        wide = _solve_ladder(field, t0, times, 2 * n_max, rtol, atol)
        dev = float(np.max(np.abs(wide.reconstruct() - ladder.reconstruct())))
        if dev > 1e-5:
            raise TruncationTooSmall(f"n_max={n_max}: doubling changes amplitudes by {dev:.3g}")
    return ladder


def closed_form(field: DriveField, t) -> tuple:
    """First-order (in eta) lab-frame amplitudes (C0, C1) from the ground state.

        C0 = cos(x) - 2 eta S sin(x)
        C1 = i exp(-i theta) [sin(x) + 2 eta S* cos(x)]

    with ``x = area(t)/2``, ``theta = omega t + phi``, ``S = (i/2) exp(-2 i theta)``
    and ``eta`` the instantaneous ``g0(t)/(4 omega)``. Vectorized over ``t``.

    Raises:
        PerturbativeRegimeViolated: the instantaneous eta reaches 0.25.
    """
    t = np.asarray(t, dtype=float)
    eta = field.eta_at(t)
    if np.max(eta) >= 0.25:
        raise PerturbativeRegimeViolated(f"eta={np.max(eta):g} >= 0.25")
    if field.rwa:
        eta = 0.0
    x = 0.5 * field.area(t)
    theta = field.omega * t + field.phi
    sig = 0.5j * np.exp(-2j * theta)
    c0 = np.cos(x) - 2 * eta * sig * np.sin(x)
    c1 = 1j * np.exp(-1j * theta) * (np.sin(x) + 2 * eta * np.conj(sig) * np.cos(x))
    return c0, c1


@dataclass(frozen=True)
class FringeFit:
    """``offset + amplitude * sin(harmonic * phi + phase)``."""

    amplitude: float
    offset: float
    phase: float
    harmonic: int = 2
    residual_rms: float = 0.0

    def __call__(self, phi):
        return self.offset + self.amplitude * np.sin(self.harmonic * np.asarray(phi) + self.phase)

    @property
    def depth(self) -> float:
        """Relative modulation ``amplitude / offset``; ``2 eta`` for the BSO fringe."""
        return self.amplitude / self.offset


def fit_fringe(phases, values, harmonic: int = 2) -> FringeFit:
    """Linear least-squares fit of a single sinusoid at a known harmonic."""
    phases = np.asarray(phases, dtype=float)
    values = np.asarray(values, dtype=float)
    X = np.column_stack([np.ones_like(phases), np.sin(harmonic * phases), np.cos(harmonic * phases)])
    coef, *_ = np.linalg.lstsq(X, values, rcond=None)
    resid = values - X @ coef
    return FringeFit(
        amplitude=float(math.hypot(coef[1], coef[2])),
        offset=float(coef[0]),
        phase=float(math.atan2(coef[2], coef[1])),
        harmonic=harmonic,
        residual_rms=float(np.sqrt(np.mean(resid**2))),
    )


@dataclass
class BsoScanResult:
    phases: np.ndarray
    populations: np.ndarray
    fit: FringeFit
    pulse: PulseSpec
    eta_end: float  # instantaneous eta at the end of the pulse

    def __iter__(self) -> Iterator[tuple[float, float]]:
        return iter(zip(self.phases.tolist(), self.populations.tolist()))

    def __len__(self):
        return len(self.phases)


def bso_scan(
    field_template: DriveField,
    phases: Sequence[float],
    pulse: PulseSpec | None = None,
    **kw,
) -> BsoScanResult:
    """Upper-level population at the end of a pi/2 pulse for each drive phase.

    The pulse starts at ``field_template.t_on`` from the lower level. The
    fringe is fitted at harmonic 2 of the phase; its relative depth
    (``fit.depth``) approaches ``2 * eta_end`` and its offset ``1/2``.
    """
    phases = np.asarray(phases, dtype=float)
    if phases.size == 0:
        raise ValueError("phases must be non-empty")
    if pulse is None:
        pulse = PulseSpec.for_area(field_template, math.pi / 2)
    t0 = field_template.t_on
    t1 = t0 + pulse.duration
    psi = np.zeros((phases.size, 2), complex)
    psi[:, 0] = 1.0
    out = evolve_batch(psi, field_template, phases, t0, t1, frame=Frame.ROTATING, **kw)
    pops = np.abs(out[:, 1]) ** 2
    return BsoScanResult(phases, pops, fit_fringe(phases, pops, 2), pulse, float(field_template.eta_at(t1)))


def time_reverse(
    state: StateVector, field: DriveField, T: float, **kw
) -> StateVector:
    """Continue for ``T`` with the drive phase shifted by pi, starting at ``state.t``.

    Under the RWA this flips the sign of the rotating-frame Hamiltonian and
    undoes any preceding evolution of equal length. Without it the undo is
    imperfect; the caller measures the fidelity.
    """
    rev = field.shifted(math.pi)
    if state.frame is Frame.ROTATING:
        # keep the frame of the original phase: Q depends on phi
        lab = to_lab(state, field)
        out = integrate_exact(lab, rev, state.t, state.t + T, **kw)
        return to_rotating(out, field)
    return integrate_exact(state, rev, state.t, state.t + T, **kw)


def drive_for_end_eta(
    eta_end: float,
    area: float = math.pi / 2,
    omega: float = 1.0,
    phi: float = 0.0,
    switch_periods: float = 200.0,
    t_on: float = 0.0,
) -> tuple[DriveField, PulseSpec]:
    """Exponentially switched drive whose pulse of ``area`` ends at ``eta = eta_end``.

    ``switch_periods`` is ``omega * tau_sw``. A slow switch keeps the
    switching transient well below the Bloch-Siegert signal.
    """
    if not 0 < eta_end < 0.25:
        raise PerturbativeRegimeViolated(f"eta_end={eta_end:g} outside (0, 0.25)")
    tau = switch_periods / omega
    target = 4.0 * omega * eta_end

    def end_rate(g0M):
        f = DriveField(g0M, omega, phi, tau, Envelope.EXP_SWITCH, t_on=t_on)
        return f.g0(t_on + PulseSpec.for_area(f, area).duration) - target

    hi = target * 2
    while end_rate(hi) < 0:
        hi *= 2
    g0M = brentq(end_rate, target, hi, xtol=1e-15, rtol=1e-14)
    field = DriveField(g0M, omega, phi, tau, Envelope.EXP_SWITCH, t_on=t_on)
    return field, PulseSpec.for_area(field, area)


def pulse_image(field: DriveField, area: float, end_phases, **kw) -> np.ndarray:
    """Lab-frame image of the lower level after a pulse of ``area``, shape ``(B, 2)``.

    ``end_phases`` are the drive phases ``omega t_end + phi`` at the end of
    the pulse. The envelope starts at ``field.t_on``; only the phase at the
    end matters, because shifting the pulse in time is equivalent to shifting
    ``phi``.
    """
    end_phases = np.atleast_1d(np.asarray(end_phases, dtype=float))
    pulse = PulseSpec.for_area(field, area)
    t0 = field.t_on
    t1 = t0 + pulse.duration
    phis = end_phases - field.omega * t1
    psi = np.zeros((end_phases.size, 2), complex)
    psi[:, 0] = 1.0
    out = evolve_batch(psi, field, phis, t0, t1, frame=Frame.ROTATING, **kw)
    out[:, 1] *= np.exp(-1j * end_phases)
    return out
