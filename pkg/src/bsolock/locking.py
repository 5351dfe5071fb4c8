"""
Remote frequency locking from the spatial profile of Bob's success rate.

Both sides hold a row of N atoms, pairwise entangled by index. Each side's
drive runs parallel to its row, so atom ``i`` sees the local phase
``phi + 2 pi x_i omega/omega_A`` with ``x_i`` in units of Alice's
wavelength. Alice measures ``|+>`` on every atom and announces the
successes; Bob measures his ``|->`` on those atoms while scanning a common
phase offset of his measurement drive. When the clocks agree the best
offset works equally well everywhere. A frequency mismatch adds a phase
mismatch proportional to position, which Bob reads off as a linear trend
of the per-atom fringe phase across the row.

Bob's scan is specified as start-time offsets ``tau_k`` and applied as the
drive phase offsets ``omega_B tau_k``. A literal delay would be invisible,
because each atom's upper level precesses at its own side's clock rate.
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .channel import Channel, MessageKind, Party, reliable_send
from .errors import BadLayout, DegenerateProfile
from .protocol import (
    ProtocolConfig,
    measurement_state,
    next_measurement_time,
    prepare_pairs,
    project_alice,
)

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class AtomArray:
    """Positions (fractions of Alice's wavelength) of one side's atoms."""

    positions: np.ndarray
    omega: float
    omega_ref: float = 1.0

    def __post_init__(self):
        x = np.asarray(self.positions, dtype=float)
        if x.ndim != 1 or x.size < 2:
            raise BadLayout("an array needs at least two atoms")
        if np.any(np.diff(x) <= 0):
            raise BadLayout("positions must be strictly increasing")
        if x[0] < 0 or x[-1] >= 1:
            raise BadLayout("positions must lie in [0, 1)")
        object.__setattr__(self, "positions", x)

    def __len__(self):
        return self.positions.size

    def local_phase(self, phase: float) -> np.ndarray:
        """Drive phase at each atom for a global drive phase ``phase``."""
        return phase + 2 * math.pi * self.positions * (self.omega / self.omega_ref)


def build_arrays(N: int, omega_A: float, omega_B: float, layout="uniform") -> tuple[AtomArray, AtomArray]:
    """Matched rows for Alice and Bob.

    ``layout`` is ``"uniform"`` (positions k/N), one explicit list used by
    both sides, or a pair ``(alice_positions, bob_positions)``.
    """
    if N < 2:
        raise BadLayout("N must be >= 2")
    if isinstance(layout, str):
        if layout != "uniform":
            raise BadLayout(f"unknown layout {layout!r}")
        xa = xb = np.arange(N) / N
    else:
        layout = list(layout)
        if len(layout) == 2 and np.ndim(layout[0]) == 1:
            xa, xb = (np.asarray(v, dtype=float) for v in layout)
        else:
            xa = xb = np.asarray(layout, dtype=float)
    if len(xa) != N or len(xb) != N:
        raise BadLayout(f"expected {N} positions per side")
    return AtomArray(xa, omega_A, omega_A), AtomArray(xb, omega_B, omega_A)


@dataclass
class LockProfile:
    """Outcome of one lock scan.

    ``scan_probability[i, k]`` is the (estimated) success probability of
    atom ``i`` at scan phase ``scan_phases[k]``; ``success_probability`` is
    the column at the best common phase. ``fringe_phase`` is the per-atom
    phase offset that maximizes success.
    """

    positions: np.ndarray
    scan_phases: np.ndarray
    scan_probability: np.ndarray
    scan_counts: np.ndarray
    best_index: int
    fringe_phase: np.ndarray
    fringe_phase_stderr: np.ndarray
    exact: bool = False
    slope_estimate: float = 0.0
    delta_omega_hat: float = 0.0
    stderr: float = 0.0
    aliased: bool = False
    nominal_samples: int = 0

    @property
    def success_probability(self) -> np.ndarray:
        return self.scan_probability[:, self.best_index]

    @property
    def sample_count(self) -> np.ndarray:
        return self.scan_counts[:, self.best_index]

    @property
    def variation_amplitude(self) -> float:
        """Peak-to-peak spread of the best-phase profile across positions."""
        return float(np.ptp(self.success_probability))

    @property
    def per_position(self) -> list[tuple[float, float, float]]:
        return list(zip(self.positions.tolist(), self.success_probability.tolist(), self.sample_count.tolist()))

    def flatness_chi2(self) -> tuple[float, int]:
        """Chi-square of the best-phase profile against a common mean, and its dof.

        Binomial variances use the nominal sample counts, so the statistic
        is meaningful in exact-Born mode too.
        """
        p = self.success_probability
        n = self.sample_count
        pbar = float(np.sum(p * n) / np.sum(n))
        var = pbar * (1 - pbar) / n
        dev = p - pbar
        if np.all(np.abs(dev) <= 1e-15):
            return 0.0, p.size - 1
        with np.errstate(divide="ignore"):
            chi2 = float(np.sum(dev**2 / var))
        return chi2, p.size - 1


def _fit_fringes(phases, probs, var):
    """Per-atom fit of ``a + b cos(psi) + c sin(psi)``; returns (phase, phase_stderr).

    Ordinary least squares: on an evenly spaced scan the first harmonic is
    then orthogonal to the higher harmonics that the Bloch-Siegert terms add,
    which inverse-variance weights would break. Errors use the sandwich
    estimator with the binomial variances ``var``.
    """
    X = np.column_stack([np.ones_like(phases), np.cos(phases), np.sin(phases)])
    pinv = np.linalg.pinv(X)
    coef = probs @ pinv.T
    b, c = coef[:, 1], coef[:, 2]
    r2 = b * b + c * c
    # gradient of atan2(c, b) with respect to (b, c), pushed through the linear fit
    grad = (-c / r2)[:, None] * pinv[1] + (b / r2)[:, None] * pinv[2]
    err = np.sqrt(np.sum(grad**2 * var, axis=1))
    return np.arctan2(c, b), err


def run_lock_scan(
    arrays: tuple[AtomArray, AtomArray],
    config: ProtocolConfig,
    samples_per_atom: int,
    time_scan: Sequence[float],
    exact_born: bool = False,
    channel: Channel | None = None,
    iteration: int = 0,
) -> LockProfile:
    """Scan Bob's measurement start over ``time_scan`` and record every atom's success rate.

    For each atom and scan point, ``samples_per_atom`` freshly entangled
    pairs are used: Alice's successes are binomial in her Born probability
    and Bob's successes binomial in his. With ``exact_born`` the Born
    probabilities are reported directly and ``samples_per_atom`` only sets
    the nominal variances.
    """
    if samples_per_atom < 1:
        raise ValueError("samples_per_atom must be >= 1")
    alice, bob = arrays
    if len(alice) != len(bob):
        raise BadLayout("arrays must have equal length")
    tau = np.asarray(time_scan, dtype=float)
    if tau.size < 3:
        raise ValueError("time_scan needs at least three start times")
    cfg = config.with_(
        alice_field=config.alice_field.with_(omega=alice.omega),
        bob_field=config.bob_field.with_(omega=bob.omega),
    )
    state, done = prepare_pairs(cfg)
    t_m = next_measurement_time(max(done.values()), alice.omega)
    state = state.free_evolve(t_m)

    plus = measurement_state(cfg, Party.ALICE, t_m, math.pi / 2, alice.local_phase(cfg.alice_field.phi))
    N, K = len(alice), tau.size
    scan_phase = bob.omega * tau
    chi = bob.local_phase(cfg.bob_field.phi)
    minus = measurement_state(
        cfg, Party.BOB, t_m, 1.5 * math.pi, (chi[:, None] + scan_phase[None, :]).ravel()
    ).reshape(N, K, 3)
    p_alice = np.empty(N)
    p_bob = np.empty((N, K))
    for i in range(N):
        p_alice[i], hit, _ = project_alice(state, plus[i])
        amps = hit.amplitudes
        p_bob[i] = np.linalg.norm(np.einsum("ab,kb->ka", amps, minus[i].conj()), axis=1) ** 2
    p_bob = np.clip(p_bob, 0.0, 1.0)

    if channel is not None:
        reliable_send(channel, MessageKind.LOCK_ITERATION_SYNC, Party.ALICE, int(iteration))

    if exact_born:
        probs = p_bob
        counts = np.broadcast_to((samples_per_atom * p_alice)[:, None], (N, K)).astype(float)
    else:
        probs = np.empty((N, K))
        counts = np.empty((N, K))
        for i in range(N):
            rng = np.random.default_rng(np.random.SeedSequence(cfg.seed, spawn_key=(100 + iteration, i)))
            m = rng.binomial(samples_per_atom, p_alice[i], size=K)
            l = rng.binomial(m, p_bob[i])
            counts[i] = m
            probs[i] = np.where(m > 0, l / np.maximum(m, 1), 0.5)

    best = int(np.argmax(probs.mean(axis=0)))
    nominal = np.broadcast_to((samples_per_atom * p_alice)[:, None], (N, K))
    pv = np.clip(p_bob, 1e-6, 1 - 1e-6)
    var = pv * (1 - pv) / nominal
    ph, ph_err = _fit_fringes(scan_phase, probs, var)
    profile = LockProfile(
        positions=bob.positions.copy(),
        scan_phases=scan_phase,
        scan_probability=probs,
        scan_counts=np.asarray(counts),
        best_index=best,
        fringe_phase=ph,
        fringe_phase_stderr=ph_err,
        exact=exact_born,
        nominal_samples=samples_per_atom,
    )
    detect_detuning(profile, arrays)
    return profile


#: Harmonics of the local drive phase that the Bloch-Siegert terms imprint on the fringe phase.
NUISANCE_HARMONICS = (2, 4)


def _design(alice: AtomArray, bob: AtomArray, harmonics) -> np.ndarray:
    """Regressors: intercept, Bob's position, then nuisance harmonics while they fit."""
    xb = bob.positions
    cols = [np.ones_like(xb), xb]
    grids = [xb] if np.allclose(alice.positions, xb) else [xb, alice.positions]
    for m in harmonics:
        for x in grids:
            for f in (np.cos, np.sin):
                c = f(2 * math.pi * m * x)
                trial = np.column_stack(cols + [c])
                # keep a column only if it adds rank and leaves at least one dof
                if trial.shape[1] < xb.size and np.linalg.matrix_rank(trial, tol=1e-9) == trial.shape[1]:
                    cols.append(c)
    return np.column_stack(cols)


def detect_detuning(
    profile: LockProfile, arrays: tuple[AtomArray, AtomArray], harmonics=NUISANCE_HARMONICS
) -> tuple[float, float]:
    """Frequency mismatch ``omega_B - omega_A`` from the per-atom fringe phases.

    Matching requires Bob's offset ``psi`` to cancel ``chi_i - phi_i``, so
    the best offset for atom ``i`` is ``const - 2 pi (x^B_i omega_B - x^A_i omega_A)/omega_A``.
    Removing the known-geometry part leaves ``const - 2 pi delta x^B_i``. The
    Bloch-Siegert terms of the measurement states add a position-periodic
    ripple at ``harmonics`` of the local phase; those enter the fit as
    nuisance regressors when the array has enough atoms. Also fills the
    profile's slope, estimate, stderr and aliasing flag.

    Raises:
        DegenerateProfile: fewer than two distinct positions.
    """
    alice, bob = arrays
    xb = bob.positions
    if np.unique(xb).size < 2:
        raise DegenerateProfile("all positions coincide")
    y = np.unwrap(profile.fringe_phase + 2 * math.pi * (xb - alice.positions))
    err = profile.fringe_phase_stderr
    exact = profile.exact or not np.all(err > 0)
    w = np.ones_like(xb) if exact else 1.0 / err**2
    X = _design(alice, bob, harmonics)
    sw = np.sqrt(w)
    coef, *_ = np.linalg.lstsq(X * sw[:, None], y * sw, rcond=None)
    slope = float(coef[1])
    if exact:
        stderr_slope = 0.0
    else:
        cov = np.linalg.inv(X.T @ (w[:, None] * X))
        stderr_slope = float(math.sqrt(cov[1, 1]))
    scale = alice.omega_ref / (2 * math.pi)
    span = float(xb[-1] - xb[0])
    profile.slope_estimate = slope
    profile.delta_omega_hat = -slope * scale
    profile.stderr = stderr_slope * scale
    profile.aliased = bool(abs(slope) * span > math.pi or np.any(np.abs(np.diff(y)) > math.pi / 2))
    return profile.delta_omega_hat, profile.stderr


def default_time_scan(omega_B: float, points: int = 16) -> np.ndarray:
    """Start-time offsets evenly covering one period of Bob's clock."""
    return np.arange(points) * (2 * math.pi / omega_B) / points


@dataclass
class LockController:
    gain: float = 0.5
    max_step: float = math.inf
    history: list[tuple[int, float, float]] = field(default_factory=list)

    def __post_init__(self):
        if not self.gain > 0:
            raise ValueError("gain must be > 0")
        if not self.max_step > 0:
            raise ValueError("max_step must be > 0")

    def correction(self, delta_omega_hat: float) -> float:
        step = self.gain * delta_omega_hat
        return float(np.clip(step, -self.max_step, self.max_step))


@dataclass
class LockHistory:
    """Per-iteration record; ``delta[k]`` is the true fractional mismatch before iteration k."""

    iteration: list[int]
    delta: list[float]
    delta_omega_hat: list[float]
    stderr: list[float]
    omega_B: list[float]
    non_convergence: bool = False
    aliased: bool = False

    @property
    def final_delta(self) -> float:
        return self.delta[-1]


def lock_loop(
    controller: LockController,
    initial_delta: float,
    iterations: int,
    config: ProtocolConfig,
    N: int = 8,
    samples_per_atom: int = 10_000,
    exact_born: bool = False,
    time_scan_points: int = 16,
    layout="uniform",
    channel: Channel | None = None,
) -> LockHistory:
    """Closed loop: scan, estimate, correct ``omega_B``; repeat.

    ``delta`` is ``omega_B / omega_A - 1``. The returned history holds one
    more ``delta`` entry than iterations (the state after the last
    correction). ``non_convergence`` is set if ``|delta|`` fails to shrink
    over five consecutive iterations.
    """
    omega_A = config.alice_field.omega
    omega_B = omega_A * (1 + initial_delta)
    hist = LockHistory([], [initial_delta], [], [], [omega_B])
    growth = 0
    for k in range(iterations):
        arrays = build_arrays(N, omega_A, omega_B, layout)
        profile = run_lock_scan(
            arrays, config, samples_per_atom, default_time_scan(omega_B, time_scan_points),
            exact_born=exact_born, channel=channel, iteration=k,
        )
        step = controller.correction(profile.delta_omega_hat)
        omega_B -= step
        delta = omega_B / omega_A - 1
        controller.history.append((k, profile.delta_omega_hat, omega_B))
        hist.iteration.append(k)
        hist.delta_omega_hat.append(profile.delta_omega_hat)
        hist.stderr.append(profile.stderr)
        hist.omega_B.append(omega_B)
        hist.aliased |= profile.aliased
        growth = growth + 1 if abs(delta) >= abs(hist.delta[-1]) else 0
        hist.delta.append(delta)
        if growth >= 5:
            hist.non_convergence = True
    return hist
