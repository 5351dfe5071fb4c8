"""
Phase teleportation over degenerate entangled pairs.

Each side holds a three-level atom: two degenerate ground levels ``|0>``,
``|1>`` and an upper level ``|2>`` whose energy equals the local clock
frequency. A pair starts in the singlet ``(|0>|1> - |1>|0>)/sqrt(2)``. Both
sides move ``|1>`` to ``|2>`` with a weak (RWA) pi pulse, after which

    [|0>_A |2>_B e^{-i(w t + chi)} - |2>_A |0>_B e^{-i(w t + phi)}] / sqrt(2)

up to a global phase. Alice then projects onto ``|+>_A``, the image of
``|0>_A`` under a strong pi/2 pulse whose Bloch-Siegert term carries her
drive phase. Bob's conditional population of ``|0>_B`` is then
``1/2 [1 + 2 eta sin(2 phi_eff)]`` to first order, with
``phi_eff = omega t_m + phi`` at Alice's measurement time ``t_m``. Alice
measures at multiples of ``pi/omega``, so ``phi_eff = phi`` modulo pi.

Measurement states are always computed by numerical non-RWA evolution; the
first-order formulas appear only in tests.
"""
from __future__ import annotations

import enum
import functools
import math
from dataclasses import dataclass, field, replace

import numpy as np

from .channel import Channel, MessageKind, Party, reliable_send
from .dynamics import (
    DriveField,
    Envelope,
    Frame,
    PulseSpec,
    drive_for_end_eta,
    propagator,
    pulse_image,
    tune_for_reversal,
)
from .errors import EmptyPostSelection, NotNormalized, RwaFlagMissing, WrongStateShape

#: Pairs drawn from one RNG substream; substreams are keyed by (stream, block).
BLOCK_SIZE = 1 << 16

#: Refinement tolerance for numerically constructed measurement states.
MEASUREMENT_TOL = 1e-10


class Basis(enum.Enum):
    """What Bob detects: the population of one level, or his projected ``|->`` state."""

    POPULATION = "population"
    MINUS = "minus"


@dataclass
class JointState:
    """Alice x Bob amplitudes, ``amplitudes[a, b]`` for levels a, b in {0, 1, 2}.

    ``omega_A``/``omega_B`` are the upper-level energies that set free evolution.
    """

    amplitudes: np.ndarray
    t: float = 0.0
    omega_A: float = 1.0
    omega_B: float = 1.0

    def __post_init__(self):
        amps = np.asarray(self.amplitudes, dtype=complex)
        if amps.size != 9:
            raise WrongStateShape(f"joint state needs 9 amplitudes, got {amps.size}")
        self.amplitudes = amps.reshape(3, 3).copy()
        n = self.norm()
        if abs(n - 1.0) > 1e-9:
            raise NotNormalized(f"joint state norm {n!r}")

    def norm(self) -> float:
        return float(np.linalg.norm(self.amplitudes))

    @property
    def vector(self) -> np.ndarray:
        return self.amplitudes.reshape(9)

    def populations(self, side: Party) -> np.ndarray:
        p = np.abs(self.amplitudes) ** 2
        return p.sum(1) if side is Party.ALICE else p.sum(0)

    def free_evolve(self, t: float) -> "JointState":
        """Advance to time ``t`` (possibly backwards) with no drive on either side."""
        dt = t - self.t
        amps = self.amplitudes.copy()
        amps[2, :] *= np.exp(-1j * self.omega_A * dt)
        amps[:, 2] *= np.exp(-1j * self.omega_B * dt)
        return replace(self, amplitudes=amps, t=t)

    def apply(self, side: Party, op: np.ndarray) -> "JointState":
        """Apply a 3x3 single-atom operator (time unchanged); renormalization is the caller's job."""
        amps = op @ self.amplitudes if side is Party.ALICE else self.amplitudes @ op.T
        out = object.__new__(JointState)
        out.amplitudes, out.t, out.omega_A, out.omega_B = amps, self.t, self.omega_A, self.omega_B
        return out


def make_singlet(t: float = 0.0, omega_A: float = 1.0, omega_B: float = 1.0) -> JointState:
    amps = np.zeros((3, 3), complex)
    amps[0, 1] = 1 / math.sqrt(2)
    amps[1, 0] = -1 / math.sqrt(2)
    return JointState(amps, t, omega_A, omega_B)


@dataclass(frozen=True)
class ProtocolConfig:
    """Fields and counts for one protocol run.

    Attributes:
        alice_field, bob_field: attenuated drives used for the 1 -> 2 pi
            pulses; their ``phi`` are the clock phases (phi and chi) and their
            ``omega`` the clock frequencies.
        eta_measure: instantaneous eta of the strong measurement field at the
            end of its pulse.
        pairs: number of entangled pairs X.
        seed: master seed for all Bernoulli draws.
        phase_offset_run2: drive phase shift Alice applies for the second
            (cosine) run. A shift of pi/4 turns sin(2 phi) into cos(2 phi).
        measure_envelope: envelope of the strong field. The exponential
            switch keeps switch-on transients out of the signal; a step is
            only sensible for tiny eta, where transients are negligible and
            the adiabatic switch would take too long to integrate.
        measure_switch_periods: omega * tau_sw of the exponential switch.
        bob_level: level Bob counts in the teleportation run.
    """

    alice_field: DriveField = field(default_factory=lambda: DriveField(0.01, rwa=True))
    bob_field: DriveField = field(default_factory=lambda: DriveField(0.01, rwa=True))
    eta_measure: float = 0.05
    pairs: int = 1000
    seed: int = 0
    phase_offset_run2: float = math.pi / 4
    measure_envelope: Envelope = Envelope.EXP_SWITCH
    measure_switch_periods: float = 200.0
    bob_level: int = 0

    def __post_init__(self):
        if self.pairs < 1:
            raise ValueError("pairs must be ≥ 1")
        if not 0 < self.eta_measure < 0.25:
            raise ValueError("eta_measure must be in (0, 0.25)")
        if self.bob_level not in (0, 2):
            raise ValueError("bob_level must be 0 or 2")
        if not 0 <= self.seed < 2**64:
            raise ValueError("seed must be an unsigned 64-bit integer")

    def field_of(self, side: Party) -> DriveField:
        return self.alice_field if side is Party.ALICE else self.bob_field

    def measure_drive(self, side: Party, area: float) -> DriveField:
        return _measure_drive(
            self.eta_measure, area, self.field_of(side).omega,
            self.measure_envelope, self.measure_switch_periods,
        )

    def with_(self, **changes) -> "ProtocolConfig":
        return replace(self, **changes)


@functools.lru_cache(maxsize=256)
def _measure_drive(eta, area, omega, envelope, switch_periods) -> DriveField:
    if envelope is Envelope.STEP:
        return DriveField(4.0 * omega * eta, omega)
    return drive_for_end_eta(eta, area, omega, switch_periods=switch_periods)[0]


def _embed(u2: np.ndarray, levels: tuple[int, int]) -> np.ndarray:
    op = np.eye(3, dtype=complex)
    idx = np.ix_(levels, levels)
    op[idx] = u2
    return op


def _lab_propagator(field: DriveField, t0: float, t1: float) -> np.ndarray:
    """Lab-frame 2x2 propagator, integrated in the rotating frame."""
    u = propagator(field, t0, t1, frame=Frame.ROTATING)
    q = lambda t: np.diag([1.0, np.exp(1j * (field.omega * t + field.phi))])
    return q(t1).conj() @ u @ q(t0)


def apply_pi_pulse_12(state: JointState, side: Party, field: DriveField, t_complete: float) -> JointState:
    """Weak resonant pi pulse on ``|1> -> |2>`` of one atom, ending at ``t_complete``.

    The pulse starts one pulse length before ``t_complete``. Pulses on the
    two sides may overlap in time as long as they are applied in order of
    completion: the pulsed side is first rolled back to the pulse start.

    Raises:
        RwaFlagMissing: ``field`` is not marked attenuated.
    """
    if not field.rwa:
        raise RwaFlagMissing("the 1->2 pi pulse needs an attenuated (rwa=True) field")
    if t_complete < state.t:
        raise ValueError("t_complete precedes the state's time")
    duration = PulseSpec.for_area(field.with_(t_on=0.0), math.pi).duration
    t_start = t_complete - duration
    pulse_field = field.with_(t_on=t_start)
    u = _lab_propagator(pulse_field, t_start, t_complete)
    omega = state.omega_A if side is Party.ALICE else state.omega_B
    # roll the pulsed side back to t_start, pulse, and move the other side forward
    back = np.diag([1.0, 1.0, np.exp(1j * omega * (state.t - t_start))])
    out = state.apply(side, _embed(u, (1, 2)) @ back)
    other = state.omega_B if side is Party.ALICE else state.omega_A
    fwd = np.diag([1.0, 1.0, np.exp(-1j * other * (t_complete - state.t))])
    out = out.apply(side.other, fwd)
    out.t = t_complete
    return out


def _check_support(state: JointState):
    amps = state.amplitudes
    stray = np.sum(np.abs(amps[1, :]) ** 2) + np.sum(np.abs(amps[:, 1]) ** 2)
    if stray > 1e-9:
        raise WrongStateShape(f"population {stray:.3g} outside span{{|0>,|2>}} on one side")


def measurement_state(config: ProtocolConfig, side: Party, t: float, area: float = math.pi / 2, phase=None) -> np.ndarray:
    """Three-level image(s) of ``|0>`` after a strong pulse of ``area`` ending at ``t``.

    ``area = pi/2`` gives ``|+>``, ``3 pi/2`` gives ``|->``. ``phase`` (default:
    the side's clock phase) may be an array, giving shape ``(B, 3)``.
    """
    fld = config.field_of(side)
    ph = fld.phi if phase is None else phase
    drive = config.measure_drive(side, area)
    img = pulse_image(drive, area, fld.omega * t + np.asarray(ph, dtype=float), tol=MEASUREMENT_TOL)
    out = np.zeros((img.shape[0], 3), complex)
    out[:, 0], out[:, 2] = img[:, 0], img[:, 1]
    return out[0] if np.ndim(ph) == 0 else out


def project_alice(state: JointState, plus: np.ndarray) -> tuple[float, JointState | None, JointState | None]:
    """Born probability of ``plus`` on Alice's atom and the two collapsed states."""
    proj = np.outer(plus, plus.conj())
    hit = state.apply(Party.ALICE, proj)
    miss = state.apply(Party.ALICE, np.eye(3) - proj)
    p = float(min(max(hit.norm() ** 2, 0.0), 1.0))

    def normalized(s, w):
        if w <= 1e-300:
            return None
        return JointState(s.amplitudes / math.sqrt(w), s.t, s.omega_A, s.omega_B)

    return p, normalized(hit, p), normalized(miss, 1.0 - p)


def alice_plus_split(state: JointState, config: ProtocolConfig, t_start: float, phase=None):
    """``(p_plus, state_if_plus, state_if_not)`` for Alice's measurement at ``t_start``."""
    _check_support(state)
    state = state.free_evolve(t_start)
    return project_alice(state, measurement_state(config, Party.ALICE, t_start, math.pi / 2, phase))


def alice_measure_plus(state: JointState, config: ProtocolConfig, t_start: float, rng, phase=None):
    """Projective measurement of ``|+>_A`` at ``t_start``; returns ``(found_plus, collapsed)``.

    Raises:
        WrongStateShape: the state has weight on level 1 of either atom.
    """
    p, hit, miss = alice_plus_split(state, config, t_start, phase)
    found = bool(rng.random() < p)
    return found, hit if found else miss


def alice_measure_sequence(state: JointState, config: ProtocolConfig, t_start: float, rng, m: int):
    """Alice's operational measurement: reversed drive for ``m pi/omega``, then detect ``|0>_A``.

    The drive has a step envelope with ``g0 = omega/(2m)`` and phase shifted
    by pi; it therefore undoes a pi/2 pulse of the same strength, making this
    a measurement of that pulse's ``|+>`` image (see :func:`reversal_plus_state`).
    Returns ``(found_plus, collapsed)``, where the collapsed state is taken at
    the end of the sequence.
    """
    _check_support(state)
    fld = config.alice_field
    rev, pulse = tune_for_reversal(DriveField(1.0, fld.omega, fld.phi + math.pi, t_on=t_start), m)
    t_end = t_start + pulse.duration
    u = _lab_propagator(rev, t_start, t_end)
    state = state.free_evolve(t_start)
    after = state.apply(Party.ALICE, _embed(u, (0, 2)))
    after.t = t_end
    p, hit, miss = project_alice(after, np.array([1.0, 0.0, 0.0], complex))
    found = bool(rng.random() < p)
    return found, hit if found else miss


def reversal_plus_state(config: ProtocolConfig, t: float, m: int) -> np.ndarray:
    """The ``|+>_A`` that :func:`alice_measure_sequence` with integer ``m`` targets."""
    fld = config.alice_field
    drive, pulse = tune_for_reversal(DriveField(1.0, fld.omega, fld.phi), m)
    fwd = drive.with_(t_on=t - pulse.duration)
    u = _lab_propagator(fwd, t - pulse.duration, t)
    return np.array([u[0, 0], 0.0, u[1, 0]], complex)


def bob_success_probability(
    collapsed: JointState, config: ProtocolConfig, t_start: float,
    basis: Basis = Basis.POPULATION, phase=None,
) -> float:
    """Born probability of Bob's success outcome."""
    _check_support(collapsed)
    if basis is Basis.POPULATION:
        return float(collapsed.populations(Party.BOB)[config.bob_level])
    minus = measurement_state(config, Party.BOB, t_start, 1.5 * math.pi, phase)
    s = collapsed.free_evolve(t_start)
    return float(np.linalg.norm(s.amplitudes @ minus.conj()) ** 2)


def bob_measure(collapsed: JointState, config: ProtocolConfig, t_start: float, rng,
                basis: Basis = Basis.POPULATION, phase=None) -> bool:
    """Draw Bob's outcome; ``True`` is success (see :func:`bob_success_probability`)."""
    return bool(rng.random() < bob_success_probability(collapsed, config, t_start, basis, phase))


def uniform_draws(seed: int, stream: int, n: int) -> np.ndarray:
    """``n`` uniforms for pairs 0..n-1; pair k's draw depends only on (seed, stream, k)."""
    out = np.empty(n)
    for b, start in enumerate(range(0, n, BLOCK_SIZE)):
        rng = np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(stream, b)))
        stop = min(start + BLOCK_SIZE, n)
        out[start:stop] = rng.random(BLOCK_SIZE)[: stop - start]
    return out


@dataclass
class MeasurementLedger:
    """Per-pair outcomes of one run plus the post-selected counts.

    ``bob_outcome`` holds -1 for pairs Bob did not measure, else 0 or 1.
    """

    alice_found_plus: np.ndarray
    bob_outcome: np.ndarray
    M: int
    L: int
    eta: float
    phase_shift: float = 0.0
    p_alice: float = math.nan  # Born probabilities, for diagnostics
    p_bob: float = math.nan
    t_measure: float = math.nan

    @property
    def pairs(self) -> int:
        return int(self.alice_found_plus.size)

    @property
    def zeta_raw(self) -> float:
        if self.M == 0:
            raise EmptyPostSelection("no post-selected pairs")
        return self.L / self.M - 0.5

    @property
    def zeta(self) -> float:
        """``zeta_raw / eta``, which tends to sin(2 phi_eff)."""
        return self.zeta_raw / self.eta

    @property
    def zeta_stderr(self) -> float:
        p = self.L / self.M
        return math.sqrt(p * (1 - p) / self.M)

    @property
    def per_pair(self) -> list[dict]:
        return [
            {"alice_found_plus": bool(a), "bob_outcome": None if b < 0 else bool(b)}
            for a, b in zip(self.alice_found_plus, self.bob_outcome)
        ]

    def bob_unconditional_frequency(self) -> float:
        """Bob's success frequency over every pair he measured, ignoring Alice's list."""
        measured = self.bob_outcome >= 0
        return float(self.bob_outcome[measured].mean())


def prepare_pairs(config: ProtocolConfig) -> JointState:
    """Singlet followed by both pi pulses, each starting at t = 0."""
    fa, fb = config.alice_field, config.bob_field
    state = make_singlet(0.0, fa.omega, fb.omega)
    done = {
        Party.ALICE: PulseSpec.for_area(fa.with_(t_on=0.0), math.pi).duration,
        Party.BOB: PulseSpec.for_area(fb.with_(t_on=0.0), math.pi).duration,
    }
    for side in sorted(done, key=lambda s: (done[s], s.value)):
        state = apply_pi_pulse_12(state, side, config.field_of(side), done[side])
    return state, done


def next_measurement_time(t: float, omega: float) -> float:
    """First multiple of pi/omega at or after ``t``."""
    k = math.ceil(t * omega / math.pi - 1e-12)
    return k * math.pi / omega


def run_protocol(
    config: ProtocolConfig,
    channel: Channel | None = None,
    bob_measures_all: bool = False,
    run_index: int = 0,
    phase_shift: float = 0.0,
) -> MeasurementLedger:
    """One full run over ``config.pairs`` identically prepared pairs.

    Completion notices and the index list travel over ``channel`` with
    acknowledge-and-resend. Alice measures at the first multiple of
    ``pi/omega_A`` after both notices are acknowledged. With
    ``bob_measures_all`` Bob measures every pair, which is what the
    no-signalling check needs; M and L still count only Alice's list.
    ``run_index`` selects independent RNG streams for repeated runs.
    """
    channel = channel or Channel()
    state, done = prepare_pairs(config)
    for side in sorted(done, key=lambda s: (done[s], s.value)):
        channel.advance_to(max(channel.now, done[side]))
        reliable_send(channel, MessageKind.EXCITATION_COMPLETE, side, None)

    t_m = next_measurement_time(channel.now, config.alice_field.omega)
    channel.advance_to(t_m)
    p_plus, hit, miss = alice_plus_split(state, config, t_m)

    X = config.pairs
    alice = uniform_draws(config.seed, 2 * run_index, X) < p_plus
    indices = np.flatnonzero(alice)
    reliable_send(channel, MessageKind.INDEX_LIST, Party.ALICE, {"pairs": X, "indices": indices.tolist()})

    t_b = channel.now
    p_hit = bob_success_probability(hit, config, t_b) if hit is not None else 0.0
    p_miss = bob_success_probability(miss, config, t_b) if miss is not None else 0.0
    u_bob = uniform_draws(config.seed, 2 * run_index + 1, X)
    bob = np.full(X, -1, dtype=np.int8)
    if bob_measures_all:
        bob[:] = u_bob < np.where(alice, p_hit, p_miss)
    else:
        bob[indices] = u_bob[indices] < p_hit
    M = int(indices.size)
    L = int(bob[indices].sum()) if M else 0
    return MeasurementLedger(alice, bob, M, L, config.eta_measure, phase_shift, p_plus, p_hit, t_m)


@dataclass(frozen=True)
class PhaseEstimate:
    sin2phi_hat: float
    cos2phi_hat: float
    phi_mod_pi: float
    stderr: float
    sin_stderr: float = math.nan
    cos_stderr: float = math.nan


def estimate_phase(ledger_sin: MeasurementLedger, ledger_cos: MeasurementLedger, eta: float) -> PhaseEstimate:
    """Recover phi modulo pi from a run and a phase-shifted repeat.

    The second run measures ``sin(2 phi + 2 d)`` with ``d`` the difference
    of the two ledgers' ``phase_shift``; for ``d = pi/4`` that is
    ``cos(2 phi)``, and other offsets are unmixed linearly. Standard errors
    come from binomial propagation.

    Raises:
        EmptyPostSelection: either run has M = 0.
    """
    if ledger_sin.M == 0 or ledger_cos.M == 0:
        raise EmptyPostSelection("both runs need at least one post-selected pair")
    d = ledger_cos.phase_shift - ledger_sin.phase_shift
    s2, c2 = math.sin(2 * d), math.cos(2 * d)
    if abs(s2) < 1e-6:
        raise ValueError("phase offset between runs gives no cosine information")
    s = ledger_sin.zeta_raw / eta
    r = ledger_cos.zeta_raw / eta
    c = (r - s * c2) / s2
    ds = ledger_sin.zeta_stderr / eta
    dc = math.hypot(ledger_cos.zeta_stderr / eta, c2 * ds) / abs(s2)
    phi = (0.5 * math.atan2(s, c)) % math.pi
    rr = s * s + c * c
    dphi = 0.5 * math.sqrt(c * c * ds * ds + s * s * dc * dc) / rr if rr > 0 else math.inf
    return PhaseEstimate(s, c, phi, dphi, ds, dc)


def run_phase_recovery(config: ProtocolConfig, channel: Channel | None = None):
    """Sine run, announced phase shift, cosine run; returns ``(estimate, ledger_sin, ledger_cos)``."""
    channel = channel or Channel()
    ledger_sin = run_protocol(config, channel, run_index=0)
    shift = config.phase_offset_run2
    reliable_send(channel, MessageKind.PHASE_SHIFT_ANNOUNCE, Party.ALICE, float(shift))
    shifted = config.with_(alice_field=config.alice_field.shifted(shift))
    ledger_cos = run_protocol(shifted, channel, run_index=1, phase_shift=shift)
    return estimate_phase(ledger_sin, ledger_cos, config.eta_measure), ledger_sin, ledger_cos
