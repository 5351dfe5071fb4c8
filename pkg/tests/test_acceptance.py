"""
Acceptance suite: one test per criterion, each printing a single
``CRITERION n: PASS|FAIL`` line with the measured figures.

Run with ``pytest tests/test_acceptance.py -v -s`` (the lines are printed
even without ``-s``). Criteria that the model cannot meet are left failing.
"""
import math

import numpy as np
import pytest

from bsolock.channel import Channel, ChannelModel, audit_transcript
from bsolock.cli import reversal_fidelity, solver_comparison
from bsolock.dynamics import DriveField, Envelope, bso_scan, drive_for_end_eta
from bsolock.locking import LockController, build_arrays, default_time_scan, lock_loop, run_lock_scan
from bsolock.protocol import ProtocolConfig, run_phase_recovery, run_protocol

CHI2_99_7DOF = 18.475
PHASES = (0.0, math.pi / 8, math.pi / 4, 3 * math.pi / 8)

# every channel used by an acceptance run, audited by criterion 9
TRANSCRIPTS: list = []


@pytest.fixture
def report(capsys):
    def emit(n, ok, detail):
        with capsys.disabled():
            print(f"\nCRITERION {n}: {'PASS' if ok else 'FAIL'}  {detail}")
        assert ok, detail

    return emit


def channel(seed=0):
    ch = Channel(ChannelModel(base_latency=1.0, jitter=0.5, drop_probability=0.1, seed=seed))
    TRANSCRIPTS.append(ch.transcript)
    return ch


def config(phi, eta=0.05, chi=0.0, **kw):
    return ProtocolConfig(
        alice_field=DriveField(0.01, phi=phi, rwa=True),
        bob_field=DriveField(0.01, phi=chi, rwa=True),
        eta_measure=eta,
        **kw,
    )


def mod_pi_distance(a, b):
    d = (a - b) % math.pi
    return min(d, math.pi - d)


def test_criterion_1_bso_fringe(report):
    ok, parts = True, []
    for eta in (0.005, 0.01, 0.02, 0.05):
        drive, pulse = drive_for_end_eta(eta)
        fit = bso_scan(drive, np.arange(16) * math.pi / 16, pulse).fit
        amp_err = abs(fit.depth / (2 * eta) - 1)
        off_err = abs(fit.offset - 0.5)
        ok &= amp_err <= 0.05 and off_err <= 1e-3
        parts.append(f"eta={eta}: amp/2eta-1={amp_err:.2e} |offset-0.5|={off_err:.2e}")
    report(1, ok, "; ".join(parts))


def test_criterion_2_three_solvers(report):
    eta = 0.02
    _, _, exact, floquet, closed = solver_comparison(eta, 0.37, 201, 4, 200.0)
    dev = {
        "floquet-exact": np.abs(floquet - exact).max(),
        "closed-exact": np.abs(closed - exact).max(),
        "closed-floquet": np.abs(closed - floquet).max(),
    }
    bound = 5 * eta**2
    detail = ", ".join(f"{k}={v:.2e}" for k, v in dev.items()) + f" (bound {bound:.1e})"
    report(2, max(dev.values()) <= bound, detail)


def test_criterion_3_time_reversal(report):
    eta, phi = 0.05, 0.3
    on = np.array([reversal_fidelity(eta, phi, m * math.pi) for m in range(1, 21)])
    off = np.array([reversal_fidelity(eta, phi, (m + 0.5) * math.pi) for m in range(1, 21)])
    rng = np.random.default_rng(0)
    rwa = np.array([reversal_fidelity(eta, p, T, rwa=True) for p, T in zip(rng.uniform(0, 2 * math.pi, 5), rng.uniform(0.1, 60, 5))])
    ok_on = np.all(on >= 1 - 10 * eta**4)
    ok_off = np.all(1 - off >= eta**2 / 2)
    ok_rwa = np.all(np.abs(rwa - 1) <= 1e-12)
    detail = (
        f"min F(m pi)={on.min():.6f} vs {1 - 10 * eta**4:.6f} [{'ok' if ok_on else 'miss'}]; "
        f"min deficit((m+1/2) pi)={(1 - off).min():.2e} vs {eta**2 / 2:.2e} [{'ok' if ok_off else 'miss'}]; "
        f"max |F_rwa-1|={np.abs(rwa - 1).max():.1e} [{'ok' if ok_rwa else 'miss'}]"
    )
    report(3, ok_on and ok_off and ok_rwa, detail)


def test_criterion_4_weak_limit(report):
    ok, parts = True, []
    for k, phi in enumerate(PHASES):
        led = run_protocol(config(phi, eta=1e-6, pairs=100_000, seed=40 + k, measure_envelope=Envelope.STEP), channel(k))
        z = abs(led.L / led.M - 0.5) / led.zeta_stderr
        ok &= z <= 3
        parts.append(f"phi={phi:.3f}: {led.L / led.M:.4f} ({z:.2f} sigma)")
    report(4, ok, "; ".join(parts))


def test_criterion_5_success_statistics(report):
    eta, ok, parts = 0.05, True, []
    for k, phi in enumerate(PHASES):
        led = run_protocol(config(phi, eta=eta, pairs=100_000, seed=50 + k), channel(k))
        freq = led.L / led.M
        sigma = math.sqrt(led.p_bob * (1 - led.p_bob) / led.M)
        first = 0.5 * (1 + 2 * eta * math.sin(2 * phi))
        z_first, z_born = abs(freq - first) / sigma, abs(freq - led.p_bob) / sigma
        ok &= z_first <= 3 and z_born <= 3
        parts.append(f"phi={phi:.3f}: f={freq:.4f} first-order {z_first:.2f}s, Born {z_born:.2f}s")
    report(5, ok, "; ".join(parts))


def test_criterion_6_phase_recovery(report):
    ok, parts = True, []
    for k, phi in enumerate((0.3, 1.2, 2.8)):
        est, *_ = run_phase_recovery(config(phi, pairs=1_000_000, seed=60 + k), channel(k))
        err = mod_pi_distance(est.phi_mod_pi, phi)
        ok &= err <= 3 * est.stderr
        parts.append(f"phi={phi}: hat={est.phi_mod_pi:.4f} err={err:.4f} ({err / est.stderr:.1f} sigma)")
    scaled = []
    for pairs in (2_000, 20_000, 200_000):
        est, a, b = run_phase_recovery(config(0.3, pairs=pairs, seed=66), channel())
        scaled.append(est.stderr * math.sqrt(0.5 * (a.M + b.M)))
    spread = np.abs(np.array(scaled) / scaled[0] - 1).max()
    ok &= spread <= 0.2
    parts.append(f"stderr*sqrt(M) spread={spread:.3f}")
    report(6, ok, "; ".join(parts))


def test_criterion_7_lock_detection(report):
    cfg = config(0.4, eta=0.01, chi=1.1)
    ts = default_time_scan
    p8 = run_lock_scan(build_arrays(8, 1.0, 1.001), cfg, 10_000, ts(1.001), exact_born=True)
    p2 = run_lock_scan(build_arrays(2, 1.0, 1.001), cfg, 10_000, ts(1.001), exact_born=True)
    flat = run_lock_scan(build_arrays(8, 1.0, 1.0), cfg, 10_000, ts(1.0), exact_born=True)
    strong = run_lock_scan(build_arrays(8, 1.0, 1.0), cfg.with_(eta_measure=0.05), 10_000, ts(1.0), exact_born=True)
    e8, e2 = abs(p8.delta_omega_hat / 1e-3 - 1), abs(p2.delta_omega_hat / 1e-3 - 1)
    chi2, dof = flat.flatness_chi2()
    chi2_strong, _ = strong.flatness_chi2()
    ok = e8 <= 0.01 and e2 <= 0.01 and chi2 < CHI2_99_7DOF
    detail = (
        f"N=8 rel err={e8:.1e}; N=2 rel err={e2:.1e}; flatness chi2={chi2:.2f}/{dof} dof at eta=0.01 "
        f"(99% limit {CHI2_99_7DOF}); diagnostic eta=0.05 chi2={chi2_strong:.1f}"
    )
    report(7, ok, detail)


def test_criterion_8_closed_loop(report):
    cfg = config(0.4, eta=0.01, chi=1.1, seed=8)
    noisy = lock_loop(LockController(gain=0.5), 1e-3, 20, cfg, N=8, samples_per_atom=10_000, exact_born=False, channel=channel(8))
    ok_noisy = abs(noisy.final_delta) < 1e-5
    worst = 0.0
    for gain in (0.3, 0.5, 1.5, 1.9):
        h = lock_loop(LockController(gain=gain), 1e-3, 3, cfg, N=8, exact_born=True)
        ratios = np.abs(np.array(h.delta[1:]) / np.array(h.delta[:-1]))
        worst = max(worst, np.abs(ratios - abs(1 - gain)).max())
    ok_exact = worst <= 1e-6
    detail = (
        f"noisy final |delta|={abs(noisy.final_delta):.2e} (target 1e-5, per-iteration stderr "
        f"{np.median(noisy.stderr):.1e}) [{'ok' if ok_noisy else 'miss'}]; exact contraction worst dev={worst:.1e} "
        f"[{'ok' if ok_exact else 'miss'}]"
    )
    report(8, ok_noisy and ok_exact, detail)


def test_criterion_9_no_signalling(report):
    ok, parts = True, []
    for k, phi in enumerate((0.0, 0.4, 1.2, 2.8)):
        led = run_protocol(config(phi, pairs=100_000, seed=90 + k), channel(k), bob_measures_all=True)
        f = led.bob_unconditional_frequency()
        z = abs(f - 0.5) / math.sqrt(0.25 / led.pairs)
        ok &= z <= 3
        parts.append(f"phi={phi}: {f:.4f} ({z:.2f} sigma)")
    violations = [v for t in TRANSCRIPTS for v in audit_transcript(t)]
    messages = sum(len(t) for t in TRANSCRIPTS)
    ok &= not violations
    parts.append(f"audit: {len(violations)} violations over {messages} messages in {len(TRANSCRIPTS)} transcripts")
    report(9, ok, "; ".join(parts))
