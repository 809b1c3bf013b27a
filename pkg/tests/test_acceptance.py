"""Acceptance gate.

Each test checks one numbered criterion at its stated tolerance and records a
single PASS/FAIL line, shown in the terminal summary. The optimization
scenarios (5, 7, 8) are long and marked ``slow``; they still run by default.
Run only this gate with ``pytest tests/test_acceptance.py -v``.
"""

import time
from pathlib import Path

import numpy as np
import pytest

from conftest import ACCEPTANCE_LINES
from spinedit import (Acquisition, Detector, SpectralRegion, equilibrium_state, load_spin_system,
                      operator_from_expression, peak_height)
from spinedit.analyze import decompose, excitation_spectrum, press_baseline, singlet_ratio
from spinedit.cli import load_run_config
from spinedit.detect import local_extrema, sign_pattern
from spinedit.grad import finite_difference_check, loss_gradient
from spinedit.objective import Objective, ObjectiveSpec, Task
from spinedit.optimize import run_optimization
from spinedit.prop import (Delay, HardPulse, PulseProgram, PulseSegment, delay_propagator,
                           random_program, run_program, segment_propagator)
from spinedit.spinsys import free_hamiltonian, spin_system_from_mapping, total_spin_operator

CONFIGS = Path(__file__).resolve().parents[1] / "demos" / "configs"
TABLE_S1 = ("citrate", "glutamine", "glutamate", "cystathionine")
GLX = SpectralRegion(3.6, 3.9)


def verdict(number, ok, detail):
    line = f"CRITERION {number}: {'PASS' if ok else 'FAIL'} - {detail}"
    ACCEPTANCE_LINES.append(line)
    print(line)
    assert ok, line


def run_config(name):
    run = load_run_config(CONFIGS / name)
    objective = Objective(run["spec"], run["systems"])
    t0 = time.perf_counter()
    res = run_optimization(objective, run["program"], run["opt"])
    return run, res, time.perf_counter() - t0


def final_spectrum(sys, prog, phase=0.0, acq=Acquisition()):
    rho = run_program(sys, prog, equilibrium_state(sys.n_spins))
    return rho, Detector(sys, acq, phase).spectrum(rho)


def i5x_height(sys, region=GLX):
    return peak_height(Detector(sys).spectrum(operator_from_expression(sys.n_spins, "I5x")), region)


# ---------------------------------------------------------------------------


def test_criterion_1_gradient_gate():
    worst, t0 = {}, time.perf_counter()
    for name in ("citrate", "glutamine"):
        sys = load_spin_system(name)
        n = sys.n_spins
        span = SpectralRegion(min(sys.shifts_ppm) - 0.1, max(sys.shifts_ppm) + 0.1)
        spec = ObjectiveSpec((
            Task(name, "state_fidelity", 1.0, target=" + ".join(f"I{i}x" for i in range(1, n + 1))),
            Task(name, "enhance_peak", 1e-2, region=span),
            Task(name, "suppress_region", 1e-4, region=span),
        ), power_weight=1e-7)
        obj = Objective(spec, {name: sys})
        prog = random_program(np.random.default_rng(11), 64, 6.4e-3, scale=500.0, amp_max=np.inf)
        _, g = loss_gradient(obj, prog)
        # every coordinate, not a sample
        worst[name] = finite_difference_check(obj, prog, step=1e-3, n_probes=g.size, analytic=g)
    elapsed = time.perf_counter() - t0
    ok = max(worst.values()) < 1e-6 and elapsed < 30
    verdict(1, ok, ", ".join(f"{k} max rel err {v:.2e}" for k, v in worst.items()) + f"; {elapsed:.1f} s")


def test_criterion_2_physics_invariants():
    t0 = time.perf_counter()
    worst_u = worst_c = 0.0
    for k, name in enumerate(TABLE_S1):
        sys = load_spin_system(name)
        h0 = free_hamiltonian(sys)
        rng = np.random.default_rng(100 + k)
        rho0 = equilibrium_state(sys.n_spins)
        for _ in range(100):
            prog = random_program(rng, int(rng.integers(1, 40)), float(rng.uniform(1e-4, 2e-2)),
                                  scale=2000.0, extras=(Delay(float(rng.uniform(0, 0.05))),
                                                        HardPulse(float(rng.uniform(0, 2 * np.pi)),
                                                                  float(rng.uniform(0, 2 * np.pi)))))
            for el in prog.elements:
                if isinstance(el, PulseSegment):
                    u = segment_propagator(h0, el)
                elif isinstance(el, Delay):
                    u = delay_propagator(h0, el.duration)
                else:
                    continue
                worst_u = max(worst_u, np.linalg.norm(u @ u.conj().T - np.eye(sys.dim)))
            rho = run_program(sys, prog, rho0)
            for a, b in ((np.trace(rho), np.trace(rho0)), (np.trace(rho @ rho), np.trace(rho0 @ rho0))):
                worst_c = max(worst_c, abs(a - b) / max(abs(b), 1.0))
    elapsed = time.perf_counter() - t0
    ok = worst_u < 1e-10 and worst_c < 1e-9 and elapsed < 60
    verdict(2, ok, f"max |UU^H - I|_F {worst_u:.1e}, max trace/purity drift {worst_c:.1e}; {elapsed:.1f} s")


def test_criterion_3_analytic_oracles():
    one = spin_system_from_mapping({"name": "h", "spectrometer_mhz": 123.2, "shifts_ppm": [3.0]})
    rho = run_program(one, PulseProgram((PulseSegment(250.0, 0.0, 1e-3),)), equilibrium_state(1))
    e_nut = np.max(np.abs(rho + total_spin_operator(1, "y")))

    # weak-coupling (secular) Hamiltonian, where the product-operator rule is exact
    j = 7.0
    h_ising = 2 * np.pi * j * operator_from_expression(2, "I1z.I2z")
    u = delay_propagator(h_ising, 1 / (2 * j))
    rho = u @ operator_from_expression(2, "I1x") @ u.conj().T
    e_j = np.max(np.abs(rho - operator_from_expression(2, "2*I1y.I2z")))

    gln = load_spin_system("glutamine")
    ref = excitation_spectrum(gln).real
    e_press = np.max(np.abs(press_baseline(gln, 1e-12).real - ref)) / np.max(np.abs(ref))
    worst = max(e_nut, e_j, e_press)
    verdict(3, worst < 1e-9, f"nutation {e_nut:.1e}, J antiphase {e_j:.1e}, PRESS TE->0 {e_press:.1e}")


def test_criterion_4_citrate_ab_lineshape():
    cit = load_spin_system("citrate")
    det = Detector(cit, Acquisition(n_points=16384, dwell=1 / 5000, lb_hz=2.0, zerofill=4))
    spec = det.spectrum(operator_from_expression(2, "I1x + I2x"))
    ppm, h = local_extrema(spec, SpectralRegion(2.4, 2.8))
    hz = np.sort((ppm - np.mean(cit.shifts_ppm)) * cit.spectrometer_mhz)
    dnu = (2.66 - 2.53) * 500.0
    c = np.sqrt(dnu**2 + 17.23**2) / 2
    expect = np.array([-c - 17.23 / 2, -c + 17.23 / 2, c - 17.23 / 2, c + 17.23 / 2])
    ratio = np.mean(np.sort(h)[2:]) / np.mean(np.sort(h)[:2])
    ok = (hz.size == 4 and np.max(np.abs(hz - expect)) < 0.3 and abs(ratio / 1.69 - 1) < 0.03)
    verdict(4, ok, f"lines {np.round(hz, 2).tolist()} Hz (expected ±42.2/±25.0), inner:outer {ratio:.3f}")


@pytest.mark.slow
def test_criterion_5_citrate_state_transfer():
    parts, ok = [], True
    for cfg in ("citrate_i1x.run", "citrate_antiphase.run", "citrate_mixed.run"):
        run, res, elapsed = run_config(cfg)
        fid = res.fidelities["state_fidelity:citrate"]
        drop = res.losses[399] / res.losses[9]
        good = fid.max() > 0.99 and drop < 0.1 and elapsed < 300
        ok &= good
        parts.append(f"{run['spec'].tasks[0].target}: F={fid.max():.4f}, L400/L10={drop:.3f}, "
                     f"{elapsed:.0f} s {'ok' if good else 'below'}")
    verdict(5, ok, "; ".join(parts))


def test_criterion_6_citrate_mixed_enhancement():
    cit = load_spin_system("citrate")
    region = SpectralRegion(2.4, 2.8)
    ratios = {}
    for lb in (0.5, 1.0, 2.0):
        det = Detector(cit, Acquisition(lb_hz=lb))
        mixed = peak_height(det.spectrum(operator_from_expression(2, "I1x - 2*I1x.I2z")), region)
        plain = peak_height(det.spectrum(operator_from_expression(2, "I1x")), region)
        ratios[lb] = mixed / plain
    ok = all(abs(r - 1.7) <= 0.2 for r in ratios.values())
    verdict(6, ok, "ratio vs lb: " + ", ".join(f"{lb} Hz -> {r:.3f}" for lb, r in ratios.items())
            + " (target 1.7 ± 0.2)")


@pytest.mark.slow
def test_criterion_7_gln_glu_dual_edit():
    run, res, elapsed = run_config("gln_edit.run")
    gln, glu = run["systems"]["glutamine"], run["systems"]["glutamate"]
    prog = res.best_program
    _, glu_spec = final_spectrum(glu, prog)
    glu_frac = peak_height(glu_spec, GLX) / peak_height(excitation_spectrum(glu), GLX)
    rho, gln_spec = final_spectrum(gln, prog)
    factor = peak_height(gln_spec, GLX) / i5x_height(gln)
    singlet = singlet_ratio(gln_spec, GLX)
    top = [lab for lab, _ in decompose(rho, top_k=5).terms]
    family = any(sum(1 for i, a in lab if i in (1, 2) and a == "z") == 2 and (5, "x") in lab for lab in top)
    enh_ok = factor >= 1.3 or (factor >= 1.2 and family)
    epochs_ok = run["opt"].epochs <= 2000 and len(run["program"].trainable_indices) == 500
    ok = glu_frac < 0.1 and enh_ok and singlet >= 2 and epochs_ok and elapsed < 7200
    verdict(7, ok, f"Glu/90deg {glu_frac:.3f} (<0.1), Gln vs I5x {factor:.2f} (>=1.3), "
                   f"singlet ratio {singlet:.2f} (>=2), I1zI2zI5x family in top 5: {family}; "
                   f"{run['opt'].epochs} epochs, {elapsed:.0f} s")


@pytest.mark.slow
def test_criterion_8_single_molecule_enhancement():
    results, ok = [], True
    for cfg, floor in (("glu_enhance_3t.run", 1.8), ("gln_enhance_5t.run", 1.6), ("cys_enhance_3t.run", 2.5)):
        run, res, elapsed = run_config(cfg)
        (name, sys), = run["systems"].items()
        region = run["spec"].tasks[0].region
        _, spec = final_spectrum(sys, res.best_program)
        if name == "cystathionine":
            factor = peak_height(spec, region) / peak_height(press_baseline(sys, 0.068), region)
            label = "Cys 3T vs PRESS TE 68 ms"
        else:
            factor = peak_height(spec, region) / i5x_height(sys, region)
            label = f"{name} vs I5x"
        ok &= factor >= floor
        results.append(f"{label} {factor:.2f} (>= {floor}, {elapsed:.0f} s)")
    verdict(8, ok, "; ".join(results))


def test_criterion_9_fig_s7_signature():
    gln = load_spin_system("glutamine")
    spec = Detector(gln).spectrum(operator_from_expression(5, "-4*I1z.I2z.I5x"))
    region = SpectralRegion(3.6, 3.9)
    pattern = sign_pattern(spec, region)
    ppm, h = local_extrema(spec, region)
    centre = ppm[np.argmax(h)]
    ok = pattern == "-+-" and abs(centre - 3.76) < 0.01
    verdict(9, ok, f"extremum signs {pattern!r}, central maximum at {centre:.4f} ppm")
