import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from spinedit.detect import (Acquisition, Detector, Fid, SpectralRegion, acquire_fid, local_extrema,
                             peak_height, read_spectrum_csv, region_power, resolved_extrema,
                             sign_pattern, simulate_spectrum, spectrum_from_fid, write_fid_csv,
                             write_spectrum_csv)
from spinedit.spinsys import (SpinSystem, equilibrium_state, operator_from_expression,
                              single_spin_operator, total_spin_operator)

from conftest import random_hermitian


def one_spin(shift=0.0, carrier=0.0, mhz=500.0):
    return SpinSystem("h", (shift,), np.zeros((1, 1)), mhz, carrier)


def lorentz_bin(freq, omega, lb, dwell):
    # exact discrete-time Lorentzian for s_k = exp(i2pi*omega k dt - pi lb k dt), first point halved
    z = np.exp((-np.pi * lb + 2j * np.pi * (freq - omega)) * dwell)
    return (1 / (1 - z) - 0.5).real


# --- FID ---------------------------------------------------------------------


def test_on_resonance_fid_is_flat():
    fid = acquire_fid(one_spin(), single_spin_operator(1, 1, "x"), n_points=128, dwell=1e-3, lb_hz=0.0)
    np.testing.assert_allclose(fid.samples[1:], 1.0, atol=1e-12)
    assert fid.samples[0] == pytest.approx(0.5)


def test_longitudinal_gives_no_fid(glutamine):
    fid = acquire_fid(one_spin(), single_spin_operator(1, 1, "z"), n_points=64, dwell=1e-3)
    assert np.all(fid.samples == 0)
    fid = acquire_fid(glutamine, equilibrium_state(5), n_points=64)
    assert np.max(np.abs(fid.samples)) < 1e-12


def test_precession_sense():
    # H = +2 pi Omega Iz with F- detection rotates as exp(-i 2 pi Omega t)
    sys = one_spin(shift=0.1, carrier=0.0, mhz=500.0)  # +50 Hz
    fid = acquire_fid(sys, single_spin_operator(1, 1, "x"), n_points=256, dwell=1e-4, lb_hz=0.0)
    expect = np.exp(-2j * np.pi * 50.0 * fid.t)
    expect[0] *= 0.5
    np.testing.assert_allclose(fid.samples, expect, atol=1e-10)


def test_fid_matches_repeated_dwell_propagation(glutamine, rng):
    # oracle: evolve rho by the single-dwell propagator k times
    from spinedit.prop import delay_propagator
    from spinedit.spinsys import free_hamiltonian
    rho = random_hermitian(rng, 32)
    acq = Acquisition(64, 5e-4, 3.0, 1)
    fid = Detector(glutamine, acq).fid_samples(rho)
    u = delay_propagator(free_hamiltonian(glutamine), 5e-4)
    fm = total_spin_operator(5, "x") - 1j * total_spin_operator(5, "y")
    r = rho.copy()
    ref = []
    for k in range(64):
        ref.append(np.trace(fm @ r) / 2**3 * np.exp(-np.pi * 3.0 * k * 5e-4))
        r = u @ r @ u.conj().T
    ref[0] *= 0.5
    np.testing.assert_allclose(fid, ref, atol=1e-10)


def test_fid_validation(citrate):
    with pytest.raises(ValueError):
        acquire_fid(citrate, equilibrium_state(2), n_points=0)
    with pytest.raises(ValueError):
        acquire_fid(citrate, equilibrium_state(2), dwell=-1e-3)
    with pytest.raises(ValueError):
        Detector(citrate, Acquisition(n_points=100))
    with pytest.raises(ValueError):
        Detector(citrate, Acquisition(lb_hz=-1.0))
    with pytest.raises(ValueError):
        Detector(citrate, Acquisition(zerofill=3))


def test_default_acquisition(citrate, glutamine):
    a = Acquisition().resolve(citrate)
    assert a.dwell == pytest.approx(1 / 5000) and a.lb_hz == 1.0
    b = Acquisition().resolve(glutamine)
    assert b.lb_hz == 4.0
    assert 1 / b.dwell == pytest.approx(10 * glutamine.spectrometer_mhz)


# --- spectra -----------------------------------------------------------------


def test_zero_fid_zero_spectrum():
    spec = spectrum_from_fid(Fid(np.zeros(128, complex), 1e-3, 500.0, 0.0), 2)
    assert np.all(spec.intensities == 0)


def test_positive_offset_peaks_at_positive_frequency():
    sys = one_spin(shift=0.1, carrier=0.0, mhz=500.0)
    spec = simulate_spectrum(sys, single_spin_operator(1, 1, "x"), Acquisition(4096, 2e-4, 1.0, 2))
    k = np.argmax(spec.real)
    assert abs(spec.freq_hz[k] - 50.0) <= np.diff(spec.freq_hz)[0]
    assert spec.ppm[k] == pytest.approx(0.1, abs=0.002)


@pytest.mark.parametrize("zf", [1, 2, 4])
def test_parseval(zf, rng):
    s = rng.normal(size=256) + 1j * rng.normal(size=256)
    spec = spectrum_from_fid(Fid(s, 1e-3, 100.0, 0.0), zf)
    n = 256 * zf
    assert np.sum(np.abs(s) ** 2) == pytest.approx(np.sum(np.abs(spec.intensities) ** 2) / n, rel=1e-12)


def test_axes(glutamine):
    spec = simulate_spectrum(glutamine, operator_from_expression(5, "I5x"))
    assert np.all(np.diff(spec.freq_hz) > 0)
    np.testing.assert_allclose(spec.ppm, glutamine.carrier_ppm + spec.freq_hz / glutamine.spectrometer_mhz)
    assert spec.intensities.size == 8192


def test_lorentzian_peak_height():
    sys = one_spin(shift=3.7, carrier=3.65, mhz=500.0)  # +25 Hz
    acq = Acquisition(4096, 2e-4, 2.0, 2)
    spec = simulate_spectrum(sys, single_spin_operator(1, 1, "x"), acq)
    h = peak_height(spec, SpectralRegion(3.6, 3.8))
    k = np.argmax(spec.real)
    assert h == pytest.approx(lorentz_bin(spec.freq_hz[k], 25.0, 2.0, 2e-4), rel=0.02)
    assert h == pytest.approx(1 / (np.pi * 2.0 * 2e-4), rel=0.02)
    # away from the line
    assert abs(peak_height(spec, SpectralRegion(1.0, 1.2))) < 1e-2 * h


def test_empty_region(citrate):
    spec = simulate_spectrum(citrate, equilibrium_state(2))
    with pytest.raises(ValueError):
        peak_height(spec, SpectralRegion(50.0, 60.0))
    with pytest.raises(ValueError):
        SpectralRegion(3.0, 2.0)


def test_linearity_and_scaling(citrate, rng):
    det = Detector(citrate)
    r1, r2 = random_hermitian(rng, 4), random_hermitian(rng, 4)
    s = det.spectrum_values(2.5 * r1 - 0.7 * r2)
    np.testing.assert_allclose(s, 2.5 * det.spectrum_values(r1) - 0.7 * det.spectrum_values(r2), atol=1e-10)
    spec = det.spectrum(r1)
    reg = SpectralRegion(2.4, 2.8)
    assert peak_height(det.spectrum(2 * r1), reg) == pytest.approx(2 * peak_height(spec, reg), rel=1e-14)
    assert region_power(spec.scaled(3.0), reg) == pytest.approx(9 * region_power(spec, reg))
    assert region_power(spec.scaled(0.0), reg) == 0.0


def test_citrate_power_is_in_ab_region(citrate):
    # |S|^2 keeps dispersive 1/df^2 tails, so the contrast grows as 1/lb
    rho = operator_from_expression(2, "I1x + I2x")
    ab, far = SpectralRegion(2.4, 2.8), SpectralRegion(3.6, 3.8)
    ratios = {}
    for lb in (0.2, 0.4):
        spec = simulate_spectrum(citrate, rho, Acquisition(16384, None, lb, 2))
        ratios[lb] = region_power(spec, ab) / region_power(spec, far)
    assert ratios[0.2] > 1e4
    assert ratios[0.2] / ratios[0.4] == pytest.approx(2.0, rel=0.05)


@pytest.mark.parametrize("name, spin", [("cystathionine", 3), ("glutamine", 5), ("glutamate", 5)])
def test_weak_coupling_placement(all_systems, name, spin):
    s = all_systems[name]
    n = s.n_spins
    acq = Acquisition(16384, 1 / 2000, 1.0, 2)
    spec = simulate_spectrum(s, operator_from_expression(n, " + ".join(f"I{i}x" for i in range(1, n + 1))), acq)
    shift = s.shifts_ppm[spin - 1]
    ppm, val = local_extrema(spec, SpectralRegion(shift - 0.08, shift + 0.08))
    lines = ppm[val > 0.2 * val.max()]
    assert 0.5 * (lines.min() + lines.max()) == pytest.approx(shift, abs=0.005)


def test_citrate_ab_quartet(citrate):
    # analytic AB: C = sqrt(dv^2 + J^2)/2, lines at +-(C + |J|/2), +-(C - |J|/2)
    dv, j = 65.0, 17.23
    c = np.hypot(dv, j) / 2
    outer, inner = c + j / 2, c - j / 2
    assert outer == pytest.approx(42.2, abs=0.05) and inner == pytest.approx(25.0, abs=0.05)
    acq = Acquisition(16384, 1 / 5000, 2.0, 4)
    spec = simulate_spectrum(citrate, operator_from_expression(2, "I1x + I2x"), acq)
    center = citrate.carrier_ppm
    ppm, val = local_extrema(spec, SpectralRegion(center - 0.15, center + 0.15))
    big = val > 0.1 * val.max()
    hz = (ppm[big] - center) * citrate.spectrometer_mhz
    np.testing.assert_allclose(hz, [-outer, -inner, inner, outer], atol=0.3)
    h = val[big]
    ratio = 0.5 * (h[1] + h[2]) / (0.5 * (h[0] + h[3]))
    assert ratio == pytest.approx((1 + j / (2 * c)) / (1 - j / (2 * c)), rel=0.03)


def test_signature_of_triple_product(glutamine):
    spec = simulate_spectrum(glutamine, operator_from_expression(5, "-4*I1z.I2z.I5x"))
    reg = SpectralRegion(3.6, 3.9)
    assert sign_pattern(spec, reg) == "-+-"
    ppm, val = local_extrema(spec, reg)
    assert ppm[np.argmax(val)] == pytest.approx(3.76, abs=0.01)
    assert sign_pattern(spec.scaled(-1.0), reg) == "+-+"


def test_resolved_extrema_ordering(glutamine):
    spec = simulate_spectrum(glutamine, operator_from_expression(5, "I5x"))
    ext = resolved_extrema(spec, SpectralRegion(3.6, 3.9))
    assert np.all(np.diff(np.abs(ext)) <= 0)
    assert ext[0] > 0


def test_detect_phase_rotates_spectrum(citrate, rng):
    rho = random_hermitian(rng, 4)
    a = Detector(citrate).spectrum_values(rho)
    b = Detector(citrate, detect_phase=0.7).spectrum_values(rho)
    np.testing.assert_allclose(b, a * np.exp(0.7j), atol=1e-10)


def test_csv_round_trip(tmp_path, citrate):
    spec = simulate_spectrum(citrate, operator_from_expression(2, "I1x"), Acquisition(256, None, 1.0, 1))
    write_spectrum_csv(spec, tmp_path / "s.csv")
    lines = (tmp_path / "s.csv").read_text().splitlines()
    assert lines[0] == "freq_hz,ppm,real,imag"
    back = read_spectrum_csv(tmp_path / "s.csv", citrate.spectrometer_mhz, citrate.carrier_ppm)
    np.testing.assert_allclose(back.intensities, spec.intensities, rtol=1e-12)
    assert np.all(np.diff(back.ppm) > 0)
    fid = acquire_fid(citrate, operator_from_expression(2, "I1x"), n_points=64)
    write_fid_csv(fid, tmp_path / "f.csv")
    assert (tmp_path / "f.csv").read_text().splitlines()[0] == "t_s,real,imag"


@settings(max_examples=30, deadline=None)
@given(st.floats(-400.0, 400.0), st.floats(0.5, 5.0))
def test_single_line_position_property(offset_hz, lb):
    sys = one_spin(shift=offset_hz / 100.0, carrier=0.0, mhz=100.0)
    acq = Acquisition(2048, 1 / 1000, lb, 4)
    spec = simulate_spectrum(sys, single_spin_operator(1, 1, "x"), acq)
    k = np.argmax(spec.real)
    assert abs(spec.freq_hz[k] - offset_hz) <= 1000 / (2048 * 4)
