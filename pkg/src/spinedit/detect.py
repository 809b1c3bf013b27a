"""
FID synthesis, apodization and spectra.

Conventions
-----------
The FID is ``s_k = Tr(F_- rho(k dt)) / 2**(n-2) * exp(-pi lb k dt)`` with the
first point halved. The ``2**(n-2)`` normalization makes a unit ``I_ix``
coefficient produce unit signal for every spin count. With ``H0 = +2 pi Omega
I_z`` this FID rotates as ``exp(-2 pi i Omega t)``; the spectrum uses the
positive-exponent kernel so a spin at +Omega Hz shows an absorptive peak at
``freq_hz = +Omega``, i.e. at its own chemical shift on the ppm axis.

Free evolution during acquisition is evaluated in the eigenbasis of H0
(``U(k dt) = V exp(-i w k dt) V^H``), restricted to the transitions the
detection operator connects.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from typing import Optional

import numpy as np

from .spinsys import SpinSystem, free_hamiltonian, total_spin_operator

_TRANSITION_TOL = 1e-13


@dataclass(frozen=True)
class Acquisition:
    """Acquisition settings; ``None`` fields resolve against the spin system.

    Defaults: 4096 points, spectral width 10 ppm, lb 1 Hz at >= 300 MHz and
    4 Hz below, zero-fill factor 2.
    """

    n_points: int = 4096
    dwell: Optional[float] = None
    lb_hz: Optional[float] = None
    zerofill: int = 2

    def resolve(self, sys: SpinSystem) -> "Acquisition":
        dwell = self.dwell if self.dwell is not None else 1.0 / (10.0 * sys.spectrometer_mhz)
        lb = self.lb_hz if self.lb_hz is not None else default_lb(sys)
        return Acquisition(self.n_points, dwell, lb, self.zerofill)


def default_lb(sys: SpinSystem) -> float:
    return 1.0 if sys.spectrometer_mhz >= 300.0 else 4.0


@dataclass(frozen=True)
class Fid:
    samples: np.ndarray
    dwell: float
    spectrometer_mhz: float
    carrier_ppm: float

    @property
    def n_points(self) -> int:
        return len(self.samples)

    @property
    def t(self) -> np.ndarray:
        return np.arange(self.n_points) * self.dwell


@dataclass(frozen=True)
class Spectrum:
    intensities: np.ndarray
    freq_hz: np.ndarray
    spectrometer_mhz: float
    carrier_ppm: float

    @property
    def ppm(self) -> np.ndarray:
        return self.carrier_ppm + self.freq_hz / self.spectrometer_mhz

    @property
    def real(self) -> np.ndarray:
        return self.intensities.real

    def scaled(self, c: float) -> "Spectrum":
        return Spectrum(self.intensities * c, self.freq_hz, self.spectrometer_mhz, self.carrier_ppm)


@dataclass(frozen=True)
class SpectralRegion:
    lo_ppm: float
    hi_ppm: float

    def __post_init__(self):
        if not self.lo_ppm < self.hi_ppm:
            raise ValueError(f"region needs lo_ppm < hi_ppm, got [{self.lo_ppm}, {self.hi_ppm}]")

    def mask(self, ppm: np.ndarray) -> np.ndarray:
        m = (ppm >= self.lo_ppm) & (ppm <= self.hi_ppm)
        if not m.any():
            raise ValueError(f"region [{self.lo_ppm}, {self.hi_ppm}] ppm contains no spectral bins")
        return m


# ---------------------------------------------------------------------------


class Detector:
    """Linear map from a density matrix to its spectrum, with its exact adjoint.

    Precomputes the H0 eigenbasis, the connected transitions and the
    evolution table once per (system, acquisition).
    """

    def __init__(self, sys: SpinSystem, acq: Acquisition = Acquisition(),
                 detect_phase: float = 0.0):
        acq = acq.resolve(sys)
        if not acq.dwell > 0:
            raise ValueError("dwell must be positive")
        if acq.n_points < 64 or acq.n_points & (acq.n_points - 1):
            raise ValueError("n_points must be a power of two >= 64")
        if acq.lb_hz < 0:
            raise ValueError("lb_hz must be non-negative")
        if acq.zerofill not in (1, 2, 4):
            raise ValueError("zerofill must be 1, 2 or 4")
        self.sys = sys
        self.acq = acq
        n = sys.n_spins
        w, v = np.linalg.eigh(free_hamiltonian(sys))
        self.w, self.v = w, v
        f_minus = (total_spin_operator(n, "x") - 1j * total_spin_operator(n, "y")) * np.exp(1j * detect_phase)
        fp = v.conj().T @ f_minus @ v
        mask = np.abs(fp) > _TRANSITION_TOL * max(1.0, np.abs(fp).max())
        self.rows, self.cols = np.nonzero(mask)
        self.fp = fp[self.rows, self.cols]
        k = np.arange(acq.n_points)
        t = k * acq.dwell
        weights = np.exp(-np.pi * acq.lb_hz * t) / 2.0 ** (n - 2)
        weights[0] *= 0.5
        self.weights = weights
        omega = w[self.rows] - w[self.cols]
        # E[(a,b), k] = exp(i (w_a - w_b) k dt)
        self.table = np.exp(1j * np.outer(omega, t))
        self.n_fft = acq.n_points * acq.zerofill
        self.freq_hz = np.fft.fftshift(np.fft.fftfreq(self.n_fft, acq.dwell))

    def fid_samples(self, rho: np.ndarray) -> np.ndarray:
        rp = self.v.conj().T @ rho @ self.v
        amp = self.fp * rp[self.cols, self.rows]
        return (amp @ self.table) * self.weights

    def fid(self, rho: np.ndarray) -> Fid:
        return Fid(self.fid_samples(rho), self.acq.dwell, self.sys.spectrometer_mhz, self.sys.carrier_ppm)

    def spectrum_values(self, rho: np.ndarray) -> np.ndarray:
        return _transform(self.fid_samples(rho), self.n_fft)

    def spectrum(self, rho: np.ndarray) -> Spectrum:
        return Spectrum(self.spectrum_values(rho), self.freq_hz, self.sys.spectrometer_mhz,
                        self.sys.carrier_ppm)

    @property
    def ppm(self) -> np.ndarray:
        return self.sys.carrier_ppm + self.freq_hz / self.sys.spectrometer_mhz

    def adjoint(self, g_spec: np.ndarray) -> np.ndarray:
        """Operator ``M`` with ``Re sum conj(g) dS = Re Tr(M drho)``.

        ``g_spec`` is ``dL/dRe(S) + i dL/dIm(S)`` for a real loss L.
        The returned M is Hermitian-projected, which is exact for Hermitian drho.
        """
        g_fid = _transform_adjoint(np.asarray(g_spec, dtype=complex), self.acq.n_points)
        phi = self.table @ (np.conj(g_fid) * self.weights)
        d = self.w.size
        mp = np.zeros((d, d), dtype=complex)
        mp[self.rows, self.cols] = self.fp * phi
        m = self.v @ mp @ self.v.conj().T
        return 0.5 * (m + m.conj().T)


def _transform(samples: np.ndarray, n_fft: int) -> np.ndarray:
    # positive-exponent DFT: sum_k s_k exp(+2 pi i j k / N)
    return np.fft.fftshift(np.fft.ifft(samples, n_fft)) * n_fft


def _transform_adjoint(g: np.ndarray, n_points: int) -> np.ndarray:
    return np.fft.fft(np.fft.ifftshift(g))[:n_points]


# ---------------------------------------------------------------------------
# functional API


def acquire_fid(sys: SpinSystem, rho: np.ndarray, n_points: int = 4096,
                dwell: Optional[float] = None, lb_hz: Optional[float] = None) -> Fid:
    if n_points < 1 or (dwell is not None and not dwell > 0):
        raise ValueError("n_points and dwell must be positive")
    return Detector(sys, Acquisition(n_points, dwell, lb_hz, 1)).fid(rho)


def spectrum_from_fid(fid: Fid, zerofill_factor: int = 2) -> Spectrum:
    if zerofill_factor not in (1, 2, 4):
        raise ValueError("zerofill_factor must be 1, 2 or 4")
    n_fft = fid.n_points * zerofill_factor
    freq = np.fft.fftshift(np.fft.fftfreq(n_fft, fid.dwell))
    return Spectrum(_transform(fid.samples, n_fft), freq, fid.spectrometer_mhz, fid.carrier_ppm)


def simulate_spectrum(sys: SpinSystem, rho: np.ndarray, acq: Acquisition = Acquisition()) -> Spectrum:
    return Detector(sys, acq).spectrum(rho)


def peak_height(spec: Spectrum, region: SpectralRegion) -> float:
    """Maximum of the real part over the bins inside ``region``."""
    return float(spec.real[region.mask(spec.ppm)].max())


def region_power(spec: Spectrum, region: SpectralRegion) -> float:
    """Mean squared magnitude over the bins inside ``region``."""
    vals = spec.intensities[region.mask(spec.ppm)]
    return float(np.mean(np.abs(vals) ** 2))


def local_extrema(spec: Spectrum, region: SpectralRegion) -> tuple[np.ndarray, np.ndarray]:
    """``(ppm, value)`` of the positive maxima and negative minima of the real
    part inside ``region``, in ascending ppm."""
    m = region.mask(spec.ppm)
    ppm = spec.ppm[m]
    y = spec.real[m]
    order = np.argsort(ppm)
    ppm, y = ppm[order], y[order]
    if y.size < 3:
        return ppm, y
    inner = y[1:-1]
    is_max = (inner > y[:-2]) & (inner >= y[2:]) & (inner > 0)
    is_min = (inner < y[:-2]) & (inner <= y[2:]) & (inner < 0)
    keep = np.flatnonzero(is_max | is_min) + 1
    return ppm[keep], y[keep]


def resolved_extrema(spec: Spectrum, region: SpectralRegion) -> np.ndarray:
    """Signed values of the local extrema of the real part inside ``region``,
    sorted by magnitude (largest first)."""
    _, ext = local_extrema(spec, region)
    return ext[np.argsort(-np.abs(ext), kind="stable")]


def sign_pattern(spec: Spectrum, region: SpectralRegion, min_rel: float = 0.1) -> str:
    """Signs of the extrema larger than ``min_rel`` of the biggest one, in
    ascending ppm, e.g. ``"-+-"``."""
    _, ext = local_extrema(spec, region)
    if ext.size == 0:
        return ""
    big = np.abs(ext) >= min_rel * np.abs(ext).max()
    return "".join("+" if v > 0 else "-" for v in ext[big])


def write_spectrum_csv(spec: Spectrum, path) -> None:
    order = np.argsort(spec.ppm)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["freq_hz", "ppm", "real", "imag"])
        for k in order:
            w.writerow([f"{spec.freq_hz[k]:.6f}", f"{spec.ppm[k]:.8f}",
                        repr(float(spec.intensities[k].real)), repr(float(spec.intensities[k].imag))])


def read_spectrum_csv(path, spectrometer_mhz: float, carrier_ppm: float) -> Spectrum:
    data = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)
    return Spectrum(data[:, 2] + 1j * data[:, 3], data[:, 0], spectrometer_mhz, carrier_ppm)


def write_fid_csv(fid: Fid, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["t_s", "real", "imag"])
        for t, s in zip(fid.t, fid.samples):
            w.writerow([f"{t:.9e}", repr(float(s.real)), repr(float(s.imag))])
