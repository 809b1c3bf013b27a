"""
Interpretation helpers: product-operator decomposition, enhancement factors
and the ideal PRESS reference.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np

from .detect import Acquisition, Detector, SpectralRegion, Spectrum, peak_height
from .prop import Delay, HardPulse, PulseProgram, run_program
from .spinsys import Label, SpinSystem, basis_labels, equilibrium_state, format_expression, format_label

_ONE_SPIN = np.array([
    np.eye(2),
    [[0, 0.5], [0.5, 0]],
    [[0, -0.5j], [0.5j, 0]],
    [[0.5, 0], [0, -0.5]],
], dtype=complex)


@dataclass
class StateDecomposition:
    """Coefficients on the normalized product-operator basis (``2**(q-1) prod I``),
    largest magnitude first."""

    terms: list[tuple[Label, complex]]
    residual_norm: float
    identity: complex
    n_spins: int

    def expression(self, digits: int = 4) -> str:
        """Terms rendered in the operator-expression grammar (raw products)."""
        raw = ((c.real * 2 ** (len(lab) - 1), lab) for lab, c in self.terms)
        return format_expression(((c, lab) for c, lab in raw if float(f"{c:.{digits}g}") != 0), digits)

    def coefficient(self, label: Label) -> complex:
        for lab, c in self.terms:
            if lab == tuple(sorted(label)):
                return c
        return 0.0

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["label", "coefficient", "expression_coefficient", "imag"])
            for lab, c in self.terms:
                w.writerow([format_label(lab), f"{c.real:.12g}",
                            f"{c.real * 2 ** (len(lab) - 1):.12g}", f"{c.imag:.3g}"])


def pauli_coefficients(rho: np.ndarray) -> np.ndarray:
    """``Tr(P rho)`` for every raw product ``P = I_{a1} x ... x I_{an}`` with
    ``a`` in (E, x, y, z); shape ``(4,)*n``."""
    d = rho.shape[0]
    n = int(round(np.log2(d)))
    if rho.shape != (d, d) or 2**n != d:
        raise ValueError("density matrix dimension is not a power of two")
    t = np.asarray(rho, dtype=complex).reshape([2] * (2 * n))
    for j in range(n):
        k = n - 1 - j  # 0-based spin being contracted
        r_ax = j + k
        c_ax = j + (n - j) + k
        # Tr(p rho) over this spin: sum_{r,c} p[c, r] rho[r, c]
        t = np.tensordot(_ONE_SPIN, t, axes=([2, 1], [r_ax, c_ax]))
    return t


def decompose(rho: np.ndarray, top_k: int | None = None) -> StateDecomposition:
    """Expand a density matrix on the product-operator basis.

    ``c_s = Tr(B_s rho) / Tr(B_s B_s)``; the identity component is reported
    separately. With ``top_k`` only the largest terms are kept and
    ``residual_norm`` is the Frobenius norm of what was dropped.
    """
    d = rho.shape[0]
    n = int(round(np.log2(d))) if d > 0 else 0
    if rho.ndim != 2 or rho.shape[1] != d or 2**n != d:
        raise ValueError("density matrix dimension is not a power of two")
    if top_k is not None and top_k < 1:
        raise ValueError("top must be >= 1")
    raw = pauli_coefficients(rho).ravel()
    labels = basis_labels(n)
    q = np.array([len(lab) for lab in labels])
    # Tr(B_s rho) = 2**(q-1) Tr(P rho); Tr(B_s^2) = 2**(n-2)
    coef = raw * 2.0 ** (q - 1) / 2.0 ** (n - 2)
    identity = raw[0] / 2.0**n
    order = np.argsort(-np.abs(coef[1:]), kind="stable") + 1
    keep = order if top_k is None else order[:top_k]
    dropped = order[len(keep):]
    # basis is orthogonal with |B_s|_F^2 = 2**(n-2)
    resid = float(np.sqrt(np.sum(np.abs(coef[dropped]) ** 2) * 2.0 ** (n - 2)))
    terms = [(labels[i], complex(coef[i])) for i in keep]
    return StateDecomposition(terms, resid, complex(identity), n)


def reconstruct(dec: StateDecomposition) -> np.ndarray:
    from .spinsys import product_operator

    d = 2**dec.n_spins
    out = dec.identity * np.eye(d, dtype=complex)
    for lab, c in dec.terms:
        out = out + c * product_operator(dec.n_spins, lab)
    return out


def enhancement_factor(candidate: Spectrum, baseline: Spectrum, region: SpectralRegion) -> float:
    """Ratio of real-part peak heights inside ``region``."""
    if candidate.intensities.shape != baseline.intensities.shape or not np.allclose(
            candidate.freq_hz, baseline.freq_hz):
        raise ValueError("spectra do not share a frequency axis")
    base = peak_height(baseline, region)
    ref = np.max(np.abs(baseline.real)) if baseline.real.size else 0.0
    if ref == 0 or abs(base) < 1e-9 * ref:
        raise ValueError("baseline peak height is zero; enhancement undefined")
    return peak_height(candidate, region) / base


# A 90 degree x pulse leaves -sum(I_y); this receiver phase displays it as
# positive absorption, as an operator would phase a reference scan.
REFERENCE_PHASE = -np.pi / 2


def excitation_program() -> PulseProgram:
    return PulseProgram((HardPulse(np.pi / 2, 0.0),))


def press_program(te_s: float) -> PulseProgram:
    """Ideal symmetric PRESS: 90x - t1 - 180y - 2 t1 - 180y - t1, t1 = TE/4."""
    if not te_s > 0:
        raise ValueError("echo time must be positive")
    tau = te_s / 4.0
    return PulseProgram((HardPulse(np.pi / 2, 0.0), Delay(tau), HardPulse(np.pi, np.pi / 2),
                         Delay(2 * tau), HardPulse(np.pi, np.pi / 2), Delay(tau)))


def press_baseline(sys: SpinSystem, te_s: float, acq: Acquisition = Acquisition(),
                   detect_phase: float = REFERENCE_PHASE) -> Spectrum:
    rho = run_program(sys, press_program(te_s), equilibrium_state(sys.n_spins))
    return Detector(sys, acq, detect_phase).spectrum(rho)


def excitation_spectrum(sys: SpinSystem, acq: Acquisition = Acquisition(),
                        detect_phase: float = REFERENCE_PHASE) -> Spectrum:
    """Plain 90-degree excitation from equilibrium, phased to absorption."""
    rho = run_program(sys, excitation_program(), equilibrium_state(sys.n_spins))
    return Detector(sys, acq, detect_phase).spectrum(rho)


def singlet_ratio(spec: Spectrum, region: SpectralRegion) -> float:
    """Tallest over second-tallest resolved extremum of the real part in ``region``."""
    from .detect import resolved_extrema

    ext = np.abs(resolved_extrema(spec, region))
    if ext.size == 0:
        return 0.0
    if ext.size == 1:
        return np.inf
    return float(ext[0] / ext[1])
