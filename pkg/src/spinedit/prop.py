"""
Unitary propagation of density matrices through pulse programs.

A program is an ordered tuple of :class:`PulseSegment` (piecewise-constant
shaped RF, possibly trainable), :class:`HardPulse` (instantaneous ideal
rotation) and :class:`Delay` (free precession under H0). Propagators are
built from the Hermitian eigendecomposition of the segment Hamiltonian so the
same factorization can be reused by the gradient code.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Sequence, Union

import numpy as np
import yaml

from .spinsys import SpinSystem, free_hamiltonian, total_spin_operator, TWO_PI

DEFAULT_AMP_MAX = 5000.0
HERMITIAN_TOL = 1e-9


@dataclass(frozen=True)
class PulseSegment:
    u_x: float
    u_y: float
    duration: float
    trainable: bool = True

    def __post_init__(self):
        if not self.duration > 0:
            raise ValueError("segment duration must be positive")
        if not (np.isfinite(self.u_x) and np.isfinite(self.u_y)):
            raise ValueError("segment amplitudes must be finite")


@dataclass(frozen=True)
class HardPulse:
    angle: float
    phase: float = 0.0


@dataclass(frozen=True)
class Delay:
    duration: float

    def __post_init__(self):
        if self.duration < 0:
            raise ValueError("delay duration must be non-negative")


Element = Union[PulseSegment, HardPulse, Delay]


@dataclass(frozen=True)
class PulseProgram:
    elements: tuple[Element, ...]
    amp_max: float = DEFAULT_AMP_MAX

    def __post_init__(self):
        elements = tuple(self.elements)
        if not elements:
            raise ValueError("a pulse program needs at least one element")
        for el in elements:
            if not isinstance(el, (PulseSegment, HardPulse, Delay)):
                raise TypeError(f"unsupported program element {el!r}")
            if isinstance(el, PulseSegment) and np.hypot(el.u_x, el.u_y) > self.amp_max * (1 + 1e-12):
                raise ValueError(
                    f"segment amplitude {np.hypot(el.u_x, el.u_y):.1f} Hz exceeds amp_max {self.amp_max} Hz")
        object.__setattr__(self, "elements", elements)

    @classmethod
    def shaped(cls, n_segments: int = 500, duration: float = 10e-3,
               amp_max: float = DEFAULT_AMP_MAX) -> "PulseProgram":
        """Zero-amplitude trainable pulse of equal-length segments."""
        dt = duration / n_segments
        return cls(tuple(PulseSegment(0.0, 0.0, dt) for _ in range(n_segments)), amp_max)

    @property
    def total_duration(self) -> float:
        return sum(getattr(el, "duration", 0.0) for el in self.elements)

    @property
    def trainable_indices(self) -> list[int]:
        return [k for k, el in enumerate(self.elements)
                if isinstance(el, PulseSegment) and el.trainable]

    def controls(self) -> np.ndarray:
        """Trainable controls as an ``(m, 2)`` array of (u_x, u_y) in Hz."""
        idx = self.trainable_indices
        return np.array([[self.elements[k].u_x, self.elements[k].u_y] for k in idx],
                        dtype=float).reshape(len(idx), 2)

    def with_controls(self, controls: np.ndarray) -> "PulseProgram":
        controls = np.asarray(controls, dtype=float)
        idx = self.trainable_indices
        if controls.shape != (len(idx), 2):
            raise ValueError(f"expected controls of shape ({len(idx)}, 2), got {controls.shape}")
        els = list(self.elements)
        for row, k in zip(controls, idx):
            els[k] = replace(els[k], u_x=float(row[0]), u_y=float(row[1]))
        return PulseProgram(tuple(els), self.amp_max)


# ---------------------------------------------------------------------------
# propagators


def check_hermitian(h: np.ndarray, what: str = "Hamiltonian") -> None:
    scale = max(1.0, float(np.max(np.abs(h))))
    if np.max(np.abs(h - h.conj().T)) > HERMITIAN_TOL * scale:
        raise np.linalg.LinAlgError(f"{what} is not Hermitian")


def eig_propagator(h: np.ndarray, t: float):
    """``exp(-i h t)`` through ``h = V diag(w) V^H``; returns ``(U, w, V)``."""
    check_hermitian(h)
    w, v = np.linalg.eigh(h)
    u = (v * np.exp(-1j * w * t)) @ v.conj().T
    return u, w, v


def segment_hamiltonian(h0: np.ndarray, seg: PulseSegment, b1_scale: float = 1.0) -> np.ndarray:
    n = int(np.log2(h0.shape[0]))
    return h0 + TWO_PI * b1_scale * (seg.u_x * total_spin_operator(n, "x")
                                     + seg.u_y * total_spin_operator(n, "y"))


def segment_propagator(h0: np.ndarray, seg: PulseSegment, b1_scale: float = 1.0) -> np.ndarray:
    return eig_propagator(segment_hamiltonian(h0, seg, b1_scale), seg.duration)[0]


def delay_propagator(h0: np.ndarray, duration: float) -> np.ndarray:
    if duration < 0:
        raise ValueError("delay duration must be non-negative")
    if duration == 0:
        return np.eye(h0.shape[0], dtype=complex)
    return eig_propagator(h0, duration)[0]


def rotation(n: int, angle: float, phase: float) -> np.ndarray:
    """``exp(-i angle (cos(phase) F_x + sin(phase) F_y))``."""
    gen = np.cos(phase) * total_spin_operator(n, "x") + np.sin(phase) * total_spin_operator(n, "y")
    return eig_propagator(gen, angle)[0]


def hard_pulse(rho: np.ndarray, angle: float, phase: float, n: int) -> np.ndarray:
    r = rotation(n, angle, phase)
    return r @ rho @ r.conj().T


def element_propagator(h0: np.ndarray, el: Element, b1_scale: float = 1.0) -> np.ndarray:
    if isinstance(el, PulseSegment):
        return segment_propagator(h0, el, b1_scale if el.trainable else 1.0)
    if isinstance(el, Delay):
        return delay_propagator(h0, el.duration)
    n = int(np.log2(h0.shape[0]))
    # hard pulses are ideal: flip angle is not scaled by B1
    return rotation(n, el.angle, el.phase)


def run_program(sys: SpinSystem, prog: PulseProgram, rho0: np.ndarray,
                keep_trajectory: bool = False, b1_scale: float = 1.0):
    """Propagate ``rho0`` through every element of ``prog``.

    ``b1_scale`` multiplies the amplitude of trainable shaped segments.

    Returns the final state, or ``(final, trajectory)`` where ``trajectory[k]``
    is the state after element k.
    """
    rho = np.asarray(rho0, dtype=complex)
    if rho.shape != (sys.dim, sys.dim):
        raise ValueError(f"state shape {rho.shape} does not match a {sys.n_spins}-spin system")
    h0 = free_hamiltonian(sys)
    traj = []
    for el in prog.elements:
        u = element_propagator(h0, el, b1_scale)
        rho = u @ rho @ u.conj().T
        if keep_trajectory:
            traj.append(rho)
    return (rho, traj) if keep_trajectory else rho


# ---------------------------------------------------------------------------
# file formats


def program_to_mapping(prog: PulseProgram) -> dict:
    els = []
    for el in prog.elements:
        if isinstance(el, PulseSegment):
            els.append({"type": "shaped", "u_x_hz": el.u_x, "u_y_hz": el.u_y,
                        "duration_s": el.duration, "trainable": el.trainable})
        elif isinstance(el, HardPulse):
            els.append({"type": "hard", "angle_rad": el.angle, "phase_rad": el.phase})
        else:
            els.append({"type": "delay", "duration_s": el.duration})
    return {"amp_max_hz": prog.amp_max, "elements": els}


def program_from_mapping(doc) -> PulseProgram:
    if isinstance(doc, list):
        doc = {"elements": doc}
    if not isinstance(doc, dict) or "elements" not in doc:
        raise ValueError("elements: missing pulse program element list")
    els: list[Element] = []
    for k, e in enumerate(doc["elements"]):
        kind = e.get("type")
        try:
            if kind == "shaped":
                els.append(PulseSegment(float(e["u_x_hz"]), float(e["u_y_hz"]),
                                        float(e["duration_s"]), bool(e.get("trainable", True))))
            elif kind == "hard":
                els.append(HardPulse(float(e["angle_rad"]), float(e.get("phase_rad", 0.0))))
            elif kind == "delay":
                els.append(Delay(float(e["duration_s"])))
            else:
                raise ValueError(f"elements[{k}].type: unknown element type {kind!r}")
        except KeyError as exc:
            raise ValueError(f"elements[{k}]: missing key {exc.args[0]}") from None
    return PulseProgram(tuple(els), float(doc.get("amp_max_hz", DEFAULT_AMP_MAX)))


def save_program(prog: PulseProgram, path) -> None:
    Path(path).write_text(yaml.safe_dump(program_to_mapping(prog), sort_keys=False))


def load_program(path) -> PulseProgram:
    return program_from_mapping(yaml.safe_load(Path(path).read_text()))


def shape_table(prog: PulseProgram) -> np.ndarray:
    """Rows of (duration_us, amplitude_hz, phase_deg) for the shaped segments."""
    rows = [(el.duration * 1e6, float(np.hypot(el.u_x, el.u_y)),
             float(np.degrees(np.arctan2(el.u_y, el.u_x)) % 360.0))
            for el in prog.elements if isinstance(el, PulseSegment)]
    return np.array(rows).reshape(-1, 3)


def write_shape_table(prog: PulseProgram, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["duration_us", "amplitude_hz", "phase_deg"])
        for row in shape_table(prog):
            w.writerow([f"{row[0]:.6f}", f"{row[1]:.9g}", f"{row[2]:.6f}"])


def random_program(rng: np.random.Generator, n_segments: int, duration: float,
                   scale: float = 500.0, amp_max: float = DEFAULT_AMP_MAX,
                   extras: Sequence[Element] = ()) -> PulseProgram:
    """Random shaped program (used by invariant checks and the gradient gate)."""
    u = rng.uniform(-scale, scale, size=(n_segments, 2))
    dt = duration / n_segments
    els = [PulseSegment(float(a), float(b), dt) for a, b in u]
    for el in extras:
        els.insert(int(rng.integers(0, len(els) + 1)), el)
    return PulseProgram(tuple(els), amp_max)
