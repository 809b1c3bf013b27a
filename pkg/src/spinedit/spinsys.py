"""
Spin-system model, product-operator algebra and Hamiltonians.

All operators are dense complex ``(2**n, 2**n)`` arrays in the Zeeman basis,
spin 1 being the most significant tensor factor. Spin indices are 1-based
everywhere in the public API (matching the way couplings are written,
``J12``, ``I1x``); internally they are converted once.

Units
-----
- User-facing: ppm, Hz, MHz.
- Hamiltonians: rad/s. Conversion happens only in :func:`free_hamiltonian`
  and :func:`rf_hamiltonian`.
"""

from __future__ import annotations

import itertools
import re
from dataclasses import dataclass, field, replace
from functools import lru_cache
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np
import yaml

MAX_SPINS = 8
MHZ_PER_TESLA = 42.577
TWO_PI = 2.0 * np.pi

_PAULI_HALF = {
    "x": np.array([[0, 0.5], [0.5, 0]], dtype=complex),
    "y": np.array([[0, -0.5j], [0.5j, 0]], dtype=complex),
    "z": np.array([[0.5, 0], [0, -0.5]], dtype=complex),
    "+": np.array([[0, 1], [0, 0]], dtype=complex),
    "-": np.array([[0, 0], [1, 0]], dtype=complex),
}
_PAULI_HALF["−"] = _PAULI_HALF["-"]

# (spin_index, axis) pairs, spin indices strictly increasing, 1-based.
Label = tuple[tuple[int, str], ...]


class SpinSystemError(ValueError):
    """Raised for malformed spin-system documents or invalid parameters."""


@dataclass(frozen=True)
class SpinSystem:
    """Coupled spin-1/2 system in the rotating frame of a single proton channel.

    ``j_hz`` is stored as a read-only symmetric array with zero diagonal.
    """

    name: str
    shifts_ppm: tuple[float, ...]
    j_hz: np.ndarray
    spectrometer_mhz: float
    carrier_ppm: float
    _h0: np.ndarray | None = field(default=None, repr=False, compare=False)

    def __post_init__(self):
        shifts = tuple(float(s) for s in self.shifts_ppm)
        n = len(shifts)
        if n < 1:
            raise SpinSystemError("shifts_ppm: at least one spin is required")
        if n > MAX_SPINS:
            raise SpinSystemError(f"shifts_ppm: {n} spins exceeds the limit of {MAX_SPINS}")
        j = np.array(self.j_hz, dtype=float)
        if j.shape != (n, n):
            raise SpinSystemError(f"j_hz: expected shape ({n}, {n}), got {j.shape}")
        if not np.allclose(j, j.T, atol=0.0, rtol=0.0):
            raise SpinSystemError("j_hz: asymmetric coupling matrix")
        if np.any(np.diag(j) != 0.0):
            raise SpinSystemError("j_hz: diagonal entries must be zero")
        if not np.all(np.isfinite(j)):
            raise SpinSystemError("j_hz: non-finite coupling")
        if not (np.isfinite(self.spectrometer_mhz) and self.spectrometer_mhz > 0):
            raise SpinSystemError("spectrometer_mhz: must be positive")
        if not np.isfinite(self.carrier_ppm):
            raise SpinSystemError("carrier_ppm: must be finite")
        j.setflags(write=False)
        object.__setattr__(self, "shifts_ppm", shifts)
        object.__setattr__(self, "j_hz", j)
        object.__setattr__(self, "spectrometer_mhz", float(self.spectrometer_mhz))
        object.__setattr__(self, "carrier_ppm", float(self.carrier_ppm))

    @property
    def n_spins(self) -> int:
        return len(self.shifts_ppm)

    @property
    def dim(self) -> int:
        return 2**self.n_spins

    @property
    def offsets_hz(self) -> np.ndarray:
        """Rotating-frame offsets (shift - carrier) * spectrometer frequency, in Hz."""
        return (np.asarray(self.shifts_ppm) - self.carrier_ppm) * self.spectrometer_mhz

    def with_carrier(self, carrier_ppm: float) -> "SpinSystem":
        return replace(self, carrier_ppm=carrier_ppm, _h0=None)

    def with_field(self, spectrometer_mhz: float) -> "SpinSystem":
        return replace(self, spectrometer_mhz=spectrometer_mhz, _h0=None)

    def permuted(self, order: Sequence[int]) -> "SpinSystem":
        """Relabel spins; ``order[k]`` is the 1-based old index placed at new position k+1."""
        idx = [o - 1 for o in order]
        if sorted(idx) != list(range(self.n_spins)):
            raise SpinSystemError("order must be a permutation of 1..n")
        j = self.j_hz[np.ix_(idx, idx)]
        shifts = tuple(self.shifts_ppm[i] for i in idx)
        return SpinSystem(self.name, shifts, j, self.spectrometer_mhz, self.carrier_ppm)

    def __hash__(self):
        return hash((self.name, self.shifts_ppm, self.j_hz.tobytes(),
                     self.spectrometer_mhz, self.carrier_ppm))

    def __eq__(self, other):
        if not isinstance(other, SpinSystem):
            return NotImplemented
        return (self.name == other.name and self.shifts_ppm == other.shifts_ppm
                and np.array_equal(self.j_hz, other.j_hz)
                and self.spectrometer_mhz == other.spectrometer_mhz
                and self.carrier_ppm == other.carrier_ppm)


# ---------------------------------------------------------------------------
# ingestion

_ALLOWED_KEYS = {"name", "spectrometer_mhz", "field_tesla", "carrier_ppm", "shifts_ppm", "j_hz"}


def spin_system_from_mapping(doc: Mapping) -> SpinSystem:
    """Validate a parsed spin-system document and build a :class:`SpinSystem`."""
    if not isinstance(doc, Mapping):
        raise SpinSystemError("document: expected a key/value mapping")
    unknown = set(doc) - _ALLOWED_KEYS
    if unknown:
        raise SpinSystemError(f"{sorted(unknown)[0]}: unknown key")
    for key in ("name", "shifts_ppm"):
        if key not in doc:
            raise SpinSystemError(f"{key}: missing required key")
    name = doc["name"]
    if not isinstance(name, str) or not name:
        raise SpinSystemError("name: must be a non-empty string")

    if ("spectrometer_mhz" in doc) == ("field_tesla" in doc):
        raise SpinSystemError("spectrometer_mhz: give exactly one of spectrometer_mhz or field_tesla")
    if "spectrometer_mhz" in doc:
        mhz = _number(doc["spectrometer_mhz"], "spectrometer_mhz")
        if mhz <= 0:
            raise SpinSystemError("spectrometer_mhz: must be positive")
    else:
        tesla = _number(doc["field_tesla"], "field_tesla")
        if tesla <= 0:
            raise SpinSystemError("field_tesla: must be positive")
        mhz = tesla * MHZ_PER_TESLA

    shifts = doc["shifts_ppm"]
    if not isinstance(shifts, (list, tuple)) or not shifts:
        raise SpinSystemError("shifts_ppm: must be a non-empty array")
    shifts = [_number(s, "shifts_ppm") for s in shifts]
    n = len(shifts)
    if n > MAX_SPINS:
        raise SpinSystemError(f"shifts_ppm: {n} spins exceeds the limit of {MAX_SPINS}")

    j = np.zeros((n, n))
    seen: dict[tuple[int, int], float] = {}
    for entry in doc.get("j_hz", None) or []:
        if not isinstance(entry, (list, tuple)) or len(entry) != 3:
            raise SpinSystemError("j_hz: each entry must be [i, j, value]")
        i, k, val = entry
        if not (isinstance(i, int) and isinstance(k, int)):
            raise SpinSystemError("j_hz: spin indices must be integers")
        if not (1 <= i <= n and 1 <= k <= n) or i == k:
            raise SpinSystemError(f"j_hz: invalid spin pair ({i}, {k})")
        val = _number(val, "j_hz")
        if (i, k) in seen and seen[(i, k)] != val:
            raise SpinSystemError(f"j_hz: conflicting entries for J{i}{k}")
        if (k, i) in seen and seen[(k, i)] != val:
            raise SpinSystemError(f"j_hz: asymmetric coupling J{min(i, k)}{max(i, k)}")
        seen[(i, k)] = val
        j[i - 1, k - 1] = j[k - 1, i - 1] = val

    if "carrier_ppm" in doc and doc["carrier_ppm"] is not None:
        carrier = _number(doc["carrier_ppm"], "carrier_ppm")
    else:
        carrier = 0.5 * (min(shifts) + max(shifts))
    return SpinSystem(name, tuple(shifts), j, mhz, carrier)


def load_spin_system(source) -> SpinSystem:
    """Load a spin system from a path, YAML/JSON text, or an already-parsed mapping.

    A bare name such as ``"citrate"`` resolves to the bundled data file.
    """
    if isinstance(source, Mapping):
        return spin_system_from_mapping(source)
    if isinstance(source, Path) or (isinstance(source, str) and "\n" not in source
                                    and ":" not in source):
        path = Path(source)
        if not path.exists():
            bundled = _bundled_path(str(source))
            if bundled is None:
                raise SpinSystemError(f"source: no such file {source!s}")
            path = bundled
        text = path.read_text()
    else:
        text = source
    try:
        doc = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        raise SpinSystemError(f"document: not valid structured text ({exc})") from None
    return spin_system_from_mapping(doc)


def bundled_systems() -> list[str]:
    data = Path(__file__).parent / "data"
    return sorted(p.stem for p in data.glob("*.spin"))


def _bundled_path(name: str) -> Path | None:
    p = Path(__file__).parent / "data" / f"{Path(name).stem}.spin"
    return p if p.exists() else None


def _number(value, key: str) -> float:
    if isinstance(value, bool) or not isinstance(value, (int, float)):
        raise SpinSystemError(f"{key}: expected a number, got {value!r}")
    if not np.isfinite(value):
        raise SpinSystemError(f"{key}: must be finite")
    return float(value)


# ---------------------------------------------------------------------------
# operators


@lru_cache(maxsize=256)
def _single_spin_cached(n: int, i: int, axis: str) -> np.ndarray:
    m = np.ones((1, 1), dtype=complex)
    for k in range(1, n + 1):
        m = np.kron(m, _PAULI_HALF[axis] if k == i else np.eye(2))
    m.setflags(write=False)
    return m


def single_spin_operator(n: int, i: int, axis: str) -> np.ndarray:
    """Spin-1/2 operator ``I_{i,axis}`` embedded in an n-spin space.

    ``axis`` is one of ``x, y, z, +, -``.
    """
    if axis not in _PAULI_HALF:
        raise ValueError(f"unknown axis {axis!r}")
    if not 1 <= i <= n:
        raise IndexError(f"spin index {i} out of range 1..{n}")
    return _single_spin_cached(n, i, "-" if axis == "−" else axis).copy()


def total_spin_operator(n: int, axis: str) -> np.ndarray:
    """``F_axis = sum_i I_{i,axis}``."""
    return sum(_single_spin_cached(n, i, axis) for i in range(1, n + 1))


def _check_label(label: Label, n: int | None = None) -> Label:
    label = tuple((int(i), str(a)) for i, a in label)
    idx = [i for i, _ in label]
    if len(set(idx)) != len(idx):
        raise ValueError(f"duplicate spin index in label {format_label(label)}")
    for i, a in label:
        if a not in ("x", "y", "z"):
            raise ValueError(f"label axis must be x, y or z, got {a!r}")
        if i < 1 or (n is not None and i > n):
            raise IndexError(f"spin index {i} out of range")
    return tuple(sorted(label))


def product_operator(n: int, label: Label) -> np.ndarray:
    """Normalized product operator ``2**(q-1) * prod_k I_{i_k, a_k}`` for q factors.

    The empty label gives the identity.
    """
    label = _check_label(label, n)
    if not label:
        return np.eye(2**n, dtype=complex)
    axes = dict(label)
    m = np.ones((1, 1), dtype=complex)
    for k in range(1, n + 1):
        m = np.kron(m, _PAULI_HALF[axes[k]] if k in axes else np.eye(2))
    return m * 2.0 ** (len(label) - 1)


def basis_labels(n: int, include_identity: bool = True) -> list[Label]:
    """All 4**n product-operator labels (identity first when included)."""
    labels = []
    for choice in itertools.product((None, "x", "y", "z"), repeat=n):
        lab = tuple((i + 1, a) for i, a in enumerate(choice) if a is not None)
        if lab or include_identity:
            labels.append(lab)
    return labels


def format_label(label: Label, normalized: bool = False) -> str:
    """Render a label as ``I1x.I2z``; with ``normalized`` prefix the 2**(q-1) factor."""
    if not label:
        return "E"
    body = ".".join(f"I{i}{a}" for i, a in label)
    q = len(label)
    if normalized and q > 1:
        return f"{2 ** (q - 1)}*{body}"
    return body


_TERM_RE = re.compile(
    r"\s*([+-])?\s*(?:(\d+(?:\.\d*)?(?:[eE][+-]?\d+)?|\.\d+(?:[eE][+-]?\d+)?)\s*\*)?\s*"
    r"(I\d+[xyz](?:\s*\.\s*I\d+[xyz])*)\s*"
)
_FACTOR_RE = re.compile(r"I(\d+)([xyz])")


def parse_operator_terms(expr: str) -> list[tuple[float, Label]]:
    """Parse ``"0.38*I5x - 1.32*I1z.I2z.I5x"`` into (coefficient, label) pairs.

    Coefficients multiply the *raw* product of spin operators, so
    ``"-2*I1x.I2z"`` is the antiphase term -2 I1x I2z.
    """
    if not isinstance(expr, str) or not expr.strip():
        raise ValueError("empty operator expression")
    terms = []
    pos = 0
    while pos < len(expr):
        m = _TERM_RE.match(expr, pos)
        if not m or m.end() == pos:
            raise ValueError(f"cannot parse operator expression at {expr[pos:]!r}")
        sign, coef, body = m.groups()
        if terms and sign is None:
            raise ValueError(f"missing '+' or '-' before {body!r}")
        c = float(coef) if coef is not None else 1.0
        if sign == "-":
            c = -c
        label = tuple((int(i), a) for i, a in _FACTOR_RE.findall(body))
        terms.append((c, _check_label(label)))
        pos = m.end()
    return terms


def operator_from_expression(n: int, expr: str) -> np.ndarray:
    """Build the Hermitian operator described by an operator expression."""
    out = np.zeros((2**n, 2**n), dtype=complex)
    for c, label in parse_operator_terms(expr):
        _check_label(label, n)
        out += c * product_operator(n, label) / 2.0 ** (len(label) - 1)
    return out


def format_expression(terms: Iterable[tuple[float, Label]], digits: int = 4) -> str:
    """Inverse of :func:`parse_operator_terms` for real coefficients."""
    parts = []
    for c, label in terms:
        c = float(np.real(c))
        mag = f"{abs(c):.{digits}g}"
        body = format_label(label)
        s = body if mag == "1" else f"{mag}*{body}"
        parts.append(("- " if c < 0 else "+ ") + s)
    if not parts:
        return "0"
    text = " ".join(parts)
    return text[2:] if text.startswith("+ ") else "-" + text[2:]


# ---------------------------------------------------------------------------
# Hamiltonians and states


def free_hamiltonian(sys: SpinSystem) -> np.ndarray:
    """Rotating-frame Hamiltonian with chemical shifts and isotropic J couplings (rad/s)."""
    if sys._h0 is not None:
        return sys._h0.copy()
    n = sys.n_spins
    h = np.zeros((sys.dim, sys.dim), dtype=complex)
    for i, omega in enumerate(sys.offsets_hz, start=1):
        h += TWO_PI * omega * _single_spin_cached(n, i, "z")
    for i in range(1, n + 1):
        for k in range(i + 1, n + 1):
            jik = sys.j_hz[i - 1, k - 1]
            if jik == 0.0:
                continue
            for a in "xyz":
                h += TWO_PI * jik * (_single_spin_cached(n, i, a) @ _single_spin_cached(n, k, a))
    h = 0.5 * (h + h.conj().T)
    h.setflags(write=False)
    object.__setattr__(sys, "_h0", h)
    return h.copy()


def rf_hamiltonian(n: int, u_x: float, u_y: float) -> np.ndarray:
    """``2*pi*(u_x F_x + u_y F_y)`` for RF amplitudes in Hz."""
    if not (np.isfinite(u_x) and np.isfinite(u_y)):
        raise ValueError("RF amplitudes must be finite")
    return TWO_PI * (u_x * total_spin_operator(n, "x") + u_y * total_spin_operator(n, "y"))


def equilibrium_state(n: int) -> np.ndarray:
    """Traceless deviation density matrix ``sum_i I_iz``."""
    if n < 1:
        raise ValueError("n must be >= 1")
    return total_spin_operator(n, "z").astype(complex)
