"""
Exact gradients of objective values with respect to trainable RF controls.

For a segment with Hamiltonian ``H = V diag(w) V^H`` and duration t the
derivative of ``U = exp(-i H t)`` along a Hermitian direction D is

    dU = V (D~ * G) V^H,   D~ = V^H D V,
    G_ab = (exp(-i w_a t) - exp(-i w_b t)) / (w_a - w_b),   G_aa = -i t exp(-i w_a t)

evaluated here in the equivalent form ``-i t exp(-i (w_a+w_b) t/2) sinc((w_a-w_b) t/2)``,
which has no cancellation near degeneracy. Gradients are accumulated in reverse
over the element chain from the adjoint operator produced by the objective.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .objective import Objective, NumericalError
from .prop import PulseProgram, check_hermitian, element_propagator
from .spinsys import TWO_PI, total_spin_operator

DEGENERACY_TOL = 1e-9


def _gamma(w: np.ndarray, t: float) -> np.ndarray:
    dw = w[:, None] - w[None, :]
    mean = 0.5 * (w[:, None] + w[None, :])
    g = -1j * t * np.exp(-1j * mean * t) * np.sinc(dw * t / (2 * np.pi))
    scale = np.max(np.abs(w)) if w.size else 0.0
    deg = np.abs(dw) < DEGENERACY_TOL * scale
    if deg.any():
        diag = -1j * t * np.exp(-1j * w * t)
        g = np.where(deg, diag[:, None], g)
    return g


def propagator_directional_derivative(h: np.ndarray, t: float, d: np.ndarray) -> np.ndarray:
    """Exact derivative of ``exp(-i (h + eps d) t)`` with respect to eps at 0."""
    check_hermitian(h)
    check_hermitian(d, "direction")
    w, v = np.linalg.eigh(h)
    dt = v.conj().T @ d @ v
    return v @ (dt * _gamma(w, t)) @ v.conj().T


@dataclass
class Chain:
    """Forward record for one (system, ensemble member)."""

    propagators: list
    states_before: list
    eig_w: np.ndarray       # (m, d) eigenvalues of trainable segment Hamiltonians
    eig_v: np.ndarray       # (m, d, d) eigenvectors
    final: np.ndarray
    b1_scale: float
    n: int


def _gamma_batch(w: np.ndarray, t: np.ndarray) -> np.ndarray:
    dw = w[:, :, None] - w[:, None, :]
    mean = 0.5 * (w[:, :, None] + w[:, None, :])
    tt = t[:, None, None]
    g = -1j * tt * np.exp(-1j * mean * tt) * np.sinc(dw * tt / (2 * np.pi))
    scale = np.max(np.abs(w), axis=1)[:, None, None]
    deg = np.abs(dw) < DEGENERACY_TOL * scale
    if deg.any():
        diag = (-1j * tt[:, :, 0] * np.exp(-1j * w * tt[:, :, 0]))[:, :, None]
        g = np.where(deg, np.broadcast_to(diag, g.shape), g)
    return g


class ChainWorkspace:
    """Gradient engine for one program layout.

    All trainable segment Hamiltonians are diagonalized in one batched call;
    the forward states and the reverse adjoint sweep are sequential.
    """

    def bind(self, prog: PulseProgram) -> "ChainWorkspace":
        self.trainable = prog.trainable_indices
        self.durations = np.array([prog.elements[k].duration for k in self.trainable])
        return self

    def forward(self, sc, prog: PulseProgram, ctx) -> Chain:
        h0 = sc.h0
        n = sc.sys.n_spins
        fx = TWO_PI * total_spin_operator(n, "x")
        fy = TWO_PI * total_spin_operator(n, "y")
        u = prog.controls() * ctx.b1_scale
        h = h0[None] + u[:, 0, None, None] * fx[None] + u[:, 1, None, None] * fy[None]
        w, v = np.linalg.eigh(h)
        ut = (v * np.exp(-1j * w * self.durations[:, None])[:, None, :]) @ np.conj(np.swapaxes(v, 1, 2))
        slot = {k: j for j, k in enumerate(self.trainable)}
        rho = sc.rho0.astype(complex)
        props, before = [], []
        for k, el in enumerate(prog.elements):
            up = ut[slot[k]] if k in slot else element_propagator(h0, el)
            before.append(rho)
            rho = up @ rho @ up.conj().T
            props.append(up)
        return Chain(props, before, w, v, rho, ctx.b1_scale, n)

    def backward(self, chain: Chain, adjoint: np.ndarray) -> np.ndarray:
        """Reverse accumulation; returns dL/du as an ``(m, 2)`` array in loss units per Hz."""
        n = chain.n
        slot = {k: j for j, k in enumerate(self.trainable)}
        m = len(self.trainable)
        d = adjoint.shape[0]
        lam = adjoint
        # Y_k = rho_before_k U_k^H Lambda_k for each trainable k
        y = np.empty((m, d, d), dtype=complex)
        for k in range(len(chain.propagators) - 1, -1, -1):
            u = chain.propagators[k]
            if k in slot:
                y[slot[k]] = chain.states_before[k] @ u.conj().T @ lam
            lam = u.conj().T @ lam @ u
        v = chain.eig_v
        vh = np.conj(np.swapaxes(v, 1, 2))
        x = vh @ y @ v
        gam = _gamma_batch(chain.eig_w, self.durations) * np.swapaxes(x, 1, 2)
        out = np.empty((m, 2))
        for col, axis in enumerate("xy"):
            f = TWO_PI * chain.b1_scale * total_spin_operator(n, axis)
            df = vh @ f[None] @ v
            out[:, col] = 2.0 * np.real(np.sum(df * gam, axis=(1, 2)))
        return out


def loss_gradient(objective: Objective, prog: PulseProgram, ws: ChainWorkspace | None = None):
    """Loss, per-task components and exact ``dL/du`` of shape ``(m, 2)``."""
    ws = (ws or ChainWorkspace()).bind(prog)
    if not ws.trainable:
        res = objective.evaluate(prog)
        return res, np.zeros((0, 2))
    res, g = objective._run(prog, gradient=ws)
    if not np.all(np.isfinite(g)):
        raise NumericalError("non-finite gradient")
    return res, g


def finite_difference_check(objective: Objective, prog: PulseProgram, step: float = 1e-3,
                            n_probes: int = 16, seed: int = 0, analytic: np.ndarray | None = None,
                            return_table: bool = False, include=()):
    """Compare the analytic gradient to central differences on random coordinates.

    Returns the worst relative error ``|a - f| / max(|a|, |f|)``; with
    ``return_table`` also the rows ``(segment, axis, analytic, numeric, rel_err)``.
    ``include`` lists flat coordinates that are always probed.
    """
    if not step > 0:
        raise ValueError("step must be positive")
    if analytic is None:
        _, analytic = loss_gradient(objective, prog)
    u0 = prog.controls()
    flat = analytic.ravel()
    norm = np.linalg.norm(flat)
    eligible = np.flatnonzero(np.abs(flat) >= 1e-10 * norm) if norm > 0 else np.arange(flat.size)
    rng = np.random.default_rng(seed)
    picks = rng.choice(eligible, size=min(n_probes, eligible.size), replace=False)
    picks = np.union1d(picks, np.asarray(include, dtype=int))
    rows = []
    worst = 0.0
    for p in sorted(picks):
        du = np.zeros(flat.size)
        du[p] = step
        du = du.reshape(u0.shape)
        lp = objective.evaluate(_shifted(prog, u0 + du)).loss
        lm = objective.evaluate(_shifted(prog, u0 - du)).loss
        num = (lp - lm) / (2 * step)
        a = flat[p]
        denom = max(abs(a), abs(num))
        err = abs(a - num) / denom if denom > 0 else 0.0
        worst = max(worst, err)
        rows.append((int(p // 2), "xy"[p % 2], float(a), float(num), float(err)))
    return (worst, rows) if return_table else worst


def _shifted(prog: PulseProgram, controls: np.ndarray) -> PulseProgram:
    # finite-difference probes may step a hair past amp_max
    return PulseProgram(prog.with_controls(np.zeros_like(controls)).elements, np.inf).with_controls(controls)
