"""
Adaptive-moment optimization of trainable pulse controls.

Controls are never updated directly. Each segment carries a raw 2-vector
``theta`` and its RF amplitude is ``u = amp_max * tanh(|theta|) * theta/|theta|``,
so ``|u| < amp_max`` always holds and the bound is differentiable.
"""

from __future__ import annotations

import json
import os
import tempfile
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Optional

import numpy as np

from .grad import ChainWorkspace, loss_gradient
from .objective import NumericalError, Objective
from .prop import PulseProgram

CHECKPOINT_VERSION = 1


class CheckpointError(RuntimeError):
    pass


@dataclass
class OptConfig:
    epochs: int = 400
    step_size: float = 0.05
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    seed: int = 0
    amp_max: float = 5000.0
    init_scale: float = 10.0
    snapshot_every: int = 50

    def __post_init__(self):
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if not (0 < self.beta1 < 1 and 0 < self.beta2 < 1):
            raise ValueError("moment decay rates must lie in (0, 1)")
        if not self.amp_max > 0:
            raise ValueError("amp_max must be positive")
        if self.snapshot_every < 1:
            raise ValueError("snapshot_every must be >= 1")


# ---------------------------------------------------------------------------
# amplitude parameterization


def _sat(r):
    """tanh(r)/r and (d/dr (tanh(r)/r)) / r, stable at r -> 0."""
    small = r < 1e-3
    rs = np.where(small, 1.0, r)
    f = np.where(small, 1 - r**2 / 3 + 2 * r**4 / 15, np.tanh(rs) / rs)
    fp_over_r = np.where(small, -2 / 3 + 8 * r**2 / 15,
                         (rs * (1 - np.tanh(rs) ** 2) - np.tanh(rs)) / rs**3)
    return f, fp_over_r


def params_to_controls(theta: np.ndarray, amp_max: float) -> np.ndarray:
    r = np.linalg.norm(theta, axis=-1)
    f, _ = _sat(r)
    return amp_max * f[..., None] * theta


def controls_to_params(u: np.ndarray, amp_max: float) -> np.ndarray:
    u = np.asarray(u, dtype=float)
    a = np.linalg.norm(u, axis=-1)
    ratio = np.minimum(a / amp_max, 1 - 1e-12)
    r = np.arctanh(ratio)
    with np.errstate(invalid="ignore", divide="ignore"):
        scale = np.where(a > 0, r / np.where(a > 0, a, 1.0), 1.0 / amp_max)
    return scale[..., None] * u


def pullback(theta: np.ndarray, grad_u: np.ndarray, amp_max: float) -> np.ndarray:
    """``J^T g`` for the saturation map (its Jacobian is symmetric)."""
    r = np.linalg.norm(theta, axis=-1)
    f, fp_over_r = _sat(r)
    dot = np.sum(theta * grad_u, axis=-1)
    return amp_max * (f[..., None] * grad_u + (fp_over_r * dot)[..., None] * theta)


# ---------------------------------------------------------------------------


def initialize_controls(prog: PulseProgram, seed: int = 0, init_scale: float = 10.0,
                        rng: Optional[np.random.Generator] = None) -> PulseProgram:
    """Draw every trainable (u_x, u_y) uniformly in [-init_scale, init_scale] Hz."""
    m = len(prog.trainable_indices)
    if m == 0:
        raise ValueError("program has no trainable segments")
    rng = rng if rng is not None else np.random.default_rng(seed)
    return prog.with_controls(rng.uniform(-init_scale, init_scale, size=(m, 2)))


@dataclass
class AdamState:
    m: np.ndarray
    v: np.ndarray
    t: int = 0

    @classmethod
    def zeros(cls, shape) -> "AdamState":
        return cls(np.zeros(shape), np.zeros(shape), 0)


def step(params: np.ndarray, grad: np.ndarray, state: AdamState, cfg: OptConfig) -> np.ndarray:
    """One bias-corrected adaptive-moment update; mutates ``state``."""
    if grad.shape != params.shape:
        raise ValueError("gradient and parameter shapes differ")
    if not np.all(np.isfinite(grad)):
        raise NumericalError("non-finite gradient")
    state.t += 1
    state.m = cfg.beta1 * state.m + (1 - cfg.beta1) * grad
    state.v = cfg.beta2 * state.v + (1 - cfg.beta2) * grad**2
    m_hat = state.m / (1 - cfg.beta1**state.t)
    v_hat = state.v / (1 - cfg.beta2**state.t)
    return params - cfg.step_size * m_hat / (np.sqrt(v_hat) + cfg.eps)


# ---------------------------------------------------------------------------


@dataclass
class OptResult:
    best_program: PulseProgram
    best_loss: float
    best_epoch: int
    losses: np.ndarray
    components: dict[str, np.ndarray]
    fidelities: dict[str, np.ndarray]
    snapshots: dict[int, dict] = field(default_factory=dict)
    final_program: Optional[PulseProgram] = None
    wall_time_s: float = 0.0
    max_amplitude: float = 0.0

    @property
    def epochs(self) -> int:
        return len(self.losses)


@dataclass
class _RunState:
    epoch: int
    theta: np.ndarray
    adam: AdamState
    losses: list
    components: list
    fidelities: list
    best_loss: float
    best_epoch: int
    best_theta: np.ndarray
    rng_state: dict
    max_amplitude: float = 0.0


def save_checkpoint(state: _RunState, path, cfg: OptConfig) -> None:
    """Atomic write (temp file then rename)."""
    path = Path(path)
    meta = {
        "version": CHECKPOINT_VERSION,
        "epoch": state.epoch,
        "adam_t": state.adam.t,
        "best_loss": state.best_loss,
        "best_epoch": state.best_epoch,
        "rng_state": state.rng_state,
        "config": asdict(cfg),
        "components": state.components,
        "fidelities": state.fidelities,
        "max_amplitude": state.max_amplitude,
    }
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=path.name, suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            np.savez(fh, theta=state.theta, m=state.adam.m, v=state.adam.v,
                     losses=np.asarray(state.losses, dtype=float), best_theta=state.best_theta,
                     meta=np.frombuffer(json.dumps(meta).encode(), dtype=np.uint8))
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def load_checkpoint(path) -> tuple[_RunState, OptConfig]:
    try:
        with np.load(path, allow_pickle=False) as z:
            meta = json.loads(bytes(z["meta"]).decode())
            arrays = {k: z[k] for k in ("theta", "m", "v", "losses", "best_theta")}
    except FileNotFoundError:
        raise
    except Exception as exc:  # zipfile/npy errors on truncated or foreign files
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from None
    if meta.get("version") != CHECKPOINT_VERSION:
        raise CheckpointError(f"checkpoint version {meta.get('version')} != {CHECKPOINT_VERSION}")
    state = _RunState(meta["epoch"], arrays["theta"], AdamState(arrays["m"], arrays["v"], meta["adam_t"]),
                      list(arrays["losses"]), meta["components"], meta["fidelities"], meta["best_loss"],
                      meta["best_epoch"], arrays["best_theta"], meta["rng_state"], meta["max_amplitude"])
    return state, OptConfig(**meta["config"])


def run_optimization(objective: Objective, prog: PulseProgram, cfg: OptConfig = OptConfig(),
                     checkpoint_path=None, resume: bool = False,
                     callback: Optional[Callable[[int, float], None]] = None,
                     initial_controls: Optional[np.ndarray] = None) -> OptResult:
    """Run ``cfg.epochs`` cycles of (forward, exact gradient, update).

    One epoch is one full objective evaluation and one update. The recorded
    loss for an epoch is that of the controls entering it; ``best_program``
    carries the controls with the lowest recorded loss.
    """
    if not prog.trainable_indices:
        raise ValueError("program has no trainable segments")
    prog = PulseProgram(prog.elements, cfg.amp_max) if prog.amp_max != cfg.amp_max else prog
    t0 = time.perf_counter()
    if resume and checkpoint_path is not None and Path(checkpoint_path).exists():
        state, _ = load_checkpoint(checkpoint_path)
    else:
        rng = np.random.default_rng(cfg.seed)
        if initial_controls is None:
            u0 = initialize_controls(prog, cfg.seed, cfg.init_scale, rng=rng).controls()
        else:
            u0 = np.asarray(initial_controls, dtype=float)
        theta = controls_to_params(u0, cfg.amp_max)
        state = _RunState(0, theta, AdamState.zeros(theta.shape), [], [], [], np.inf, 0, theta.copy(),
                          _jsonable_rng(rng.bit_generator.state))
        if checkpoint_path is not None:
            save_checkpoint(state, checkpoint_path, cfg)

    ws = ChainWorkspace()
    snapshots: dict[int, dict] = {}
    labels = objective.task_labels()
    while state.epoch < cfg.epochs:
        epoch = state.epoch + 1
        u = params_to_controls(state.theta, cfg.amp_max)
        state.max_amplitude = max(state.max_amplitude, float(np.max(np.linalg.norm(u, axis=1))))
        current = prog.with_controls(u)
        res, g_u = loss_gradient(objective, current, ws)
        if not np.isfinite(res.loss):
            raise NumericalError(f"non-finite loss at epoch {epoch}", state)
        state.losses.append(res.loss)
        state.components.append([res.components[k] for k in labels])
        state.fidelities.append(res.fidelities)
        if res.loss < state.best_loss:
            state.best_loss, state.best_epoch, state.best_theta = res.loss, epoch, state.theta.copy()
        if epoch == 1 or epoch % cfg.snapshot_every == 0 or epoch == cfg.epochs:
            snapshots[epoch] = objective.spectra(res.states)
        if callback is not None:
            callback(epoch, res.loss)
        state.theta = step(state.theta, pullback(state.theta, g_u, cfg.amp_max), state.adam, cfg)
        state.epoch = epoch
        if checkpoint_path is not None and (epoch % cfg.snapshot_every == 0 or epoch == cfg.epochs):
            save_checkpoint(state, checkpoint_path, cfg)

    comps = np.array(state.components, dtype=float).reshape(len(state.losses), len(labels))
    fid_labels = sorted({k for d in state.fidelities for k in d})
    return OptResult(
        best_program=prog.with_controls(params_to_controls(state.best_theta, cfg.amp_max)),
        best_loss=float(state.best_loss),
        best_epoch=state.best_epoch,
        losses=np.array(state.losses, dtype=float),
        components={k: comps[:, i] for i, k in enumerate(labels)},
        fidelities={k: np.array([d.get(k, np.nan) for d in state.fidelities]) for k in fid_labels},
        snapshots=snapshots,
        final_program=prog.with_controls(params_to_controls(state.theta, cfg.amp_max)),
        wall_time_s=time.perf_counter() - t0,
        max_amplitude=state.max_amplitude,
    )


def _jsonable_rng(state: dict) -> dict:
    return json.loads(json.dumps(state, default=int))
