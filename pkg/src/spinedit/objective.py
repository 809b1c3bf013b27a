"""
Multi-task objectives over one or more spin systems.

A loss is the ensemble mean of ``sum_t w_t * l_t`` plus an RF power penalty:

- ``enhance_peak``: ``-peak_height(region)``
- ``suppress_region``: ``region_power(region)``
- ``match_template``: mean squared deviation of the real spectrum from a
  reference over ``region``
- ``state_fidelity``: ``1 - F(rho_final, target)``

Every task also provides the adjoint operator ``M = dl/drho`` (in the sense
``dl = Re Tr(M drho)``) so the gradient code can backpropagate through the
pulse chain without knowing which task produced it.
"""

from __future__ import annotations

import itertools
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Optional, Sequence

import numpy as np
import yaml

from .detect import Acquisition, Detector, SpectralRegion
from .prop import PulseProgram, PulseSegment, run_program
from .spinsys import (SpinSystem, equilibrium_state, free_hamiltonian,
                      operator_from_expression)

TASK_KINDS = ("enhance_peak", "suppress_region", "match_template", "state_fidelity")


class ObjectiveError(ValueError):
    pass


class NumericalError(RuntimeError):
    pass


@dataclass(frozen=True)
class Task:
    system: str
    kind: str
    weight: float = 1.0
    region: Optional[SpectralRegion] = None
    target: Optional[str] = None
    template: Optional[str] = None
    smooth_temperature: Optional[float] = None

    def __post_init__(self):
        if self.kind not in TASK_KINDS:
            raise ObjectiveError(f"kind: unknown task kind {self.kind!r}")
        if not np.isfinite(self.weight):
            raise ObjectiveError("weight: must be finite")
        if self.kind == "state_fidelity":
            if self.target is None:
                raise ObjectiveError("target: state_fidelity tasks need a target expression")
        elif self.region is None:
            raise ObjectiveError(f"region_ppm: {self.kind} tasks need a spectral region")
        if self.kind == "suppress_region" and self.weight < 0:
            raise ObjectiveError("weight: suppression weights must be non-negative")
        if self.kind == "match_template" and self.template is None:
            raise ObjectiveError("template: match_template tasks need a template state expression")
        if self.smooth_temperature is not None and not self.smooth_temperature > 0:
            raise ObjectiveError("smooth_temperature: must be positive")

    @property
    def label(self) -> str:
        return f"{self.kind}:{self.system}"


@dataclass(frozen=True)
class RobustnessSpec:
    b1_scales: tuple[float, ...] = (1.0,)
    b0_offsets_hz: tuple[float, ...] = (0.0,)

    def __post_init__(self):
        b1 = tuple(float(x) for x in self.b1_scales)
        b0 = tuple(float(x) for x in self.b0_offsets_hz)
        if not b1 or not b0:
            raise ObjectiveError("ensemble: b1_scales and b0_offsets_hz must be non-empty")
        if any(not (x > 0 and np.isfinite(x)) for x in b1):
            raise ObjectiveError("ensemble.b1_scales: must be positive")
        if any(not np.isfinite(x) for x in b0):
            raise ObjectiveError("ensemble.b0_offsets_hz: must be finite")
        object.__setattr__(self, "b1_scales", b1)
        object.__setattr__(self, "b0_offsets_hz", b0)

    @property
    def size(self) -> int:
        return len(self.b1_scales) * len(self.b0_offsets_hz)


@dataclass(frozen=True)
class ObjectiveSpec:
    tasks: tuple[Task, ...]
    power_weight: float = 0.0
    ensemble: RobustnessSpec = RobustnessSpec()
    acquisition: Acquisition = Acquisition()
    initial_state: Optional[str] = None

    def __post_init__(self):
        tasks = tuple(self.tasks)
        if not tasks:
            raise ObjectiveError("tasks: at least one task is required")
        if not (np.isfinite(self.power_weight) and self.power_weight >= 0):
            raise ObjectiveError("power_weight: must be finite and non-negative")
        object.__setattr__(self, "tasks", tasks)

    def scaled(self, factor: float) -> "ObjectiveSpec":
        tasks = tuple(Task(t.system, t.kind, t.weight * factor, t.region, t.target, t.template,
                           t.smooth_temperature) for t in self.tasks)
        return ObjectiveSpec(tasks, self.power_weight, self.ensemble, self.acquisition, self.initial_state)


@dataclass(frozen=True)
class Context:
    b1_scale: float = 1.0
    b0_offset_hz: float = 0.0


def expand_ensemble(spec: RobustnessSpec) -> list[Context]:
    """Cartesian product of B1 scales and B0 offsets (B1-major order)."""
    return [Context(b1, b0) for b1, b0 in itertools.product(spec.b1_scales, spec.b0_offsets_hz)]


def perturb_system(sys: SpinSystem, ctx: Context) -> SpinSystem:
    """Apply a B0 offset by moving the carrier; every offset shifts uniformly."""
    if ctx.b0_offset_hz == 0.0:
        return sys
    return sys.with_carrier(sys.carrier_ppm + ctx.b0_offset_hz / sys.spectrometer_mhz)


def perturb_program(prog: PulseProgram, ctx: Context) -> PulseProgram:
    """Scale every trainable control by the B1 factor (amplitude cap not enforced)."""
    if ctx.b1_scale == 1.0:
        return prog
    els = tuple(PulseSegment(e.u_x * ctx.b1_scale, e.u_y * ctx.b1_scale, e.duration, True)
                if isinstance(e, PulseSegment) and e.trainable else e for e in prog.elements)
    return PulseProgram(els, prog.amp_max * ctx.b1_scale)


# ---------------------------------------------------------------------------
# scalar pieces


def state_fidelity(rho: np.ndarray, target: np.ndarray) -> float:
    """Normalized trace overlap ``Tr(rho T) / (|rho|_F |T|_F)``."""
    nr = np.linalg.norm(rho)
    nt = np.linalg.norm(target)
    if nr == 0 or nt == 0:
        raise ValueError("fidelity undefined for a zero-norm operator")
    return float(np.real(np.trace(rho @ target)) / (nr * nt))


def _fidelity_and_adjoint(rho, target):
    nr = np.linalg.norm(rho)
    nt = np.linalg.norm(target)
    if nr == 0 or nt == 0:
        raise ValueError("fidelity undefined for a zero-norm operator")
    f = float(np.real(np.sum(rho.T * target)) / (nr * nt))
    # dF = Tr(T drho)/(|rho||T|) - F Tr(rho drho)/|rho|^2
    df = target / (nr * nt) - f * rho / nr**2
    return f, 0.5 * (df + df.conj().T)


def rf_power_penalty(prog: PulseProgram) -> float:
    """Integrated squared amplitude of trainable segments, Hz^2 s."""
    return float(sum((e.u_x**2 + e.u_y**2) * e.duration for e in prog.elements
                     if isinstance(e, PulseSegment) and e.trainable))


def rf_power_gradient(prog: PulseProgram) -> np.ndarray:
    rows = [(2 * e.u_x * e.duration, 2 * e.u_y * e.duration) for e in prog.elements
            if isinstance(e, PulseSegment) and e.trainable]
    return np.array(rows, dtype=float).reshape(-1, 2)


# ---------------------------------------------------------------------------


@dataclass
class EvalResult:
    loss: float
    components: dict[str, float]
    fidelities: dict[str, float] = field(default_factory=dict)
    penalty: float = 0.0
    states: dict = field(default_factory=dict, repr=False)


class _SystemContext:
    """Per (system, B0 offset) precomputation: H0, detector, targets."""

    def __init__(self, sys: SpinSystem, spec: ObjectiveSpec, tasks: Sequence[Task]):
        self.sys = sys
        self.h0 = free_hamiltonian(sys)
        self.detector = Detector(sys, spec.acquisition) if any(t.kind != "state_fidelity" for t in tasks) else None
        n = sys.n_spins
        self.rho0 = (operator_from_expression(n, spec.initial_state) if spec.initial_state
                     else equilibrium_state(n))
        self.targets = {}
        self.templates = {}
        for t in tasks:
            if t.kind == "state_fidelity":
                self.targets[t.target] = operator_from_expression(n, t.target)
            elif t.kind == "match_template":
                ref = self.detector.spectrum_values(operator_from_expression(n, t.template))
                self.templates[t.template] = ref.real
        self.masks = {}
        if self.detector is not None:
            ppm = self.detector.ppm
            for t in tasks:
                if t.region is not None:
                    self.masks[t.region] = t.region.mask(ppm)


class Objective:
    """An :class:`ObjectiveSpec` bound to concrete spin systems.

    ``workers`` > 1 evaluates ensemble members on a thread pool; the reduction
    is always performed in ensemble order so results do not depend on it.
    """

    def __init__(self, spec: ObjectiveSpec, systems: Mapping[str, SpinSystem], workers: int = 1):
        missing = sorted({t.system for t in spec.tasks} - set(systems))
        if missing:
            raise ObjectiveError(f"system: unresolved system reference {missing[0]!r}")
        self.spec = spec
        self.systems = dict(systems)
        self.contexts = expand_ensemble(spec.ensemble)
        self.workers = max(1, int(workers))
        self.system_names = sorted({t.system for t in spec.tasks})
        self._tasks_by_system = {s: [t for t in spec.tasks if t.system == s] for s in self.system_names}
        self._cache: dict[tuple[str, float], _SystemContext] = {}

    def system_context(self, name: str, ctx: Context = Context()) -> _SystemContext:
        key = (name, ctx.b0_offset_hz)
        if key not in self._cache:
            sys = perturb_system(self.systems[name], ctx)
            self._cache[key] = _SystemContext(sys, self.spec, self._tasks_by_system[name])
        return self._cache[key]

    @property
    def nominal_context(self) -> Context:
        for c in self.contexts:
            if c.b1_scale == 1.0 and c.b0_offset_hz == 0.0:
                return c
        return self.contexts[0]

    def task_terms(self, task: Task, sc: _SystemContext, rho: np.ndarray, need_adjoint: bool = True):
        """Return ``(value, adjoint, fidelity)`` for one task at final state ``rho``."""
        if task.kind == "state_fidelity":
            f, df = _fidelity_and_adjoint(rho, sc.targets[task.target])
            return 1.0 - f, (-df if need_adjoint else None), f
        spec_vals = sc.detector.spectrum_values(rho)
        mask = sc.masks[task.region]
        idx = np.flatnonzero(mask)
        g = np.zeros(spec_vals.shape, dtype=complex)
        if task.kind == "enhance_peak":
            re = spec_vals.real[idx]
            if task.smooth_temperature:
                tau = task.smooth_temperature
                z = (re - re.max()) / tau
                p = np.exp(z) / np.exp(z).sum()
                val = -(re.max() + tau * np.log(np.exp(z).sum()))
                g[idx] = -p
            else:
                j = int(np.argmax(re))  # lowest index on ties
                val = -float(re[j])
                g[idx[j]] = -1.0
        elif task.kind == "suppress_region":
            vals = spec_vals[idx]
            val = float(np.mean(np.abs(vals) ** 2))
            g[idx] = 2.0 * vals / idx.size
        else:
            diff = spec_vals.real[idx] - sc.templates[task.template][idx]
            val = float(np.mean(diff**2))
            g[idx] = 2.0 * diff / idx.size
        adj = sc.detector.adjoint(g) if need_adjoint else None
        return float(val), adj, None

    def evaluate(self, prog: PulseProgram) -> EvalResult:
        return self._run(prog, gradient=None)

    def _member(self, prog: PulseProgram, ctx: Context, backprop):
        """Forward (and optionally backward) pass for one ensemble member."""
        out = {"terms": {}, "fid": {}, "states": {}, "grad": None}
        for name in self.system_names:
            sc = self.system_context(name, ctx)
            if backprop is None:
                rho = run_program(sc.sys, prog, sc.rho0, b1_scale=ctx.b1_scale)
                chain = None
            else:
                chain = backprop.forward(sc, prog, ctx)
                rho = chain.final
            out["states"][name] = rho
            total_adj = np.zeros_like(rho)
            for ti, task in enumerate(self.spec.tasks):
                if task.system != name:
                    continue
                val, adj, f = self.task_terms(task, sc, rho, need_adjoint=backprop is not None)
                out["terms"][ti] = val
                if f is not None:
                    out["fid"][ti] = f
                if adj is not None:
                    total_adj += task.weight * adj
            if backprop is not None:
                g = backprop.backward(chain, total_adj)
                out["grad"] = g if out["grad"] is None else out["grad"] + g
        return out

    def _run(self, prog: PulseProgram, gradient):
        ctxs = self.contexts
        if self.workers > 1 and len(ctxs) > 1:
            for c in ctxs:  # fill the context cache before threads share it
                for name in self.system_names:
                    self.system_context(name, c)
            with ThreadPoolExecutor(self.workers) as ex:
                members = list(ex.map(lambda c: self._member(prog, c, gradient), ctxs))
        else:
            members = [self._member(prog, c, gradient) for c in ctxs]
        ntask = len(self.spec.tasks)
        comp = np.zeros(ntask)
        fids: dict[int, float] = {}
        weighted = []
        for m in members:
            s = 0.0
            for ti in range(ntask):
                v = m["terms"][ti]
                comp[ti] += v
                s += self.spec.tasks[ti].weight * v
            for ti, f in m["fid"].items():
                fids[ti] = fids.get(ti, 0.0) + f
            weighted.append(s)
        c = len(members)
        penalty = rf_power_penalty(prog)
        loss = float(np.mean(weighted)) + self.spec.power_weight * penalty
        labels = self.task_labels()
        components = {labels[ti]: comp[ti] / c for ti in range(ntask)}
        fidelities = {labels[ti]: f / c for ti, f in fids.items()}
        for ti in range(ntask):
            if not np.isfinite(comp[ti]):
                raise NumericalError(f"non-finite loss in task {labels[ti]}")
        nominal = ctxs.index(self.nominal_context)
        res = EvalResult(loss, components, fidelities, penalty, members[nominal]["states"])
        if gradient is None:
            return res
        grad = sum(m["grad"] for m in members) / c
        grad = grad + self.spec.power_weight * rf_power_gradient(prog)
        return res, grad

    def task_labels(self) -> list[str]:
        labels = []
        for k, t in enumerate(self.spec.tasks):
            lab = t.label
            if lab in labels or any(u.label == lab for u in self.spec.tasks[k + 1:]):
                lab = f"{lab}#{k + 1}"
            labels.append(lab)
        return labels

    def spectra(self, states: Mapping[str, np.ndarray]):
        """Spectra of the given final states (nominal context) keyed by system."""
        out = {}
        for name, rho in states.items():
            sc = self.system_context(name)
            det = sc.detector or Detector(sc.sys, self.spec.acquisition)
            out[name] = det.spectrum(rho)
        return out


def evaluate(spec: ObjectiveSpec, prog: PulseProgram, systems: Mapping[str, SpinSystem]):
    """Return ``(loss, components)`` for a program."""
    res = Objective(spec, systems).evaluate(prog)
    return res.loss, res.components


# ---------------------------------------------------------------------------
# file format


def _region(value, where: str) -> SpectralRegion:
    if not isinstance(value, (list, tuple)) or len(value) != 2:
        raise ObjectiveError(f"{where}.region_ppm: expected [lo, hi]")
    try:
        return SpectralRegion(float(min(value)), float(max(value)))
    except ValueError as exc:
        raise ObjectiveError(f"{where}.region_ppm: {exc}") from None


def acquisition_from_mapping(doc: Optional[Mapping]) -> Acquisition:
    doc = doc or {}
    unknown = set(doc) - {"n_points", "dwell_s", "lb_hz", "zerofill"}
    if unknown:
        raise ObjectiveError(f"acquisition.{sorted(unknown)[0]}: unknown key")
    return Acquisition(int(doc.get("n_points", 4096)), doc.get("dwell_s"), doc.get("lb_hz"),
                       int(doc.get("zerofill", 2)))


def objective_from_mapping(doc: Mapping) -> ObjectiveSpec:
    if not isinstance(doc, Mapping):
        raise ObjectiveError("objective: expected a key/value mapping")
    if "tasks" not in doc or not doc["tasks"]:
        raise ObjectiveError("tasks: at least one task is required")
    tasks = []
    for k, t in enumerate(doc["tasks"]):
        where = f"tasks[{k}]"
        if "system" not in t or "kind" not in t:
            raise ObjectiveError(f"{where}: needs 'system' and 'kind'")
        region = _region(t["region_ppm"], where) if "region_ppm" in t else None
        try:
            tasks.append(Task(str(t["system"]), str(t["kind"]), float(t.get("weight", 1.0)), region,
                              t.get("target"), t.get("template"), t.get("smooth_temperature")))
        except ObjectiveError as exc:
            raise ObjectiveError(f"{where}.{exc}") from None
    ens = doc.get("ensemble") or {}
    ensemble = RobustnessSpec(tuple(ens.get("b1_scales", (1.0,))), tuple(ens.get("b0_offsets_hz", (0.0,))))
    return ObjectiveSpec(tuple(tasks), float(doc.get("power_weight", 0.0)), ensemble,
                         acquisition_from_mapping(doc.get("acquisition")), doc.get("initial_state"))


def load_objective(path) -> ObjectiveSpec:
    return objective_from_mapping(yaml.safe_load(Path(path).read_text()))


def objective_to_mapping(spec: ObjectiveSpec) -> dict:
    """Inverse of :func:`objective_from_mapping` with every default written out.

    Acquisition fields whose defaults depend on the spin system stay ``None``.
    """
    tasks = []
    for t in spec.tasks:
        d = {"system": t.system, "kind": t.kind, "weight": t.weight}
        if t.region is not None:
            d["region_ppm"] = [t.region.lo_ppm, t.region.hi_ppm]
        for key in ("target", "template", "smooth_temperature"):
            if getattr(t, key) is not None:
                d[key] = getattr(t, key)
        tasks.append(d)
    acq = spec.acquisition
    return {
        "tasks": tasks,
        "power_weight": spec.power_weight,
        "ensemble": {"b1_scales": list(spec.ensemble.b1_scales),
                     "b0_offsets_hz": list(spec.ensemble.b0_offsets_hz)},
        "acquisition": {"n_points": acq.n_points, "dwell_s": acq.dwell, "lb_hz": acq.lb_hz,
                        "zerofill": acq.zerofill},
        "initial_state": spec.initial_state,
    }
