"""
Command-line entry point: ``spinedit <verb> [options]``.

Verbs are ``simulate``, ``optimize``, ``analyze``, ``gradcheck`` and ``export``.
Every verb that writes files puts a ``manifest.json`` in its output directory
before any computation starts. Exit codes: 0 success, 2 invalid input,
3 numerical failure (non-finite values or a failed gradient gate).
"""

from __future__ import annotations

import argparse
import csv
import datetime as _dt
import hashlib
import json
import sys
from dataclasses import asdict
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
import yaml

from . import __version__
from .analyze import decompose
from .detect import Acquisition, Detector, SpectralRegion, write_fid_csv, write_spectrum_csv
from .grad import finite_difference_check, loss_gradient
from .objective import (NumericalError, Objective, ObjectiveError, ObjectiveSpec, Task,
                        objective_from_mapping, objective_to_mapping)
from .optimize import CheckpointError, OptConfig, run_optimization
from .prop import (PulseProgram, load_program, program_from_mapping, random_program,
                   run_program, save_program, write_shape_table)
from .spinsys import (SpinSystem, SpinSystemError, _bundled_path, equilibrium_state, format_label,
                      load_spin_system, operator_from_expression)

EXIT_OK = 0
EXIT_INVALID = 2
EXIT_NUMERICAL = 3
GRADCHECK_TOL = 1e-6
MANIFEST_NAME = "manifest.json"

_RUN_KEYS = {"systems", "program", "objective", "optimizer", "outputs"}
_OPT_KEYS = {"epochs", "step_size", "seed", "amp_max_hz", "snapshot_every", "beta1", "beta2",
             "eps", "init_scale"}


class UsageError(Exception):
    """Invalid user input; reported with exit code 2."""

    def __init__(self, *messages: str):
        super().__init__("; ".join(messages))
        self.messages = list(messages)


# ---------------------------------------------------------------------------
# helpers


def _digest(path: Path) -> str:
    return "sha256:" + hashlib.sha256(Path(path).read_bytes()).hexdigest()


def _resolve_system(source: str, base: Optional[Path] = None) -> tuple[SpinSystem, Path]:
    p = Path(source)
    if base is not None and not p.is_absolute() and (base / p).exists():
        p = base / p
    if not p.exists():
        bundled = _bundled_path(source)
        if bundled is None:
            raise UsageError(f"system: no such file or bundled system {source!r}")
        p = bundled
    try:
        return load_spin_system(p), p.resolve()
    except SpinSystemError as exc:
        raise UsageError(f"system {source}: {exc}") from None


def _resolve_path(source, base: Optional[Path]) -> Path:
    p = Path(source)
    if base is not None and not p.is_absolute():
        p = base / p
    return p


def _load_program_file(path: Path) -> PulseProgram:
    if not path.exists():
        raise UsageError(f"pulse: no such file {path}")
    try:
        return load_program(path)
    except (ValueError, TypeError, yaml.YAMLError) as exc:
        raise UsageError(f"pulse {path}: {exc}") from None


def _acquisition(args) -> Acquisition:
    problems = []
    if args.points < 64 or args.points & (args.points - 1):
        problems.append("--points must be a power of two >= 64")
    if args.zerofill not in (1, 2, 4):
        problems.append("--zerofill must be 1, 2 or 4")
    if args.lb is not None and args.lb < 0:
        problems.append("--lb must be non-negative")
    if args.dwell is not None and not args.dwell > 0:
        problems.append("--dwell must be positive")
    if problems:
        raise UsageError(*problems)
    try:
        acq = Acquisition(n_points=args.points, dwell=args.dwell, lb_hz=args.lb, zerofill=args.zerofill)
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    return acq


def _prepare_out(out: Optional[str], default: str) -> Path:
    path = Path(out or default)
    if path.exists() and not path.is_dir():
        raise UsageError(f"--out: {path} exists and is not a directory")
    return path


def write_manifest(out: Path, verb: str, config: dict, inputs: dict[str, Path], seed) -> dict:
    """Write the run manifest; called before any computation."""
    out.mkdir(parents=True, exist_ok=True)
    manifest = {
        "tool": "spinedit",
        "version": __version__,
        "verb": verb,
        "seed": seed,
        "config": config,
        "inputs": {k: {"path": str(p), "digest": _digest(p)} for k, p in inputs.items()},
        "started": _dt.datetime.now(_dt.timezone.utc).isoformat(),
    }
    (out / MANIFEST_NAME).write_text(json.dumps(manifest, indent=2, default=_jsonable))
    return manifest


def finish_manifest(out: Path, manifest: dict, **extra) -> None:
    manifest = dict(manifest, finished=_dt.datetime.now(_dt.timezone.utc).isoformat(), **extra)
    (out / MANIFEST_NAME).write_text(json.dumps(manifest, indent=2, default=_jsonable))


def _jsonable(obj):
    if isinstance(obj, (np.floating, np.integer)):
        return obj.item()
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    if isinstance(obj, Path):
        return str(obj)
    raise TypeError(f"not serializable: {type(obj).__name__}")


def _say(args, *parts) -> None:
    if not args.quiet:
        print(*parts)


# ---------------------------------------------------------------------------
# run configs


def load_run_config(path, seed: Optional[int] = None, out: Optional[str] = None) -> dict:
    """Parse and fully resolve a run config, collecting every problem first.

    A manifest written by ``optimize`` is accepted too; its resolved config
    is reused as is.
    """
    path = Path(path)
    if not path.exists():
        raise UsageError(f"config: no such file {path}")
    text = path.read_text()
    try:
        # manifests are JSON; YAML 1.1 would read "1e-08" as a string
        doc = json.loads(text) if path.suffix == ".json" else yaml.safe_load(text)
    except (yaml.YAMLError, json.JSONDecodeError) as exc:
        raise UsageError(f"config: not valid structured text ({exc})") from None
    if isinstance(doc, dict) and doc.get("tool") == "spinedit" and "config" in doc:
        doc = doc["config"]
    if not isinstance(doc, dict):
        raise UsageError("config: expected a key/value mapping")
    base = path.parent
    errors: list[str] = []
    for key in sorted(set(doc) - _RUN_KEYS):
        errors.append(f"{key}: unknown key")

    systems, system_files = {}, {}
    sysdoc = doc.get("systems")
    if isinstance(sysdoc, list):
        sysdoc = {Path(str(s)).stem: s for s in sysdoc}
    if not isinstance(sysdoc, dict) or not sysdoc:
        errors.append("systems: expected a mapping of name -> spin system file")
        sysdoc = {}
    for name, src in sysdoc.items():
        try:
            systems[name], system_files[name] = _resolve_system(str(src), base)
        except UsageError as exc:
            errors.append(f"systems.{name}: {exc}")

    objective_doc, objective_file = None, None
    odoc = doc.get("objective")
    if isinstance(odoc, str):
        objective_file = _resolve_path(odoc, base)
        if not objective_file.exists():
            errors.append(f"objective: no such file {objective_file}")
        else:
            try:
                objective_doc = yaml.safe_load(objective_file.read_text())
            except yaml.YAMLError as exc:
                errors.append(f"objective: not valid structured text ({exc})")
    elif isinstance(odoc, dict):
        objective_doc = odoc
    else:
        errors.append("objective: expected a file path or an inline mapping")
    spec = None
    if objective_doc is not None:
        try:
            spec = objective_from_mapping(objective_doc)
        except (ObjectiveError, ValueError, TypeError) as exc:
            errors.append(f"objective.{exc}")
        else:
            for t in spec.tasks:
                if t.system not in sysdoc:
                    errors.append(f"objective: task system {t.system!r} is not listed under systems")
            for name, s in systems.items():
                for t in spec.tasks:
                    if t.system != name:
                        continue
                    for expr in (t.target, t.template, spec.initial_state):
                        if expr is None:
                            continue
                        try:
                            operator_from_expression(s.n_spins, expr)
                        except (ValueError, IndexError) as exc:
                            errors.append(f"objective: {expr!r} on {name}: {exc}")

    optdoc = doc.get("optimizer") or {}
    if not isinstance(optdoc, dict):
        errors.append("optimizer: expected a mapping")
        optdoc = {}
    for key in sorted(set(optdoc) - _OPT_KEYS):
        errors.append(f"optimizer.{key}: unknown key")
    cfg = None
    kw = {}
    for key in sorted(set(optdoc) & _OPT_KEYS):
        kind = int if key in ("epochs", "seed", "snapshot_every") else float
        try:
            value = kind(optdoc[key])
            if kind is int and value != float(optdoc[key]):
                raise ValueError
        except (TypeError, ValueError):
            errors.append(f"optimizer.{key}: expected {'an integer' if kind is int else 'a number'}")
            continue
        kw["amp_max" if key == "amp_max_hz" else key] = value
    if seed is not None:
        kw["seed"] = int(seed)
    try:
        cfg = OptConfig(**kw)
    except (TypeError, ValueError) as exc:
        errors.append(f"optimizer: {exc}")

    program, program_file, program_doc = None, None, doc.get("program")
    amp_max = cfg.amp_max if cfg else OptConfig().amp_max
    if isinstance(program_doc, str):
        program_file = _resolve_path(program_doc, base)
        try:
            program = _load_program_file(program_file)
            program = PulseProgram(program.elements, amp_max)
        except UsageError as exc:
            errors.extend(exc.messages)
        except ValueError as exc:
            errors.append(f"program: {exc}")
    elif isinstance(program_doc, dict) and "elements" not in program_doc:
        unknown = set(program_doc) - {"segments", "duration_s"}
        if unknown:
            errors.append(f"program.{sorted(unknown)[0]}: unknown key")
        try:
            program = PulseProgram.shaped(int(program_doc.get("segments", 500)),
                                          float(program_doc.get("duration_s", 10e-3)), amp_max)
        except (TypeError, ValueError, ZeroDivisionError) as exc:
            errors.append(f"program: {exc}")
    elif isinstance(program_doc, dict):
        try:
            program = program_from_mapping(program_doc)
        except (ValueError, TypeError) as exc:
            errors.append(f"program: {exc}")
    else:
        errors.append("program: expected a file path or {segments, duration_s}")
    if program is not None and not program.trainable_indices:
        errors.append("program: no trainable segments")

    outdoc = doc.get("outputs") or {}
    if isinstance(outdoc, str):
        outdoc = {"directory": outdoc}
    if not isinstance(outdoc, dict):
        errors.append("outputs: expected a mapping")
        outdoc = {}
    for key in sorted(set(outdoc) - {"directory", "checkpoint"}):
        errors.append(f"outputs.{key}: unknown key")
    out_dir = Path(out) if out else _resolve_path(outdoc.get("directory", "run_output"), base)

    if errors:
        raise UsageError(*errors)

    resolved = {
        "systems": {k: str(v) for k, v in system_files.items()},
        "program": str(program_file.resolve()) if program_file is not None else program_doc,
        "objective": objective_to_mapping(spec),
        "optimizer": {**{k: v for k, v in asdict(cfg).items() if k != "amp_max"}, "amp_max_hz": cfg.amp_max},
        "outputs": {"directory": str(out_dir.resolve()), "checkpoint": bool(outdoc.get("checkpoint", True))},
    }
    inputs = {"config": path.resolve(), **{f"system:{k}": v for k, v in system_files.items()}}
    if objective_file is not None:
        inputs["objective"] = objective_file.resolve()
    if program_file is not None:
        inputs["program"] = program_file.resolve()
    return {"systems": systems, "spec": spec, "program": program, "opt": cfg, "out": out_dir,
            "resolved": resolved, "inputs": inputs}


# ---------------------------------------------------------------------------
# verbs


def cmd_simulate(args) -> int:
    if (args.pulse is None) == (args.state is None):
        raise UsageError("give exactly one of --pulse or --state")
    system, sys_file = _resolve_system(args.system)
    acq = _acquisition(args)
    inputs = {"system": sys_file}
    if args.state is not None:
        try:
            rho = operator_from_expression(system.n_spins, args.state)
        except (ValueError, IndexError) as exc:
            raise UsageError(f"--state: {exc}") from None
        prog = None
    else:
        pfile = Path(args.pulse)
        prog = _load_program_file(pfile)
        inputs["pulse"] = pfile.resolve()
    out = _prepare_out(args.out, "simulate_output")
    res = acq.resolve(system)
    config = {"system": str(sys_file), "state": args.state,
              "pulse": str(Path(args.pulse).resolve()) if args.pulse else None,
              "acquisition": {"n_points": res.n_points, "dwell_s": res.dwell, "lb_hz": res.lb_hz,
                              "zerofill": res.zerofill}}
    manifest = write_manifest(out, "simulate", config, inputs, args.seed)
    if prog is not None:
        rho = run_program(system, prog, equilibrium_state(system.n_spins))
    det = Detector(system, acq)
    spec = det.spectrum(rho)
    if not np.all(np.isfinite(spec.intensities)):
        raise NumericalError("spectrum contains non-finite values")
    write_spectrum_csv(spec, out / "spectrum.csv")
    if args.fid:
        write_fid_csv(det.fid(rho), out / "fid.csv")
    finish_manifest(out, manifest, outputs=sorted(p.name for p in out.iterdir()))
    _say(args, f"wrote {out / 'spectrum.csv'} ({spec.intensities.size} bins)")
    return EXIT_OK


def _write_history(path: Path, result, labels: list[str]) -> None:
    fid_labels = list(result.fidelities)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["epoch", "loss", *labels, *[f"fidelity:{k}" for k in fid_labels]])
        for e in range(result.epochs):
            w.writerow([e + 1, repr(float(result.losses[e])),
                        *[repr(float(result.components[k][e])) for k in labels],
                        *[repr(float(result.fidelities[k][e])) for k in fid_labels]])


def cmd_optimize(args) -> int:
    run = load_run_config(args.config, seed=args.seed, out=args.out)
    objective = Objective(run["spec"], run["systems"], workers=args.threads)
    out: Path = run["out"]
    if args.dry_run:
        plan = dict(run["resolved"], trainable_segments=len(run["program"].trainable_indices),
                    ensemble_size=run["spec"].ensemble.size, tasks=objective.task_labels())
        print(yaml.safe_dump(json.loads(json.dumps(plan, default=_jsonable)), sort_keys=False))
        return EXIT_OK
    if out.exists() and not out.is_dir():
        raise UsageError(f"outputs: {out} exists and is not a directory")
    manifest = write_manifest(out, "optimize", run["resolved"], run["inputs"], run["opt"].seed)
    ckpt = out / "checkpoint.npz" if run["resolved"]["outputs"]["checkpoint"] else None

    def progress(epoch, loss):
        if not args.quiet and (epoch == 1 or epoch % run["opt"].snapshot_every == 0):
            print(f"epoch {epoch:5d}  loss {loss:.6g}", flush=True)

    result = run_optimization(objective, run["program"], run["opt"], checkpoint_path=ckpt,
                              resume=args.resume, callback=progress)
    labels = objective.task_labels()
    _write_history(out / "history.csv", result, labels)
    save_program(result.best_program, out / "best_pulse.yaml")
    write_shape_table(result.best_program, out / "best_pulse.csv")
    multi = len(objective.system_names) > 1
    for epoch, spectra in sorted(result.snapshots.items()):
        for name, spec in spectra.items():
            suffix = f"_{name}" if multi else ""
            write_spectrum_csv(spec, out / f"snapshot_epoch{epoch}{suffix}.csv")
    finish_manifest(out, manifest, best_loss=result.best_loss, best_epoch=result.best_epoch,
                    wall_time_s=result.wall_time_s, max_amplitude_hz=result.max_amplitude)
    _say(args, f"best loss {result.best_loss:.6g} at epoch {result.best_epoch}; "
               f"artifacts in {out}")
    return EXIT_OK


def cmd_analyze(args) -> int:
    if args.top is not None and args.top < 1:
        raise UsageError("top must be >= 1")
    if args.pulse is None:
        raise UsageError("--pulse is required")
    system, sys_file = _resolve_system(args.system)
    pfile = Path(args.pulse)
    prog = _load_program_file(pfile)
    out = _prepare_out(args.out, "analyze_output")
    manifest = write_manifest(out, "analyze", {"system": str(sys_file), "pulse": str(pfile.resolve()),
                                                "top": args.top},
                              {"system": sys_file, "pulse": pfile.resolve()}, args.seed)
    rho = run_program(system, prog, equilibrium_state(system.n_spins))
    if not np.all(np.isfinite(rho)):
        raise NumericalError("propagated state contains non-finite values")
    dec = decompose(rho, args.top)
    dec.write_csv(out / "decomposition.csv")
    if not args.quiet:
        print(f"{'term':<24}{'coefficient':>14}")
        for lab, c in dec.terms:
            expr = decompose_label(lab)
            print(f"{expr:<24}{c.real:>14.6f}")
        print(f"residual norm {dec.residual_norm:.3g}")
    finish_manifest(out, manifest)
    return EXIT_OK


def decompose_label(label) -> str:
    """Normalized basis label in the expression grammar, e.g. ``2*I1x.I2z``."""
    raw = format_label(label)
    q = len(label)
    return raw if q == 1 else f"{2 ** (q - 1)}*{raw}"


def cmd_gradcheck(args) -> int:
    system, sys_file = _resolve_system(args.system)
    if args.segments < 1:
        raise UsageError("--segments must be >= 1")
    seed = 0 if args.seed is None else args.seed
    rng = np.random.default_rng(seed)
    n = system.n_spins
    prog = random_program(rng, args.segments, args.duration, scale=500.0, amp_max=np.inf)
    region = (min(system.shifts_ppm) - 0.1, max(system.shifts_ppm) + 0.1)
    target = " + ".join(f"I{i}x" for i in range(1, n + 1))
    spec = ObjectiveSpec((
        Task(system.name, "state_fidelity", 1.0, target=target),
        Task(system.name, "enhance_peak", 1e-2, region=SpectralRegion(*region)),
        Task(system.name, "suppress_region", 1e-4, region=SpectralRegion(*region)),
    ), power_weight=1e-7)
    obj = Objective(spec, {system.name: system}, workers=args.threads)
    _, grad = loss_gradient(obj, prog)
    include = ()
    if args.corrupt:
        grad = grad.copy()
        worst_idx = int(np.argmax(np.abs(grad)))
        grad.flat[worst_idx] *= 1.01
        include = (worst_idx,)
    worst, rows = finite_difference_check(obj, prog, step=args.step, n_probes=args.probes,
                                          seed=seed, analytic=grad, return_table=True, include=include)
    ok = worst < GRADCHECK_TOL
    if not args.quiet:
        print(f"gradcheck {system.name}: {args.segments} segments, seed {seed}, step {args.step:g} Hz")
        print(f"{'segment':>8} {'axis':>4} {'analytic':>16} {'numeric':>16} {'rel_err':>10}")
        for seg, ax, a, f, e in rows:
            print(f"{seg:>8d} {ax:>4} {a:>16.9e} {f:>16.9e} {e:>10.2e}")
        print(f"max relative error {worst:.3e} -> {'PASS' if ok else 'FAIL'}")
    if args.out:
        out = _prepare_out(args.out, "")
        write_manifest(out, "gradcheck", {"system": str(sys_file), "segments": args.segments,
                                          "duration_s": args.duration, "step": args.step,
                                          "probes": args.probes, "corrupt": args.corrupt},
                       {"system": sys_file}, seed)
        with open(out / "gradcheck.csv", "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["segment", "axis", "analytic", "numeric", "rel_err"])
            w.writerows(rows)
    return EXIT_OK if ok else EXIT_NUMERICAL


def cmd_export(args) -> int:
    pfile = Path(args.pulse)
    prog = _load_program_file(pfile)
    out = _prepare_out(args.out, "export_output")
    inputs = {"pulse": pfile.resolve()}
    system = None
    if args.system:
        system, sys_file = _resolve_system(args.system)
        inputs["system"] = sys_file
    elif args.fid or args.spectrum:
        raise UsageError("--fid/--spectrum need --system")
    acq = _acquisition(args)
    manifest = write_manifest(out, "export", {"pulse": str(pfile.resolve()), "fid": args.fid,
                                              "spectrum": args.spectrum}, inputs, args.seed)
    write_shape_table(prog, out / "pulse_shape.csv")
    save_program(prog, out / "pulse.yaml")
    if system is not None:
        rho = run_program(system, prog, equilibrium_state(system.n_spins))
        det = Detector(system, acq)
        if args.fid:
            write_fid_csv(det.fid(rho), out / "fid.csv")
        if args.spectrum:
            write_spectrum_csv(det.spectrum(rho), out / "spectrum.csv")
    finish_manifest(out, manifest, outputs=sorted(p.name for p in out.iterdir()))
    _say(args, f"exported to {out}")
    return EXIT_OK


# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--out", help="output directory")
    common.add_argument("--threads", type=int, default=1, help="worker threads (results do not depend on it)")
    common.add_argument("--seed", type=int, default=None, help="random seed")
    common.add_argument("--quiet", action="store_true", help="suppress progress output")

    acq = argparse.ArgumentParser(add_help=False)
    acq.add_argument("--lb", type=float, default=None, help="exponential line broadening, Hz")
    acq.add_argument("--points", type=int, default=4096, help="complex FID points")
    acq.add_argument("--dwell", type=float, default=None, help="dwell time, s")
    acq.add_argument("--zerofill", type=int, default=2, help="zero-fill factor")

    p = argparse.ArgumentParser(prog="spinedit", description=__doc__.strip().splitlines()[0])
    p.add_argument("--version", action="version", version=f"spinedit {__version__}")
    sub = p.add_subparsers(dest="verb", required=True)

    s = sub.add_parser("simulate", parents=[common, acq], help="spectrum of a pulse or a prepared state")
    s.add_argument("--system", required=True)
    s.add_argument("--pulse")
    s.add_argument("--state", help="operator expression; write --state='-4*I1z.I2z.I5x' when it starts with a minus")
    s.add_argument("--fid", action="store_true", help="also write fid.csv")
    s.set_defaults(func=cmd_simulate)

    o = sub.add_parser("optimize", parents=[common], help="optimize a shaped pulse from a run config")
    o.add_argument("--config", required=True)
    o.add_argument("--dry-run", action="store_true", help="validate and print the resolved plan")
    o.add_argument("--resume", action="store_true", help="continue from the checkpoint in the output directory")
    o.set_defaults(func=cmd_optimize)

    a = sub.add_parser("analyze", parents=[common], help="product-operator decomposition of a pulse's output state")
    a.add_argument("--system", required=True)
    a.add_argument("--pulse")
    a.add_argument("--top", type=int, default=10)
    a.set_defaults(func=cmd_analyze)

    g = sub.add_parser("gradcheck", parents=[common], help="compare analytic and finite-difference gradients")
    g.add_argument("--system", default="citrate")
    g.add_argument("--segments", type=int, default=64)
    g.add_argument("--duration", type=float, default=6.4e-3, help="total pulse length, s")
    g.add_argument("--step", type=float, default=1e-3, help="finite-difference step, Hz")
    g.add_argument("--probes", type=int, default=16)
    g.add_argument("--corrupt", action="store_true", help="perturb the analytic gradient (checker self-test)")
    g.set_defaults(func=cmd_gradcheck)

    e = sub.add_parser("export", parents=[common, acq], help="shape table, program file and optional FID/spectrum")
    e.add_argument("--pulse", required=True)
    e.add_argument("--system")
    e.add_argument("--fid", action="store_true")
    e.add_argument("--spectrum", action="store_true")
    e.set_defaults(func=cmd_export)
    return p


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    if args.threads < 1:
        print("error: --threads must be >= 1", file=sys.stderr)
        return EXIT_INVALID
    try:
        return args.func(args)
    except UsageError as exc:
        for msg in exc.messages:
            print(f"error: {msg}", file=sys.stderr)
        return EXIT_INVALID
    except (SpinSystemError, ObjectiveError, CheckpointError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID
    except (NumericalError, np.linalg.LinAlgError, FloatingPointError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID


if __name__ == "__main__":
    sys.exit(main())
