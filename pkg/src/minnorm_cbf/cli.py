"""Command-line entry point: ``minnorm-cbf <subcommand> SPEC ...``.

Exit codes: 0 success, 2 bad flags, 3 spec load, 4 sweep, 5 Z location,
6 boundedness test, 7 ray probe, 8 simulation, 9 weakness probe, 10 output.
"""
from __future__ import annotations

import argparse
import json
import math
import sys
from importlib import resources
from pathlib import Path
from typing import Any

import numpy as np

from . import __version__
from .boundedness import (
    AllUndefined,
    assemble_test_matrix,
    decide_boundedness,
    inevitability_check,
    ray_probe,
    reference_directions,
)
from .model import SCHEMA_VERSION, dump_model, load_model, sweep_grid, write_sweep_csv
from .simulate import EVENT_BITS, hazard_scan, simulate, write_trajectory_csv
from .zset import default_seed_count, locate_zset, probe_weakness

EXIT = {"usage": 2, "load": 3, "sweep": 4, "zset": 5, "test": 6, "probe": 7, "simulate": 8, "weakness": 9, "output": 10}

LIPSCHITZ_NOTE = "Z is empty: min-norm controller locally Lipschitz on C"


class StageError(RuntimeError):
    def __init__(self, stage: str, cause: Exception):
        self.stage = stage
        self.cause = cause
        super().__init__(f"{stage}: {type(cause).__name__}: {cause}")


# -- JSON with 17 significant digits ---------------------------------------


def _encode(obj: Any, indent: int, level: int) -> str:
    pad = " " * (indent * (level + 1))
    end = " " * (indent * level)
    if obj is None or isinstance(obj, (bool, np.bool_)):
        return "null" if obj is None else ("true" if obj else "false")
    if isinstance(obj, (int, np.integer)):
        return str(int(obj))
    if isinstance(obj, (float, np.floating)):
        v = float(obj) + 0.0  # drops the sign of -0.0
        return format(v, ".17g") if math.isfinite(v) else "null"
    if isinstance(obj, str):
        return json.dumps(obj)
    if isinstance(obj, np.ndarray):
        return _encode(obj.tolist(), indent, level)
    if isinstance(obj, dict):
        if not obj:
            return "{}"
        items = [f"{pad}{_encode(str(k), indent, level + 1)}: {_encode(v, indent, level + 1)}" for k, v in obj.items()]
        return "{\n" + ",\n".join(items) + "\n" + end + "}"
    if isinstance(obj, (list, tuple)):
        if not obj:
            return "[]"
        if all(isinstance(x, (int, float, np.number)) or x is None for x in obj):
            return "[" + ", ".join(_encode(x, indent, level + 1) for x in obj) + "]"
        return "[\n" + ",\n".join(pad + _encode(x, indent, level + 1) for x in obj) + "\n" + end + "]"
    if hasattr(obj, "value") and isinstance(obj.value, str):
        return _encode(obj.value, indent, level)
    raise TypeError(f"cannot serialize {type(obj).__name__}")


def dumps(obj: Any, indent: int = 2) -> str:
    return _encode(obj, indent, 0) + "\n"


def _emit(payload: Any, out: str | None) -> None:
    text = dumps(payload)
    if out is None:
        sys.stdout.write(text)
        return
    try:
        Path(out).parent.mkdir(parents=True, exist_ok=True)
        Path(out).write_text(text)
    except OSError as exc:
        raise StageError("output", exc) from exc


# -- spec resolution ------------------------------------------------------


def builtin_specs() -> list[str]:
    return sorted(p.name[:-5] for p in resources.files("minnorm_cbf.specs").iterdir() if p.name.endswith(".json"))


def resolve_spec(spec: str) -> Path:
    if spec.startswith("builtin:"):
        name = spec.split(":", 1)[1]
        path = resources.files("minnorm_cbf.specs") / f"{name}.json"
        if not path.is_file():
            raise FileNotFoundError(f"no builtin spec {name!r}; available: {', '.join(builtin_specs())}")
        return Path(str(path))
    return Path(spec)


def _load(spec: str):
    try:
        return load_model(resolve_spec(spec))
    except Exception as exc:
        raise StageError("load", exc) from exc


# -- pipeline pieces ------------------------------------------------------


def verdict_payload(model, barrier, x_bar) -> tuple[dict, Any, Any]:
    T = assemble_test_matrix(model, barrier, x_bar)
    V = decide_boundedness(T)
    inev = inevitability_check(T)
    payload = {"x_bar": T.x_bar, "A": T.A, **V.to_dict(), "inevitability": inev.value}
    return payload, T, V


def _probe_or_error(model, barrier, x_bar, v, t_max, samples):
    try:
        return ray_probe(model, barrier, x_bar, v, t_max, samples).to_dict()
    except AllUndefined as exc:
        return {"v": np.asarray(v).tolist(), "error": str(exc)}


def cmd_analyze(spec: str, out_dir: str, seeds: int | None = None, tol: float = 1e-10,
                resolution: int = 201, seed: int = 42, jobs: int = 1,
                t_max: float = 0.01, samples: int = 12) -> dict:
    model, barrier = _load(spec)
    out = Path(out_dir)
    rng = np.random.default_rng(seed)
    try:
        strength = probe_weakness(model, barrier, rng=rng)
    except Exception as exc:
        raise StageError("weakness", exc) from exc
    try:
        zpoints = locate_zset(model, barrier, seeds, tol, jobs=jobs)
    except Exception as exc:
        raise StageError("zset", exc) from exc

    points = []
    for zp in zpoints:
        try:
            payload, T, V = verdict_payload(model, barrier, zp.x)
        except Exception as exc:
            raise StageError("test", exc) from exc
        try:
            cert = None
            if V.certificate is not None:
                cert = _probe_or_error(model, barrier, zp.x, V.certificate, t_max, samples)
            refs = [_probe_or_error(model, barrier, zp.x, d, t_max, samples) for d in reference_directions(T)]
        except Exception as exc:
            raise StageError("probe", exc) from exc
        points.append({"z": zp.to_dict(), "verdict": payload, "probes": {"certificate": cert, "reference": refs}})

    notes = []
    if not zpoints:
        notes.append(LIPSCHITZ_NOTE)
    if strength.classification.value == "EvidenceWeak" and not zpoints:
        notes.append("weakness evidence found but no Z point located; increase --seeds")

    sweep_name = "sweep.csv"
    try:
        fixed = {i: float(barrier.domain_box[i].mean()) for i in range(2, model.n)}
        result = sweep_grid(model, barrier, resolution, fixed=fixed, jobs=jobs)
    except Exception as exc:
        raise StageError("sweep", exc) from exc
    try:
        out.mkdir(parents=True, exist_ok=True)
        write_sweep_csv(result, out / sweep_name)
    except OSError as exc:
        raise StageError("output", exc) from exc

    bundle = {
        "toolkit_version": __version__,
        "schema_version": SCHEMA_VERSION,
        "spec": dump_model(model, barrier),
        "settings": {"seed": seed, "seeds": seeds or default_seed_count(model.n), "tol": tol,
                     "resolution": resolution, "t_max": t_max, "samples": samples},
        "strength": strength.to_dict(),
        "zset": [z.to_dict() for z in zpoints],
        "points": points,
        "sweep_csv": sweep_name,
        "cbf_violations_in_sweep": len(result.violations),
        "notes": notes,
    }
    _emit(bundle, str(out / "bundle.json"))
    return bundle


def cmd_sweep(spec, resolution, out_csv, jobs=1):
    model, barrier = _load(spec)
    try:
        fixed = {i: float(barrier.domain_box[i].mean()) for i in range(2, model.n)}
        result = sweep_grid(model, barrier, resolution, fixed=fixed, jobs=jobs)
    except Exception as exc:
        raise StageError("sweep", exc) from exc
    try:
        write_sweep_csv(result, out_csv if out_csv else sys.stdout)
    except OSError as exc:
        raise StageError("output", exc) from exc
    return result


def cmd_zset(spec, seeds, tol, out_json, jobs=1):
    model, barrier = _load(spec)
    try:
        zpoints = locate_zset(model, barrier, seeds, tol, jobs=jobs)
    except Exception as exc:
        raise StageError("zset", exc) from exc
    payload = [z.to_dict() for z in zpoints]
    _emit(payload, out_json)
    return payload


def cmd_weakness(spec, scales, samples, seed, out_json):
    model, barrier = _load(spec)
    try:
        report = probe_weakness(model, barrier, scales, samples, rng=np.random.default_rng(seed))
    except Exception as exc:
        raise StageError("weakness", exc) from exc
    payload = report.to_dict()
    _emit(payload, out_json)
    return payload


def cmd_test_point(spec, x_bar, out_json):
    model, barrier = _load(spec)
    try:
        payload, _, _ = verdict_payload(model, barrier, np.asarray(x_bar, dtype=float))
    except Exception as exc:
        raise StageError("test", exc) from exc
    _emit(payload, out_json)
    return payload


def cmd_probe(spec, x_bar, v, t_max, samples, out_json):
    model, barrier = _load(spec)
    try:
        v = np.asarray(v, dtype=float)
        payload = ray_probe(model, barrier, x_bar, v / np.linalg.norm(v), t_max, samples).to_dict()
    except Exception as exc:
        raise StageError("probe", exc) from exc
    _emit(payload, out_json)
    return payload


def cmd_simulate(spec, x0, t_final, dt, u_cap, out_csv, adaptive=False, hazard_radius=0.0, seeds=None):
    model, barrier = _load(spec)
    try:
        traj = simulate(model, barrier, np.asarray(x0, dtype=float), t_final, dt=dt, adaptive=adaptive, u_cap=u_cap)
        windows = []
        if hazard_radius > 0:
            windows = hazard_scan(traj, locate_zset(model, barrier, seeds), hazard_radius)
    except Exception as exc:
        raise StageError("simulate", exc) from exc
    sidecar = {
        "event_bits": {k.value: bit for k, bit in EVENT_BITS.items()},
        "events": [e.to_dict() for e in traj.events],
        "hazard_windows": [w.to_dict() for w in windows],
        "min_h": float(traj.h_values.min()),
        "discrete_cbf_holds": traj.discrete_cbf_holds(barrier.alpha),
    }
    if out_csv:
        try:
            write_trajectory_csv(traj, out_csv)
        except OSError as exc:
            raise StageError("output", exc) from exc
        _emit(sidecar, str(Path(out_csv).with_suffix(".events.json")))
    else:
        _emit(sidecar, None)
    return traj


# -- argument parsing -----------------------------------------------------


def _positive_int(text):
    v = int(text)
    if v < 1:
        raise argparse.ArgumentTypeError("must be a positive integer")
    return v


def _positive_float(text):
    v = float(text)
    if not v > 0:
        raise argparse.ArgumentTypeError("must be positive")
    return v


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="minnorm-cbf", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version",
                   version=f"minnorm-cbf {__version__} (spec schema {SCHEMA_VERSION})")
    sub = p.add_subparsers(dest="command", required=True)

    def add_spec(sp):
        sp.add_argument("spec", help="system spec JSON path, or builtin:<name>")

    a = sub.add_parser("analyze", help="full pipeline; writes bundle.json and sweep.csv")
    add_spec(a)
    a.add_argument("--out-dir", required=True)
    a.add_argument("--seeds", type=_positive_int, default=None)
    a.add_argument("--tol", type=_positive_float, default=1e-10)
    a.add_argument("--resolution", type=_positive_int, default=201)
    a.add_argument("--t-max", type=_positive_float, default=0.01)
    a.add_argument("--samples", type=_positive_int, default=12)
    a.add_argument("--seed", type=int, default=42)
    a.add_argument("--jobs", type=_positive_int, default=1)

    s = sub.add_parser("sweep", help="controller magnitude grid as CSV")
    add_spec(s)
    s.add_argument("--resolution", type=_positive_int, default=201)
    s.add_argument("--out", default=None)
    s.add_argument("--jobs", type=_positive_int, default=1)

    z = sub.add_parser("zset", help="locate Z")
    add_spec(z)
    z.add_argument("--seeds", type=_positive_int, default=None)
    z.add_argument("--tol", type=_positive_float, default=1e-10)
    z.add_argument("--out", default=None)
    z.add_argument("--jobs", type=_positive_int, default=1)

    w = sub.add_parser("weakness", help="sample for weak-CBF evidence")
    add_spec(w)
    w.add_argument("--scales", type=_positive_float, nargs="+", default=[1e-2, 1e-3, 1e-4])
    w.add_argument("--samples", type=_positive_int, default=32)
    w.add_argument("--seed", type=int, default=42)
    w.add_argument("--out", default=None)

    t = sub.add_parser("test-point", help="assemble A and decide boundedness at a Z point")
    add_spec(t)
    t.add_argument("--x", type=float, nargs="+", required=True)
    t.add_argument("--out", default=None)

    r = sub.add_parser("probe", help="sample |u*| along a ray x + v t")
    add_spec(r)
    r.add_argument("--x", type=float, nargs="+", required=True)
    r.add_argument("--v", type=float, nargs="+", required=True)
    r.add_argument("--t-max", type=_positive_float, default=0.01)
    r.add_argument("--samples", type=int, default=12)
    r.add_argument("--out", default=None)

    m = sub.add_parser("simulate", help="closed-loop trajectory CSV plus events sidecar")
    add_spec(m)
    m.add_argument("--x0", type=float, nargs="+", required=True)
    m.add_argument("--t-final", type=_positive_float, default=10.0)
    m.add_argument("--dt", type=_positive_float, default=1e-3)
    m.add_argument("--u-cap", type=_positive_float, default=None)
    m.add_argument("--adaptive", action="store_true")
    m.add_argument("--hazard-radius", type=float, default=0.0)
    m.add_argument("--out", default=None)

    sub.add_parser("specs", help="list builtin specs")
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        if args.command == "specs":
            for name in builtin_specs():
                print(f"builtin:{name}")
        elif args.command == "analyze":
            cmd_analyze(args.spec, args.out_dir, args.seeds, args.tol, args.resolution,
                        args.seed, args.jobs, args.t_max, args.samples)
        elif args.command == "sweep":
            cmd_sweep(args.spec, args.resolution, args.out, args.jobs)
        elif args.command == "zset":
            cmd_zset(args.spec, args.seeds, args.tol, args.out, args.jobs)
        elif args.command == "weakness":
            cmd_weakness(args.spec, args.scales, args.samples, args.seed, args.out)
        elif args.command == "test-point":
            cmd_test_point(args.spec, args.x, args.out)
        elif args.command == "probe":
            if len(args.x) != len(args.v):
                parser.error("--x and --v must have the same length")
            if args.samples < 8:
                parser.error("--samples must be at least 8")
            cmd_probe(args.spec, args.x, args.v, args.t_max, args.samples, args.out)
        elif args.command == "simulate":
            if args.hazard_radius < 0:
                parser.error("--hazard-radius must be nonnegative")
            cmd_simulate(args.spec, args.x0, args.t_final, args.dt, args.u_cap, args.out,
                         args.adaptive, args.hazard_radius)
    except StageError as exc:
        print(f"error in stage {exc}", file=sys.stderr)
        return EXIT[exc.stage]
    return 0


if __name__ == "__main__":
    sys.exit(main())
