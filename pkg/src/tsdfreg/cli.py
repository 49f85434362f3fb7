"""Command-line pipelines: generate, refine, extract, eval, coverage.

Exit codes: 0 ok, 2 bad input, 3 IO failure, 4 refinement diverged.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import sys
import time
from pathlib import Path

from . import __version__
from .evalkit import coverage, evaluate_protocol, load_cameras
from .normals import load_normals
from .refine import RefineConfig, RefineDiverged, refine
from .surface import load_ply, marching_cubes, save_ply
from .synth import SceneSpec, generate_room, write_bundle
from .volume import (
    GridSpec,
    TsdfVolume,
    VolumeFormatError,
    check_same_grid,
    load_labels,
    load_scalar_field,
    load_volume,
    save_volume,
)

log = logging.getLogger("tsdfreg")

EXIT_OK, EXIT_INPUT, EXIT_IO, EXIT_DIVERGED = 0, 2, 3, 4


class BadInput(Exception):
    pass


def _read_json(path):
    """Parse a JSON file; returns (object, raw bytes)."""
    raw = Path(path).read_bytes()
    try:
        return json.loads(raw.decode("utf-8")), raw
    except json.JSONDecodeError as e:
        raise BadInput(f"{path}:{e.lineno}:{e.colno}: {e.msg}") from None
    except UnicodeDecodeError as e:
        raise BadInput(f"{path}: not UTF-8 text ({e})") from None


def _digest(raw: bytes) -> str:
    return hashlib.sha256(raw).hexdigest()


def _dump(obj, path=None) -> None:
    text = json.dumps(obj, indent=1, sort_keys=True) + "\n"
    if path is None:
        sys.stdout.write(text)
    else:
        Path(path).write_text(text)


def _manifest(command, inputs, config_raw, seed, seconds) -> dict:
    return {
        "command": command,
        "inputs": [str(p) for p in inputs],
        "config_sha256": _digest(config_raw),
        "seed": seed,
        "version": __version__,
        "timing": {"seconds": seconds},
    }


def _write_manifest(args, command, inputs, config_raw, seed, t0):
    if getattr(args, "manifest", None):
        _dump(_manifest(command, inputs, config_raw, seed, time.perf_counter() - t0), args.manifest)


# --------------------------------------------------------------------------
# subcommands

def cmd_generate(args) -> int:
    t0 = time.perf_counter()
    if args.spec is not None:
        obj, raw = _read_json(args.spec)
        try:
            spec = SceneSpec.from_dict(obj)
        except (TypeError, ValueError, KeyError) as e:
            raise BadInput(f"{args.spec}: {e}") from None
    else:
        spec = SceneSpec()
        raw = json.dumps(spec.to_dict(), sort_keys=True).encode()
    if args.seed is not None:
        spec = SceneSpec.from_dict({**spec.to_dict(), "seed": args.seed})
    try:
        bundle = generate_room(spec)
    except ValueError as e:
        raise BadInput(str(e)) from None
    out = Path(args.out)
    files = write_bundle(bundle, out, with_normals=args.gt_normals)
    (out / "scene.json").write_text(json.dumps(spec.to_dict(), indent=1, sort_keys=True) + "\n")
    man = _manifest("generate", [args.spec] if args.spec else [], raw, spec.seed,
                    time.perf_counter() - t0)
    man["outputs"] = files + ["scene.json"]
    _dump(man, out / "manifest.json")
    return EXIT_OK


def cmd_refine(args) -> int:
    t0 = time.perf_counter()
    if args.config is not None:
        obj, raw = _read_json(args.config)
        try:
            cfg = RefineConfig.from_dict(obj)
        except (TypeError, ValueError) as e:
            raise BadInput(f"{args.config}: {e}") from None
    else:
        cfg = RefineConfig()
        raw = json.dumps(cfg.to_dict(), sort_keys=True).encode()
    if args.seed is not None:
        cfg = RefineConfig.from_dict({**cfg.to_dict(), "seed": args.seed})
    if cfg.weights.lambda_fawn > 0 and args.sem is None:
        raise BadInput("lambda_fawn > 0 requires --sem")

    obs = load_volume(args.tsdf)
    if args.weights is not None:
        wspec, w = load_scalar_field(args.weights)
        check_same_grid(obs.spec, wspec)
        obs = TsdfVolume(obs.spec, obs.values, w)
    sem = load_labels(args.sem) if args.sem else None
    gtn = load_normals(args.gt_normals) if args.gt_normals else None
    try:
        vol, report = refine(obs, obs, sem, gtn, cfg)
    except RefineDiverged as e:
        last = e.report.trajectory[-1].to_dict() if e.report.trajectory else None
        sys.stderr.write(f"refinement diverged: {e}\n")
        sys.stderr.write(json.dumps({"last_finite": last}, sort_keys=True) + "\n")
        if args.report:
            _dump({**e.report.to_dict(), "error": str(e)}, args.report)
        return EXIT_DIVERGED
    save_volume(vol, args.out)
    if args.report:
        _dump(report.to_dict(), args.report)
    inputs = [p for p in (args.tsdf, args.sem, args.gt_normals, args.weights, args.config) if p]
    _write_manifest(args, "refine", inputs, raw, cfg.seed, t0)
    return EXIT_OK


def cmd_extract(args) -> int:
    t0 = time.perf_counter()
    vol = load_volume(args.tsdf)
    mesh = marching_cubes(vol, args.iso)
    save_ply(mesh, args.out, binary=not args.ascii)
    _write_manifest(args, "extract", [args.tsdf], f"iso={args.iso!r}".encode(), None, t0)
    return EXIT_OK


def _load_grid(path) -> GridSpec:
    obj, _ = _read_json(path)
    try:
        return GridSpec.from_dict(obj)
    except (TypeError, ValueError, KeyError) as e:
        raise BadInput(f"{path}: {e}") from None


def _load_cams(path):
    try:
        return load_cameras(path)
    except json.JSONDecodeError as e:
        raise BadInput(f"{path}:{e.lineno}:{e.colno}: {e.msg}") from None
    except (TypeError, ValueError, KeyError) as e:
        raise BadInput(f"{path}: {e}") from None


def cmd_eval(args) -> int:
    t0 = time.perf_counter()
    pred = load_ply(args.pred)
    gt = load_ply(args.gt)
    cams = _load_cams(args.cams)
    grid = _load_grid(args.grid)
    if gt.is_empty:
        raise BadInput(f"{args.gt}: ground-truth mesh is empty")
    rep = evaluate_protocol(pred, gt, cams, grid, n_sample=args.samples, seed=args.seed,
                            threshold=args.threshold, max_depth=args.max_depth)
    _dump(rep.to_dict(), args.out)
    flags = json.dumps({"samples": args.samples, "threshold": args.threshold,
                        "max_depth": args.max_depth}, sort_keys=True).encode()
    _write_manifest(args, "eval", [args.pred, args.gt, args.cams, args.grid], flags, args.seed, t0)
    return EXIT_OK


def cmd_coverage(args) -> int:
    t0 = time.perf_counter()
    mesh = load_ply(args.mesh)
    cams = _load_cams(args.cams)
    value = coverage(mesh, cams, args.max_depth)
    _dump({"coverage_pct": value, "frames": len(cams)}, args.out)
    _write_manifest(args, "coverage", [args.mesh, args.cams],
                    f"max_depth={args.max_depth!r}".encode(), None, t0)
    return EXIT_OK


# --------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="tsdfreg", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--threads", type=int, default=None,
                        help="cap on worker threads (default: available cores)")
    common.add_argument("-v", "--verbose", action="store_true", help="debug logging to stderr")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("generate", parents=[common], help="write a synthetic scene bundle")
    g.add_argument("--spec", help="scene JSON (default scene when omitted)")
    g.add_argument("--out", required=True, help="output directory")
    g.add_argument("--seed", type=int, help="override the scene seed")
    g.add_argument("--gt-normals", action="store_true", help="also write gt_normals.fvec")
    g.set_defaults(func=cmd_generate)

    r = sub.add_parser("refine", parents=[common], help="refine an observed TSDF volume")
    r.add_argument("--tsdf", required=True, help="observed volume (.fvol), also the initial guess")
    r.add_argument("--sem", help="semantic labels (.fsem); required when lambda_fawn > 0")
    r.add_argument("--gt-normals", help="reference normals (.fvec) for the supervised terms")
    r.add_argument("--weights", help="observation weights (.fvol payload); default all ones")
    r.add_argument("--config", help="refinement config JSON (defaults when omitted)")
    r.add_argument("--seed", type=int, help="override the config seed")
    r.add_argument("--out", required=True, help="refined volume (.fvol)")
    r.add_argument("--report", help="per-iteration loss report (JSON)")
    r.add_argument("--manifest", help="run manifest (JSON)")
    r.set_defaults(func=cmd_refine)

    e = sub.add_parser("extract", parents=[common], help="extract an iso-surface mesh")
    e.add_argument("--tsdf", required=True, help="input volume (.fvol)")
    e.add_argument("--iso", type=float, default=0.0, help="iso-value in meters (default 0)")
    e.add_argument("--out", required=True, help="output mesh (.ply)")
    e.add_argument("--ascii", action="store_true", help="write ASCII PLY")
    e.add_argument("--manifest", help="run manifest (JSON)")
    e.set_defaults(func=cmd_extract)

    v = sub.add_parser("eval", parents=[common], help="render-fuse-compare evaluation")
    v.add_argument("--pred", required=True, help="predicted mesh (.ply)")
    v.add_argument("--gt", required=True, help="ground-truth mesh (.ply)")
    v.add_argument("--cams", required=True, help="cameras JSON")
    v.add_argument("--grid", required=True, help="fusion grid JSON")
    v.add_argument("--samples", type=int, default=100_000, help="points sampled per mesh")
    v.add_argument("--seed", type=int, default=0, help="sampling seed")
    v.add_argument("--threshold", type=float, default=0.05, help="precision/recall distance (m)")
    v.add_argument("--max-depth", type=float, default=None, help="ignore hits beyond this depth")
    v.add_argument("--out", help="metrics JSON (default: standard output)")
    v.add_argument("--manifest", help="run manifest (JSON)")
    v.set_defaults(func=cmd_eval)

    c = sub.add_parser("coverage", parents=[common], help="mean percentage of valid rendered pixels")
    c.add_argument("--mesh", required=True, help="mesh (.ply)")
    c.add_argument("--cams", required=True, help="cameras JSON")
    c.add_argument("--max-depth", type=float, default=None, help="ignore hits beyond this depth")
    c.add_argument("--out", help="JSON output (default: standard output)")
    c.add_argument("--manifest", help="run manifest (JSON)")
    c.set_defaults(func=cmd_coverage)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    if args.threads is not None:
        if args.threads < 1:
            sys.stderr.write("--threads must be >= 1\n")
            return EXIT_INPUT
        import numba
        # probe the portable layers first; old TBB installs only produce a warning
        numba.config.THREADING_LAYER_PRIORITY = ["omp", "workqueue", "tbb"]
        numba.set_num_threads(min(args.threads, numba.config.NUMBA_NUM_THREADS))
    try:
        return args.func(args)
    except (BadInput, VolumeFormatError) as e:
        sys.stderr.write(f"error: {e}\n")
        return EXIT_INPUT
    except ValueError as e:
        # grid mismatches and contract violations on loaded data
        sys.stderr.write(f"error: {e}\n")
        return EXIT_INPUT
    except OSError as e:
        sys.stderr.write(f"io error: {e}\n")
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
