"""Command-line interface.

Every command writes its products into ``--out DIR`` together with a
``manifest.json`` recording the arguments, the resolved configuration (and
where each value came from), input and output digests, versions and wall
time.  ``polardepth rerun DIR/manifest.json`` repeats a run into a scratch
directory and checks that every output is byte-identical.

Exit codes: 0 success (possibly with per-region failures), 1 usage,
2 data integrity, 3 numerical failure.
"""
from __future__ import annotations

import argparse
import csv
import json
import os
import platform
import shutil
import sys
import tempfile
import time
from pathlib import Path

import numpy as np
import scipy
import yaml

from . import __version__
from .core import (
    CameraSpec,
    FormatError,
    IntegrityError,
    ScalarMap,
    desk_camera,
    export_png,
    file_digest,
    load_field,
    save_field,
    wrap_angle,
)
from .depthdiff import CalibrationError, NoSignal, calibrate, read_calibration_csv, write_calibration_csv
from .fusion import FusionConfig, FusionError, load_material_table, reconstruct, upsample
from .optics import (
    WORKING_ZETA,
    DegeneratePSF,
    FresnelZoneParams,
    PhaseProfile,
    depth_from_defocus,
    fresnel_zone_phase,
    pupil_grid,
    quantize_phase,
)
from .polarization import dolp_curves
from .psfopt import OptimizationConfig, design_schedule, designed_phase, edge_weighted, optimize_phase, write_report_csv
from .simulator import (
    GroundTruth,
    SceneConfigError,
    apply_depth_psf,
    build_camera,
    demosaic,
    load_scene,
    mosaic,
    rasterize,
    render_polarization,
)

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3
MANIFEST = "manifest.json"


class UsageError(Exception):
    pass


class DataError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    """argparse exits with 2 on bad arguments; usage errors here are 1."""

    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


# ------------------------------------------------------------------ helpers

class _Run:
    """Collects what a command read, wrote and decided, for its manifest."""

    def __init__(self, command: str, argv: list, out: Path):
        self.command = command
        self.argv = list(argv)
        self.out = out
        self.inputs: dict = {}
        self.config: dict = {}
        self.seed = None
        self.t0 = time.perf_counter()

    def input(self, path) -> Path:
        path = Path(path)
        if not path.exists():
            raise UsageError(f"input not found: {path}")
        if path.is_dir():
            for p in sorted(path.rglob("*")):
                if p.is_file():
                    self.inputs[str(p.resolve())] = file_digest(p)
        else:
            self.inputs[str(path.resolve())] = file_digest(path)
        return path

    def resolve(self, flags: dict, file_cfg: dict, defaults: dict) -> dict:
        """Flag over file over default; records the winner's source per key."""
        values = {}
        for key, default in defaults.items():
            if flags.get(key) is not None:
                values[key], src = flags[key], "flag"
            elif key in file_cfg:
                values[key], src = file_cfg[key], "file"
            else:
                values[key], src = default, "default"
            self.config[key] = {"value": _jsonable(values[key]), "source": src}
        return values

    def finish(self) -> Path:
        outputs = {str(p.relative_to(self.out)): file_digest(p)
                   for p in sorted(self.out.rglob("*")) if p.is_file() and p.name != MANIFEST}
        manifest = {
            "command": self.command,
            "argv": self.argv,
            "cwd": str(Path.cwd()),
            "out": str(self.out),
            "config": self.config,
            "seed": self.seed,
            "inputs": self.inputs,
            "outputs": outputs,
            "tool": {"polardepth": __version__, "numpy": np.__version__, "scipy": scipy.__version__,
                     "python": platform.python_version()},
            "wall_time_s": round(time.perf_counter() - self.t0, 3),
        }
        path = self.out / MANIFEST
        path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
        return path


def _jsonable(v):
    if isinstance(v, tuple):
        return list(v)
    if isinstance(v, Path):
        return str(v)
    return v


def _read_config(path) -> dict:
    if path is None:
        return {}
    path = Path(path)
    if not path.exists():
        raise UsageError(f"config not found: {path}")
    try:
        data = yaml.safe_load(path.read_text(encoding="utf-8"))
    except yaml.YAMLError as exc:
        raise UsageError(f"{path}: not valid YAML/JSON: {exc}") from None
    if data is None:
        return {}
    if not isinstance(data, dict):
        raise UsageError(f"{path}: config must be a mapping")
    return data


def _out_dir(path) -> Path:
    out = Path(path)
    if out.exists() and not out.is_dir():
        raise UsageError(f"--out must be a directory, {out} is a file")
    out.mkdir(parents=True, exist_ok=True)
    return out


def _camera(run: _Run, path, width=None, height=None) -> CameraSpec:
    if path is None:
        cam = desk_camera()
    else:
        run.input(path)
        try:
            d = desk_camera().to_dict()
            d.update(json.loads(Path(path).read_text()))
            cam = CameraSpec.from_dict(d)
        except (json.JSONDecodeError, KeyError, TypeError) as exc:
            raise UsageError(f"{path}: bad camera description: {exc}") from None
    if width is not None:
        cam = cam.with_sensor(width, height)
    return cam


def _load_phase(run: _Run, path, cam: CameraSpec, size: int) -> PhaseProfile:
    if path is None:
        return designed_phase(cam, size)
    m = load_field(run.input(path))
    if not isinstance(m, ScalarMap) or m.semantics != "angle":
        raise DataError(f"{path} does not hold a phase map")
    return PhaseProfile.from_map(m)


def _save_phase(path, phase: PhaseProfile) -> Path:
    return save_field(path, phase.as_map())


# ------------------------------------------------------------------ psf

def cmd_psf(args, run: _Run) -> int:
    file_cfg = _read_config(args.config)
    if args.config:
        run.input(args.config)
    cam = _camera(run, args.camera)
    if args.action == "design":
        v = run.resolve({"N": args.N, "L": args.L, "eps": args.eps, "size": args.size, "levels": args.levels},
                        file_cfg, {"N": 2, "L": 12, "eps": 0.8, "size": 512, "levels": None})
        try:
            params = FresnelZoneParams(int(v["N"]), int(v["L"]), float(v["eps"]))
        except ValueError as exc:
            flag = next((f for word, f in (("foci", "N"), ("zones", "L"), ("exponent", "eps")) if word in str(exc)),
                        "N/--L/--eps")
            raise UsageError(f"--{flag}: {exc}") from None
        grid, radius = pupil_grid(cam, int(v["size"]))
        phase = fresnel_zone_phase(params, grid, radius)
        if v["levels"] is not None:
            phase = quantize_phase(phase, int(v["levels"]))
        _save_phase(run.out / "phase.emf", phase)
        return EXIT_OK

    if args.action == "optimize":
        flags = {"iterations": args.iters, "count": args.count, "zeta_max": args.zeta_max,
                 "edge_factor": args.edge_factor, "size": args.size}
        defaults = {"iterations": 10, "count": 9, "zeta_max": WORKING_ZETA, "edge_factor": 2.0, "size": 512}
    else:
        flags = {"count": args.count, "zeta_max": args.zeta_max, "size": args.size}
        defaults = {"count": 161, "zeta_max": WORKING_ZETA, "size": 512}
    v = run.resolve(flags, file_cfg, defaults)
    count = int(v["count"])
    if count < 1:
        raise UsageError("count must be >= 1")
    if args.phase is None and args.action == "optimize":
        grid, radius = pupil_grid(cam, int(v["size"]))
        initial = fresnel_zone_phase(FresnelZoneParams(), grid, radius)
    else:
        initial = _load_phase(run, args.phase, cam, int(v["size"]))

    if args.action == "optimize":
        schedule = design_schedule(cam, count, float(v["zeta_max"]))
        try:
            cfg = OptimizationConfig(schedule.depths, tuple(edge_weighted(count, float(v["edge_factor"]))),
                                     iterations=int(v["iterations"]))
        except ValueError as exc:
            raise UsageError(str(exc)) from None
        phase, report = optimize_phase(initial, cam, cfg)
        _save_phase(run.out / "phase.emf", phase)
        write_report_csv(run.out / "quality.csv", report)
        return EXIT_OK

    if count < 5:
        raise UsageError("sweep needs count >= 5")
    depths = depth_from_defocus(np.linspace(-float(v["zeta_max"]), float(v["zeta_max"]), count), cam)
    calib = calibrate(initial, cam, depths)
    write_calibration_csv(run.out / "calibration.csv", calib)
    return EXIT_OK


# ------------------------------------------------------------------ simulate

def cmd_simulate(args, run: _Run) -> int:
    run.input(args.scene)
    scene = load_scene(args.scene)
    cam = build_camera(scene)
    v = run.resolve({"slices": args.slices, "photons": args.photons, "seed": args.noise_seed,
                     "impulse_psf": True if args.impulse_psf else None,
                     "mosaic": True if args.mosaic else None,
                     "blend": False if args.hard_slices else None},
                    {"seed": scene.seed, **({"photons": scene.photons} if scene.photons is not None else {})},
                    {"slices": 16, "photons": None, "seed": 0, "impulse_psf": False, "mosaic": False,
                     "blend": True})
    if int(v["slices"]) < 1:
        raise UsageError("--slices must be >= 1")
    run.seed = int(v["seed"])
    truth = rasterize(scene, cam)
    ideal = render_polarization(scene, cam, truth)
    phase = None if v["impulse_psf"] else _load_phase(run, args.phase, cam, 512)
    blurred = apply_depth_psf(ideal, truth, phase, cam, slices=int(v["slices"]), photons=v["photons"],
                              seed=int(v["seed"]), blend=bool(v["blend"]))
    out = run.out
    save_field(out / "ideal.emf", ideal)
    save_field(out / "blurred.emf", blurred)
    capture = blurred
    if v["mosaic"]:
        raw = mosaic(blurred)
        save_field(out / "mosaic.emf", raw)
        capture = demosaic(raw)
    save_field(out / "capture.emf", capture)
    truth.save(out / "truth")
    (out / "camera.json").write_text(json.dumps(cam.to_dict(), indent=2, sort_keys=True) + "\n")
    if args.png:
        s0 = capture.s0
        export_png(out / "capture_s0.png", s0, 0.0, max(float(s0.max()), 1e-12))
        d = truth.depth[truth.hit]
        if d.size and d.max() > d.min():
            export_png(out / "truth_depth.png", np.where(truth.hit, truth.depth, d.max()), d.min(), d.max())
    return EXIT_OK


# ------------------------------------------------------------------ reconstruct

_FUSION_FLAGS = {"downsample": "downsample", "cl_threshold": "cl_threshold", "gdolp_threshold": "gdolp_threshold",
                 "dcd_threshold": "dcd_threshold", "sigma": "completion_sigma"}


def _truth_bundle(run: _Run, path):
    """Ground-truth depth and ids from a simulator truth directory or a result bundle."""
    path = run.input(path)
    if (path / "truth_depth.emf").exists():
        truth = GroundTruth.load(path)
        return truth.grid, np.where(truth.hit, truth.depth, 0.0), truth.ident, truth
    if (path / "i_absolute.emf").exists():
        dm = load_field(path / "i_absolute.emf")
        depth = np.where(dm.void, 0.0, np.asarray(dm.depth, float))
        return dm.grid, depth, (depth > 0).astype(int), None
    raise DataError(f"{path} holds neither a ground truth nor a reconstruction")


def cmd_reconstruct(args, run: _Run) -> int:
    if args.calibration is None:
        raise UsageError("--calibration is required")
    stack_path = run.input(args.stack)
    calib = read_calibration_csv(run.input(args.calibration))
    stack = load_field(stack_path)
    if not hasattr(stack, "i135"):
        raise DataError(f"{stack_path} is not a four-channel polarization stack")
    cam_path = args.camera
    if cam_path is None and (stack_path.parent / "camera.json").exists():
        cam_path = stack_path.parent / "camera.json"
    cam = _camera(run, cam_path, stack.grid.width, stack.grid.height)
    file_cfg = _read_config(args.config)
    if args.config:
        run.input(args.config)
    flags = {field: getattr(args, flag) for flag, field in _FUSION_FLAGS.items()}
    values = run.resolve(flags, file_cfg, FusionConfig().to_dict())
    try:
        cfg = FusionConfig.from_dict(values)
    except (TypeError, ValueError) as exc:
        raise UsageError(f"fusion config: {exc}") from None
    unknown = sorted(set(file_cfg) - set(FusionConfig().to_dict()))
    if unknown:
        raise UsageError(f"fusion config: unknown key(s) {', '.join(unknown)}")
    masks = None
    if args.masks:
        m = load_field(run.input(args.masks))
        masks = np.asarray(m.values)
        h, w = stack.grid.height // cfg.downsample, stack.grid.width // cfg.downsample
        if masks.shape == stack.grid.shape:
            c = cfg.downsample // 2
            masks = masks[c::cfg.downsample, c::cfg.downsample][:h, :w]
        if masks.shape != (h, w):
            raise DataError(f"mask shape {masks.shape} matches neither the image nor the {h}x{w} region grid")
        masks = np.rint(masks).astype(np.int64)
    materials = load_material_table(run.input(args.materials)) if args.materials else None
    result = reconstruct(stack, calib, cam, cfg, masks=masks, materials=materials)
    truth_dir = args.truth
    if truth_dir is None and (stack_path.parent / "truth").is_dir():
        truth_dir = stack_path.parent / "truth"
    if truth_dir is not None:
        grid, depth, ident, _ = _truth_bundle(run, truth_dir)
        if grid.shape != stack.grid.shape:
            raise DataError(f"truth grid {grid.shape} does not match the stack {stack.grid.shape}")
        result.evaluate(depth, ident)
    result.save(run.out)
    if args.png:
        a = result.absolute
        d = a.depth[~a.void]
        if d.size and d.max() > d.min():
            export_png(run.out / "absolute_depth.png", np.where(a.void, d.max(), a.depth), d.min(), d.max())
    for r in result.regions:
        print(f"region {r.rid}: {r.status} n_s={r.n_s:.4f} dcd={r.dcd}")
    return EXIT_OK


# ------------------------------------------------------------------ evaluate

def cmd_evaluate(args, run: _Run) -> int:
    res_dir = run.input(args.result)
    if not (res_dir / "i_absolute.emf").exists():
        raise DataError(f"{res_dir} is not a reconstruction bundle")
    est = load_field(res_dir / "i_absolute.emf")
    normals = load_field(res_dir / "h_normals.emf")
    labels_map = load_field(res_dir / "e_regions.emf")
    grid, tdepth, tid, truth = _truth_bundle(run, args.truth)
    if grid.shape != est.grid.shape:
        raise DataError(f"grid mismatch: result {est.grid.shape} vs truth {grid.shape}")
    fitted = {}
    mpath = res_dir / "metrics.csv"
    if mpath.exists():
        for row in csv.DictReader(mpath.read_text().splitlines()):
            fitted[int(row["rid"])] = float(row["n_s"]) if row["n_s"] not in ("", "nan") else float("nan")
    labels = np.rint(np.asarray(labels_map.values)).astype(int)
    factor = max(1, int(round(labels_map.grid.pitch / est.grid.pitch)))
    full_labels = upsample(labels, grid.shape, factor, order=0)
    depth = np.asarray(est.depth, float)
    ok = ~est.void & (tdepth > 0)
    rel = np.where(ok, (depth - tdepth) / np.where(tdepth > 0, tdepth, 1.0), 0.0)

    rows = []
    for rid in sorted(int(i) for i in np.unique(labels) if i > 0):
        m = ok & (full_labels == rid)
        n_fit = fitted.get(rid, float("nan"))
        n_true = float("nan")
        if truth is not None and m.any():
            ids, counts = np.unique(truth.ident[m], return_counts=True)
            n_true = float(truth.n_s[truth.ident == ids[np.argmax(counts)]][0])
        if m.any():
            e = rel[m]
            rms, mx = float(np.sqrt(np.mean(e ** 2))), float(np.max(np.abs(e)))
            mean = float((depth[m].mean() - tdepth[m].mean()) / tdepth[m].mean())
        else:
            rms = mx = mean = float("nan")
        rows.append([rid, int(m.sum()), rms, mx, mean, n_fit, n_true, n_fit - n_true])
    with open(run.out / "metrics.csv", "w", newline="") as fh:
        wr = csv.writer(fh)
        wr.writerow(["rid", "pixels", "normalized_rms", "normalized_max", "normalized_mean", "n_s_fit",
                     "n_s_true", "n_s_error"])
        for r in rows:
            wr.writerow([r[0], r[1]] + [repr(float(x)) for x in r[2:]])

    if truth is not None:
        tnf = truth.normal_field()
        m = normals.valid & tnf.valid & (tnf.zenith > 0)
        err = np.degrees(np.abs(wrap_angle(normals.azimuth - tnf.azimuth + np.pi) - np.pi))[m]
    else:
        err = np.zeros(0)
    counts, edges = np.histogram(err, bins=int(args.bins), range=(0.0, 180.0))
    with open(run.out / "azimuth_error_hist.csv", "w", newline="") as fh:
        wr = csv.writer(fh)
        wr.writerow(["low_deg", "high_deg", "count"])
        for lo, hi, c in zip(edges[:-1], edges[1:], counts):
            wr.writerow([repr(float(lo)), repr(float(hi)), int(c)])

    row = grid.height // 2 if args.row is None else int(args.row)
    if not 0 <= row < grid.height:
        raise UsageError(f"--row {row} outside the image")
    with open(run.out / "cross_section.csv", "w", newline="") as fh:
        wr = csv.writer(fh)
        wr.writerow(["column", "truth_depth_m", "estimated_depth_m"])
        for c in range(grid.width):
            t = repr(float(tdepth[row, c])) if tdepth[row, c] > 0 else ""
            e = repr(float(depth[row, c])) if not est.void[row, c] else ""
            wr.writerow([c, t, e])
    save_field(run.out / "depth_error.emf", ScalarMap(grid, rel, "height", valid=ok))
    save_field(run.out / "depth_abs_error.emf", ScalarMap(grid, np.abs(np.where(ok, depth - tdepth, 0.0)),
                                                          "height", valid=ok))
    return EXIT_OK


# ------------------------------------------------------------------ curves

def cmd_curves(args, run: _Run) -> int:
    v = run.resolve({"n": args.n, "step": args.step}, {}, {"n": [1.3, 1.5, 1.8, 2.5], "step": 0.5})
    if not float(v["step"]) > 0:
        raise UsageError("--step must be positive")
    with open(run.out / "curves.csv", "w", newline="") as fh:
        wr = csv.writer(fh)
        wr.writerow(["n", "theta_deg", "dolp_specular", "dolp_diffuse"])
        for r in dolp_curves([float(n) for n in v["n"]], float(v["step"])):
            wr.writerow([repr(x) for x in r])
    return EXIT_OK


# ------------------------------------------------------------------ rerun

def _replace_out(argv: list, out: str) -> list:
    argv = list(argv)
    for i, a in enumerate(argv):
        if a == "--out" and i + 1 < len(argv):
            argv[i + 1] = out
            return argv
        if a.startswith("--out="):
            argv[i] = f"--out={out}"
            return argv
    raise DataError("manifest argv has no --out")


def cmd_rerun(args) -> int:
    path = Path(args.manifest)
    if path.is_dir():
        path = path / MANIFEST
    if not path.exists():
        raise UsageError(f"manifest not found: {path}")
    try:
        man = json.loads(path.read_text())
        argv, recorded, inputs = man["argv"], man["outputs"], man["inputs"]
    except (json.JSONDecodeError, KeyError) as exc:
        raise DataError(f"{path}: not a run manifest ({exc})") from None
    changed = [p for p, digest in inputs.items() if not Path(p).exists() or file_digest(p) != digest]
    if changed:
        for p in changed:
            print(f"input changed: {p}", file=sys.stderr)
        return EXIT_DATA
    scratch = Path(tempfile.mkdtemp(prefix="polardepth-rerun-"))
    try:
        cwd = Path.cwd()
        try:
            os.chdir(man.get("cwd", cwd))
            code = main(_replace_out(argv, str(scratch / "out")))
        finally:
            os.chdir(cwd)
        if code != EXIT_OK:
            return code
        fresh = {str(p.relative_to(scratch / "out")): file_digest(p)
                 for p in sorted((scratch / "out").rglob("*")) if p.is_file() and p.name != MANIFEST}
        same = True
        for name in sorted(set(recorded) | set(fresh)):
            status = "identical" if recorded.get(name) == fresh.get(name) else "DIFFERENT"
            same &= status == "identical"
            print(f"{status}: {name}")
        if args.keep:
            shutil.copytree(scratch / "out", args.keep, dirs_exist_ok=True)
        return EXIT_OK if same else EXIT_DATA
    finally:
        shutil.rmtree(scratch, ignore_errors=True)


# ------------------------------------------------------------------ parser

def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="polardepth", description=__doc__.split("\n\n")[0])
    p.add_argument("--version", action="version", version=f"polardepth {__version__}")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    psf = sub.add_parser("psf", help="design, optimize or calibrate the phase mask")
    psf.add_argument("action", choices=("design", "optimize", "sweep"))
    psf.add_argument("--out", required=True, help="output directory")
    psf.add_argument("--camera", help="camera JSON (desk camera keys); defaults to the desk camera")
    psf.add_argument("--config", help="YAML/JSON with the same keys as the flags")
    psf.add_argument("--N", type=int, help="design: lobes (default 2)")
    psf.add_argument("--L", type=int, help="design: zones (default 12)")
    psf.add_argument("--eps", type=float, help="design: radial exponent (default 0.8)")
    psf.add_argument("--levels", type=int, help="design: quantize to this many phase levels")
    psf.add_argument("--size", type=int, help="pupil raster size (default 512)")
    psf.add_argument("--phase", help="input phase .emf (optimize: the Fresnel-zone default; "
                                     "sweep: the optimized default)")
    psf.add_argument("--iters", type=int, help="optimize: iterations (default 10)")
    psf.add_argument("--count", type=int, help="depth samples (optimize 9, sweep 161)")
    psf.add_argument("--zeta-max", dest="zeta_max", type=float, help="half-width of the defocus range")
    psf.add_argument("--edge-factor", dest="edge_factor", type=float,
                     help="optimize: weight of the two end depths relative to the others (default 2)")

    sim = sub.add_parser("simulate", help="render a scene through the camera")
    sim.add_argument("scene", help="scene YAML/JSON")
    sim.add_argument("--out", required=True)
    sim.add_argument("--phase", help="phase .emf (default: the optimized mask)")
    sim.add_argument("--slices", type=int, help="depth slices for the layered blur (default 16)")
    sim.add_argument("--hard-slices", action="store_true", help="bin pixels into slices instead of blending")
    sim.add_argument("--impulse-psf", action="store_true", help="ideal point image, no blur")
    sim.add_argument("--mosaic", action="store_true", help="sample a 2x2 filter array and demosaic")
    sim.add_argument("--photons", type=float, help="mean photons at unit intensity (enables noise)")
    sim.add_argument("--noise-seed", dest="noise_seed", type=int, help="noise seed (overrides the scene)")
    sim.add_argument("--png", action="store_true", help="also write PNG previews")

    rec = sub.add_parser("reconstruct", help="fuse diffraction depth and polarization normals")
    rec.add_argument("stack", help="four-channel capture .emf")
    rec.add_argument("--calibration", help="rotation calibration CSV from 'psf sweep'")
    rec.add_argument("--out", required=True)
    rec.add_argument("--camera", help="camera JSON (default: camera.json beside the stack)")
    rec.add_argument("--config", help="fusion config YAML/JSON")
    rec.add_argument("--masks", help="region label .emf, full or downsampled resolution")
    rec.add_argument("--truth", help="ground truth directory (default: truth/ beside the stack)")
    rec.add_argument("--materials", help="material table (JSON or CSV: label, n_s, tolerance)")
    rec.add_argument("--downsample", type=int)
    rec.add_argument("--cl-threshold", dest="cl_threshold", type=float)
    rec.add_argument("--gdolp-threshold", dest="gdolp_threshold", type=float)
    rec.add_argument("--dcd-threshold", dest="dcd_threshold", type=int)
    rec.add_argument("--sigma", type=float, help="completion Gaussian sigma in downsampled pixels")
    rec.add_argument("--png", action="store_true")

    ev = sub.add_parser("evaluate", help="compare a reconstruction with ground truth")
    ev.add_argument("result", help="reconstruction directory")
    ev.add_argument("truth", help="ground truth directory (or another reconstruction)")
    ev.add_argument("--out", required=True)
    ev.add_argument("--bins", type=int, default=36, help="azimuth error histogram bins over 0-180 deg")
    ev.add_argument("--row", type=int, help="cross-section row (default: middle)")

    cur = sub.add_parser("curves", help="specular and diffuse DOLP curves")
    cur.add_argument("--out", required=True)
    cur.add_argument("--n", type=float, nargs="+")
    cur.add_argument("--step", type=float, help="zenith step in degrees (default 0.5)")

    rr = sub.add_parser("rerun", help="repeat a run from its manifest and compare outputs")
    rr.add_argument("manifest", help="manifest.json or the directory holding it")
    rr.add_argument("--keep", help="copy the fresh outputs here")
    return p


COMMANDS = {"psf": cmd_psf, "simulate": cmd_simulate, "reconstruct": cmd_reconstruct,
            "evaluate": cmd_evaluate, "curves": cmd_curves}


def main(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        if args.command == "rerun":
            return cmd_rerun(args)
        run = _Run(args.command, argv, _out_dir(args.out))
        code = COMMANDS[args.command](args, run)
        run.finish()
        return code
    except (UsageError, SceneConfigError) as exc:
        print(f"polardepth: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (DataError, FormatError, IntegrityError, CalibrationError) as exc:
        print(f"polardepth: data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (DegeneratePSF, FusionError, NoSignal, FloatingPointError, np.linalg.LinAlgError) as exc:
        print(f"polardepth: numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except ValueError as exc:
        print(f"polardepth: error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
