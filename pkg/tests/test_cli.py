import csv
import json
import shutil

import numpy as np
import pytest

from polardepth import cli
from polardepth.core import load_field, save_field, DepthMap
from polardepth.optics import FresnelZoneParams, fresnel_zone_phase, pupil_grid
from polardepth.core import desk_camera

SPHERE = """\
camera: {width: 512, height: 512}
primitives:
  - {type: sphere_cap, n_s: 1.5, center: [0, 0, 1.008], radius: 0.008, max_zenith_deg: 60,
     albedo: {type: noise, sigma: 1.0, low: 0.2, high: 1.0, seed: 3}}
"""


def run(*argv):
    return cli.main([str(a) for a in argv])


def rows(path):
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


@pytest.fixture(scope="module")
def work(tmp_path_factory):
    return tmp_path_factory.mktemp("cli")


@pytest.fixture(scope="module")
def sweep(work):
    out = work / "sweep"
    assert run("psf", "sweep", "--count", 41, "--out", out) == 0
    return out


@pytest.fixture(scope="module")
def simulated(work):
    scene = work / "sphere.yaml"
    scene.write_text(SPHERE)
    out = work / "sim"
    assert run("simulate", scene, "--out", out, "--png") == 0
    return out


@pytest.fixture(scope="module")
def reconstructed(work, simulated, sweep):
    out = work / "rec"
    assert run("reconstruct", simulated / "capture.emf", "--calibration", sweep / "calibration.csv",
               "--out", out) == 0
    return out


def test_psf_design_matches_library(tmp_path):
    assert run("psf", "design", "--N", 2, "--L", 12, "--eps", 0.8, "--out", tmp_path) == 0
    grid, radius = pupil_grid(desk_camera(), 512)
    want = fresnel_zone_phase(FresnelZoneParams(2, 12, 0.8), grid, radius)
    got = load_field(tmp_path / "phase.emf")
    # the container holds float32 samples
    assert np.array_equal(got.values, want.as_map().values.astype(np.float32))


def test_psf_design_bad_field_named(tmp_path, capsys):
    assert run("psf", "design", "--L", 0, "--out", tmp_path) == cli.EXIT_USAGE
    assert "--L" in capsys.readouterr().err


def test_psf_optimize_zero_iterations(tmp_path):
    design = tmp_path / "d"
    assert run("psf", "design", "--size", 256, "--out", design) == 0
    out = tmp_path / "o"
    assert run("psf", "optimize", "--iters", 0, "--size", 256, "--phase", design / "phase.emf",
               "--out", out) == 0
    assert np.array_equal(load_field(out / "phase.emf").values, load_field(design / "phase.emf").values)


def test_psf_sweep_nine_rows(tmp_path):
    assert run("psf", "sweep", "--count", 9, "--out", tmp_path) == 0
    table = rows(tmp_path / "calibration.csv")
    assert len(table) == 9
    angle = np.array([float(r["cepstrum_angle_rad"]) for r in table])
    assert np.all(np.diff(angle) > 0) or np.all(np.diff(angle) < 0)


def test_simulate_impulse_single_slice(tmp_path):
    scene = tmp_path / "plane.yaml"
    scene.write_text("camera: {width: 64, height: 64}\nprimitives:\n"
                     "  - {type: plane, depth: 1.0, slope: [0.2, 0], albedo: {type: constant, value: 0.5}}\n")
    assert run("simulate", scene, "--slices", 1, "--impulse-psf", "--out", tmp_path / "s") == 0
    ideal = load_field(tmp_path / "s" / "ideal.emf").as_array()
    blurred = load_field(tmp_path / "s" / "blurred.emf").as_array()
    assert np.array_equal(ideal, blurred)


def test_simulate_schema_error_cites_line(tmp_path, capsys):
    scene = tmp_path / "bad.yaml"
    scene.write_text("primitives:\n  - type: plane\n    depth: 1.0\n    colour: red\n")
    assert run("simulate", scene, "--out", tmp_path / "s") == cli.EXIT_USAGE
    assert ":4: primitives[0].colour" in capsys.readouterr().err


def test_simulate_same_seed_identical(simulated, work):
    again = work / "sim_again"
    assert run("simulate", work / "sphere.yaml", "--out", again, "--png") == 0
    a = json.loads((simulated / "manifest.json").read_text())["outputs"]
    b = json.loads((again / "manifest.json").read_text())["outputs"]
    assert a == b and "capture_s0.png" in a


def test_simulate_mosaic_noise(tmp_path, work):
    kw = ("--impulse-psf", "--mosaic", "--photons", 500)
    assert run("simulate", work / "sphere.yaml", *kw, "--noise-seed", 4, "--out", tmp_path / "a") == 0
    assert run("simulate", work / "sphere.yaml", *kw, "--noise-seed", 4, "--out", tmp_path / "b") == 0
    assert run("simulate", work / "sphere.yaml", *kw, "--noise-seed", 5, "--out", tmp_path / "c") == 0
    a, b, c = (load_field(tmp_path / k / "mosaic.emf").values for k in "abc")
    assert np.array_equal(a, b) and not np.array_equal(a, c)
    man = json.loads((tmp_path / "a" / "manifest.json").read_text())
    assert man["seed"] == 4 and man["config"]["photons"] == {"value": 500.0, "source": "flag"}


def test_reconstruct_reports_truth_error(reconstructed):
    table = rows(reconstructed / "metrics.csv")
    assert "depth_error_rms" in table[0]
    assert table[0]["status"] == "ok" and float(table[0]["depth_error_rms"]) >= 0


def test_reconstruct_requires_calibration(simulated, tmp_path, capsys):
    assert run("reconstruct", simulated / "capture.emf", "--out", tmp_path) == cli.EXIT_USAGE
    assert "--calibration" in capsys.readouterr().err


def test_reconstruct_masks_passthrough(simulated, sweep, tmp_path):
    labels = np.zeros((51, 51))
    labels[10:40, 12:42] = 5
    from polardepth.core import GridSpec, ScalarMap

    save_field(tmp_path / "masks.emf", ScalarMap(GridSpec(51, 51, 3.45e-5), labels, "label"))
    out = tmp_path / "r"
    assert run("reconstruct", simulated / "capture.emf", "--calibration", sweep / "calibration.csv",
               "--masks", tmp_path / "masks.emf", "--out", out) == 0
    assert np.array_equal(load_field(out / "e_regions.emf").values, labels)


def test_reconstruct_config_precedence(simulated, sweep, tmp_path):
    cfg = tmp_path / "fusion.yaml"
    cfg.write_text("completion_sigma: 3.0\ncl_threshold: 0.5\n")
    out = tmp_path / "r"
    assert run("reconstruct", simulated / "capture.emf", "--calibration", sweep / "calibration.csv",
               "--config", cfg, "--sigma", 2.5, "--out", out) == 0
    conf = json.loads((out / "manifest.json").read_text())["config"]
    assert conf["completion_sigma"] == {"value": 2.5, "source": "flag"}
    assert conf["cl_threshold"] == {"value": 0.5, "source": "file"}
    assert conf["dcd_threshold"] == {"value": 50, "source": "default"}


def test_reconstruct_bad_config_key(simulated, sweep, tmp_path):
    cfg = tmp_path / "fusion.yaml"
    cfg.write_text("colour: 3\n")
    assert run("reconstruct", simulated / "capture.emf", "--calibration", sweep / "calibration.csv",
               "--config", cfg, "--out", tmp_path / "r") == cli.EXIT_USAGE


def test_evaluate_against_itself(reconstructed, tmp_path):
    assert run("evaluate", reconstructed, reconstructed, "--out", tmp_path) == 0
    for r in rows(tmp_path / "metrics.csv"):
        assert float(r["normalized_rms"]) == 0 and float(r["normalized_max"]) == 0


def test_evaluate_known_offset(reconstructed, tmp_path):
    shifted = tmp_path / "shifted"
    shutil.copytree(reconstructed, shifted)
    a = load_field(reconstructed / "i_absolute.emf")
    depth = np.asarray(a.depth, np.float64)
    save_field(shifted / "i_absolute.emf", DepthMap(a.grid, depth * 1.01, a.confidence, a.void, a.threshold))
    assert run("evaluate", shifted, reconstructed, "--out", tmp_path / "e") == 0
    for r in rows(tmp_path / "e" / "metrics.csv"):
        # the container stores float32, so "exact" holds to its rounding
        assert float(r["normalized_rms"]) == pytest.approx(0.01, abs=1e-6)
        assert float(r["normalized_mean"]) == pytest.approx(0.01, abs=1e-6)


def test_evaluate_matches_fusion_residuals(reconstructed, simulated, tmp_path):
    assert run("evaluate", reconstructed, simulated / "truth", "--out", tmp_path, "--bins", 18) == 0
    fused = {int(r["rid"]): r for r in rows(reconstructed / "metrics.csv")}
    for r in rows(tmp_path / "metrics.csv"):
        assert float(r["normalized_rms"]) == pytest.approx(float(fused[int(r["rid"])]["depth_error_rms"]),
                                                           rel=1e-4)
        assert float(r["n_s_true"]) == 1.5
    hist = rows(tmp_path / "azimuth_error_hist.csv")
    assert len(hist) == 18 and sum(int(h["count"]) for h in hist) > 0
    assert len(rows(tmp_path / "cross_section.csv")) == 512


def test_evaluate_grid_mismatch(reconstructed, tmp_path):
    scene = tmp_path / "small.yaml"
    scene.write_text("camera: {width: 64, height: 64}\nprimitives:\n  - {type: plane, depth: 1.0}\n")
    assert run("simulate", scene, "--impulse-psf", "--out", tmp_path / "s") == 0
    assert run("evaluate", reconstructed, tmp_path / "s" / "truth", "--out", tmp_path / "e") == cli.EXIT_DATA


def test_curves(tmp_path):
    assert run("curves", "--n", 1.5, "--step", 1.0, "--out", tmp_path) == 0
    table = rows(tmp_path / "curves.csv")
    assert len(table) == 90 and float(table[0]["dolp_diffuse"]) == 0


@pytest.mark.parametrize("sub", ["sweep", "sim", "rec"])
def test_rerun_identical(sub, sweep, simulated, reconstructed, work, capsys):
    d = {"sweep": sweep, "sim": simulated, "rec": reconstructed}[sub]
    assert run("rerun", d / "manifest.json") == 0
    out = capsys.readouterr().out
    assert "DIFFERENT" not in out and "identical:" in out


def test_rerun_detects_changed_input(tmp_path):
    scene = tmp_path / "p.yaml"
    scene.write_text("camera: {width: 32, height: 32}\nprimitives:\n  - {type: plane, depth: 1.0}\n")
    assert run("simulate", scene, "--impulse-psf", "--out", tmp_path / "s") == 0
    scene.write_text(scene.read_text().replace("1.0", "1.01"))
    assert run("rerun", tmp_path / "s") == cli.EXIT_DATA


def test_inputs_not_mutated(simulated, sweep, tmp_path):
    before = {p: p.read_bytes() for p in (simulated / "capture.emf", sweep / "calibration.csv")}
    run("reconstruct", simulated / "capture.emf", "--calibration", sweep / "calibration.csv", "--out", tmp_path)
    assert all(p.read_bytes() == b for p, b in before.items())


def test_usage_errors(tmp_path):
    assert run("bogus") == cli.EXIT_USAGE
    assert run("simulate", tmp_path / "missing.yaml", "--out", tmp_path) == cli.EXIT_USAGE
    f = tmp_path / "file"
    f.write_text("")
    assert run("curves", "--out", f) == cli.EXIT_USAGE


def test_corrupt_stack_is_data_error(tmp_path, sweep):
    bad = tmp_path / "bad.emf"
    bad.write_bytes(b"not a field")
    assert run("reconstruct", bad, "--calibration", sweep / "calibration.csv", "--out", tmp_path / "r") \
        == cli.EXIT_DATA
