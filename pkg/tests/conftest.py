import numpy as np
import pytest

from polardepth import depthdiff, psfopt, simulator
from polardepth.core import desk_camera


NOISE_TEX = "albedo: {{type: noise, sigma: 1.0, low: 0.2, high: 1.0, seed: {seed}}}"


def scene_text(*primitives, width=512, height=512, extra=""):
    """YAML scene with the given primitive flow mappings (one per line)."""
    lines = [f"camera: {{width: {width}, height: {height}}}"]
    if extra:
        lines.append(extra)
    lines.append("primitives:")
    lines.extend(f"  - {{{p}}}" for p in primitives)
    return "\n".join(lines) + "\n"


def render(text, phase=None, blur=True, **kw):
    """Parse, rasterize, render and optionally blur a scene."""
    sc = simulator.parse_scene(text)
    cam = simulator.build_camera(sc)
    truth = simulator.rasterize(sc, cam)
    ideal = simulator.render_polarization(sc, cam, truth)
    if not blur:
        return sc, cam, truth, ideal
    return sc, cam, truth, simulator.apply_depth_psf(ideal, truth, phase, cam, **kw)


@pytest.fixture(scope="session")
def cam():
    return desk_camera()


@pytest.fixture(scope="session")
def phase(cam):
    return psfopt.designed_phase(cam)


@pytest.fixture(scope="session")
def calib(phase, cam):
    return depthdiff.default_calibration(phase, cam)


@pytest.fixture
def rng():
    return np.random.default_rng(20240611)
