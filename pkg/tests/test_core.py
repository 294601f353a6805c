import hashlib
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from PIL import Image

from polardepth.core import (
    CameraSpec,
    ComplexField,
    DepthMap,
    FormatError,
    GridSpec,
    IntegrityError,
    NormalField,
    PolarizationStack,
    ScalarMap,
    desk_camera,
    energy,
    export_png,
    file_digest,
    load_field,
    save_field,
    wrap_angle,
)


def _f32(rng, shape, lo=0.0, hi=1.0):
    return rng.uniform(lo, hi, shape).astype(np.float32)


def test_grid_validation():
    g = GridSpec(4, 3, 2e-6)
    assert g.shape == (3, 4)
    assert g.extent == pytest.approx((8e-6, 6e-6))
    for bad in [(1, 4, 1.0), (4, 1, 1.0), (4, 4, 0.0), (4, 4, -1.0)]:
        with pytest.raises(ValueError):
            GridSpec(*bad)


def test_zero_scalar_map_round_trip(tmp_path):
    m = ScalarMap(GridSpec(2, 2, 1e-6), np.zeros((2, 2), np.float32))
    back = load_field(save_field(tmp_path / "z.emf", m))
    assert back.semantics == "intensity"
    assert back.grid == m.grid
    assert np.array_equal(back.values, m.values)


def test_unit_complex_field_energy_round_trip(tmp_path):
    f = ComplexField(GridSpec(4, 4, 1e-6), np.ones((4, 4), np.complex64), 8e-7)
    assert energy(f) == 16.0
    back = load_field(save_field(tmp_path / "c.emf", f))
    assert energy(back) == 16.0
    assert back.wavelength == 8e-7


# digest of the 64x64 stack below, pinned from the first run of this writer
STACK_DIGEST = "b7fdb9df85a8f74cfdc57a782046916cf3719c8d5e79874410c4167ec74b7182"


def _seeded_stack():
    rng = np.random.default_rng(64)
    return PolarizationStack.from_array(GridSpec(64, 64, 3.45e-6), _f32(rng, (4, 64, 64)))


def test_stack_round_trip_and_pinned_hash(tmp_path):
    s = _seeded_stack()
    p = save_field(tmp_path / "s.emf", s)
    back = load_field(p)
    for name in PolarizationStack.CHANNELS:
        assert getattr(back, name).tobytes() == getattr(s, name).tobytes()
    again = save_field(tmp_path / "s2.emf", _seeded_stack())
    assert file_digest(p) == file_digest(again)
    assert file_digest(p) == STACK_DIGEST


def test_energy_cases(rng):
    g = GridSpec(7, 5, 1e-6)
    assert energy(ComplexField(g, np.zeros((5, 7)), 5e-7)) == 0.0
    assert energy(ComplexField(g, np.ones((5, 7)), 5e-7)) == 35.0
    v = rng.standard_normal((5, 7)) + 1j * rng.standard_normal((5, 7))
    naive = 0.0
    for row in v:
        for z in row:
            naive += z.real * z.real + z.imag * z.imag
    assert energy(ComplexField(g, v, 5e-7)) == pytest.approx(naive, rel=1e-12)


def test_header_layout(tmp_path):
    m = ScalarMap(GridSpec(3, 2, 1.5e-6), np.arange(6, dtype=np.float32).reshape(2, 3), "angle", "pi")
    raw = save_field(tmp_path / "h.emf", m).read_bytes()
    head, _, body = raw.partition(b"end\n")
    lines = head.decode("utf-8").splitlines()
    assert lines[0] == "EMF1"
    keys = dict(line.split(": ", 1) for line in lines[1:])
    assert keys["kind"] == "scalar_map"
    assert keys["width"] == "3" and keys["height"] == "2"
    assert keys["semantics"] == "angle" and keys["interval"] == "pi"
    assert keys["endianness"] == "little" and keys["dtype"] == "float32"
    assert len(body) == int(keys["payload_bytes"]) == 24
    assert np.array_equal(np.frombuffer(body, "<f4").reshape(2, 3), m.values)


def test_complex_payload_is_interleaved(tmp_path):
    v = np.array([[1 + 2j, 3 + 4j], [5 + 6j, 7 + 8j]], np.complex64)
    raw = save_field(tmp_path / "c.emf", ComplexField(GridSpec(2, 2, 1.0), v, 1e-6)).read_bytes()
    body = raw.partition(b"end\n")[2]
    assert np.frombuffer(body, "<f4").tolist() == [1, 2, 3, 4, 5, 6, 7, 8]


def test_malformed_header_names_key(tmp_path):
    p = save_field(tmp_path / "m.emf", ScalarMap(GridSpec(2, 2, 1.0), np.zeros((2, 2), np.float32)))
    raw = p.read_bytes()
    bad = tmp_path / "bad.emf"
    bad.write_bytes(raw.replace(b"width: 2", b"width: two"))
    with pytest.raises(FormatError, match="width"):
        load_field(bad)
    bad.write_bytes(raw.replace(b"endianness: little", b"endianness: big"))
    with pytest.raises(FormatError, match="endianness"):
        load_field(bad)
    bad.write_bytes(raw.replace(b"EMF1", b"XXXX"))
    with pytest.raises(FormatError, match="magic"):
        load_field(bad)
    bad.write_bytes(b"\n".join(line for line in raw.split(b"\n") if not line.startswith(b"dtype")))
    with pytest.raises(FormatError, match="dtype"):
        load_field(bad)


def test_payload_mismatch_is_integrity_error(tmp_path):
    p = save_field(tmp_path / "m.emf", ScalarMap(GridSpec(2, 2, 1.0), np.zeros((2, 2), np.float32)))
    bad = tmp_path / "short.emf"
    bad.write_bytes(p.read_bytes()[:-4])
    with pytest.raises(IntegrityError):
        load_field(bad)


def test_depth_map_invariants():
    g = GridSpec(2, 2, 1.0)
    with pytest.raises(IntegrityError):
        DepthMap(g, np.zeros((2, 2)), np.ones((2, 2)), np.zeros((2, 2), bool))
    with pytest.raises(IntegrityError):
        DepthMap(g, np.ones((2, 2)), -np.ones((2, 2)), np.zeros((2, 2), bool))
    d = DepthMap(g, np.zeros((2, 2)), np.zeros((2, 2)), np.ones((2, 2), bool))
    assert d.void_fraction == 1.0


def test_dolp_map_range():
    with pytest.raises(IntegrityError):
        ScalarMap(GridSpec(2, 2, 1.0), np.full((2, 2), 1.5), "dolp")


def test_angle_map_wraps():
    m = ScalarMap(GridSpec(2, 2, 1.0), np.array([[-0.1, np.pi], [2 * np.pi, 7.0]]), "angle", "pi")
    assert np.all((m.values >= 0) & (m.values < np.pi))
    assert m.values[0, 0] == pytest.approx(np.pi - 0.1)
    assert m.values[0, 1] == 0.0


def test_normal_field_unit_positive_z(rng):
    g = GridSpec(8, 8, 1.0)
    nf = NormalField(g, rng.uniform(0, 1.5, (8, 8)), rng.uniform(0, 2 * np.pi, (8, 8)), np.ones((8, 8), bool))
    n = nf.normals()
    assert np.allclose(np.linalg.norm(n, axis=-1), 1.0, atol=1e-12)
    assert np.all(n[..., 2] > 0)
    with pytest.raises(IntegrityError):
        NormalField(g, np.full((8, 8), np.pi / 2), np.zeros((8, 8)), np.ones((8, 8), bool))


def test_stack_negative_rejected():
    with pytest.raises(IntegrityError):
        PolarizationStack.from_array(GridSpec(2, 2, 1.0), -np.ones((4, 2, 2)))


def test_camera_dict_round_trip():
    cam = desk_camera(640, 480)
    assert CameraSpec.from_dict(cam.to_dict()) == cam
    assert cam.pfov == pytest.approx(2e-5)
    assert cam.sampling == pytest.approx(0.25)
    with pytest.raises(ValueError):
        CameraSpec(-1.0, 1e-3, 1.0, GridSpec(4, 4, 1e-6), 0.1)


def test_png_preview_linear(tmp_path):
    vals = np.array([[0.0, 0.5], [1.0, 2.0]])
    p = export_png(tmp_path / "x.png", vals, 0.0, 1.0)
    img = Image.open(p)
    assert np.array(img).tolist() == [[0, 128], [255, 255]]
    assert img.text["vmin"] == "0.0" and img.text["vmax"] == "1.0"
    p16 = export_png(tmp_path / "y.png", vals, 0.0, 2.0, bits=16)
    assert np.array(Image.open(p16)).max() == 65535
    with pytest.raises(ValueError):
        export_png(tmp_path / "z.png", vals, 1.0, 1.0)


finite32 = st.floats(-1e6, 1e6, width=32)
pos32 = st.floats(0, 1e6, width=32)


@settings(max_examples=40, deadline=None)
@given(st.integers(2, 9), st.integers(2, 9), st.integers(0, 2 ** 32 - 1), st.sampled_from(
    ["scalar", "masked", "angle", "complex", "stack", "depth", "normal"]))
def test_round_trip_bit_exact(tmp_path_factory, w, h, seed, kind):
    rng = np.random.default_rng(seed)
    g = GridSpec(w, h, float(rng.uniform(1e-7, 1e-4)))
    shape = (h, w)
    if kind == "scalar":
        obj = ScalarMap(g, rng.standard_normal(shape).astype(np.float32) * 1e3, "height")
    elif kind == "masked":
        obj = ScalarMap(g, _f32(rng, shape), "dolp", valid=rng.random(shape) > 0.5)
    elif kind == "angle":
        obj = ScalarMap(g, _f32(rng, shape, 0, 3.0), "angle", "pi")
    elif kind == "complex":
        v = (rng.standard_normal(shape) + 1j * rng.standard_normal(shape)).astype(np.complex64)
        obj = ComplexField(g, v, float(rng.uniform(4e-7, 1e-6)))
    elif kind == "stack":
        obj = PolarizationStack.from_array(g, _f32(rng, (4,) + shape))
    elif kind == "depth":
        void = rng.random(shape) > 0.7
        obj = DepthMap(g, np.where(void, 0, _f32(rng, shape, 0.5, 2)).astype(np.float32),
                       _f32(rng, shape), void, 0.42)
    else:
        obj = NormalField(g, _f32(rng, shape, 0, 1.5), _f32(rng, shape, 0, 6.2), rng.random(shape) > 0.3)
    path = tmp_path_factory.mktemp("rt") / "x.emf"
    back = load_field(save_field(path, obj))
    assert type(back) is type(obj)
    assert back.grid == obj.grid
    for name in obj.__dataclass_fields__:
        a, b = getattr(obj, name), getattr(back, name)
        if isinstance(a, np.ndarray):
            assert a.dtype.kind == b.dtype.kind or a.dtype == bool
            assert np.asarray(a).tobytes() == np.asarray(b).astype(a.dtype).tobytes(), name
        else:
            assert a == b, name


@given(st.lists(st.floats(-1e4, 1e4), min_size=1, max_size=20), st.sampled_from([np.pi, 2 * np.pi, np.pi / 2]))
def test_wrap_idempotent(vals, period):
    once = wrap_angle(np.array(vals), period)
    assert np.all((once >= 0) & (once < period))
    assert np.array_equal(wrap_angle(once, period), once)


def test_wrap_tiny_negative():
    assert wrap_angle(-1e-18) == 0.0
    assert math.isclose(float(wrap_angle(-np.pi / 2, np.pi)), np.pi / 2)
