"""Grid, field and image containers plus the ``.emf`` raster container.

Every container is a frozen dataclass whose arrays are made read-only on
construction, so instances can be shared freely between threads.

The ``.emf`` layout is a UTF-8 text header followed by a binary payload::

    EMF1
    kind: scalar_map
    width: 64
    height: 64
    ...
    end
    <payload>

The payload holds ``channels`` planes of ``height x width`` little-endian
float32 values, row-major, one plane after another.  Complex planes are stored
as interleaved ``(re, im)`` float32 pairs.
"""
from __future__ import annotations

import hashlib
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Union

import numpy as np

__all__ = [
    "GridSpec",
    "ComplexField",
    "ScalarMap",
    "PolarizationStack",
    "DepthMap",
    "NormalField",
    "CameraSpec",
    "SEMANTICS",
    "ANGLE_INTERVALS",
    "FormatError",
    "IntegrityError",
    "wrap_angle",
    "energy",
    "save_field",
    "load_field",
    "file_digest",
    "export_png",
    "desk_camera",
]

SEMANTICS = ("intensity", "dolp", "angle", "depth", "height", "label", "laplacian")

# upper end of each half-open principal interval [0, period)
ANGLE_INTERVALS = {"pi": np.pi, "2pi": 2 * np.pi, "halfpi": np.pi / 2}

MAGIC = "EMF1"


class FormatError(ValueError):
    """Malformed ``.emf`` header."""


class IntegrityError(ValueError):
    """Payload does not match the header, or object invariants are broken."""


def _readonly(a, dtype=None) -> np.ndarray:
    arr = np.array(a, dtype=dtype, copy=True)
    arr.setflags(write=False)
    return arr


def wrap_angle(values, period: float = 2 * np.pi) -> np.ndarray:
    """Wrap angles into ``[0, period)``.

    ``np.mod`` can return ``period`` itself for tiny negative inputs, so that
    case is folded back to zero to keep the interval half-open.
    """
    out = np.mod(values, period)
    return np.where(out >= period, 0.0, out)


@dataclass(frozen=True)
class GridSpec:
    """Pixel grid: ``width`` x ``height`` samples at ``pitch`` meters."""

    width: int
    height: int
    pitch: float

    def __post_init__(self):
        if int(self.width) != self.width or int(self.height) != self.height:
            raise ValueError("grid dimensions must be integers")
        if self.width < 2 or self.height < 2:
            raise ValueError(f"grid must be at least 2x2, got {self.width}x{self.height}")
        if not self.pitch > 0:
            raise ValueError(f"pitch must be positive, got {self.pitch}")
        object.__setattr__(self, "width", int(self.width))
        object.__setattr__(self, "height", int(self.height))
        object.__setattr__(self, "pitch", float(self.pitch))

    @property
    def shape(self) -> tuple[int, int]:
        return (self.height, self.width)

    @property
    def extent(self) -> tuple[float, float]:
        """Physical (width, height) in meters."""
        return (self.width * self.pitch, self.height * self.pitch)

    def with_shape(self, height: int, width: int, pitch: Optional[float] = None) -> "GridSpec":
        return GridSpec(width, height, self.pitch if pitch is None else pitch)


def _check_shape(grid: GridSpec, arr: np.ndarray, name: str):
    if arr.shape != grid.shape:
        raise IntegrityError(f"{name} has shape {arr.shape}, grid expects {grid.shape}")


@dataclass(frozen=True)
class ComplexField:
    grid: GridSpec
    values: np.ndarray
    wavelength: float

    def __post_init__(self):
        vals = np.asarray(self.values)
        if not np.iscomplexobj(vals):
            vals = vals.astype(np.complex128)
        object.__setattr__(self, "values", _readonly(vals))
        _check_shape(self.grid, self.values, "values")
        if not self.wavelength > 0:
            raise ValueError("wavelength must be positive")

    @property
    def intensity(self) -> np.ndarray:
        return np.abs(self.values) ** 2


@dataclass(frozen=True)
class ScalarMap:
    """Real map with a semantics tag.

    ``angle`` maps carry an ``interval`` key (``"pi"``, ``"2pi"`` or
    ``"halfpi"``) and are wrapped into it on construction.  ``valid`` is an
    optional per-pixel flag; ``None`` means every pixel is valid.
    """

    grid: GridSpec
    values: np.ndarray
    semantics: str = "intensity"
    interval: Optional[str] = None
    valid: Optional[np.ndarray] = None

    def __post_init__(self):
        if self.semantics not in SEMANTICS:
            raise ValueError(f"unknown semantics {self.semantics!r}")
        vals = np.asarray(self.values)
        if not np.issubdtype(vals.dtype, np.floating):
            vals = vals.astype(np.float64)
        if self.semantics == "angle":
            interval = self.interval or "2pi"
            if interval not in ANGLE_INTERVALS:
                raise ValueError(f"unknown angle interval {interval!r}")
            object.__setattr__(self, "interval", interval)
            vals = wrap_angle(vals, ANGLE_INTERVALS[interval]).astype(vals.dtype, copy=False)
        elif self.interval is not None:
            raise ValueError("interval only applies to angle maps")
        if self.semantics == "dolp":
            finite = vals[np.isfinite(vals)]
            if finite.size and (finite.min() < 0 or finite.max() > 1):
                raise IntegrityError("DOLP map leaves [0, 1]")
        object.__setattr__(self, "values", _readonly(vals))
        _check_shape(self.grid, self.values, "values")
        if self.valid is not None:
            object.__setattr__(self, "valid", _readonly(self.valid, bool))
            _check_shape(self.grid, self.valid, "valid")

    @property
    def valid_mask(self) -> np.ndarray:
        if self.valid is None:
            return np.ones(self.grid.shape, bool)
        return self.valid


@dataclass(frozen=True)
class PolarizationStack:
    """Co-registered intensities behind analyzers at 0, 45, 90 and 135 degrees."""

    grid: GridSpec
    i0: np.ndarray
    i45: np.ndarray
    i90: np.ndarray
    i135: np.ndarray

    CHANNELS = ("i0", "i45", "i90", "i135")
    ANGLES = (0.0, np.pi / 4, np.pi / 2, 3 * np.pi / 4)

    def __post_init__(self):
        for name in self.CHANNELS:
            arr = np.asarray(getattr(self, name))
            if not np.issubdtype(arr.dtype, np.floating):
                arr = arr.astype(np.float64)
            _check_shape(self.grid, arr, name)
            if np.any(arr < 0):
                raise IntegrityError(f"channel {name} has negative intensities")
            object.__setattr__(self, name, _readonly(arr))

    @classmethod
    def from_array(cls, grid: GridSpec, arr: np.ndarray) -> "PolarizationStack":
        """Build from a ``(4, H, W)`` array ordered 0/45/90/135."""
        return cls(grid, arr[0], arr[1], arr[2], arr[3])

    def as_array(self) -> np.ndarray:
        return np.stack([self.i0, self.i45, self.i90, self.i135])

    @property
    def s0(self) -> np.ndarray:
        """Total intensity I0 + I90."""
        return self.i0 + self.i90

    def channel_sum_error(self) -> float:
        """Largest relative mismatch between I0+I90 and I45+I135."""
        a = self.i0 + self.i90
        b = self.i45 + self.i135
        scale = max(float(np.max(np.abs(a))), 1e-300)
        return float(np.max(np.abs(a - b)) / scale)


@dataclass(frozen=True)
class DepthMap:
    """Absolute depth in meters with per-pixel confidence and void mask."""

    grid: GridSpec
    depth: np.ndarray
    confidence: np.ndarray
    void: np.ndarray
    threshold: float = 0.42

    def __post_init__(self):
        depth = np.asarray(self.depth)
        if not np.issubdtype(depth.dtype, np.floating):
            depth = depth.astype(np.float64)
        conf = np.asarray(self.confidence)
        if not np.issubdtype(conf.dtype, np.floating):
            conf = conf.astype(np.float64)
        object.__setattr__(self, "depth", _readonly(depth))
        object.__setattr__(self, "confidence", _readonly(conf))
        object.__setattr__(self, "void", _readonly(self.void, bool))
        for name in ("depth", "confidence", "void"):
            _check_shape(self.grid, getattr(self, name), name)
        if np.any(self.confidence < 0):
            raise IntegrityError("confidence must be non-negative")
        if np.any(~self.void & ~(self.depth > 0)):
            raise IntegrityError("non-void pixels must have positive depth")

    @property
    def void_fraction(self) -> float:
        return float(self.void.mean())


@dataclass(frozen=True)
class NormalField:
    """Zenith in [0, pi/2), azimuth in [0, 2 pi) and a validity flag."""

    grid: GridSpec
    zenith: np.ndarray
    azimuth: np.ndarray
    valid: np.ndarray

    def __post_init__(self):
        zen = np.asarray(self.zenith, dtype=np.float64)
        if np.any(zen < 0) or np.any(zen >= np.pi / 2):
            raise IntegrityError("zenith must lie in [0, pi/2)")
        object.__setattr__(self, "zenith", _readonly(zen))
        object.__setattr__(self, "azimuth", _readonly(wrap_angle(np.asarray(self.azimuth, dtype=np.float64))))
        object.__setattr__(self, "valid", _readonly(self.valid, bool))
        for name in ("zenith", "azimuth", "valid"):
            _check_shape(self.grid, getattr(self, name), name)

    def normals(self) -> np.ndarray:
        """Unit normals ``(H, W, 3)`` from ``[tan(zen) cos(az), tan(zen) sin(az), 1]``."""
        t = np.tan(self.zenith)
        n = np.stack([t * np.cos(self.azimuth), t * np.sin(self.azimuth), np.ones_like(t)], axis=-1)
        return n / np.linalg.norm(n, axis=-1, keepdims=True)


@dataclass(frozen=True)
class CameraSpec:
    """Monochromatic camera with a phase mask in its pupil.

    Parameters
    ----------
    wavelength : float
        Design wavelength in meters.
    pupil_radius : float
        Entrance pupil radius R in meters.
    focus_depth : float
        Object distance imaged sharply, in meters.
    sensor : GridSpec
        Sensor raster.  ``sensor.pitch`` is the pixel pitch.
    focal_length : float
        Effective focal length; the per-pixel field of view is
        ``pitch / focal_length``.
    """

    wavelength: float
    pupil_radius: float
    focus_depth: float
    sensor: GridSpec
    focal_length: float

    def __post_init__(self):
        for name in ("wavelength", "pupil_radius", "focus_depth", "focal_length"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive")

    @property
    def pfov(self) -> float:
        """Per-pixel field of view in radians."""
        return self.sensor.pitch / self.focal_length

    @property
    def sampling(self) -> float:
        """Pupil radius in units of wavelength / PFOV.

        This is the only combination the sensor-plane PSF depends on; roughly
        one lobe diameter spans ``0.6 / sampling`` pixels.
        """
        return self.pupil_radius * self.pfov / self.wavelength

    def with_sensor(self, width: int, height: int) -> "CameraSpec":
        return CameraSpec(self.wavelength, self.pupil_radius, self.focus_depth,
                          GridSpec(width, height, self.sensor.pitch), self.focal_length)

    def to_dict(self) -> dict:
        return {
            "wavelength": self.wavelength,
            "pupil_radius": self.pupil_radius,
            "focus_depth": self.focus_depth,
            "focal_length": self.focal_length,
            "pitch": self.sensor.pitch,
            "width": self.sensor.width,
            "height": self.sensor.height,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "CameraSpec":
        return cls(float(d["wavelength"]), float(d["pupil_radius"]), float(d["focus_depth"]),
                   GridSpec(int(d["width"]), int(d["height"]), float(d["pitch"])),
                   float(d["focal_length"]))


def energy(field: ComplexField) -> float:
    """Total power ``sum |v|^2``."""
    v = field.values
    return float(np.sum(v.real.astype(np.float64) ** 2 + v.imag.astype(np.float64) ** 2))


# ---------------------------------------------------------------- file format

Storable = Union[ComplexField, ScalarMap, PolarizationStack, DepthMap, NormalField]

_FLOAT_KEYS = {"pitch", "wavelength", "threshold"}
_INT_KEYS = {"width", "height", "channels", "complex", "payload_bytes"}


def _planes(obj: Storable) -> tuple[str, dict, list[np.ndarray], bool]:
    meta: dict = {}
    if isinstance(obj, ComplexField):
        meta["wavelength"] = obj.wavelength
        return "complex_field", meta, [obj.values], True
    if isinstance(obj, ScalarMap):
        meta["semantics"] = obj.semantics
        if obj.interval is not None:
            meta["interval"] = obj.interval
        planes = [obj.values]
        if obj.valid is not None:
            planes.append(obj.valid.astype(np.float32))
            meta["names"] = "values,valid"
        else:
            meta["names"] = "values"
        return "scalar_map", meta, planes, False
    if isinstance(obj, PolarizationStack):
        meta["names"] = "i0,i45,i90,i135"
        return "polarization_stack", meta, [obj.i0, obj.i45, obj.i90, obj.i135], False
    if isinstance(obj, DepthMap):
        meta["names"] = "depth,confidence,void"
        meta["threshold"] = obj.threshold
        return "depth_map", meta, [obj.depth, obj.confidence, obj.void.astype(np.float32)], False
    if isinstance(obj, NormalField):
        meta["names"] = "zenith,azimuth,valid"
        return "normal_field", meta, [obj.zenith, obj.azimuth, obj.valid.astype(np.float32)], False
    raise TypeError(f"cannot store {type(obj).__name__}")


def save_field(path: Union[str, Path], obj: Storable) -> Path:
    """Write ``obj`` to ``path`` in the ``.emf`` container.

    Values are stored as float32, so objects holding float64 data are rounded
    once; anything already float32 (or complex64) round-trips bit-exactly.
    """
    kind, meta, planes, is_complex = _planes(obj)
    grid = obj.grid
    payload = []
    for p in planes:
        if is_complex:
            pair = np.empty(p.shape + (2,), dtype="<f4")
            pair[..., 0] = p.real
            pair[..., 1] = p.imag
            payload.append(pair.tobytes(order="C"))
        else:
            payload.append(np.ascontiguousarray(p, dtype="<f4").tobytes(order="C"))
    body = b"".join(payload)
    header = [
        MAGIC,
        f"kind: {kind}",
        f"width: {grid.width}",
        f"height: {grid.height}",
        f"pitch: {grid.pitch!r}",
        f"channels: {len(planes)}",
        f"complex: {int(is_complex)}",
        "dtype: float32",
        "endianness: little",
        "order: row-major",
    ]
    for key, val in meta.items():
        header.append(f"{key}: {val!r}" if key in _FLOAT_KEYS else f"{key}: {val}")
    header.append(f"payload_bytes: {len(body)}")
    header.append("end")
    path = Path(path)
    with open(path, "wb") as fh:
        fh.write(("\n".join(header) + "\n").encode("utf-8"))
        fh.write(body)
    return path


def _parse_header(raw: bytes) -> tuple[dict, int]:
    meta: dict = {}
    pos = 0
    first = True
    while True:
        nl = raw.find(b"\n", pos)
        if nl < 0:
            raise FormatError("header not terminated by 'end'")
        try:
            line = raw[pos:nl].decode("utf-8")
        except UnicodeDecodeError as exc:
            raise FormatError(f"header is not UTF-8 near byte {pos}") from exc
        pos = nl + 1
        if first:
            if line != MAGIC:
                raise FormatError(f"bad magic {line!r}, expected {MAGIC}")
            first = False
            continue
        if line == "end":
            return meta, pos
        key, sep, val = line.partition(":")
        key = key.strip()
        if not sep or not key:
            raise FormatError(f"malformed header line {line!r}")
        val = val.strip()
        try:
            if key in _INT_KEYS:
                meta[key] = int(val)
            elif key in _FLOAT_KEYS:
                meta[key] = float(val)
            else:
                meta[key] = val
        except ValueError as exc:
            raise FormatError(f"header key {key!r} has unparsable value {val!r}") from exc


_REQUIRED = ("kind", "width", "height", "pitch", "channels", "complex", "dtype", "endianness", "payload_bytes")


def load_field(path: Union[str, Path]) -> Storable:
    """Read an object written by :func:`save_field`."""
    raw = Path(path).read_bytes()
    meta, offset = _parse_header(raw)
    for key in _REQUIRED:
        if key not in meta:
            raise FormatError(f"header key {key!r} missing")
    if meta["dtype"] != "float32":
        raise FormatError(f"header key 'dtype' must be float32, got {meta['dtype']!r}")
    if meta["endianness"] != "little":
        raise FormatError(f"header key 'endianness' must be little, got {meta['endianness']!r}")
    try:
        grid = GridSpec(meta["width"], meta["height"], meta["pitch"])
    except ValueError as exc:
        raise FormatError(f"header key 'width'/'height'/'pitch' invalid: {exc}") from exc
    body = raw[offset:]
    per = 2 if meta["complex"] else 1
    expected = 4 * per * meta["channels"] * grid.width * grid.height
    if len(body) != expected or meta["payload_bytes"] != expected:
        raise IntegrityError(f"payload has {len(body)} bytes, header implies {expected}")
    data = np.frombuffer(body, dtype="<f4")
    h, w = grid.shape
    if meta["complex"]:
        data = data.reshape(meta["channels"], h, w, 2)
        planes = [(d[..., 0] + 1j * d[..., 1]).astype(np.complex64) for d in data]
    else:
        planes = [p.astype(np.float32) for p in data.reshape(meta["channels"], h, w)]

    kind = meta["kind"]

    def need(n):
        if len(planes) != n:
            raise IntegrityError(f"{kind} needs {n} channels, file has {len(planes)}")

    if kind == "complex_field":
        need(1)
        if "wavelength" not in meta:
            raise FormatError("header key 'wavelength' missing")
        return ComplexField(grid, planes[0], meta["wavelength"])
    if kind == "scalar_map":
        names = meta.get("names", "values").split(",")
        need(len(names))
        valid = planes[1] > 0.5 if "valid" in names else None
        return ScalarMap(grid, planes[0], meta.get("semantics", "intensity"),
                         meta.get("interval"), valid)
    if kind == "polarization_stack":
        need(4)
        return PolarizationStack(grid, *planes)
    if kind == "depth_map":
        need(3)
        return DepthMap(grid, planes[0], planes[1], planes[2] > 0.5, meta.get("threshold", 0.42))
    if kind == "normal_field":
        need(3)
        return NormalField(grid, planes[0], planes[1], planes[2] > 0.5)
    raise FormatError(f"header key 'kind' has unknown value {kind!r}")


def file_digest(path: Union[str, Path]) -> str:
    """SHA-256 of a file's bytes."""
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def export_png(path: Union[str, Path], values: np.ndarray, vmin: float, vmax: float, bits: int = 8) -> Path:
    """Linear, gamma-free PNG preview mapping ``[vmin, vmax]`` to the full range.

    Previews are for looking at only; nothing reads them back.
    """
    from PIL import Image
    from PIL.PngImagePlugin import PngInfo

    if bits not in (8, 16):
        raise ValueError("bits must be 8 or 16")
    if not vmax > vmin:
        raise ValueError("vmax must exceed vmin")
    top = 2 ** bits - 1
    scaled = np.clip((np.nan_to_num(np.asarray(values, float), nan=vmin) - vmin) / (vmax - vmin), 0, 1)
    q = np.round(scaled * top)
    if bits == 8:
        img = Image.fromarray(q.astype(np.uint8))
    else:
        img = Image.fromarray(q.astype(np.uint16))
    info = PngInfo()
    info.add_text("vmin", repr(float(vmin)))
    info.add_text("vmax", repr(float(vmax)))
    img.save(path, pnginfo=info)
    return Path(path)


def desk_camera(width: int = 512, height: int = 512) -> CameraSpec:
    """Reference desk-scale camera.

    800 nm light, 10 mm pupil radius, focused at 1 m, 3.45 um pixels behind a
    172.5 mm lens.  The pupil radius is 0.25 wavelength/PFOV, which samples
    the PSF at its Nyquist rate; the calibrated depth span is roughly
    0.93-1.08 m.
    """
    return CameraSpec(800e-9, 10e-3, 1.0, GridSpec(width, height, 3.45e-6), 0.1725)
