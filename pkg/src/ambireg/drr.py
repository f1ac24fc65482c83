"""Cone-beam digitally reconstructed radiographs.

C-arm frame: isocentre at the origin, point source at ``(-SID, 0, 0)``,
flat detector in the plane ``x = SDD - SID``.  Detector rows run along y
(longitudinal), columns along z (transverse).  A pose places the volume in
this frame (see :func:`ambireg.geometry.pose_to_transform`); rays are cast
back into voxel coordinates and integrated with the midpoint rule.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from ._kernels import kernels
from .errors import ConfigError, FormatError, ParameterError
from .geometry import Pose, pose_to_transform
from .phantom import Volume


@dataclass(frozen=True)
class CameraConfig:
    source_to_detector_mm: float = 1000.0
    source_to_isocenter_mm: float = 600.0
    detector_px: tuple[int, int] = (64, 64)
    pixel_pitch_mm: float = 4.0
    step_mm: float | None = None
    norm_constant: float = 1.0

    def validate(self):
        vals = [self.source_to_detector_mm, self.source_to_isocenter_mm, self.pixel_pitch_mm,
                self.norm_constant]
        if self.step_mm is not None:
            vals.append(self.step_mm)
        if not all(np.isfinite(v) and v > 0 for v in vals):
            raise ConfigError("camera distances, pitch, step and norm_constant must be positive")
        if len(self.detector_px) != 2 or min(self.detector_px) < 1:
            raise ConfigError(f"bad detector size {self.detector_px}")
        if not self.source_to_isocenter_mm < self.source_to_detector_mm:
            raise ConfigError("source_to_isocenter_mm must be smaller than source_to_detector_mm")

    def with_norm(self, norm_constant: float) -> "CameraConfig":
        return replace(self, norm_constant=float(norm_constant))

    def to_dict(self) -> dict:
        return {
            "source_to_detector_mm": self.source_to_detector_mm,
            "source_to_isocenter_mm": self.source_to_isocenter_mm,
            "detector_px": list(self.detector_px),
            "pixel_pitch_mm": self.pixel_pitch_mm,
            "step_mm": self.step_mm,
            "norm_constant": self.norm_constant,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "CameraConfig":
        d = dict(d)
        if "detector_px" in d:
            d["detector_px"] = tuple(d["detector_px"])
        return cls(**d)


@dataclass(frozen=True, eq=False)
class Image2D:
    """Projection image; ``data`` has shape (h, w) with dims = (w, h)."""

    dims: tuple[int, int]
    data: np.ndarray = field(repr=False)

    def __post_init__(self):
        dims = tuple(int(d) for d in self.dims)
        data = np.asarray(self.data, dtype=np.float32)
        if len(dims) != 2 or data.shape != (dims[1], dims[0]):
            raise ParameterError(f"image data shape {data.shape} does not match dims {dims}")
        if not np.all(np.isfinite(data)) or data.min(initial=0.0) < 0:
            raise ParameterError("image values must be finite and non-negative")
        data.setflags(write=False)
        object.__setattr__(self, "dims", dims)
        object.__setattr__(self, "data", data)

    @classmethod
    def from_array(cls, arr) -> "Image2D":
        arr = np.asarray(arr)
        return cls((arr.shape[1], arr.shape[0]), arr)

    def __eq__(self, other):
        if not isinstance(other, Image2D):
            return NotImplemented
        return self.dims == other.dims and np.array_equal(self.data, other.data)


def _rays(v: Volume, p: Pose, cam: CameraConfig):
    cam.validate()
    w, h = cam.detector_px
    sid = cam.source_to_isocenter_mm
    src = np.array([-sid, 0.0, 0.0])
    rows = (np.arange(h) - (h - 1) / 2.0) * cam.pixel_pitch_mm
    cols = (np.arange(w) - (w - 1) / 2.0) * cam.pixel_pitch_mm
    yy, zz = np.meshgrid(rows, cols, indexing="ij")
    pix = np.stack([np.full(yy.shape, cam.source_to_detector_mm - sid), yy, zz], axis=-1)
    pix = pix.reshape(-1, 3)

    # C-arm frame -> volume frame (centre-relative mm) -> voxel coordinates
    inv = pose_to_transform(p).inverse()
    src_q = inv.apply(src)
    d = pix - src
    dist = np.linalg.norm(d, axis=1)
    d_q = (d / dist[:, None]) @ inv.rotation.T
    spacing = np.asarray(v.spacing)
    centre = (np.asarray(v.dims) - 1) / 2.0
    origin_v = src_q / spacing + centre
    dirs_v = d_q / spacing
    upper = np.asarray(v.dims) - 1.0
    if np.all(origin_v >= 0) and np.all(origin_v <= upper):
        raise ConfigError("x-ray source lies inside the volume bounding box")
    return origin_v, dirs_v, float(dist.max())


def raw_integrals(v: Volume, p: Pose, cam: CameraConfig) -> np.ndarray:
    """Un-normalized line integrals (density x mm), shape (h, w)."""
    origin, dirs, s_max = _rays(v, p, cam)
    step = cam.step_mm if cam.step_mm is not None else 0.5 * min(v.spacing)
    vals = kernels.ray_integrals(v.data.astype(np.float64), origin, dirs, step, s_max)
    w, h = cam.detector_px
    return vals.reshape(h, w)


def render_drr(v: Volume, p: Pose, cam: CameraConfig) -> Image2D:
    raw = raw_integrals(v, p, cam)
    return Image2D.from_array((raw / cam.norm_constant).astype(np.float32))


def calibrate_norm_constant(raws, percentile: float = 99.0) -> float:
    """Shared normalization: a high percentile of all pooled raw integrals."""
    pooled = np.concatenate([np.ravel(r) for r in raws])
    value = float(np.percentile(pooled, percentile))
    if not value > 0:
        raise ParameterError("calibration batch has no positive line integrals")
    return value


def l1_image_distance(a: Image2D, b: Image2D) -> float:
    """Mean absolute per-pixel difference."""
    if a.dims != b.dims:
        raise ParameterError(f"image dims differ: {a.dims} vs {b.dims}")
    return float(np.mean(np.abs(a.data.astype(np.float64) - b.data.astype(np.float64))))


def augment_array(x, rng, sigma=None, gamma=None) -> np.ndarray:
    """Gaussian noise then contrast scaling about 0.5, clamped to [0, 1]."""
    x = np.asarray(x, dtype=np.float64)
    if sigma is None:
        sigma = rng.uniform(0.0, 0.02)
    if gamma is None:
        gamma = rng.uniform(0.8, 1.25)
    noisy = x + rng.normal(0.0, 1.0, size=x.shape) * sigma if sigma > 0 else x
    return np.clip(gamma * (noisy - 0.5) + 0.5, 0.0, 1.0)


def augment(img: Image2D, rng, sigma=None, gamma=None) -> Image2D:
    return Image2D.from_array(augment_array(img.data, rng, sigma, gamma).astype(np.float32))


def save_image(img: Image2D, path) -> None:
    header = {"dims": list(img.dims), "dtype": "f32le"}
    with open(path, "wb") as fh:
        fh.write(json.dumps(header).encode("utf-8") + b"\n")
        fh.write(np.asarray(img.data, dtype="<f4").tobytes())


def load_image(path) -> Image2D:
    raw = Path(path).read_bytes()
    nl = raw.find(b"\n")
    if nl < 0:
        raise FormatError(f"{path}: missing header line")
    try:
        header = json.loads(raw[:nl].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FormatError(f"{path}: unreadable header ({exc})") from exc
    if not isinstance(header, dict) or set(header) != {"dims", "dtype"} or header["dtype"] != "f32le":
        raise FormatError(f"{path}: unsupported image header {header!r}")
    dims = header["dims"]
    if len(dims) != 2 or not all(isinstance(d, int) and d > 0 for d in dims):
        raise FormatError(f"{path}: bad dims {dims}")
    payload = raw[nl + 1 :]
    if len(payload) != 4 * dims[0] * dims[1]:
        raise FormatError(f"{path}: payload has {len(payload)} bytes, expected {4 * dims[0] * dims[1]}")
    data = np.frombuffer(payload, dtype="<f4").reshape(dims[1], dims[0])
    try:
        return Image2D(tuple(dims), data.astype(np.float32))
    except ParameterError as exc:
        raise FormatError(f"{path}: {exc}") from exc


def save_pgm(img: Image2D, path, vmax: float | None = None) -> None:
    """8-bit greyscale export for eyeballing; lossy and never read back."""
    data = np.asarray(img.data, dtype=np.float64)
    top = vmax if vmax is not None else max(float(data.max()), 1e-12)
    px = np.clip(np.round(255.0 * data / top), 0, 255).astype(np.uint8)
    h, w = px.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        fh.write(px.tobytes())
