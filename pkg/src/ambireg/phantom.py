"""Procedural spine-like density volumes and their on-disk format.

Volumes are indexed ``data[i, j, k]`` with ``i`` along x (sagittal), ``j``
along y (longitudinal) and ``k`` along z (transverse).  The file format
stores them x-fastest.

Without a marker a phantom is exactly invariant under the half turn about
the central longitudinal grid axis, ``(i, j, k) -> (nx-1-i, j, nz-1-k)``.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import FormatError, ParameterError

DEFAULT_DIMS = (64, 128, 64)
DEFAULT_SPACING = (2.0, 2.0, 2.0)


@dataclass(frozen=True, eq=False)
class Volume:
    dims: tuple[int, int, int]
    spacing: tuple[float, float, float]
    data: np.ndarray = field(repr=False)

    def __post_init__(self):
        dims = tuple(int(d) for d in self.dims)
        spacing = tuple(float(s) for s in self.spacing)
        if len(dims) != 3 or min(dims) < 1:
            raise ParameterError(f"bad volume dims {self.dims}")
        if len(spacing) != 3 or not all(s > 0 and np.isfinite(s) for s in spacing):
            raise ParameterError(f"spacing must be positive, got {self.spacing}")
        data = np.asarray(self.data, dtype=np.float32)
        if data.shape != dims:
            raise ParameterError(f"data shape {data.shape} does not match dims {dims}")
        if not np.all(np.isfinite(data)) or data.min(initial=0.0) < 0 or data.max(initial=0.0) > 1:
            raise ParameterError("volume values must be finite and in [0, 1]")
        data.setflags(write=False)
        object.__setattr__(self, "dims", dims)
        object.__setattr__(self, "spacing", spacing)
        object.__setattr__(self, "data", data)

    @property
    def extent_mm(self) -> np.ndarray:
        """Distance between the first and last voxel centre along each axis."""
        return (np.asarray(self.dims) - 1) * np.asarray(self.spacing)

    def __eq__(self, other):
        if not isinstance(other, Volume):
            return NotImplemented
        return (
            self.dims == other.dims
            and self.spacing == other.spacing
            and np.array_equal(self.data, other.data)
        )


@dataclass(frozen=True)
class Marker:
    """Off-axis sphere; offset is relative to the volume centre in mm."""

    offset_mm: tuple[float, float, float] = (10.0, 20.0, 40.0)
    radius_mm: float = 12.0
    density: float = 1.0


@dataclass(frozen=True)
class PhantomSpec:
    dims: tuple[int, int, int] = DEFAULT_DIMS
    spacing: tuple[float, float, float] = DEFAULT_SPACING
    n_vertebrae: int = 5
    body_density: float = 0.6
    process_density: float = 0.8
    marker: Marker | None = None
    seed: int = 0

    def validate(self):
        if len(self.dims) != 3 or min(self.dims) < 8:
            raise ParameterError(f"phantom dims must be >= 8 per axis, got {self.dims}")
        if len(self.spacing) != 3 or min(self.spacing) <= 0:
            raise ParameterError(f"spacing must be positive, got {self.spacing}")
        if self.n_vertebrae < 0:
            raise ParameterError("n_vertebrae must be >= 0")
        dens = [self.body_density, self.process_density]
        if self.marker is not None:
            dens.append(self.marker.density)
            if self.marker.radius_mm <= 0:
                raise ParameterError("marker radius must be positive")
        for d in dens:
            if not 0.0 <= d <= 1.0:
                raise ParameterError(f"density {d} outside [0, 1]")


def rot180(data: np.ndarray) -> np.ndarray:
    """Half turn about the central longitudinal (y) grid axis."""
    return data[::-1, :, ::-1]


def _grid(spec: PhantomSpec):
    axes = [
        (np.arange(n) - (n - 1) / 2.0) * s for n, s in zip(spec.dims, spec.spacing)
    ]
    return np.meshgrid(*axes, indexing="ij")


def _segment_distance(x, y, z, a, b):
    # distance from grid points to the segment a-b
    ab = np.subtract(b, a)
    px, py, pz = x - a[0], y - a[1], z - a[2]
    t = (px * ab[0] + py * ab[1] + pz * ab[2]) / float(ab @ ab)
    t = np.clip(t, 0.0, 1.0)
    dx, dy, dz = px - t * ab[0], py - t * ab[1], pz - t * ab[2]
    return np.sqrt(dx * dx + dy * dy + dz * dz)


def make_phantom(spec: PhantomSpec) -> Volume:
    """Build a deterministic spine-like volume from ``spec``.

    Each vertebra is an ellipsoidal body on the longitudinal axis plus one
    cylindrical process leaving it posteriorly at a seed-dependent angle.
    The union with its own half-turned copy makes the anatomy symmetric
    under the 180 degree LAO flip but under no mirror.  The optional marker
    is added after symmetrization and is the only symmetry breaker.
    """
    spec.validate()
    x, y, z = _grid(spec)
    half = np.zeros(spec.dims, dtype=np.float64)
    rng = np.random.default_rng(np.uint64(spec.seed & 0xFFFFFFFFFFFFFFFF))

    if spec.n_vertebrae > 0:
        length_y = spec.dims[1] * spec.spacing[1]
        pitch = length_y / spec.n_vertebrae
        for n in range(spec.n_vertebrae):
            cy = -length_y / 2.0 + (n + 0.5) * pitch
            ax = rng.uniform(13.0, 15.0)
            ay = pitch * rng.uniform(0.32, 0.36)
            az = rng.uniform(17.5, 19.5)
            body = (x / ax) ** 2 + ((y - cy) / ay) ** 2 + (z / az) ** 2 <= 1.0
            half[body] = np.maximum(half[body], spec.body_density)

            # process leaves posteriorly (-x), tilted towards +z
            phi = np.deg2rad(rng.uniform(38.0, 42.0))
            length = rng.uniform(38.0, 42.0)
            radius = rng.uniform(4.0, 4.5)
            tip = np.array([-np.cos(phi) * length, cy + rng.uniform(-1.5, 1.5), np.sin(phi) * length])
            root = np.array([0.0, cy, 0.0])
            proc = _segment_distance(x, y, z, root, tip) <= radius
            half[proc] = np.maximum(half[proc], spec.process_density)

    data = np.maximum(half, rot180(half))

    if spec.marker is not None:
        m = spec.marker
        ox, oy, oz = m.offset_mm
        sphere = (x - ox) ** 2 + (y - oy) ** 2 + (z - oz) ** 2 <= m.radius_mm**2
        data[sphere] = np.maximum(data[sphere], m.density)

    return Volume(spec.dims, spec.spacing, data.astype(np.float32))


def sample_trilinear(v: Volume, p) -> float:
    """Trilinear interpolation at voxel coordinate ``p``; 0 outside the grid."""
    p = np.asarray(p, dtype=np.float64)
    dims = v.dims
    if np.any(p < 0) or np.any(p > np.asarray(dims) - 1) or not np.all(np.isfinite(p)):
        return 0.0
    idx = []
    frac = []
    for c, n in zip(p, dims):
        if n == 1:
            idx.append(0)
            frac.append(0.0)
            continue
        i0 = min(int(np.floor(c)), n - 2)
        idx.append(i0)
        frac.append(c - i0)
    d = v.data
    out = 0.0
    for di in (0, 1):
        wi = frac[0] if di else 1.0 - frac[0]
        if wi == 0.0:
            continue
        for dj in (0, 1):
            wj = frac[1] if dj else 1.0 - frac[1]
            if wj == 0.0:
                continue
            for dk in (0, 1):
                wk = frac[2] if dk else 1.0 - frac[2]
                if wk == 0.0:
                    continue
                out += wi * wj * wk * float(d[idx[0] + di, idx[1] + dj, idx[2] + dk])
    return out


def resample(v: Volume, dims) -> np.ndarray:
    """Trilinear resample onto ``dims`` samples covering the same extent.

    Returns a float64 array; used to feed the conditioning network.
    """
    from scipy.ndimage import map_coordinates

    coords = [np.linspace(0.0, n_in - 1, n_out) for n_in, n_out in zip(v.dims, dims)]
    grid = np.meshgrid(*coords, indexing="ij")
    return map_coordinates(v.data.astype(np.float64), grid, order=1, mode="nearest")


_HEADER_KEYS = {"dims", "spacing_mm", "dtype", "order"}


def save_volume(v: Volume, path) -> None:
    header = {
        "dims": list(v.dims),
        "spacing_mm": list(v.spacing),
        "dtype": "f32le",
        "order": "x-fastest",
    }
    payload = np.asarray(v.data, dtype="<f4").ravel(order="F").tobytes()
    with open(path, "wb") as fh:
        fh.write(json.dumps(header).encode("utf-8") + b"\n")
        fh.write(payload)


def load_volume(path) -> Volume:
    raw = Path(path).read_bytes()
    nl = raw.find(b"\n")
    if nl < 0:
        raise FormatError(f"{path}: missing header line")
    try:
        header = json.loads(raw[:nl].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FormatError(f"{path}: unreadable header ({exc})") from exc
    if not isinstance(header, dict) or set(header) != _HEADER_KEYS:
        raise FormatError(f"{path}: header keys must be {sorted(_HEADER_KEYS)}")
    if header["dtype"] != "f32le" or header["order"] != "x-fastest":
        raise FormatError(f"{path}: unsupported dtype/order")
    dims = header["dims"]
    if len(dims) != 3 or not all(isinstance(d, int) and d > 0 for d in dims):
        raise FormatError(f"{path}: bad dims {dims}")
    payload = raw[nl + 1 :]
    expected = 4 * dims[0] * dims[1] * dims[2]
    if len(payload) != expected:
        raise FormatError(f"{path}: payload has {len(payload)} bytes, expected {expected}")
    data = np.frombuffer(payload, dtype="<f4").reshape(dims, order="F")
    try:
        return Volume(tuple(dims), tuple(header["spacing_mm"]), data.astype(np.float32))
    except ParameterError as exc:
        raise FormatError(f"{path}: {exc}") from exc
