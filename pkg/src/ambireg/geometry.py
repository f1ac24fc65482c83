"""Five-parameter C-arm pose, its rigid-transform semantics and sampling.

Axes follow the volume grid: x sagittal, y longitudinal, z transverse.  LAO
rotates about y, CRAN about z.  A pose maps patient (volume) coordinates
into the C-arm frame by rotating LAO first, then CRAN, both about the volume
centre, then translating.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import ParameterError

MASK64 = 0xFFFFFFFFFFFFFFFF

T_SCALE = 20.0
CRAN_SCALE = 20.0
LAO_OFFSET = 90.0
LAO_SCALE = 110.0


def canonicalize_lao(angle_deg: float) -> float:
    """Wrap an LAO angle into (-90, 270]."""
    angle_deg = float(angle_deg)
    if -90.0 < angle_deg <= 270.0:
        return angle_deg
    a = math.fmod(float(angle_deg) + 90.0, 360.0)
    if a <= 0.0:
        a += 360.0
    return a - 90.0


def canonicalize_cran(angle_deg: float) -> float:
    angle_deg = float(angle_deg)
    if -180.0 < angle_deg <= 180.0:
        return angle_deg
    a = math.fmod(float(angle_deg) + 180.0, 360.0)
    if a <= 0.0:
        a += 360.0
    return a - 180.0


@dataclass(frozen=True)
class Pose:
    tx: float = 0.0
    ty: float = 0.0
    tz: float = 0.0
    lao: float = 0.0
    cran: float = 0.0

    def __post_init__(self):
        vals = (self.tx, self.ty, self.tz, self.lao, self.cran)
        if not all(math.isfinite(v) for v in vals):
            raise ParameterError(f"pose fields must be finite: {vals}")
        for name in ("tx", "ty", "tz"):
            object.__setattr__(self, name, float(getattr(self, name)))
        object.__setattr__(self, "lao", canonicalize_lao(self.lao))
        object.__setattr__(self, "cran", canonicalize_cran(self.cran))

    def to_dict(self) -> dict:
        return {"tx": self.tx, "ty": self.ty, "tz": self.tz, "lao": self.lao, "cran": self.cran}

    @classmethod
    def from_dict(cls, d: dict) -> "Pose":
        try:
            return cls(*(float(d[k]) for k in ("tx", "ty", "tz", "lao", "cran")))
        except (KeyError, TypeError, ValueError) as exc:
            raise ParameterError(f"bad pose record {d!r}") from exc

    def flipped(self) -> "Pose":
        """Same pose with LAO shifted by 180 degrees."""
        return Pose(self.tx, self.ty, self.tz, self.lao + 180.0, self.cran)


@dataclass(frozen=True)
class RigidTransform:
    """``x -> rotation @ x + translation``."""

    rotation: np.ndarray
    translation: np.ndarray

    def apply(self, points) -> np.ndarray:
        pts = np.asarray(points, dtype=np.float64)
        return pts @ self.rotation.T + self.translation

    def inverse(self) -> "RigidTransform":
        rt = self.rotation.T
        return RigidTransform(rt, -rt @ self.translation)


def rot_longitudinal(deg: float) -> np.ndarray:
    """Rotation about the y axis."""
    a = math.radians(deg)
    c, s = math.cos(a), math.sin(a)
    return np.array([[c, 0.0, s], [0.0, 1.0, 0.0], [-s, 0.0, c]])


def rot_transverse(deg: float) -> np.ndarray:
    """Rotation about the z axis."""
    a = math.radians(deg)
    c, s = math.cos(a), math.sin(a)
    return np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])


def pose_to_transform(p: Pose, volume_center=(0.0, 0.0, 0.0)) -> RigidTransform:
    c = np.asarray(volume_center, dtype=np.float64)
    r = rot_transverse(p.cran) @ rot_longitudinal(p.lao)
    t = np.array([p.tx, p.ty, p.tz])
    return RigidTransform(r, c + t - r @ c)


@dataclass(frozen=True)
class PoseSamplerConfig:
    t_range: tuple[float, float] = (-20.0, 20.0)
    rot_range_deg: tuple[int, int] = (-20, 20)
    rot_step_deg: int = 1
    flip_prob: float = 0.5
    seed: int = 0

    def validate(self):
        lo, hi = self.t_range
        if not lo < hi:
            raise ParameterError("t_range must satisfy low < high")
        rlo, rhi = self.rot_range_deg
        if self.rot_step_deg <= 0 or rhi < rlo or (rhi - rlo) % self.rot_step_deg:
            raise ParameterError("rot_step_deg must evenly divide rot_range_deg")
        if not 0.0 <= self.flip_prob <= 1.0:
            raise ParameterError("flip_prob must be in [0, 1]")


def splitmix64(x: int) -> int:
    x = (x + 0x9E3779B97F4A7C15) & MASK64
    x = ((x ^ (x >> 30)) * 0xBF58476D1CE4E5B9) & MASK64
    x = ((x ^ (x >> 27)) * 0x94D049BB133111EB) & MASK64
    return x ^ (x >> 31)


def mix_seed(seed: int, index: int) -> int:
    """Derive an independent 64-bit stream seed from (seed, index)."""
    return splitmix64((seed & MASK64) ^ splitmix64(index & MASK64))


def sample_pose(cfg: PoseSamplerConfig, draw_index: int) -> Pose:
    rng = np.random.default_rng(mix_seed(cfg.seed, draw_index))
    lo, hi = cfg.t_range
    t = rng.uniform(lo, hi, size=3)
    grid = np.arange(cfg.rot_range_deg[0], cfg.rot_range_deg[1] + 1, cfg.rot_step_deg)
    lao, cran = rng.choice(grid, size=2)
    flip = rng.random() < cfg.flip_prob
    return Pose(t[0], t[1], t[2], float(lao) + (180.0 if flip else 0.0), float(cran))


def pose_vector(p: Pose) -> np.ndarray:
    return np.array(
        [
            p.tx / T_SCALE,
            p.ty / T_SCALE,
            p.tz / T_SCALE,
            (p.lao - LAO_OFFSET) / LAO_SCALE,
            p.cran / CRAN_SCALE,
        ]
    )


def vector_pose(v) -> Pose:
    v = np.asarray(v, dtype=np.float64)
    if v.shape != (5,):
        raise ParameterError(f"pose vector must have 5 entries, got shape {v.shape}")
    return Pose(
        v[0] * T_SCALE,
        v[1] * T_SCALE,
        v[2] * T_SCALE,
        v[3] * LAO_SCALE + LAO_OFFSET,
        v[4] * CRAN_SCALE,
    )


def canonicalize_vectors(v: np.ndarray) -> np.ndarray:
    """Wrap the LAO (and CRAN) column of an (n, 5) array of pose vectors."""
    v = np.array(v, dtype=np.float64)
    lao = v[:, 3] * LAO_SCALE + LAO_OFFSET
    bad = ~((lao > -90.0) & (lao <= 270.0))
    if bad.any():
        v[bad, 3] = [(canonicalize_lao(a) - LAO_OFFSET) / LAO_SCALE for a in lao[bad]]
    cran = v[:, 4] * CRAN_SCALE
    bad = ~((cran > -180.0) & (cran <= 180.0))
    if bad.any():
        v[bad, 4] = [canonicalize_cran(a) / CRAN_SCALE for a in cran[bad]]
    return v
