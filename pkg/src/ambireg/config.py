"""Run configuration (JSON with full defaults) and dataset manifests (JSONL)."""

from __future__ import annotations

import json
import os
from dataclasses import asdict, dataclass, field, fields, is_dataclass, replace
from pathlib import Path

from .cinn import FlowConfig
from .condnet import CondNetConfig
from .drr import CameraConfig
from .errors import ConfigError, FormatError
from .geometry import Pose, PoseSamplerConfig
from .phantom import Marker, PhantomSpec

OUTPUT_ROOT_ENV = "AMBIREG_OUTPUT_ROOT"


@dataclass(frozen=True)
class DataConfig:
    n_train_phantoms: int = 4
    n_test_phantoms: int = 2
    poses_per_phantom: int = 64
    # every second phantom (odd index) carries the asymmetric marker
    marked_every: int = 2
    calibration_images: int = 100
    phantom: PhantomSpec = PhantomSpec()
    marker: Marker = Marker()
    test_seed_offset: int = 1_000_003


@dataclass(frozen=True)
class StageConfig:
    epochs: int = 40
    batch_size: int = 32
    lr: float = 0.01
    weight_decay: float = 1e-5
    decay_every: int = 100
    decay_factor: float = 0.1
    augment: bool = True
    # random half turn of volume and pose (an exact image-preserving symmetry)
    half_turn: bool = False


@dataclass(frozen=True)
class ModesConfig:
    threshold: float = 2000.0
    n_samples: int = 4096
    histogram_cases: tuple[int, ...] = (0, 1)
    svg: bool = True


@dataclass(frozen=True)
class RunConfig:
    seed: int = 0
    output_root: str = "runs"
    data: DataConfig = DataConfig()
    sampler: PoseSamplerConfig = PoseSamplerConfig()
    camera: CameraConfig = CameraConfig()
    condnet: CondNetConfig = CondNetConfig()
    flow: FlowConfig = FlowConfig()
    stage1: StageConfig = StageConfig(epochs=40)
    stage2: StageConfig = StageConfig(epochs=120)
    modes: ModesConfig = ModesConfig()

    def validate(self):
        d = self.data
        if min(d.n_train_phantoms, d.poses_per_phantom) < 1 or d.n_test_phantoms < 0:
            raise ConfigError("need at least one training phantom and one pose per phantom")
        if d.marked_every < 0 or d.calibration_images < 1:
            raise ConfigError("marked_every must be >= 0 and calibration_images >= 1")
        for name, st in (("stage1", self.stage1), ("stage2", self.stage2)):
            if st.epochs < 0 or st.batch_size < 1 or st.lr <= 0 or st.decay_every < 1:
                raise ConfigError(f"{name}: epochs >= 0, batch_size >= 1, lr > 0, decay_every >= 1")
        if self.modes.n_samples < 50:
            raise ConfigError("modes.n_samples must be >= 50")
        if self.flow.depth < 1 or self.flow.hidden < 1 or self.flow.clamp_alpha <= 0:
            raise ConfigError("flow depth, hidden and clamp_alpha must be positive")
        try:
            d.phantom.validate()
            self.sampler.validate()
            self.condnet.validate()
        except ConfigError:
            raise
        except Exception as exc:
            raise ConfigError(str(exc)) from exc
        self.camera.validate()
        return self

    def to_dict(self) -> dict:
        return _to_plain(self)

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        return _from_plain(cls, d, "").validate()

    def output_dir(self) -> Path:
        return Path(os.environ.get(OUTPUT_ROOT_ENV) or self.output_root)


def _to_plain(obj):
    if is_dataclass(obj):
        return {f.name: _to_plain(getattr(obj, f.name)) for f in fields(obj)}
    if isinstance(obj, tuple):
        return [_to_plain(x) for x in obj]
    return obj


def _from_plain(cls, d, where):
    if not isinstance(d, dict):
        raise ConfigError(f"{where or 'config'}: expected an object, got {type(d).__name__}")
    known = {f.name: f for f in fields(cls)}
    unknown = sorted(set(d) - set(known))
    if unknown:
        raise ConfigError(f"unknown config key(s) {', '.join(where + k for k in unknown)}")
    default = cls()
    kwargs = {}
    for name, value in d.items():
        cur = getattr(default, name)
        kwargs[name] = _coerce(cur, value, f"{where}{name}", known[name])
    try:
        return replace(default, **kwargs)
    except TypeError as exc:
        raise ConfigError(str(exc)) from exc


def _nested_type(f, cur):
    if cur is not None:
        return type(cur)
    # Optional nested dataclass with a None default (phantom marker)
    return Marker if f.name == "marker" else None


def _coerce(cur, value, where, f):
    typ = _nested_type(f, cur)
    if typ is not None and is_dataclass(typ):
        if value is None:
            return None
        return _from_plain(typ, value, where + ".")
    if isinstance(cur, bool):
        if not isinstance(value, bool):
            raise ConfigError(f"{where}: expected true/false, got {value!r}")
        return value
    if isinstance(cur, tuple):
        if not isinstance(value, (list, tuple)):
            raise ConfigError(f"{where}: expected a list, got {value!r}")
        return tuple(value)
    if isinstance(cur, int) and not isinstance(value, bool) and isinstance(value, int):
        return value
    if isinstance(cur, float) and isinstance(value, (int, float)) and not isinstance(value, bool):
        return float(value)
    if isinstance(cur, str) and isinstance(value, str):
        return value
    if cur is None:
        return value
    raise ConfigError(f"{where}: bad value {value!r} (default is {cur!r})")


def load_config(path=None, overrides=()) -> RunConfig:
    """Defaults, then the JSON file at ``path``, then ``key.path=value`` overrides."""
    d = RunConfig().to_dict()
    if path is not None:
        try:
            user = json.loads(Path(path).read_text())
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: invalid JSON ({exc})") from exc
        _merge(d, user, "")
    for item in overrides:
        apply_override(d, item)
    return RunConfig.from_dict(d)


def _merge(base, user, where):
    if not isinstance(user, dict):
        raise ConfigError(f"{where or 'config'}: expected an object")
    for k, v in user.items():
        if k not in base:
            raise ConfigError(f"unknown config key {where}{k}")
        if isinstance(base[k], dict) and isinstance(v, dict):
            _merge(base[k], v, f"{where}{k}.")
        else:
            base[k] = v


def apply_override(d: dict, item: str) -> None:
    if "=" not in item:
        raise ConfigError(f"override must look like key.path=value, got {item!r}")
    key, raw = item.split("=", 1)
    try:
        value = json.loads(raw)
    except json.JSONDecodeError:
        value = raw
    parts = key.strip().split(".")
    node = d
    for i, part in enumerate(parts):
        if not isinstance(node, dict) or part not in node:
            raise ConfigError(f"unknown config key {'.'.join(parts[: i + 1])}")
        if i == len(parts) - 1:
            node[part] = value
        else:
            if node[part] is None and part == "marker":
                node[part] = _to_plain(Marker())
            node = node[part]


# -- dataset manifests --------------------------------------------------------

MANIFEST_FORMAT = "ambireg-manifest-v1"


@dataclass(frozen=True)
class ManifestRecord:
    volume_path: str
    image_path: str
    pose: Pose
    seed: int
    phantom: str

    def to_dict(self) -> dict:
        return {
            "volume_path": self.volume_path,
            "image_path": self.image_path,
            "pose": self.pose.to_dict(),
            "seed": self.seed,
            "phantom": self.phantom,
        }


@dataclass
class DatasetManifest:
    camera: CameraConfig
    records: list = field(default_factory=list)

    @property
    def norm_constant(self) -> float:
        return self.camera.norm_constant

    def write(self, path) -> None:
        header = {"format": MANIFEST_FORMAT, "camera": self.camera.to_dict(),
                  "norm_constant": self.camera.norm_constant}
        lines = [json.dumps(header, sort_keys=True)]
        lines += [json.dumps(r.to_dict(), sort_keys=True) for r in self.records]
        Path(path).write_text("\n".join(lines) + "\n")

    @classmethod
    def read(cls, path, check_files=True) -> "DatasetManifest":
        path = Path(path)
        try:
            lines = path.read_text().splitlines()
        except OSError as exc:
            raise FormatError(f"cannot read manifest {path}: {exc}") from exc
        if not lines:
            raise FormatError(f"{path}: empty manifest")
        try:
            header = json.loads(lines[0])
            if header.get("format") != MANIFEST_FORMAT:
                raise FormatError(f"{path}: missing manifest header")
            camera = CameraConfig.from_dict(header["camera"])
            if camera.norm_constant != header["norm_constant"]:
                raise FormatError(f"{path}: header norm_constant disagrees with camera")
            records = []
            for n, line in enumerate(lines[1:], start=2):
                r = json.loads(line)
                if set(r) != {"volume_path", "image_path", "pose", "seed", "phantom"}:
                    raise FormatError(f"{path}:{n}: bad record keys {sorted(r)}")
                if r["phantom"] not in ("symmetric", "marked"):
                    raise FormatError(f"{path}:{n}: phantom must be symmetric or marked")
                records.append(ManifestRecord(r["volume_path"], r["image_path"],
                                              Pose.from_dict(r["pose"]), int(r["seed"]), r["phantom"]))
        except FormatError:
            raise
        except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
            raise FormatError(f"{path}: malformed manifest ({exc})") from exc
        m = cls(camera, records)
        if check_files:
            m.check_files(path.parent)
        return m

    def check_files(self, root) -> None:
        root = Path(root)
        for r in self.records:
            for p in (r.volume_path, r.image_path):
                if not (root / p).is_file():
                    raise FormatError(f"manifest references missing file {root / p}")


def config_to_json(cfg: RunConfig) -> str:
    return json.dumps(cfg.to_dict(), indent=2, sort_keys=False) + "\n"


__all__ = [
    "DataConfig", "StageConfig", "ModesConfig", "RunConfig", "load_config", "apply_override",
    "ManifestRecord", "DatasetManifest", "config_to_json", "OUTPUT_ROOT_ENV", "asdict",
]
