"""On-disk layout, configuration and stage bookkeeping for the pipeline.

A workspace is a directory tree the CLI stages read and write. Every
stage records a hash of the settings it ran with plus the hashes of its
upstream stages' records; a stage is skipped when its record and all
upstream records still match and its outputs exist. The run manifest is
fully deterministic: relative paths only, sorted keys, no timestamps, so
two runs with identical settings produce byte-identical manifests.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import os
from dataclasses import dataclass
from pathlib import Path


class WorkspaceError(ValueError):
    """Bad configuration or workspace state; the CLI maps this to exit 2."""


class StageError(RuntimeError):
    """A stage could not produce its outputs; the CLI maps this to exit 3."""


class LockHeld(RuntimeError):
    """Another process holds the workspace lock; the CLI maps this to exit 4."""


@dataclass
class RunConfig:
    # scene synthesis
    height: int = 128
    frames: int = 5
    seed: int = 0
    with_object: bool = True
    # per-view depth generation
    view_size: int = 64
    view_fov: float = 90.0
    scale_min: float = 0.5
    scale_max: float = 2.0
    shift_min: float = -0.5
    shift_max: float = 0.5
    noise_sigma: float = 0.0
    external_depth: str = ""
    disparity: bool = False
    # block-matching flow fallback
    block: int = 8
    search: int = 6
    # alignment
    iterations: int = 3000
    shift_delay: int = 1500
    frame_iterations: int = 1000
    rays_per_step: int = 4096
    learning_rate: float = 1e-3
    lambda_depth: float = 1.0
    lambda_scale: float = 0.1
    lambda_shift: float = 1.0
    lambda_first: float = 1.0
    lambda_pre: float = 1.0
    tau_flow: float = 1.0
    hidden: int = 128
    layers: int = 4
    octaves: int = 6
    # lifting
    tau_std: float = 20.0
    # training rig and warping
    rig_size: int = 128
    ring_fov: float = 46.0
    ico_fov: float = 75.0
    warp_offset: float = 0.1
    # seam handling
    blend_steps: int = 0
    # curation
    video_id: str = "video"
    sample_interval: int = 5
    theta_trans: float = 30.0
    theta_count: float = 0.3
    discard_margin: int = 2
    min_clip_len: int = 25

    def __post_init__(self) -> None:
        if self.height < 2 or self.height % 2 != 0:
            raise WorkspaceError(f"height must be even and >= 2, got {self.height}")
        if self.frames < 1:
            raise WorkspaceError("frames must be at least 1")
        if self.view_size < 2 or self.rig_size < 2:
            raise WorkspaceError("camera sizes must be at least 2")
        if self.scale_min > self.scale_max or self.shift_min > self.shift_max:
            raise WorkspaceError("perturbation ranges must be ordered")
        if self.blend_steps < 0:
            raise WorkspaceError("blend_steps must be non-negative")


_BOOL_WORDS = {"1": True, "true": True, "yes": True,
               "0": False, "false": False, "no": False}


def _coerce(name: str, text: str, kind: type):
    if kind is bool:
        try:
            return _BOOL_WORDS[text.strip().lower()]
        except KeyError:
            raise WorkspaceError(f"{name}: expected a boolean, got {text!r}") from None
    try:
        return kind(text)
    except ValueError:
        raise WorkspaceError(
            f"{name}: expected {kind.__name__}, got {text!r}") from None


def parse_config_file(path: str | Path) -> dict[str, str]:
    """Read `key = value` lines; # starts a comment, blanks are ignored."""
    values: dict[str, str] = {}
    for ln, raw in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise WorkspaceError(f"{path}:{ln}: expected key=value, got {raw!r}")
        key, value = line.split("=", 1)
        values[key.strip()] = value.strip()
    return values


def make_config(file_values: dict[str, str] | None = None,
                overrides: dict[str, str] | None = None) -> RunConfig:
    """Build a RunConfig from defaults, a config file, then overrides."""
    fields = {f.name: f.type for f in dataclasses.fields(RunConfig)}
    types = {"int": int, "float": float, "str": str, "bool": bool}
    merged: dict[str, object] = {}
    for source in (file_values or {}), (overrides or {}):
        for key, text in source.items():
            if key not in fields:
                raise WorkspaceError(f"unknown config key {key!r}")
            kind = types[fields[key]] if isinstance(fields[key], str) else fields[key]
            merged[key] = _coerce(key, text, kind)
    return RunConfig(**merged)


# Stage graph ----------------------------------------------------------

STAGE_DEPS: dict[str, tuple[str, ...]] = {
    "synth": (),
    "curate": ("synth",),
    "project": ("synth",),
    "flow": ("synth",),
    "align": ("project", "flow"),
    "lift": ("synth", "align"),
    "rig": (),
    "warp": ("synth", "align", "rig"),
    "seam": ("synth",),
    "render": ("lift",),
}

STAGE_FIELDS: dict[str, tuple[str, ...]] = {
    "synth": ("height", "frames", "seed", "with_object"),
    "curate": ("video_id", "sample_interval", "theta_trans", "theta_count",
               "discard_margin", "min_clip_len"),
    "project": ("view_size", "view_fov", "scale_min", "scale_max", "shift_min",
                "shift_max", "noise_sigma", "external_depth", "disparity", "seed"),
    "flow": ("block", "search"),
    "align": ("iterations", "shift_delay", "frame_iterations", "rays_per_step",
              "learning_rate", "lambda_depth", "lambda_scale", "lambda_shift",
              "lambda_first", "lambda_pre", "tau_flow", "hidden", "layers",
              "octaves", "seed", "view_size", "view_fov"),
    "lift": ("tau_std",),
    "rig": ("rig_size", "ring_fov", "ico_fov"),
    "warp": ("warp_offset",),
    "seam": ("blend_steps",),
    "render": (),
}

RUN_ALL = ("synth", "project", "flow", "align", "lift", "rig", "warp",
           "seam", "render")


def stage_hash(name: str, cfg: RunConfig) -> str:
    """Hash of the settings a stage depends on."""
    parts = [f"{f}={getattr(cfg, f)!r}" for f in STAGE_FIELDS[name]]
    digest = hashlib.sha256(";".join(parts).encode("utf-8")).hexdigest()
    return digest[:16]


class Workspace:
    """Directory layout and stage records."""

    SUBDIRS = ("frames", "gt", "flow", "masks", "views", "depth", "cloud",
               "rig", "seam", "curate", "render", "state")

    def __init__(self, root: str | Path):
        self.root = Path(root)

    def ensure(self) -> None:
        for sub in self.SUBDIRS:
            (self.root / sub).mkdir(parents=True, exist_ok=True)

    # path helpers; all 1-based frame numbering
    def frame_path(self, l: int) -> Path:
        return self.root / "frames" / f"frame_{l:04d}.png"

    def gt_depth_path(self, l: int) -> Path:
        return self.root / "gt" / f"depth_{l:04d}.pfm"

    def flow_path(self, l: int) -> Path:
        return self.root / "flow" / f"flow_{l:04d}.flo"

    def region_path(self, l: int) -> Path:
        return self.root / "masks" / f"region_{l:04d}.png"

    def union_path(self) -> Path:
        return self.root / "masks" / "union.png"

    def view_depth_path(self, view: int, l: int) -> Path:
        return self.root / "views" / f"view_{view:02d}" / f"depth_{l:04d}.pfm"

    def depth_path(self, l: int) -> Path:
        return self.root / "depth" / f"depth_{l:04d}.pfm"

    def field_path(self, l: int) -> Path:
        return self.root / "depth" / f"field_{l:04d}.bin"

    def align_log_path(self) -> Path:
        return self.root / "depth" / "align_log.txt"

    def cloud_path(self) -> Path:
        return self.root / "cloud" / "points.ply"

    def cloud_meta_path(self) -> Path:
        return self.root / "cloud" / "meta.txt"

    def rig_manifest_path(self) -> Path:
        return self.root / "rig" / "cameras.txt"

    def rig_cam_dir(self, name: str) -> Path:
        return self.root / "rig" / name

    def render_path(self, l: int) -> Path:
        return self.root / "render" / f"frame_{l:04d}.png"

    def render_valid_path(self, l: int) -> Path:
        return self.root / "render" / f"valid_{l:04d}.png"

    def rel(self, path: Path) -> str:
        return path.relative_to(self.root).as_posix()

    # stage records
    def record_path(self, name: str) -> Path:
        return self.root / "state" / f"{name}.json"

    def read_record(self, name: str) -> dict | None:
        path = self.record_path(name)
        if not path.exists():
            return None
        try:
            return json.loads(path.read_text(encoding="utf-8"))
        except json.JSONDecodeError as exc:
            raise WorkspaceError(f"corrupt stage record {path}: {exc}") from exc

    def write_record(self, name: str, cfg: RunConfig, outputs: list[str]) -> dict:
        upstream = {}
        for dep in STAGE_DEPS[name]:
            dep_record = self.read_record(dep)
            upstream[dep] = dep_record.get("config") if dep_record else None
        record = {
            "config": stage_hash(name, cfg),
            "upstream": upstream,
            "outputs": sorted(outputs),
        }
        path = self.record_path(name)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(json.dumps(record, sort_keys=True, indent=2) + "\n",
                        encoding="utf-8")
        return record

    def stage_fresh(self, name: str, cfg: RunConfig) -> bool:
        """Whether a stage's outputs are current and can be skipped.

        Fresh means: a record exists, it was produced under the current
        settings, every upstream stage is itself fresh and still carries
        the record hash it had when this stage ran, and all recorded
        outputs exist.
        """
        record = self.read_record(name)
        if record is None or record.get("config") != stage_hash(name, cfg):
            return False
        for dep in STAGE_DEPS[name]:
            if not self.stage_fresh(dep, cfg):
                return False
            dep_record = self.read_record(dep)
            if record.get("upstream", {}).get(dep) != dep_record.get("config"):
                return False
        return all((self.root / out).exists() for out in record.get("outputs", []))

    def write_manifest(self) -> Path:
        """Aggregate all stage records into a deterministic manifest."""
        stages = {}
        state = self.root / "state"
        if state.is_dir():
            for path in sorted(state.glob("*.json")):
                stages[path.stem] = json.loads(path.read_text(encoding="utf-8"))
        path = self.root / "manifest.json"
        path.write_text(json.dumps({"stages": stages}, sort_keys=True, indent=2)
                        + "\n", encoding="utf-8")
        return path


class workspace_lock:
    """Advisory exclusive lock on a workspace directory.

    Creating the lock file is atomic; a held lock raises LockHeld. A stale
    file from a crashed run must be removed by hand, which the message
    spells out.
    """

    def __init__(self, root: str | Path):
        self.path = Path(root) / ".lock"
        self.fd: int | None = None

    def __enter__(self) -> "workspace_lock":
        self.path.parent.mkdir(parents=True, exist_ok=True)
        try:
            self.fd = os.open(self.path, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
        except FileExistsError:
            raise LockHeld(
                f"workspace lock {self.path} is held; if no other run is "
                f"active, delete the file and retry") from None
        os.write(self.fd, f"{os.getpid()}\n".encode("ascii"))
        return self

    def __exit__(self, *exc) -> None:
        if self.fd is not None:
            os.close(self.fd)
            self.fd = None
            self.path.unlink(missing_ok=True)
