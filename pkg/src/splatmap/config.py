"""Run configuration: one YAML file, sections named after the pipeline stages.

Each section feeds the config dataclasses of the module it names; a few keys
are renamed where two sub-configs in the same section share a field name (the
remap tables below). Unknown sections or keys are errors so typos surface
immediately instead of silently running defaults.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from pathlib import Path

import yaml

from .losses import LossConfig
from .mapping import MaskThresholds
from .panorama import PanoConfig
from .planner import PlannerConfig
from .rasterizer import RasterConfig
from .refine import RefineConfig
from .scoring import ScoreWeights
from .simulator import SimConfig
from .highloss import TrackerConfig
from .topdown import TopdownConfig


class ConfigError(ValueError):
    pass


@dataclass
class SplatSection:
    loss: LossConfig = field(default_factory=LossConfig)
    thresholds: MaskThresholds = field(default_factory=MaskThresholds)
    raster: RasterConfig = field(default_factory=RasterConfig)
    opacity_floor: float = 0.05
    scale_ceiling: float = 0.5
    densify_cap: int = 5000
    densify_scale_px: float = 2.0
    densify_init_opacity: float = 0.5
    densify_scale_max: float = 0.0


@dataclass
class WorkspaceSection:
    topdown: TopdownConfig = field(default_factory=TopdownConfig)
    spur_factor: float = 1.5
    visit_radius: float = 0.5
    match_radius: float = 0.15


@dataclass
class ViewSection:
    pano: PanoConfig = field(default_factory=PanoConfig)
    tracker: TrackerConfig = field(default_factory=TrackerConfig)
    weights: ScoreWeights = field(default_factory=ScoreWeights)
    horizon: float = 3.0
    rotation_reach: float = 3.0
    dedupe_deg: float = 15.0


@dataclass
class PlanSection:
    planner: PlannerConfig = field(default_factory=PlannerConfig)
    replan_interval: int = 10


@dataclass
class MetricsSection:
    tau_dist: float = 0.05
    tau_opacity: float = 0.5
    n_views: int = 20
    gt_density: float = 400.0


@dataclass
class RefineSection:
    cfg: RefineConfig = field(default_factory=RefineConfig)
    iters: int = 2000


@dataclass
class LoopSection:
    steps: int = 0              # 0 = pick by scene size
    small_steps: int = 1000
    medium_steps: int = 2000
    medium_area_m2: float = 30.0
    keyframe_every: int = 10
    metrics_every: int = 10
    prune_every: int = 10
    debug_every: int = 25


@dataclass
class RunnerConfig:
    scene: str = "room1"
    seed: int = 0
    strategy: str = "full"
    use_hp: bool = True
    debug_images: bool = False
    sim: SimConfig = field(default_factory=SimConfig)
    splat: SplatSection = field(default_factory=SplatSection)
    workspace: WorkspaceSection = field(default_factory=WorkspaceSection)
    view: ViewSection = field(default_factory=ViewSection)
    plan: PlanSection = field(default_factory=PlanSection)
    metrics: MetricsSection = field(default_factory=MetricsSection)
    refine: RefineSection = field(default_factory=RefineSection)
    loop: LoopSection = field(default_factory=LoopSection)


def _field_names(obj) -> set[str]:
    return {f.name for f in dataclasses.fields(obj)}


def _assign(obj, name: str, value, where: str):
    current = getattr(obj, name)
    if isinstance(current, bool):
        if not isinstance(value, bool):
            raise ConfigError(f"{where}.{name}: expected true/false, got {value!r}")
        setattr(obj, name, value)
    elif isinstance(current, int) and not isinstance(current, bool):
        if isinstance(value, bool) or not isinstance(value, (int, float)) or int(value) != value:
            raise ConfigError(f"{where}.{name}: expected an integer, got {value!r}")
        setattr(obj, name, int(value))
    elif isinstance(current, float):
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{where}.{name}: expected a number, got {value!r}")
        setattr(obj, name, float(value))
    elif isinstance(current, str):
        if not isinstance(value, str):
            raise ConfigError(f"{where}.{name}: expected a string, got {value!r}")
        setattr(obj, name, value)
    else:
        raise ConfigError(f"{where}.{name}: not a settable key")


def _route(section: str, data: dict, targets: list, remap: dict | None = None):
    """Assign each key of `data` to the first target dataclass that has it."""
    remap = remap or {}
    for key, value in data.items():
        if key in remap:
            obj, name = remap[key]
            _assign(obj, name, value, section)
            continue
        for obj in targets:
            if key in _field_names(obj):
                _assign(obj, key, value, section)
                break
        else:
            raise ConfigError(f"unknown key {section}.{key}")


def apply_dict(cfg: RunnerConfig, data: dict) -> RunnerConfig:
    """Overlay a parsed YAML mapping onto `cfg` in place."""
    if data is None:
        return cfg
    if not isinstance(data, dict):
        raise ConfigError(f"config root must be a mapping, got {type(data).__name__}")
    handlers = {
        "scene_sim": lambda d: _route("scene_sim", d, [cfg.sim]),
        "splat_core": lambda d: _route(
            "splat_core", d,
            [cfg.splat.loss, cfg.splat.thresholds, cfg.splat.raster, cfg.splat]),
        "workspace_topo": lambda d: _route(
            "workspace_topo", d, [cfg.workspace.topdown, cfg.workspace]),
        "view_select": lambda d: _route(
            "view_select", d, [cfg.view.pano, cfg.view.weights, cfg.view],
            remap={
                "tracker_eps": (cfg.view.tracker, "eps"),
                "tracker_min_pts": (cfg.view.tracker, "min_pts"),
                "merge_radius": (cfg.view.tracker, "merge_radius"),
                "tau_opaque": (cfg.view.tracker, "tau_opaque"),
                "resolve_after": (cfg.view.tracker, "resolve_after"),
                "max_points": (cfg.view.tracker, "max_points"),
                "pano_znear": (cfg.view.pano.raster, "znear"),
            }),
        "planner": lambda d: _route("planner", d, [cfg.plan.planner, cfg.plan]),
        "metrics_eval": lambda d: _route("metrics_eval", d, [cfg.metrics]),
        "refine_offline": lambda d: _route(
            "refine_offline", d, [cfg.refine.cfg, cfg.refine]),
        "cli_runner": lambda d: _route(
            "cli_runner", d, [cfg.loop, cfg],
            remap={}),
    }
    for section, content in data.items():
        if section not in handlers:
            raise ConfigError(f"unknown config section {section!r}")
        if content is None:
            continue
        if not isinstance(content, dict):
            raise ConfigError(f"section {section!r} must be a mapping")
        handlers[section](content)
    return cfg


def load_config(path, base: RunnerConfig | None = None) -> RunnerConfig:
    cfg = base or RunnerConfig()
    text = Path(path).read_text()
    try:
        data = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        raise ConfigError(f"{path}: {exc}") from exc
    return apply_dict(cfg, data)


def config_to_dict(cfg: RunnerConfig) -> dict:
    """Full resolved config as the same section layout the loader reads."""
    def fields_of(obj, skip=()):
        return {f.name: getattr(obj, f.name) for f in dataclasses.fields(obj)
                if f.name not in skip and isinstance(getattr(obj, f.name), (int, float, bool, str))}

    view = fields_of(cfg.view.pano, skip=("raster",))
    view.update(fields_of(cfg.view.weights))
    view.update({
        "tracker_eps": cfg.view.tracker.eps,
        "tracker_min_pts": cfg.view.tracker.min_pts,
        "merge_radius": cfg.view.tracker.merge_radius,
        "tau_opaque": cfg.view.tracker.tau_opaque,
        "resolve_after": cfg.view.tracker.resolve_after,
        "max_points": cfg.view.tracker.max_points,
        "pano_znear": cfg.view.pano.raster.znear,
    })
    view.update(fields_of(cfg.view, skip=("pano", "tracker", "weights")))

    splat = fields_of(cfg.splat.loss)
    splat.update(fields_of(cfg.splat.thresholds))
    splat.update(fields_of(cfg.splat.raster))
    splat.update(fields_of(cfg.splat, skip=("loss", "thresholds", "raster")))

    workspace = fields_of(cfg.workspace.topdown)
    workspace.update(fields_of(cfg.workspace, skip=("topdown",)))

    planner = fields_of(cfg.plan.planner)
    planner.update(fields_of(cfg.plan, skip=("planner",)))

    refine = fields_of(cfg.refine.cfg)
    refine.update(fields_of(cfg.refine, skip=("cfg",)))

    runner = fields_of(cfg.loop)
    runner.update(fields_of(cfg))

    return {
        "scene_sim": fields_of(cfg.sim),
        "splat_core": splat,
        "workspace_topo": workspace,
        "view_select": view,
        "planner": planner,
        "metrics_eval": fields_of(cfg.metrics),
        "refine_offline": refine,
        "cli_runner": runner,
    }


def save_config(cfg: RunnerConfig, path) -> None:
    with open(path, "w") as fh:
        yaml.safe_dump(config_to_dict(cfg), fh, sort_keys=True, default_flow_style=False)


def default_config_path() -> Path:
    return Path(__file__).parent / "configs" / "default.yaml"
