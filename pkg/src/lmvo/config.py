"""Run configuration: one INI file covering every module's thresholds.

Sections map to module configs ([depth], [tracking], [frame2frame],
[backend], [solver], [classes], [pipeline]); keys are the dataclass field
names. Values in a file override the built-in defaults, which equal the
package's documented design choices. Unknown keys are rejected.
"""

from __future__ import annotations

import configparser
from dataclasses import dataclass, field, fields
from pathlib import Path

from .backend import WindowConfig
from .depth import DepthConfig
from .frame2frame import PriorConfig
from .solver import TrimConfig
from .tracking import ClassTable, TrackerConfig


@dataclass
class PipelineOptions:
    seed: int = 0
    use_semantics: bool = True
    max_features_per_frame: int = 400
    ground_prefilter_y: float = 0.3   # camera-frame y below which points feed
    ground_max_range: float = 50.0    # the ground RANSAC
    report_step: int = 1              # start-frame stride of the KITTI metric


def _pipeline_trim_defaults() -> TrimConfig:
    # window problems run at a few hundred iterations per second; the online
    # loop stops each solve at a practical precision rather than 1e-10
    from .solver import Tolerances

    return TrimConfig(
        steps=(5, 5),
        rejection_fraction=10.0,
        max_final_iterations=25,
        tolerances=Tolerances(gradient=1e-7, step=1e-10, cost=1e-8),
    )


def _pipeline_prior_defaults() -> PriorConfig:
    from .solver import Tolerances

    return PriorConfig(
        max_matches=150,
        max_iterations=25,
        tolerances=Tolerances(gradient=1e-10, step=1e-9, cost=1e-11),
    )


@dataclass
class PipelineConfig:
    depth: DepthConfig = field(default_factory=DepthConfig)
    tracker: TrackerConfig = field(default_factory=TrackerConfig)
    prior: PriorConfig = field(default_factory=_pipeline_prior_defaults)
    window: WindowConfig = field(default_factory=WindowConfig)
    trim: TrimConfig = field(default_factory=_pipeline_trim_defaults)
    classes: ClassTable = field(default_factory=ClassTable)
    options: PipelineOptions = field(default_factory=PipelineOptions)


_SECTIONS = {
    "depth": ("depth", DepthConfig),
    "tracking": ("tracker", TrackerConfig),
    "frame2frame": ("prior", PriorConfig),
    "backend": ("window", WindowConfig),
    "solver": ("trim", TrimConfig),
    "pipeline": ("options", PipelineOptions),
}


def _coerce(raw: str, default):
    if isinstance(default, bool):
        lowered = raw.strip().lower()
        if lowered in ("true", "1", "yes", "on"):
            return True
        if lowered in ("false", "0", "no", "off"):
            return False
        raise ValueError(f"not a boolean: {raw!r}")
    if isinstance(default, int):
        return int(raw)
    if isinstance(default, float):
        return float(raw)
    raise ValueError(f"unsupported config value type for {default!r}")


def _apply_section(obj, section: configparser.SectionProxy, name: str):
    known = {f.name: f for f in fields(obj)}
    for key, raw in section.items():
        if key in ("tol_gradient", "tol_step", "tol_cost") and hasattr(obj, "tolerances"):
            setattr(obj.tolerances, key.removeprefix("tol_"), float(raw))
            continue
        if key == "steps" and hasattr(obj, "steps"):
            obj.steps = tuple(int(v) for v in raw.replace(",", " ").split())
            continue
        if key == "time_bound" and hasattr(obj, "time_bound"):
            obj.time_bound = None if raw.strip().lower() in ("none", "inf") else float(raw)
            continue
        if key not in known:
            raise KeyError(f"unknown key {key!r} in section [{name}]")
        current = getattr(obj, key)
        if key == "tolerances":
            raise KeyError(f"set tol_* keys instead of {key!r}")
        setattr(obj, key, _coerce(raw, current))


def _parse_ids(raw: str) -> frozenset:
    raw = raw.strip()
    if not raw:
        return frozenset()
    return frozenset(int(v) for v in raw.replace(",", " ").split())


def load_config(path: str | Path | None = None) -> PipelineConfig:
    """Defaults, overridden by an INI file when given."""
    cfg = PipelineConfig()
    if path is None:
        return cfg
    parser = configparser.ConfigParser()
    read = parser.read(str(path))
    if not read:
        raise FileNotFoundError(f"config file {path} not found")
    for section_name in parser.sections():
        if section_name == "classes":
            section = parser[section_name]
            cfg.classes = ClassTable(
                dynamic=_parse_ids(section.get("dynamic", "")) or ClassTable().dynamic,
                vegetation=_parse_ids(section.get("vegetation", "")) or ClassTable().vegetation,
                ground=_parse_ids(section.get("ground", "")) or ClassTable().ground,
            )
            continue
        if section_name not in _SECTIONS:
            raise KeyError(f"unknown config section [{section_name}]")
        attr, _ = _SECTIONS[section_name]
        _apply_section(getattr(cfg, attr), parser[section_name], section_name)
    # re-run dataclass validation after overrides
    cfg.depth.__post_init__()
    cfg.window.__post_init__()
    cfg.trim.__post_init__()
    return cfg


def write_config(cfg: PipelineConfig, path: str | Path) -> None:
    """Dump the effective configuration as an INI file."""
    parser = configparser.ConfigParser()
    for section_name, (attr, _) in _SECTIONS.items():
        obj = getattr(cfg, attr)
        parser[section_name] = {}
        for f in fields(obj):
            value = getattr(obj, f.name)
            if f.name == "tolerances":
                parser[section_name]["tol_gradient"] = repr(value.gradient)
                parser[section_name]["tol_step"] = repr(value.step)
                parser[section_name]["tol_cost"] = repr(value.cost)
            elif f.name == "steps":
                parser[section_name]["steps"] = ",".join(str(v) for v in value)
            elif f.name == "time_bound":
                parser[section_name]["time_bound"] = "none" if value is None else repr(value)
            elif isinstance(value, (bool, int, float)):
                parser[section_name][f.name] = repr(value)
    parser["classes"] = {
        "dynamic": ",".join(str(v) for v in sorted(cfg.classes.dynamic)),
        "vegetation": ",".join(str(v) for v in sorted(cfg.classes.vegetation)),
        "ground": ",".join(str(v) for v in sorted(cfg.classes.ground)),
    }
    with open(path, "w") as handle:
        parser.write(handle)
