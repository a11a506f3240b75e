"""Pipeline configuration: a human-editable YAML file.

Schema (all keys optional; defaults shown):

    data_root: .            # base for manifest-relative paths;
                            # env VOXMAP_DATA_ROOT overrides
    output_dir: voxmap-out
    jobs: 4                 # subject-level parallelism
    stages:                 # exactly two entries, field-for-field the
      - levels: 6           # published stage tables
        block_size: 8
        regularization_weight: 2.0
        image_weight: 0.25
        mask_weights: [1.0, 1.0, 0.3, 0.3]
        max_iterations: [300, 300, 300, 40, 20, 0]
      - levels: 6
        block_size: 32
        regularization_weight: 0.15
        image_weight: 0.5
        mask_weights: [1.0, 1.0, 0.1, 0.1]
        max_iterations: [300, 300, 300, 40, 20, 0]
    slic:
      seed_spacing: 25
      compactness: 0.2
      max_iterations: 10
    analysis:
      alpha: 0.05
      bh_correction: false
      stratify_by_sex: false
    phantom:
      n: 20
      seed: 7
      sex: mixed
      dims: [96, 96, 96]
      deformation_amplitude: 3.5
      deformation_wavelengths: [96.0, 48.0]
      global_scale_jitter: 0.04
      global_shift_jitter: 3.0
      volume_jitter: {}     # region -> +-fraction, independent of age
      effects: []           # {region, channel, slope_per_year,
                            #  relative, noise_sd}
"""

from __future__ import annotations

import os
from dataclasses import dataclass, field
from pathlib import Path

import yaml

from .phantom import CohortSpec, PhantomSpec, PlantedEffect
from .registration import StageConfig, default_stage_configs

ENV_DATA_ROOT = "VOXMAP_DATA_ROOT"


class ConfigError(ValueError):
    """Raised for unusable configuration files."""


@dataclass
class SlicConfig:
    seed_spacing: int = 25
    compactness: float = 0.2
    max_iterations: int = 10


@dataclass
class AnalysisConfig:
    alpha: float = 0.05
    bh_correction: bool = False
    stratify_by_sex: bool = False


@dataclass
class PipelineConfig:
    data_root: Path = Path(".")
    output_dir: Path = Path("voxmap-out")
    jobs: int = 4
    stages: list[StageConfig] = field(default_factory=default_stage_configs)
    slic: SlicConfig = field(default_factory=SlicConfig)
    analysis: AnalysisConfig = field(default_factory=AnalysisConfig)
    phantom_spec: PhantomSpec = field(default_factory=PhantomSpec)
    cohort_spec: CohortSpec = field(default_factory=CohortSpec)


def _phantom_from_dict(d: dict) -> tuple[PhantomSpec, CohortSpec]:
    spec_kwargs = {}
    if "dims" in d:
        dims = tuple(int(x) for x in d["dims"])
        if len(dims) != 3 or any(x < 8 for x in dims):
            raise ConfigError(f"phantom dims must be 3 values >= 8, got {dims}")
        spec_kwargs["dims"] = dims
    if "spacing" in d:
        spec_kwargs["spacing"] = tuple(float(x) for x in d["spacing"])
    if "phantom_seed" in d:
        spec_kwargs["seed"] = int(d["phantom_seed"])
    spec = PhantomSpec(**spec_kwargs)

    effects = []
    for e in d.get("effects", []) or []:
        try:
            effects.append(PlantedEffect(
                region=str(e["region"]),
                channel=str(e["channel"]),
                slope_per_year=float(e["slope_per_year"]),
                relative=bool(e.get("relative", True)),
                noise_sd=float(e.get("noise_sd", 0.0)),
            ))
        except KeyError as exc:
            raise ConfigError(
                f"phantom effect needs keys region/channel/slope_per_year: {e}"
            ) from exc
    cohort_kwargs = dict(effects=effects)
    for key, cast in (("n", int), ("seed", int), ("sex", str),
                      ("deformation_amplitude", float),
                      ("global_scale_jitter", float),
                      ("global_shift_jitter", float)):
        if key in d:
            cohort_kwargs[key] = cast(d[key])
    if "age_range" in d:
        cohort_kwargs["age_range"] = tuple(float(x) for x in d["age_range"])
    if "deformation_wavelengths" in d:
        cohort_kwargs["deformation_wavelengths"] = tuple(
            float(x) for x in d["deformation_wavelengths"])
    if "volume_jitter" in d and d["volume_jitter"]:
        cohort_kwargs["volume_jitter"] = {
            str(k): float(v) for k, v in d["volume_jitter"].items()}
    if "shape_jitter" in d and d["shape_jitter"]:
        cohort_kwargs["shape_jitter"] = {
            str(k): (float(v[0]), float(v[1]))
            for k, v in d["shape_jitter"].items()}
    try:
        cohort = CohortSpec(**cohort_kwargs)
    except ValueError as exc:
        raise ConfigError(f"invalid phantom cohort: {exc}") from exc
    return spec, cohort


def load_config(path=None) -> PipelineConfig:
    """Load a YAML pipeline config; missing file/keys fall back to defaults."""
    cfg = PipelineConfig()
    raw = {}
    if path is not None:
        path = Path(path)
        if not path.exists():
            raise ConfigError(f"config file not found: {path}")
        with open(path) as fh:
            try:
                raw = yaml.safe_load(fh) or {}
            except yaml.YAMLError as exc:
                raise ConfigError(f"{path}: invalid YAML ({exc})") from exc
        if not isinstance(raw, dict):
            raise ConfigError(f"{path}: top level must be a mapping")

    if "data_root" in raw:
        cfg.data_root = Path(raw["data_root"])
    if ENV_DATA_ROOT in os.environ:
        cfg.data_root = Path(os.environ[ENV_DATA_ROOT])
    if "output_dir" in raw:
        cfg.output_dir = Path(raw["output_dir"])
    if "jobs" in raw:
        cfg.jobs = max(1, int(raw["jobs"]))

    if "stages" in raw:
        stages = raw["stages"]
        if not isinstance(stages, list) or len(stages) != 2:
            raise ConfigError("stages must be a list of exactly 2 entries")
        try:
            cfg.stages = [StageConfig.from_dict(s) for s in stages]
        except (ValueError, TypeError) as exc:
            raise ConfigError(f"invalid stage config: {exc}") from exc

    if "slic" in raw and raw["slic"]:
        s = raw["slic"]
        cfg.slic = SlicConfig(
            seed_spacing=int(s.get("seed_spacing", 25)),
            compactness=float(s.get("compactness", 0.2)),
            max_iterations=int(s.get("max_iterations", 10)),
        )
    if "analysis" in raw and raw["analysis"]:
        a = raw["analysis"]
        cfg.analysis = AnalysisConfig(
            alpha=float(a.get("alpha", 0.05)),
            bh_correction=bool(a.get("bh_correction", False)),
            stratify_by_sex=bool(a.get("stratify_by_sex", False)),
        )
    if "phantom" in raw and raw["phantom"]:
        cfg.phantom_spec, cfg.cohort_spec = _phantom_from_dict(raw["phantom"])
    return cfg
