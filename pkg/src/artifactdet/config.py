"""Run configuration: every tunable with its default, plus ablation presets."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import numpy as np
import yaml

STAGES = ("I", "II", "III")
ABLATIONS = ("full", "wo_lte", "wo_cls", "wo_ad", "wo_mg", "wo_s1", "wo_s23", "wo_clean", "wo_real")
_ALIASES = {"lambda": "lambda_cls", "K": "num_artifacts", "L": "prompt_length", "J": "deep_prompt_J"}


class ConfigError(ValueError):
    pass


@dataclass
class RunConfig:
    # data
    class_names: list[str] = field(default_factory=lambda: ["clean", "ghosting", "lens_flare", "moire"])
    artifact_names: list[str] = field(default_factory=lambda: ["ghosting", "lens flare", "moire"])
    split_ratios: list[float] = field(default_factory=lambda: [0.8, 0.1, 0.1])
    exclude_origins: list[str] = field(default_factory=list)  # training-set filter ("clean", "real")
    # synthesis
    tau_support: float = 0.05
    blend_ranges: dict[str, list[float]] = field(
        default_factory=lambda: {"lens_flare": [0.6, 0.95], "moire": [0.3, 0.8]})
    # backbone
    backbone: dict[str, Any] = field(default_factory=lambda: {"kind": "pretrained", "path": None})
    input_size: int = 518
    pixel_mean: list[float] = field(default_factory=lambda: [0.48145466, 0.4578275, 0.40821073])
    pixel_std: list[float] = field(default_factory=lambda: [0.26862954, 0.26130258, 0.27577711])
    # prompts
    prompt_length: int = 12
    deep_prompt_J: int = 4
    deep_prompt_depth: int = 9
    cls_template: str = "a photo of an object"
    use_cls: bool = True
    per_sample_cls: bool = False
    # vision adaptation
    adapter_layers: int = 6
    beta: float = 0.1
    taps: list[int] = field(default_factory=lambda: [6, 12, 18, 24])
    use_projectors: bool = True
    # scoring and losses
    num_artifacts: int = 3
    lambda_cls: float = 4.0
    focal_gamma: float = 2.0
    focal_alpha: float = 0.25
    dice_epsilon: float = 1.0
    temperature: float = 1.0
    # training
    stages: list[str] = field(default_factory=lambda: list(STAGES))
    epochs: dict[str, int] = field(default_factory=lambda: {"I": 20, "II": 20, "III": 20})
    learning_rate: float = 1e-3
    batch_size: int = 8
    grad_clip: float = 1.0
    num_workers: int = 0
    # evaluation
    fpr_cap: float = 0.3
    seed: int = 0
    ablation: str = "full"

    @property
    def num_classes(self) -> int:
        return self.num_artifacts + 1

    def validate(self) -> "RunConfig":
        errs = []
        if len(self.class_names) != self.num_artifacts + 1:
            errs.append(f"class_names has {len(self.class_names)} entries, expected K+1={self.num_artifacts + 1}")
        if self.class_names and self.class_names[0] != "clean":
            errs.append("class_names[0] must be 'clean'")
        if len(self.artifact_names) != self.num_artifacts:
            errs.append(f"artifact_names has {len(self.artifact_names)} entries, expected K={self.num_artifacts}")
        if not 0.0 <= self.beta <= 1.0:
            errs.append("beta must lie in [0, 1]")
        if self.lambda_cls < 0:
            errs.append("lambda must be >= 0")
        if self.temperature <= 0:
            errs.append("temperature must be > 0")
        if not 0.0 < self.fpr_cap <= 1.0:
            errs.append("fpr_cap must lie in (0, 1]")
        if self.prompt_length < 0 or self.deep_prompt_J < 0 or self.deep_prompt_depth < 0:
            errs.append("prompt_length, deep_prompt_J and deep_prompt_depth must be >= 0")
        if self.adapter_layers < 0:
            errs.append("adapter_layers must be >= 0")
        if not self.taps or any(t < 1 and t != -1 for t in self.taps):
            errs.append("taps must be a nonempty list of 1-based layer indices (-1 = final layer)")
        if len(self.split_ratios) != 3 or abs(sum(self.split_ratios) - 1) > 1e-9 or min(self.split_ratios) < 0:
            errs.append("split_ratios must be three non-negative numbers summing to 1")
        bad = [s for s in self.stages if s not in STAGES]
        if bad or not self.stages:
            errs.append(f"stages must be a nonempty subset of {STAGES}, got {self.stages}")
        elif list(self.stages) != sorted(self.stages, key=STAGES.index):
            errs.append("stages must be in I, II, III order")
        if any(int(self.epochs.get(s, 0)) < 0 for s in STAGES):
            errs.append("epochs must be >= 0")
        if self.learning_rate <= 0 or self.batch_size < 1:
            errs.append("learning_rate must be > 0 and batch_size >= 1")
        if self.input_size < 1:
            errs.append("input_size must be positive")
        if self.ablation not in ABLATIONS:
            errs.append(f"unknown ablation {self.ablation!r}")
        for name, (lo, hi) in self.blend_ranges.items():
            if not 0 < lo <= hi < 1:
                errs.append(f"blend range for {name} must satisfy 0 < lo <= hi < 1")
        if errs:
            raise ConfigError("; ".join(errs))
        return self

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def subsystem_seed(self, name: str) -> int:
        """Independent seed for one subsystem, derived from the root seed."""
        tag = int.from_bytes(name.encode()[:16].ljust(16, b"\0"), "little")
        return int(np.random.SeedSequence([self.seed, tag]).generate_state(1)[0])


def config_from_dict(data: dict | None) -> RunConfig:
    data = dict(data or {})
    for alias, name in _ALIASES.items():
        if alias in data:
            data[name] = data.pop(alias)
    known = {f.name for f in dataclasses.fields(RunConfig)}
    unknown = sorted(set(data) - known)
    if unknown:
        raise ConfigError(f"unknown config keys: {unknown}")
    if "epochs" in data and not isinstance(data["epochs"], dict):
        n = int(data["epochs"])
        data["epochs"] = {s: n for s in STAGES}
    elif "epochs" in data:
        data["epochs"] = {**{s: 20 for s in STAGES}, **{str(k): int(v) for k, v in data["epochs"].items()}}
    cfg = RunConfig(**data)
    if cfg.ablation != "full":
        cfg = apply_ablation(cfg, cfg.ablation)
    return cfg.validate()


def load_config(path: str | Path | None) -> RunConfig:
    if path is None:
        return RunConfig().validate()
    try:
        data = yaml.safe_load(Path(path).read_text())
    except (OSError, yaml.YAMLError) as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from None
    if data is not None and not isinstance(data, dict):
        raise ConfigError("config file must hold a key/value mapping")
    return config_from_dict(data)


def dump_config(cfg: RunConfig, path: str | Path) -> Path:
    path = Path(path)
    path.write_text(yaml.safe_dump(cfg.to_dict(), sort_keys=False))
    return path


def apply_ablation(cfg: RunConfig, name: str) -> RunConfig:
    """Return a copy of ``cfg`` wired as one of the ablation variants."""
    c = dataclasses.replace(cfg, ablation=name)
    if name == "full":
        pass
    elif name == "wo_lte":
        # fixed templates: [cls] for clean, [cls][artifact] for artifacts
        c.prompt_length, c.deep_prompt_J = 0, 0
    elif name == "wo_cls":
        c.use_cls = False
    elif name == "wo_ad":
        c.adapter_layers = 0
    elif name == "wo_mg":
        c.use_projectors = False
        c.taps = [-1]  # resolved to the final layer once the backbone is known
    elif name == "wo_s1":
        c.stages = ["II", "III"]
    elif name == "wo_s23":
        c.stages = ["I"]
    elif name == "wo_clean":
        c.exclude_origins = sorted({*c.exclude_origins, "clean"})
    elif name == "wo_real":
        c.exclude_origins = sorted({*c.exclude_origins, "real"})
    else:
        raise ConfigError(f"unknown ablation {name!r}")
    return c
