"""Run configuration: JSON file + dotted-key overrides over built-in defaults.

Precedence is flags > config file > defaults. The effective configuration is
echoed into the metrics meta header so runs are self-describing.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

from .datamix import MixPolicy
from .env import EnvConfig
from .errors import ConfigError
from .grpo import TrainConfig
from .reward import RewardWeights
from .zoomtool import ZoomConfig, ZoomSource


@dataclass(frozen=True)
class PathsConfig:
    dataset: str = "runs/dataset.jsonl"
    curation: str = "runs/curation.jsonl"
    checkpoints: str = "runs/checkpoints"
    metrics: str = "runs/metrics"


@dataclass(frozen=True)
class RunConfig:
    env: EnvConfig = field(default_factory=EnvConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    reward: RewardWeights = field(default_factory=RewardWeights)
    mix: MixPolicy = field(default_factory=MixPolicy)
    zoom: ZoomConfig = field(default_factory=ZoomConfig)
    paths: PathsConfig = field(default_factory=PathsConfig)
    seed: int = 0

    def validate(self) -> None:
        self.env.validate()
        self.train.validate()
        if not (self.env.glyph_size < self.zoom.crop_size <= self.env.canvas_size):
            raise ConfigError("need glyph_size < zoom.crop_size <= canvas_size")

    def to_dict(self) -> dict:
        return {
            "env": {
                "canvas_size": self.env.canvas_size,
                "obs_size": self.env.obs_size,
                "glyph_size": self.env.glyph_size,
                "alphabet_size": self.env.alphabet_size,
                "noise_std": self.env.noise_std,
                "rng_seed": self.env.rng_seed,
                "easy_fraction": self.env.easy_fraction,
            },
            "train": {
                "steps": self.train.steps,
                "batch_size": self.train.batch_size,
                "group_size": self.train.group_size,
                "lr_peak": self.train.lr_peak,
                "warmup_steps": self.train.warmup_steps,
                "adam_beta1": self.train.adam_beta1,
                "adam_beta2": self.train.adam_beta2,
                "adam_eps": self.train.adam_eps,
                "eps_low": self.train.eps_low,
                "eps_high": self.train.eps_high,
                "max_grad_norm": self.train.max_grad_norm,
                "kl_coeff": self.train.kl_coeff,
                "inner_epochs": self.train.inner_epochs,
                "loss_agg": self.train.loss_agg,
                "sample_temperature": self.train.sample_temperature,
            },
            "reward": {
                "alpha": self.reward.alpha,
                "beta": self.reward.beta,
                "gamma": self.reward.gamma,
                "lambda": self.reward.lam,
            },
            "mix": {
                "hard_fraction": self.mix.hard_fraction,
                "threshold": self.mix.threshold,
                "shots": self.mix.shots,
                "eval_temperature": self.mix.eval_temperature,
            },
            "zoom": {
                "crop_size": self.zoom.crop_size,
                "output_size": list(self.zoom.output_size),
                "source": self.zoom.source.value,
            },
            "paths": {
                "dataset": self.paths.dataset,
                "curation": self.paths.curation,
                "checkpoints": self.paths.checkpoints,
                "metrics": self.paths.metrics,
            },
            "seed": self.seed,
        }

    @classmethod
    def from_dict(cls, data: dict) -> "RunConfig":
        def section(name: str) -> dict:
            value = data.get(name, {})
            if not isinstance(value, dict):
                raise ConfigError(f"config section {name!r} must be an object")
            return dict(value)

        reward = section("reward")
        if "lambda" in reward:
            reward["lam"] = reward.pop("lambda")
        zoom = section("zoom")
        if "output_size" in zoom:
            zoom["output_size"] = tuple(zoom["output_size"])
        if "source" in zoom:
            zoom["source"] = ZoomSource(zoom["source"])
        try:
            return cls(
                env=EnvConfig(**section("env")),
                train=TrainConfig(**section("train")),
                reward=RewardWeights(**reward),
                mix=MixPolicy(**section("mix")),
                zoom=ZoomConfig(**zoom),
                paths=PathsConfig(**section("paths")),
                seed=int(data.get("seed", 0)),
            )
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"bad configuration: {exc}") from exc


def _coerce(text: str):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def apply_overrides(data: dict, overrides: dict[str, str]) -> dict:
    """Apply dotted-key overrides like {'train.steps': '800'} onto a nested
    config dict, coercing values as JSON scalars when possible."""
    for dotted, value in overrides.items():
        node = data
        parts = dotted.split(".")
        for part in parts[:-1]:
            node = node.setdefault(part, {})
            if not isinstance(node, dict):
                raise ConfigError(f"override {dotted!r} descends into a non-object")
        node[parts[-1]] = _coerce(value)
    return data


def load_run_config(path: str | Path | None, overrides: dict[str, str] | None = None) -> RunConfig:
    data: dict = {}
    if path is not None:
        p = Path(path)
        if not p.exists():
            raise ConfigError(f"config file not found: {p}")
        try:
            data = json.loads(p.read_text(encoding="utf-8"))
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config file {p} is not valid JSON: {exc}") from exc
        if not isinstance(data, dict):
            raise ConfigError(f"config file {p} must hold a JSON object")
    defaults = RunConfig().to_dict()
    merged = _deep_merge(defaults, data)
    if overrides:
        merged = apply_overrides(merged, dict(overrides))
    cfg = RunConfig.from_dict(merged)
    return cfg


def _deep_merge(base: dict, extra: dict) -> dict:
    out = dict(base)
    for key, value in extra.items():
        if isinstance(value, dict) and isinstance(out.get(key), dict):
            out[key] = _deep_merge(out[key], value)
        else:
            out[key] = value
    return out
