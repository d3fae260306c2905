"""Run configuration: sectioned ``key = value`` files plus ``--section.key value`` overrides."""

from __future__ import annotations

import configparser
import hashlib
from dataclasses import dataclass
from pathlib import Path

from .backbone import BackboneConfig
from .distill import RkdWeights
from .mixaug import LAYER_LEVELS, METHODS
from .objectives import TASK_MODES, LossWeights, TriStageSchedule

DEFAULTS = {
    "run.task_mode": "doa_2023",
    "run.seed": 0,
    "run.output_dir": "runs/default",
    "run.dataset": "",
    "run.eval_dataset": "",
    "run.cache_dir": "",
    "run.max_clips": 0,  # 0 uses every clip
    "run.verify": False,  # float64, single thread, deterministic kernels
    "model.resblock_channels": (64, 128, 256, 512),
    "model.embed_dim": 256,
    "model.conformer_layers": 8,
    "model.attn_heads": 8,
    "model.conv_kernel": 31,
    "model.head_hidden": 256,
    "model.conformer_dropout": 0.05,
    "model.dropout": 0.0,
    "train.epochs": 100,
    "train.batch_size": 32,
    "loss.eta1": 0.1,
    "loss.eta2": 1.0,
    "kd.rkd.enabled": True,
    "kd.fkd.enabled": True,
    "kd.gamma1": 0.5,
    "kd.gamma2": 0.5,
    "kd.beta1": 0.1,
    "kd.beta2": 1.0,
    "kd.fkd.warmup_epochs": 20,
    "kd.fkd.warmup": "ramp",
    "kd.fkd.mid_channels": 0,  # 0 picks the narrowest teacher stage
    "mix.method": "none",
    "mix.alpha": 1.0,
    "mix.layerset": "resblock",
    "sched.peak_lr": 1e-3,
    "sched.warmup_frac": 0.1,
    "sched.hold_frac": 0.4,
    "sched.final_scale": 0.01,
    "student.init": "auto",  # auto | teacher | scratch
}

KD_SHORTHAND = {"none": (False, False), "rkd": (True, False), "fkd": (False, True), "both": (True, True)}


class ConfigError(ValueError):
    pass


def _parse(key: str, raw):
    default = DEFAULTS[key]
    if not isinstance(raw, str):
        return raw
    raw = raw.strip()
    try:
        if isinstance(default, bool):
            if raw.lower() in ("1", "true", "yes", "on"):
                return True
            if raw.lower() in ("0", "false", "no", "off"):
                return False
            raise ValueError(raw)
        if isinstance(default, tuple):
            return tuple(int(v) for v in raw.split(",") if v.strip())
        if isinstance(default, int):
            return int(raw)
        if isinstance(default, float):
            return float(raw)
    except ValueError as exc:
        raise ConfigError(f"bad value for {key}: {raw!r}") from exc
    return raw


def read_ini(path) -> dict:
    parser = configparser.ConfigParser()
    if not parser.read(path, encoding="utf-8"):
        raise ConfigError(f"config file not found: {path}")
    flat = {}
    for section in parser.sections():
        for key, value in parser.items(section):
            flat[f"{section}.{key}"] = value
    return flat


def apply_overrides(values: dict, overrides: dict) -> dict:
    out = dict(values)
    for key, raw in overrides.items():
        if key == "kd":
            if raw not in KD_SHORTHAND:
                raise ConfigError(f"--kd must be one of {sorted(KD_SHORTHAND)}")
            out["kd.rkd.enabled"], out["kd.fkd.enabled"] = KD_SHORTHAND[raw]
            continue
        if key == "mix":
            key = "mix.method"
        if key not in DEFAULTS:
            raise ConfigError(f"unknown config key {key!r}")
        out[key] = _parse(key, raw)
    return out


@dataclass
class RunConfig:
    values: dict

    @classmethod
    def load(cls, path=None, overrides: dict | None = None) -> "RunConfig":
        values = dict(DEFAULTS)
        if path:
            values = apply_overrides(values, read_ini(path))
        values = apply_overrides(values, overrides or {})
        cfg = cls(values)
        cfg.validate()
        return cfg

    def __getitem__(self, key):
        return self.values[key]

    def validate(self):
        v = self.values
        if v["run.task_mode"] not in TASK_MODES:
            raise ConfigError(f"run.task_mode must be one of {TASK_MODES}")
        if v["mix.method"] not in METHODS:
            raise ConfigError(f"mix.method must be one of {METHODS}")
        if v["mix.layerset"] not in LAYER_LEVELS:
            raise ConfigError(f"mix.layerset must be one of {LAYER_LEVELS}")
        if v["mix.alpha"] <= 0:
            raise ConfigError("mix.alpha must be positive")
        if v["student.init"] not in ("auto", "teacher", "scratch"):
            raise ConfigError("student.init must be auto, teacher or scratch")
        if v["train.epochs"] < 1 or v["train.batch_size"] < 1:
            raise ConfigError("train.epochs and train.batch_size must be positive")
        try:
            self.backbone(7)
            self.loss_weights()
            self.schedule()
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc

    def backbone(self, in_channels: int) -> BackboneConfig:
        v = self.values
        return BackboneConfig(
            in_channels=in_channels, resblock_channels=v["model.resblock_channels"],
            embed_dim=v["model.embed_dim"], conformer_layers=v["model.conformer_layers"],
            attn_heads=v["model.attn_heads"], conv_kernel=v["model.conv_kernel"],
            head_hidden=v["model.head_hidden"], conformer_dropout=v["model.conformer_dropout"],
            dropout=v["model.dropout"])

    def loss_weights(self) -> LossWeights:
        v = self.values
        return LossWeights(eta1=v["loss.eta1"], eta2=v["loss.eta2"], gamma1=v["kd.gamma1"],
                           gamma2=v["kd.gamma2"], fkd_warmup_epochs=v["kd.fkd.warmup_epochs"],
                           fkd_warmup=v["kd.fkd.warmup"])

    def rkd_weights(self) -> RkdWeights:
        return RkdWeights(self.values["kd.beta1"], self.values["kd.beta2"])

    def schedule(self) -> TriStageSchedule:
        v = self.values
        return TriStageSchedule(v["sched.peak_lr"], v["sched.warmup_frac"], v["sched.hold_frac"],
                                v["sched.final_scale"])

    def to_ini(self) -> str:
        sections: dict[str, list[str]] = {}
        for key in sorted(self.values):
            section, name = key.split(".", 1)
            value = self.values[key]
            if isinstance(value, tuple):
                value = ",".join(str(x) for x in value)
            sections.setdefault(section, []).append(f"{name} = {value}")
        return "\n".join(f"[{s}]\n" + "\n".join(lines) + "\n" for s, lines in sections.items())

    @property
    def hash(self) -> str:
        return hashlib.sha256(self.to_ini().encode()).hexdigest()[:16]

    def write(self, path) -> None:
        Path(path).write_text(f"# config_hash = {self.hash}\n" + self.to_ini(), encoding="utf-8")
