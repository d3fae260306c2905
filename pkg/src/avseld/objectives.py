"""SELD task losses, the combined training objective and the tri-stage learning-rate schedule."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch

PROB_CLAMP = 1e-7
TASK_MODES = ("doa_2023", "doa_distance_2024")


@dataclass
class LossWeights:
    eta1: float = 0.1  # SED task
    eta2: float = 1.0  # SSL task
    gamma1: float = 0.5  # response distillation
    gamma2: float = 0.5  # feature distillation
    fkd_warmup_epochs: int = 20
    fkd_warmup: str = "ramp"  # "ramp" | "delay"

    def __post_init__(self):
        for name in ("eta1", "eta2", "gamma1", "gamma2"):
            if getattr(self, name) < 0:
                raise ValueError(f"loss weight {name} must be non-negative")
        if self.fkd_warmup not in ("ramp", "delay"):
            raise ValueError(f"fkd_warmup must be 'ramp' or 'delay', got {self.fkd_warmup!r}")


@dataclass
class SeldTargets:
    activity: np.ndarray  # [L, N]
    location: np.ndarray  # [L, N, 3]
    task_mode: str = "doa_2023"
    collapsed: bool = False  # True when same-class overlaps were reduced to one source


def spherical_to_cartesian(azimuth_deg, elevation_deg):
    az, el = np.radians(azimuth_deg), np.radians(elevation_deg)
    return np.stack([np.cos(el) * np.cos(az), np.cos(el) * np.sin(az), np.sin(el)], axis=-1)


def cartesian_to_spherical(xyz):
    xyz = np.asarray(xyz, dtype=np.float64)
    az = np.degrees(np.arctan2(xyz[..., 1], xyz[..., 0]))
    el = np.degrees(np.arctan2(xyz[..., 2], np.hypot(xyz[..., 0], xyz[..., 1])))
    return az, el


def targets_from_labels(rows, n_frames: int, n_classes: int = 13, task_mode: str = "doa_2023") -> SeldTargets:
    """Build class-wise targets from label rows (frame, class, track, az, el, distance_cm).

    Simultaneous events of one class collapse to the nearest source, ties
    going to the lowest track index.
    """
    if task_mode not in TASK_MODES:
        raise ValueError(f"unknown task mode {task_mode!r}")
    activity = np.zeros((n_frames, n_classes), dtype=np.float32)
    location = np.zeros((n_frames, n_classes, 3), dtype=np.float32)
    chosen: dict[tuple[int, int], tuple[float, int]] = {}
    collapsed = False
    for r in rows:
        if not 0 <= r.cls < n_classes:
            raise ValueError(f"class index {r.cls} outside [0, {n_classes})")
        if not 0 <= r.frame < n_frames:
            continue
        key = (r.frame, r.cls)
        rank = (r.distance_cm, r.track)
        if key in chosen:
            collapsed = True
            if rank >= chosen[key]:
                continue
        chosen[key] = rank
        vec = spherical_to_cartesian(r.azimuth, r.elevation)
        if task_mode == "doa_distance_2024":
            vec = vec * (r.distance_cm / 100.0)
        activity[r.frame, r.cls] = 1.0
        location[r.frame, r.cls] = vec
    return SeldTargets(activity, location, task_mode, collapsed)


def _check_shapes(a, b):
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {tuple(a.shape)} vs {tuple(b.shape)}")


def sed_bce(pred, target):
    """Binary cross-entropy averaged over every frame/class cell."""
    _check_shapes(pred, target)
    p = pred.clamp(PROB_CLAMP, 1.0 - PROB_CLAMP)
    return -(target * torch.log(p) + (1.0 - target) * torch.log(1.0 - p)).mean()


def ssl_mse(pred_xyz, target_xyz, activity):
    """Activity-masked squared location error, ``[..., L, N, 3]`` against ``[..., L, N]``."""
    _check_shapes(pred_xyz, target_xyz)
    if activity.shape != pred_xyz.shape[:-1]:
        raise ValueError(f"activity shape {tuple(activity.shape)} does not match {tuple(pred_xyz.shape)}")
    err = (target_xyz - pred_xyz) * activity.unsqueeze(-1)
    return (err ** 2).sum(dim=-1).mean()


def seld_task_loss(output, activity, location, w: LossWeights):
    """``eta1 * BCE + eta2 * masked MSE`` for a model output against batched targets."""
    return w.eta1 * sed_bce(output.p, activity) + w.eta2 * ssl_mse(output.xyz, location, activity)


def fkd_weight(w: LossWeights, epoch: float) -> float:
    if w.fkd_warmup_epochs <= 0:
        return w.gamma2
    if w.fkd_warmup == "delay":
        return w.gamma2 if epoch >= w.fkd_warmup_epochs else 0.0
    return w.gamma2 * min(1.0, max(0.0, epoch) / w.fkd_warmup_epochs)


def total_loss(task, rkd, fkd, w: LossWeights, epoch: float):
    """Task loss plus weighted distillation terms (pass 0 for a disabled term)."""
    for name, v in (("task", task), ("rkd", rkd), ("fkd", fkd)):
        if not bool(torch.isfinite(torch.as_tensor(v)).all()):
            raise FloatingPointError(f"non-finite {name} loss: {float(v)}")
    return task + w.gamma1 * rkd + fkd_weight(w, epoch) * fkd


@dataclass
class TriStageSchedule:
    peak_lr: float = 1e-3
    warmup_frac: float = 0.1
    hold_frac: float = 0.4
    final_scale: float = 0.01

    def __post_init__(self):
        if not (0 <= self.warmup_frac and 0 <= self.hold_frac and self.warmup_frac + self.hold_frac <= 1):
            raise ValueError("phase fractions must be non-negative and sum to at most 1")
        if not 0 < self.final_scale <= 1:
            raise ValueError("final_scale must lie in (0, 1]")

    def __call__(self, step: int, total_steps: int) -> float:
        return lr_schedule(step, total_steps, self.peak_lr, self.warmup_frac, self.hold_frac, self.final_scale)


def lr_schedule(step: int, total_steps: int, peak_lr: float, warmup_frac: float = 0.1,
                hold_frac: float = 0.4, final_scale: float = 0.01) -> float:
    """Linear warm-up to ``peak_lr``, hold, then exponential decay to ``peak_lr * final_scale``."""
    if step < 0 or step > total_steps:
        raise ValueError(f"step {step} outside [0, {total_steps}]")
    warm = int(round(warmup_frac * total_steps))
    hold_end = warm + int(round(hold_frac * total_steps))
    if step < warm:
        return peak_lr * step / warm
    if step <= hold_end or hold_end >= total_steps:
        return peak_lr
    frac = (step - hold_end) / (total_steps - hold_end)
    return peak_lr * math.exp(math.log(final_scale) * frac)
