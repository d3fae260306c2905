"""Cross-modal distillation from a frozen audio teacher into the audio-visual student.

Response distillation matches the SED probabilities (binary KL) and the
activity-weighted locations. Feature distillation fuses the student's ResBlock
outputs top-down with attention and compares them to the teacher's stages
through a hierarchical context loss over spatial-pyramid pooled maps.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import NamedTuple

import torch
import torch.nn as nn
import torch.nn.functional as F

from .backbone import SeldBackbone, SeldOutput
from .mixaug import MixPlan

PROB_CLAMP = 1e-7


@dataclass
class RkdWeights:
    beta1: float = 0.1
    beta2: float = 1.0


@dataclass
class SppConfig:
    grids: tuple = (None, 4, 2, 1)  # None keeps the full resolution
    weights: tuple = (1.0, 0.5, 0.25, 0.125)

    def __post_init__(self):
        if len(self.grids) != len(self.weights) or any(w <= 0 for w in self.weights):
            raise ValueError("SPP needs one positive weight per pooling level")

    @property
    def normalized(self) -> list[float]:
        total = sum(self.weights)
        return [w / total for w in self.weights]


def binary_kl(p_t, p_s):
    p_t = p_t.clamp(PROB_CLAMP, 1 - PROB_CLAMP)
    p_s = p_s.clamp(PROB_CLAMP, 1 - PROB_CLAMP)
    return p_t * torch.log(p_t / p_s) + (1 - p_t) * torch.log((1 - p_t) / (1 - p_s))


def rkd_loss(teacher: SeldOutput, student: SeldOutput, w: RkdWeights = RkdWeights()):
    """``beta1 * KL(p_t || p_s) + beta2 * ||(y_t - y_s) p_t||^2``, both averaged over cells."""
    if teacher.p.shape != student.p.shape or teacher.y.shape != student.y.shape:
        raise ValueError("teacher and student outputs differ in shape")
    p_t, y_t = teacher.p.detach(), teacher.xyz.detach()
    sed = binary_kl(p_t, student.p).mean()
    ssl = (((y_t - student.xyz) * p_t.unsqueeze(-1)) ** 2).sum(-1).mean()
    return w.beta1 * sed + w.beta2 * ssl


class FusionStage(nn.Module):
    """Transform, optional two-way attention and output conv for one pyramid stage."""

    def __init__(self, in_ch: int, mid_ch: int, out_ch: int, fuse: bool):
        super().__init__()
        self.transform = nn.Conv2d(in_ch, mid_ch, 1)
        self.attention = nn.Conv2d(2 * mid_ch, 2, 1) if fuse else None
        self.output = nn.Conv2d(mid_ch, out_ch, 3, padding=1)


class FusionModule(nn.Module):
    """Attention-based top-down fusion of the four student stages.

    All residuals share ``mid_channels`` so that adjacent stages can be
    combined; each output conv maps back to the teacher's stage width.
    """

    def __init__(self, student_channels, teacher_channels, mid_channels: int | None = None):
        super().__init__()
        if len(student_channels) != len(teacher_channels):
            raise ValueError("student and teacher need the same number of stages")
        mid = mid_channels or min(teacher_channels)
        n = len(student_channels)
        self.stages = nn.ModuleList(
            FusionStage(s, mid, t, fuse=j < n - 1)
            for j, (s, t) in enumerate(zip(student_channels, teacher_channels)))

    @classmethod
    def for_models(cls, student: SeldBackbone, teacher: SeldBackbone, mid_channels=None):
        return cls(student.cfg.resblock_channels, teacher.cfg.resblock_channels, mid_channels)

    def forward(self, student_stages):
        return abf_fuse(student_stages, self)


class FusionResult(NamedTuple):
    fused: list
    residuals: list
    attention: list  # softmax maps for stages 1..J-1, each [B, 2, T, F]


def abf_fuse(student_stages, params: FusionModule) -> FusionResult:
    """Top-down pass over stages ``1..J`` (``student_stages`` excludes the input stage)."""
    if len(student_stages) != len(params.stages):
        raise ValueError(f"expected {len(params.stages)} stages, got {len(student_stages)}")
    n = len(student_stages)
    fused, residuals, attention = [None] * n, [None] * n, [None] * (n - 1)
    top = params.stages[-1]
    r = top.transform(student_stages[-1])
    residuals[-1], fused[-1] = r, top.output(r)
    for j in range(n - 2, -1, -1):
        stage = params.stages[j]
        f_tilde = stage.transform(student_stages[j])
        r_up = F.interpolate(r, size=f_tilde.shape[-2:], mode="nearest")
        z = torch.softmax(stage.attention(torch.cat([f_tilde, r_up], dim=1)), dim=1)
        r = z[:, 0:1] * f_tilde + z[:, 1:2] * r_up
        residuals[j], fused[j], attention[j] = r, stage.output(r), z
    return FusionResult(fused, residuals, attention)


def _spp(x, grid):
    return x if grid is None else F.adaptive_avg_pool2d(x, (grid, grid))


def hcl_loss(teacher_stages, fused_stages, spp: SppConfig = SppConfig()):
    """Pyramid-pooled MSE on all but the top stage, plus full-resolution MSE on every stage."""
    if len(teacher_stages) != len(fused_stages):
        raise ValueError(f"{len(teacher_stages)} teacher stages vs {len(fused_stages)} fused stages")
    weights = spp.normalized
    loss = 0.0
    for j, (t, s) in enumerate(zip(teacher_stages, fused_stages)):
        if t.shape != s.shape:
            raise ValueError(f"stage {j + 1}: teacher {tuple(t.shape)} vs fused {tuple(s.shape)}")
        t = t.detach()
        if j < len(teacher_stages) - 1:
            for grid, a in zip(spp.grids, weights):
                loss = loss + a * F.mse_loss(_spp(s, grid), _spp(t, grid))
        loss = loss + F.mse_loss(s, t)
    return loss


class DistillResult(NamedTuple):
    rkd: torch.Tensor
    fkd: torch.Tensor
    student: SeldOutput
    teacher: SeldOutput
    student_pyramid: object
    teacher_pyramid: object


def freeze(model: nn.Module) -> nn.Module:
    model.eval()
    for p in model.parameters():
        p.requires_grad_(False)
    return model


def distill_step(teacher: SeldBackbone, student: SeldBackbone, fusion: FusionModule | None, x,
                 mix_plan: MixPlan | None = None, rkd_weights: RkdWeights = RkdWeights(),
                 spp: SppConfig = SppConfig(), rkd: bool = True, fkd: bool = True) -> DistillResult:
    """One paired forward: the teacher sees the audio channels of ``x`` under the same plan."""
    s_out, s_pyr = student(x, mix_plan)
    teacher.eval()
    with torch.no_grad():
        t_out, t_pyr = teacher(x[..., : teacher.cfg.in_channels], mix_plan)
    zero = x.new_zeros(())
    l_rkd = rkd_loss(t_out, s_out, rkd_weights) if rkd else zero
    l_fkd = zero
    if fkd:
        if fusion is None:
            raise ValueError("feature distillation needs a fusion module")
        t_stages, s_stages = t_pyr.stages[1:], s_pyr.stages[1:]
        for j, (t, s) in enumerate(zip(t_stages, s_stages), start=1):
            if t.shape[-2:] != s.shape[-2:]:
                raise ValueError(f"stage {j}: teacher {tuple(t.shape)} vs student {tuple(s.shape)}")
        l_fkd = hcl_loss(t_stages, fusion(s_stages).fused, spp)
    return DistillResult(l_rkd, l_fkd, s_out, t_out, s_pyr, t_pyr)
