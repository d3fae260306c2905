"""Multi-level feature mixing: Mixup, LossMix, ManifoldMixup, PointMix, CutMix, CutLossMix, PatchMix.

All of them are one operator, ``M * phi_d(X) + (1 - M) * phi_d(X')``, applied
at a network layer ``d``. They differ in the mask ``M`` (constant ``lam`` or a
binary patch), in the layers they may pick, and in whether the labels or the
losses of the two samples are interpolated.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace
from typing import Callable, Mapping

import numpy as np
import torch

METHODS = ("none", "mixup", "lossmix", "manifoldmixup", "pointmix", "cutmix", "cutlossmix", "patchmix")
LAYER_LEVELS = ("conv", "basicblock", "resblock")


@dataclass(frozen=True)
class MethodTraits:
    granularity: str | None  # "point" | "patch"
    layer: str | None  # "input" | "hidden"
    supervision: str | None  # "label" | "loss"


TRAITS = {
    "none": MethodTraits(None, None, None),
    "mixup": MethodTraits("point", "input", "label"),
    "lossmix": MethodTraits("point", "input", "loss"),
    "manifoldmixup": MethodTraits("point", "hidden", "label"),
    "pointmix": MethodTraits("point", "hidden", "loss"),
    "cutmix": MethodTraits("patch", "input", "label"),
    "cutlossmix": MethodTraits("patch", "input", "loss"),
    "patchmix": MethodTraits("patch", "hidden", "loss"),
}


def eligible_layers(level: str, n_stages: int = 4, blocks_per_stage: int = 2) -> list[str]:
    """Mixing-point names of an eligible layer set; the input layer is always first.

    ``conv``: input, two stem convs and both convs of every BasicBlock (19).
    ``basicblock``: input and every BasicBlock output (9).
    ``resblock``: input and every pooled ResBlock output (5).
    """
    blocks = [f"res{i}.block{b}" for i in range(1, n_stages + 1) for b in range(blocks_per_stage)]
    if level == "conv":
        convs = [p for blk in blocks for p in (f"{blk}.conv1", blk)]
        return ["input", "stem.0", "stem.1"] + convs
    if level == "basicblock":
        return ["input"] + blocks
    if level == "resblock":
        return ["input"] + [f"res{i}" for i in range(1, n_stages + 1)]
    raise ValueError(f"unknown layer set {level!r}; choose from {LAYER_LEVELS}")


@dataclass(frozen=True)
class EligibleLayerSet:
    level: str
    members: tuple

    @classmethod
    def of(cls, level: str) -> "EligibleLayerSet":
        return cls(level, tuple(eligible_layers(level)))


@dataclass(frozen=True)
class MixPlan:
    method: str
    layer: int  # index into the eligible set
    point: str  # mixing-point name of that layer
    lam: float
    lam_eff: float
    patch_box: tuple | None  # (f1, f2, c1, c2), half-open cell ranges
    pairing: np.ndarray

    @property
    def traits(self) -> MethodTraits:
        return TRAITS[self.method]

    def with_lambda(self, lam: float) -> "MixPlan":
        return replace(self, lam=lam, lam_eff=lam)


def identity_plan(batch: int) -> MixPlan:
    return MixPlan("none", 0, "input", 1.0, 1.0, None, np.arange(batch))


def patch_box(lam: float, f_dim: int, c_dim: int, rng: np.random.Generator):
    """Sample a CutMix-style box; returns ``(box, lam_eff)`` with the box snapped to cells."""
    cf, cc = rng.uniform(0, f_dim), rng.uniform(0, c_dim)
    rf, rc = f_dim * math.sqrt(1.0 - lam), c_dim * math.sqrt(1.0 - lam)
    f1 = int(round(max(0.0, cf - rf / 2)))
    f2 = int(round(min(f_dim, cf + rf / 2)))
    c1 = int(round(max(0.0, cc - rc / 2)))
    c2 = int(round(min(c_dim, cc + rc / 2)))
    area = (f2 - f1) * (c2 - c1)
    return (f1, f2, c1, c2), 1.0 - area / (f_dim * c_dim)


def sample_mix_plan(method: str, alpha: float, layers: EligibleLayerSet | str,
                    feat_dims: tuple | Mapping | Callable, batch: int, rng: np.random.Generator,
                    lam: float | None = None) -> MixPlan:
    """Draw one plan shared by the whole batch.

    ``feat_dims`` gives the ``(freq, channel)`` size of the mixed feature map,
    either as a fixed tuple or as a lookup keyed by mixing-point name.
    ``lam`` overrides the Beta draw.
    """
    if method not in TRAITS:
        raise ValueError(f"unknown mixing method {method!r}; choose from {METHODS}")
    if alpha <= 0:
        raise ValueError(f"Beta parameter must be positive, got {alpha}")
    if batch < 1:
        raise ValueError("cannot mix an empty batch")
    if method == "none":
        return identity_plan(batch)
    if isinstance(layers, str):
        layers = EligibleLayerSet.of(layers)
    traits = TRAITS[method]
    lam = float(rng.beta(alpha, alpha)) if lam is None else float(lam)
    if not 0.0 <= lam <= 1.0:
        raise ValueError(f"lambda must lie in [0, 1], got {lam}")
    idx = 0 if traits.layer == "input" else int(rng.integers(len(layers.members)))
    point = layers.members[idx]
    box, lam_eff = None, lam
    if traits.granularity == "patch":
        if callable(feat_dims):
            dims = feat_dims(point)
        elif isinstance(feat_dims, Mapping):
            dims = feat_dims[point]
        else:
            dims = feat_dims
        box, lam_eff = patch_box(lam, *dims, rng)
    return MixPlan(method, idx, point, lam, lam_eff, box, rng.permutation(batch))


def patch_mask(box, f_dim: int, c_dim: int, like: torch.Tensor) -> torch.Tensor:
    """Binary keep-mask laid out as ``[1, C, 1, F]``; zero inside the (clipped) box."""
    f1, f2, c1, c2 = box
    mask = torch.ones(c_dim, f_dim, dtype=torch.bool, device=like.device)
    mask[min(c1, c_dim):min(c2, c_dim), min(f1, f_dim):min(f2, f_dim)] = False
    return mask.view(1, c_dim, 1, f_dim)


def apply_mix(plan: MixPlan, a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    """Mix two feature maps laid out ``[B, C, T, F]``.

    A patch box wider than the map is clipped to it, which is how an
    audio-only network receives the audio part of a multi-modal plan.
    """
    if a.shape != b.shape:
        raise ValueError(f"cannot mix tensors of shapes {tuple(a.shape)} and {tuple(b.shape)}")
    if plan.method == "none":
        return a
    if plan.traits.granularity == "point":
        return plan.lam * a + (1.0 - plan.lam) * b
    mask = patch_mask(plan.patch_box, a.shape[-1], a.shape[-3], a)
    return torch.where(mask, a, b)


def mix_supervision(loss_a, loss_b, plan: MixPlan):
    """Interpolate the losses against the two samples' targets by ``lam_eff``."""
    for v in (loss_a, loss_b):
        if not bool(torch.isfinite(torch.as_tensor(v)).all()):
            raise FloatingPointError("non-finite loss passed to loss mixing")
    return plan.lam_eff * loss_a + (1.0 - plan.lam_eff) * loss_b


def mix_labels(targets_a, targets_b, lam: float):
    """Elementwise label interpolation; accepts tensors, arrays or equal-length tuples of them."""
    if isinstance(targets_a, (tuple, list)):
        return type(targets_a)(mix_labels(x, y, lam) for x, y in zip(targets_a, targets_b))
    if targets_a.shape != targets_b.shape:
        raise ValueError(f"label shapes differ: {tuple(targets_a.shape)} vs {tuple(targets_b.shape)}")
    return lam * targets_a + (1.0 - lam) * targets_b
