"""ResNet-Conformer SELD network shared by the audio teacher and the audio-visual student.

Tensors enter as ``[batch, time, freq, channel]`` and are processed internally
as ``[batch, channel, time, freq]``. Every place where features may be mixed
has a name (``"input"``, ``"stem.0"``, ``"res2.block1.conv1"``, ``"res3"`` ...);
a :class:`~avseld.mixaug.MixPlan` selects one of them.
"""

from __future__ import annotations

import copy
from dataclasses import asdict, dataclass, field

import torch
import torch.nn as nn
import torch.nn.functional as F

from .mixaug import MixPlan, apply_mix, eligible_layers

CHECKPOINT_FORMAT = "avseld-checkpoint/1"


@dataclass
class BackboneConfig:
    in_channels: int = 7
    resblock_channels: tuple = (64, 128, 256, 512)
    pool_kernels: tuple = ((1, 4), (1, 4), (1, 2))
    n_mels: int = 64
    embed_dim: int = 256
    conformer_layers: int = 8
    attn_heads: int = 8
    conv_kernel: int = 31
    ff_mult: int = 4
    n_classes: int = 13
    label_downsample: int = 5
    head_hidden: int = 256
    conformer_dropout: float = 0.05
    dropout: float = 0.0

    def __post_init__(self):
        self.resblock_channels = tuple(int(c) for c in self.resblock_channels)
        self.pool_kernels = tuple(tuple(int(k) for k in p) for p in self.pool_kernels)
        if len(self.resblock_channels) != 4:
            raise ValueError("resblock_channels needs four entries")
        if len(self.pool_kernels) != 3 or any(p[0] != 1 for p in self.pool_kernels):
            raise ValueError("three pool kernels that keep the time axis are required")
        if self.embed_dim % self.attn_heads:
            raise ValueError("embed_dim must be divisible by attn_heads")
        if self.conv_kernel % 2 == 0:
            raise ValueError("conv_kernel must be odd")

    @property
    def stage_freqs(self) -> list[int]:
        freqs, f = [], self.n_mels
        for i in range(4):
            if i < 3:
                f //= self.pool_kernels[i][1]
            freqs.append(f)
        return freqs

    @property
    def encoder_dim(self) -> int:
        return self.resblock_channels[-1] * self.stage_freqs[-1]

    def to_dict(self) -> dict:
        d = asdict(self)
        d["resblock_channels"] = list(self.resblock_channels)
        d["pool_kernels"] = [list(p) for p in self.pool_kernels]
        return d


@dataclass
class SeldOutput:
    p: torch.Tensor  # [B, L, N] activity probabilities
    y: torch.Tensor  # [B, L, 3N] Cartesian locations, class-major (x, y, z per class)

    @property
    def xyz(self) -> torch.Tensor:
        b, l, n3 = self.y.shape
        return self.y.view(b, l, n3 // 3, 3)


@dataclass
class FeaturePyramid:
    """Input tensor (stage 0) and the four ResBlock outputs, each ``[B, C, T, F]``."""

    stages: list = field(default_factory=list)

    def __getitem__(self, j):
        return self.stages[j]

    def __len__(self):
        return len(self.stages)


@dataclass
class BackboneActivations:
    E_a: torch.Tensor
    E: torch.Tensor
    C_a: torch.Tensor
    C: torch.Tensor


class ConvBNReLU(nn.Sequential):
    def __init__(self, cin, cout):
        super().__init__(nn.Conv2d(cin, cout, 3, padding=1, bias=False), nn.BatchNorm2d(cout), nn.ReLU())


class BasicBlock(nn.Module):
    def __init__(self, cin, cout):
        super().__init__()
        self.conv1 = ConvBNReLU(cin, cout)
        self.conv2 = nn.Conv2d(cout, cout, 3, padding=1, bias=False)
        self.bn2 = nn.BatchNorm2d(cout)
        self.shortcut = nn.Identity() if cin == cout else nn.Sequential(
            nn.Conv2d(cin, cout, 1, bias=False), nn.BatchNorm2d(cout))

    def forward(self, x, mix, name):
        # mixing after conv1 leaves the skip path untouched
        h = mix(f"{name}.conv1", self.conv1(x))
        h = self.bn2(self.conv2(h))
        return mix(name, F.relu(h + self.shortcut(x)))


class ResNetEncoder(nn.Module):
    def __init__(self, cfg: BackboneConfig):
        super().__init__()
        ch = cfg.resblock_channels
        self.stem = nn.ModuleList([ConvBNReLU(cfg.in_channels, ch[0]), ConvBNReLU(ch[0], ch[0])])
        self.stages = nn.ModuleList()
        cin = ch[0]
        for c in ch:
            self.stages.append(nn.ModuleList([BasicBlock(cin, c), BasicBlock(c, c)]))
            cin = c
        self.pools = nn.ModuleList([nn.MaxPool2d(k) for k in cfg.pool_kernels])

    def forward(self, x, mix):
        x = mix("input", x)
        pyramid = [x]
        h = x
        for i, conv in enumerate(self.stem):
            h = mix(f"stem.{i}", conv(h))
        for i, blocks in enumerate(self.stages, start=1):
            for b, block in enumerate(blocks):
                h = block(h, mix, f"res{i}.block{b}")
            if i <= len(self.pools):
                h = self.pools[i - 1](h)
            h = mix(f"res{i}", h)
            pyramid.append(h)
        return h, pyramid


class FeedForward(nn.Sequential):
    def __init__(self, dim, mult, dropout):
        super().__init__(nn.LayerNorm(dim), nn.Linear(dim, dim * mult), nn.SiLU(), nn.Dropout(dropout),
                         nn.Linear(dim * mult, dim), nn.Dropout(dropout))


class SelfAttention(nn.Module):
    def __init__(self, dim, heads, dropout):
        super().__init__()
        self.heads = heads
        self.norm = nn.LayerNorm(dim)
        self.qkv = nn.Linear(dim, 3 * dim)
        self.out = nn.Linear(dim, dim)
        self.dropout = nn.Dropout(dropout)
        self.keep_weights = False
        self.weights = None

    def forward(self, x):
        b, t, d = x.shape
        q, k, v = self.qkv(self.norm(x)).view(b, t, 3, self.heads, d // self.heads).permute(2, 0, 3, 1, 4)
        att = torch.softmax(q @ k.transpose(-1, -2) / (d // self.heads) ** 0.5, dim=-1)
        if self.keep_weights:
            self.weights = att.detach()
        h = (att @ v).transpose(1, 2).reshape(b, t, d)
        return self.dropout(self.out(h))


class ConvModule(nn.Module):
    def __init__(self, dim, kernel, dropout):
        super().__init__()
        self.norm = nn.LayerNorm(dim)
        self.pointwise1 = nn.Conv1d(dim, 2 * dim, 1)
        self.depthwise = nn.Conv1d(dim, dim, kernel, padding=kernel // 2, groups=dim)
        self.bn = nn.BatchNorm1d(dim)
        self.pointwise2 = nn.Conv1d(dim, dim, 1)
        self.dropout = nn.Dropout(dropout)

    def forward(self, x):
        h = self.norm(x).transpose(1, 2)
        h = F.glu(self.pointwise1(h), dim=1)
        h = F.silu(self.bn(self.depthwise(h)))
        return self.dropout(self.pointwise2(h).transpose(1, 2))


class ConformerLayer(nn.Module):
    def __init__(self, cfg: BackboneConfig):
        super().__init__()
        d, p = cfg.embed_dim, cfg.conformer_dropout
        self.ff1 = FeedForward(d, cfg.ff_mult, p)
        self.attn = SelfAttention(d, cfg.attn_heads, p)
        self.conv = ConvModule(d, cfg.conv_kernel, p)
        self.ff2 = FeedForward(d, cfg.ff_mult, p)
        self.norm = nn.LayerNorm(d)

    def forward(self, x):
        x = x + 0.5 * self.ff1(x)
        x = x + self.attn(x)
        x = x + self.conv(x)
        x = x + 0.5 * self.ff2(x)
        return self.norm(x)


def _head(dim, hidden, out, dropout):
    return nn.Sequential(nn.Linear(dim, hidden), nn.ReLU(), nn.Dropout(dropout), nn.Linear(hidden, out))


class SeldBackbone(nn.Module):
    def __init__(self, cfg: BackboneConfig):
        super().__init__()
        self.cfg = cfg
        self.encoder = ResNetEncoder(cfg)
        self.proj = nn.Linear(cfg.encoder_dim, cfg.embed_dim)
        self.conformer = nn.ModuleList([ConformerLayer(cfg) for _ in range(cfg.conformer_layers)])
        self.classifier = _head(cfg.embed_dim, cfg.head_hidden, cfg.n_classes, cfg.dropout)
        self.regressor = _head(cfg.embed_dim, cfg.head_hidden, 3 * cfg.n_classes, cfg.dropout)

    def mixing_points(self) -> list[str]:
        return eligible_layers("conv") + [f"res{i}" for i in range(1, 5)]

    def point_dims(self, point: str) -> tuple[int, int]:
        """(freq, channel) size of the feature map at a mixing point."""
        cfg = self.cfg
        if point == "input":
            return cfg.n_mels, cfg.in_channels
        if point.startswith("stem"):
            return cfg.n_mels, cfg.resblock_channels[0]
        stage = int(point[3])
        if "." in point:  # inside ResBlock ``stage``, before its pooling
            freq = cfg.n_mels if stage == 1 else cfg.stage_freqs[stage - 2]
        else:
            freq = cfg.stage_freqs[stage - 1]
        return freq, cfg.resblock_channels[stage - 1]

    def _mixer(self, plan: MixPlan | None):
        if plan is None or plan.method == "none":
            return lambda name, h: h
        if plan.point not in self.mixing_points():
            raise ValueError(f"mixing layer {plan.point!r} is not an eligible layer of this network")

        def mix(name, h):
            if name != plan.point:
                return h
            return apply_mix(plan, h, h[torch.as_tensor(plan.pairing, device=h.device)])

        return mix

    def resnet_forward(self, x, mix_plan: MixPlan | None = None):
        """Return E_a ``[B, T, C4*F4]`` and the feature pyramid."""
        cfg = self.cfg
        if x.dim() != 4 or x.shape[2] != cfg.n_mels or x.shape[3] != cfg.in_channels:
            raise ValueError(f"expected input [B, T, {cfg.n_mels}, {cfg.in_channels}], got {tuple(x.shape)}")
        h, stages = self.encoder(x.permute(0, 3, 1, 2).contiguous(), self._mixer(mix_plan))
        b, c, t, f = h.shape
        return h.permute(0, 2, 1, 3).reshape(b, t, c * f), FeaturePyramid(stages)

    def conformer_forward(self, e):
        for layer in self.conformer:
            e = layer(e)
        return e

    def downsample(self, c_a):
        b, t, d = c_a.shape
        k = self.cfg.label_downsample
        if t % k:
            raise ValueError(f"time length {t} not divisible by {k}")
        return c_a.view(b, t // k, k, d).mean(dim=2)

    def heads_forward(self, c_a) -> SeldOutput:
        c = self.downsample(c_a)
        return SeldOutput(p=torch.sigmoid(self.classifier(c)), y=self.regressor(c))

    def forward(self, x, mix_plan: MixPlan | None = None):
        e_a, pyramid = self.resnet_forward(x, mix_plan)
        c_a = self.conformer_forward(self.proj(e_a))
        return self.heads_forward(c_a), pyramid

    def activations(self, x) -> BackboneActivations:
        e_a, _ = self.resnet_forward(x)
        e = self.proj(e_a)
        c_a = self.conformer_forward(e)
        return BackboneActivations(E_a=e_a, E=e, C_a=c_a, C=self.downsample(c_a))


def student_from_teacher(teacher: SeldBackbone, in_channels: int) -> SeldBackbone:
    """Copy every teacher weight; extra input channels of the first conv start at zero."""
    cfg = copy.deepcopy(teacher.cfg)
    cfg.in_channels = in_channels
    student = SeldBackbone(cfg).to(next(teacher.parameters()))
    state = {k: v.clone() for k, v in teacher.state_dict().items()}
    key = "encoder.stem.0.0.weight"
    w = state[key]
    wide = torch.zeros(w.shape[0], in_channels, *w.shape[2:], dtype=w.dtype, device=w.device)
    wide[:, : w.shape[1]] = w
    state[key] = wide
    student.load_state_dict(state)
    return student


def save_checkpoint(path, model: SeldBackbone, optimizer=None, **extra) -> None:
    torch.save({
        "format": CHECKPOINT_FORMAT,
        "config": model.cfg.to_dict(),
        "state_dict": model.state_dict(),
        "optimizer": optimizer.state_dict() if optimizer is not None else None,
        "extra": extra,
    }, str(path))


def load_checkpoint(path):
    """Return ``(model, blob)``; ``blob["optimizer"]`` and ``blob["extra"]`` hold the rest."""
    blob = torch.load(str(path), map_location="cpu", weights_only=False)
    if blob.get("format") != CHECKPOINT_FORMAT:
        raise ValueError(f"{path}: unsupported checkpoint format {blob.get('format')!r}")
    model = SeldBackbone(BackboneConfig(**blob["config"]))
    dtype = next(v.dtype for v in blob["state_dict"].values() if v.is_floating_point())
    model.to(dtype)
    model.load_state_dict(blob["state_dict"])
    return model, blob
