"""Dataset loading, the shared training loop for both stages, prediction and evaluation."""

from __future__ import annotations

import csv
import hashlib
import logging
import math
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from . import metrics
from .backbone import SeldBackbone, save_checkpoint
from .config import RunConfig
from .distill import FusionModule, RkdWeights, SppConfig, distill_step
from .features import FRAME_RATE, acoustic_features, mel_filterbank, segment_waveform
from .io import (read_feature_cache, read_foa_wav, read_keypoints_csv, read_labels_csv,
                 write_feature_cache)
from .mixaug import EligibleLayerSet, MixPlan, mix_labels, mix_supervision, sample_mix_plan
from .objectives import LossWeights, SeldTargets, lr_schedule, seld_task_loss, targets_from_labels, total_loss
from .synth import LABEL_HOP, N_CLASSES
from .visual import fuse_multimodal, gaussian_vectors

log = logging.getLogger(__name__)

AUDIO_CHANNELS = 7
AV_CHANNELS = 19


def set_verification_mode(enabled: bool = True) -> None:
    """float64 everywhere, one thread, deterministic kernels."""
    if enabled:
        torch.set_default_dtype(torch.float64)
        torch.set_num_threads(1)
        torch.use_deterministic_algorithms(True)


def param_hash(model: torch.nn.Module) -> str:
    h = hashlib.sha256()
    for name, t in sorted(model.state_dict().items()):
        h.update(name.encode())
        h.update(t.detach().cpu().contiguous().numpy().tobytes())
    return h.hexdigest()


# --- features on disk -------------------------------------------------------

def _stale(target: Path, source: Path) -> bool:
    return not target.exists() or target.stat().st_mtime < source.stat().st_mtime


def extract_dataset(dataset_dir, cache_dir, clip_seconds: float = 10.0) -> list[Path]:
    """Cache acoustic (and, when keypoints exist, visual) features; returns files written.

    Files are padded to a whole number of ``clip_seconds`` segments. Up-to-date
    caches are left alone.
    """
    dataset_dir, cache_dir = Path(dataset_dir), Path(cache_dir)
    cache_dir.mkdir(parents=True, exist_ok=True)
    wavs = sorted((dataset_dir / "foa").glob("*.wav"))
    if not wavs:
        raise ValueError(f"{dataset_dir}: no WAV files under foa/")
    fb = None
    written = []
    for wav in wavs:
        audio_path = cache_dir / f"{wav.stem}.audio.feat"
        duration = None
        if _stale(audio_path, wav):
            wave = read_foa_wav(wav)
            fb = fb or mel_filterbank(wave.sample_rate)
            segments = segment_waveform(wave, clip_seconds)
            feat = np.concatenate([acoustic_features(s, fb) for s in segments], axis=0)
            write_feature_cache(audio_path, feat)
            written.append(audio_path)
        kp = dataset_dir / "keypoints" / f"{wav.stem}.csv"
        visual_path = cache_dir / f"{wav.stem}.visual.feat"
        if kp.exists() and (_stale(visual_path, kp) or _stale(visual_path, audio_path)):
            duration = read_feature_cache(audio_path).shape[0] / FRAME_RATE
            try:
                visual = gaussian_vectors(read_keypoints_csv(kp), duration)
            except ValueError as exc:
                raise ValueError(f"{kp}: {exc}") from exc
            write_feature_cache(visual_path, visual)
            written.append(visual_path)
    return written


@dataclass
class ClipSet:
    names: list
    features: np.ndarray  # [n, T, 64, C]
    activity: np.ndarray  # [n, L, N]
    location: np.ndarray  # [n, L, N, 3]
    task_mode: str

    def __len__(self):
        return len(self.names)

    def targets(self, i):
        return SeldTargets(self.activity[i], self.location[i], self.task_mode)


def load_clips(dataset_dir, cache_dir=None, task_mode="doa_2023", modality="audio", max_clips=0,
               clip_seconds: float = 10.0, n_classes: int = N_CLASSES) -> ClipSet:
    """Load cached features and labels, cutting every file into ``clip_seconds`` segments."""
    dataset_dir = Path(dataset_dir)
    cache_dir = Path(cache_dir) if cache_dir else dataset_dir / "cache"
    extract_dataset(dataset_dir, cache_dir, clip_seconds)
    stems = sorted(p.stem for p in (dataset_dir / "foa").glob("*.wav"))
    if max_clips:
        stems = stems[:max_clips]
    seg_frames = int(round(clip_seconds * FRAME_RATE))
    seg_labels = int(round(clip_seconds / LABEL_HOP))
    names, feats, acts, locs = [], [], [], []
    for stem in stems:
        audio = read_feature_cache(cache_dir / f"{stem}.audio.feat")
        if modality == "av":
            vpath = cache_dir / f"{stem}.visual.feat"
            visual = read_feature_cache(vpath) if vpath.exists() else np.zeros(
                (audio.shape[0] // 5, audio.shape[1], 12), dtype=np.float32)
            feat = fuse_multimodal(audio, visual)
        elif modality == "audio":
            feat = audio
        else:
            raise ValueError(f"unknown modality {modality!r}")
        n_seg = feat.shape[0] // seg_frames
        label_path = dataset_dir / "labels" / f"{stem}.csv"
        rows = read_labels_csv(label_path) if label_path.exists() else []
        tg = targets_from_labels(rows, n_seg * seg_labels, n_classes, task_mode)
        for k in range(n_seg):
            names.append(stem if n_seg == 1 else f"{stem}#{k}")
            feats.append(feat[k * seg_frames:(k + 1) * seg_frames])
            acts.append(tg.activity[k * seg_labels:(k + 1) * seg_labels])
            locs.append(tg.location[k * seg_labels:(k + 1) * seg_labels])
    if not names:
        raise ValueError(f"{dataset_dir}: no clips to load")
    return ClipSet(names, np.stack(feats), np.stack(acts), np.stack(locs), task_mode)


# --- one optimisation step --------------------------------------------------

@dataclass
class KdSettings:
    rkd: bool = False
    fkd: bool = False
    rkd_weights: RkdWeights = field(default_factory=RkdWeights)
    spp: SppConfig = field(default_factory=SppConfig)


def compute_loss(model: SeldBackbone, x, activity, location, plan: MixPlan, weights: LossWeights,
                 epoch: float, teacher: SeldBackbone | None = None, fusion: FusionModule | None = None,
                 kd: KdSettings | None = None):
    """Total objective for one batch under one mixing plan; returns ``(loss, parts)``."""
    kd = kd or KdSettings()
    if teacher is not None and (kd.rkd or kd.fkd):
        res = distill_step(teacher, model, fusion, x, plan, kd.rkd_weights, kd.spp, rkd=kd.rkd, fkd=kd.fkd)
        out, rkd, fkd = res.student, res.rkd, res.fkd
    else:
        out, _ = model(x, plan)
        rkd = fkd = x.new_zeros(())
    supervision = plan.traits.supervision
    perm = torch.as_tensor(plan.pairing, device=x.device)
    if supervision == "label":
        act, loc = mix_labels((activity, location), (activity[perm], location[perm]), plan.lam_eff)
        task = seld_task_loss(out, act, loc, weights)
    elif supervision == "loss":
        task = mix_supervision(seld_task_loss(out, activity, location, weights),
                               seld_task_loss(out, activity[perm], location[perm], weights), plan)
    else:
        task = seld_task_loss(out, activity, location, weights)
    loss = total_loss(task, rkd, fkd, weights, epoch)
    return loss, {"task": task.item(), "rkd": rkd.item(), "fkd": fkd.item()}


def train_step(model, optimizer, x, activity, location, plan, weights, epoch, **kw) -> dict:
    model.train()
    loss, parts = compute_loss(model, x, activity, location, plan, weights, epoch, **kw)
    optimizer.zero_grad()
    loss.backward()
    optimizer.step()
    parts["loss"] = loss.item()
    return parts


# --- full training run ------------------------------------------------------

@dataclass
class TrainResult:
    model: SeldBackbone
    fusion: FusionModule | None
    history: list
    step: int
    epoch: int


def _to_tensor(a):
    return torch.as_tensor(a, dtype=torch.get_default_dtype())


def fit(model: SeldBackbone, clips: ClipSet, cfg: RunConfig, *, teacher=None, fusion=None,
        kd: KdSettings | None = None, resume: dict | None = None, log_path=None,
        epochs: int | None = None, peak_lr: float | None = None, on_epoch=None) -> TrainResult:
    """Adam + tri-stage schedule over ``clips``; every batch draws its own mixing plan.

    ``on_epoch(row)`` runs after every epoch and may return True to stop early.
    """
    seed = cfg["run.seed"]
    kd = kd or KdSettings()
    torch.manual_seed(seed)
    rng = np.random.default_rng(seed)
    epochs = epochs or cfg["train.epochs"]
    bs = min(cfg["train.batch_size"], len(clips))
    steps_per_epoch = math.ceil(len(clips) / bs)
    total_steps = epochs * steps_per_epoch
    sched = cfg.schedule()
    peak = peak_lr if peak_lr is not None else sched.peak_lr
    weights = cfg.loss_weights()
    layers = EligibleLayerSet.of(cfg["mix.layerset"])
    method, alpha = cfg["mix.method"], cfg["mix.alpha"]
    params = list(model.parameters()) + (list(fusion.parameters()) if fusion is not None else [])
    optimizer = torch.optim.Adam(params, lr=peak)
    step, start_epoch = 0, 0
    if resume is not None:
        optimizer.load_state_dict(resume["optimizer"])
        step, start_epoch = resume["step"], resume["epoch"]
        rng.bit_generator.state = resume["numpy_rng"]
        torch.set_rng_state(resume["torch_rng"])
        if fusion is not None and resume.get("fusion") is not None:
            fusion.load_state_dict(resume["fusion"])
    feats, acts, locs = _to_tensor(clips.features), _to_tensor(clips.activity), _to_tensor(clips.location)
    history = []
    writer = None
    if log_path is not None:
        new = not Path(log_path).exists() or resume is None
        fh = open(log_path, "w" if new else "a", newline="", encoding="utf-8")
        writer = csv.writer(fh)
        if new:
            fh.write(f"# config_hash={cfg.hash} seed={seed}\n")
            writer.writerow(["epoch", "step", "lr", "loss", "task", "rkd", "fkd", "seconds"])
    try:
        for epoch in range(start_epoch, epochs):
            t0 = time.time()
            order = rng.permutation(len(clips))
            sums = {"loss": 0.0, "task": 0.0, "rkd": 0.0, "fkd": 0.0}
            for b in range(steps_per_epoch):
                idx = torch.as_tensor(order[b * bs:(b + 1) * bs])
                lr = lr_schedule(min(step + 1, total_steps), total_steps, peak, sched.warmup_frac,
                                 sched.hold_frac, sched.final_scale)
                for group in optimizer.param_groups:
                    group["lr"] = lr
                x = feats[idx]
                plan = sample_mix_plan(method, alpha, layers, model.point_dims, len(idx), rng)
                parts = train_step(model, optimizer, x, acts[idx], locs[idx], plan, weights, epoch,
                                   teacher=teacher, fusion=fusion, kd=kd)
                for k in sums:
                    sums[k] += parts[k] / steps_per_epoch
                step += 1
            row = {"epoch": epoch + 1, "step": step, "lr": lr, **sums, "seconds": time.time() - t0}
            history.append(row)
            log.info("epoch %d loss %.5f task %.5f rkd %.5f fkd %.5f", epoch + 1, sums["loss"],
                     sums["task"], sums["rkd"], sums["fkd"])
            if writer is not None:
                writer.writerow([row[k] for k in ("epoch", "step", "lr", "loss", "task", "rkd", "fkd", "seconds")])
            if on_epoch is not None and on_epoch(row):
                break
    finally:
        if writer is not None:
            fh.close()
    result = TrainResult(model, fusion, history, step, history[-1]["epoch"] if history else start_epoch)
    result.optimizer = optimizer
    result.rng_state = rng.bit_generator.state
    return result


def save_run(path, result: TrainResult, cfg: RunConfig, role: str, **extra) -> None:
    save_checkpoint(path, result.model, result.optimizer, role=role, step=result.step, epoch=result.epoch,
                    seed=cfg["run.seed"], config_hash=cfg.hash, config=cfg.to_ini(),
                    task_mode=cfg["run.task_mode"], numpy_rng=result.rng_state,
                    torch_rng=torch.get_rng_state(),
                    fusion=result.fusion.state_dict() if result.fusion is not None else None, **extra)


# --- inference --------------------------------------------------------------

@torch.no_grad()
def predict(model: SeldBackbone, features, batch_size: int = 8):
    """Eval-mode probabilities ``[n, L, N]`` and locations ``[n, L, N, 3]`` as numpy arrays."""
    model.eval()
    ps, ys = [], []
    x = _to_tensor(features).to(next(model.parameters()).dtype)
    for i in range(0, len(x), batch_size):
        out, _ = model(x[i:i + batch_size])
        ps.append(out.p.cpu().numpy())
        ys.append(out.xyz.cpu().numpy())
    return np.concatenate(ps), np.concatenate(ys)


@dataclass
class Evaluation:
    report: object
    calibration: metrics.CalibrationReport
    mse: list
    p: np.ndarray
    y: np.ndarray


def evaluate_predictions(p, y, clips: ClipSet, average: str = "micro") -> Evaluation:
    """Score stacked predictions against ``clips`` (clips are concatenated along time)."""
    task_mode = clips.task_mode
    n_classes = p.shape[-1]
    pred = metrics.grid_from_output(p.reshape(-1, n_classes), y.reshape(-1, n_classes, 3), task_mode)
    ref = metrics.grid_from_targets(SeldTargets(clips.activity.reshape(-1, n_classes),
                                                clips.location.reshape(-1, n_classes, 3), task_mode))
    if task_mode == "doa_distance_2024":
        report = metrics.evaluate_2024(pred, ref, average=average)
    else:
        report = metrics.evaluate_2023(pred, ref, average=average)
    calib = metrics.calibration_bins(p, clips.activity)
    mse = metrics.mse_distribution(list(y), [clips.targets(i) for i in range(len(clips))])
    return Evaluation(report, calib, mse, p, y)


def evaluate_model(model: SeldBackbone, clips: ClipSet, average: str = "micro") -> Evaluation:
    p, y = predict(model, clips.features)
    return evaluate_predictions(p, y, clips, average)
