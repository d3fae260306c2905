"""Deterministic synthetic FOA scenes with frame labels and mouth keypoints."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.signal import butter, sosfilt

from .features import FoaWaveform, SAMPLE_RATE
from .io import LabelRow, write_foa_wav, write_keypoints_csv, write_labels_csv
from .visual import MAX_SPEAKERS, VIDEO_FPS

N_CLASSES = 13
CLASS_NAMES = ("female_speech", "male_speech", "clapping", "telephone", "laughter", "domestic_sounds",
               "footsteps", "door", "music", "musical_instrument", "water_tap", "bell", "knock")
SPEECH_CLASSES = (0, 1)
LABEL_HOP = 0.1  # seconds per label frame
SOURCE_RMS = 0.1  # at 1 m


@dataclass(frozen=True)
class SourceEvent:
    class_idx: int
    onset: float
    offset: float
    azimuth: float
    elevation: float
    distance: float
    signal_kind: str = "noise"

    def validate(self, clip_seconds: float):
        if not 0 <= self.class_idx < N_CLASSES:
            raise ValueError(f"class index {self.class_idx} outside [0, {N_CLASSES})")
        if not 0 <= self.onset < self.offset <= clip_seconds + 1e-9:
            raise ValueError(f"bad event span [{self.onset}, {self.offset}]")
        if self.distance <= 0:
            raise ValueError("source distance must be positive")


@dataclass
class SceneSpec:
    n_events: int = 3
    clip_seconds: float = 10.0
    snr_db: float | None = 20.0  # diffuse noise level; None disables it
    seed: int = 0
    sample_rate: int = SAMPLE_RATE
    normalization: str = "unit"  # "unit" | "fuma"
    min_event_seconds: float = 1.0
    max_event_seconds: float = 4.0
    elevation_range: tuple = (-40.0, 40.0)
    distance_range: tuple = (0.5, 4.0)

    def __post_init__(self):
        if self.n_events < 0:
            raise ValueError("n_events must be non-negative")


@dataclass
class Scene:
    wave: FoaWaveform
    events: list
    labels: list  # LabelRow
    keypoints: list  # (frame_idx, speaker_idx, u, v)
    overlap_flag: bool = False  # same-class events overlap in time
    spec: SceneSpec = field(default_factory=SceneSpec)


def foa_encode(signal, azimuth: float, elevation: float, sample_rate: int = SAMPLE_RATE,
               normalization: str = "unit") -> FoaWaveform:
    """Plane-wave encoding with unit dipole gains; ``fuma`` scales w by 1/sqrt(2)."""
    s = np.asarray(signal, dtype=np.float64)
    az, el = math.radians(azimuth), math.radians(elevation)
    gains = np.array([1.0, math.cos(az) * math.cos(el), math.sin(az) * math.cos(el), math.sin(el)])
    if normalization == "fuma":
        gains[0] = 1.0 / math.sqrt(2.0)
    elif normalization != "unit":
        raise ValueError(f"unknown normalization {normalization!r}")
    return FoaWaveform(gains[:, None] * s[None, :], sample_rate)


def class_center_hz(class_idx: int) -> float:
    return 250.0 * (8000.0 / 250.0) ** (class_idx / (N_CLASSES - 1))


def class_signal(class_idx: int, n: int, rng: np.random.Generator, sample_rate: int = SAMPLE_RATE,
                 kind: str = "noise") -> np.ndarray:
    """Unit-level band-limited noise (or tone) around a class-specific centre frequency."""
    fc = class_center_hz(class_idx)
    if kind == "tone":
        x = np.sin(2 * np.pi * fc * np.arange(n) / sample_rate + rng.uniform(0, 2 * np.pi))
    elif kind == "noise":
        lo, hi = fc * 2 ** (-1 / 4), min(fc * 2 ** (1 / 4), 0.45 * sample_rate)
        sos = butter(4, [lo, hi], btype="bandpass", fs=sample_rate, output="sos")
        x = sosfilt(sos, rng.standard_normal(n + 2048))[2048:]
    else:
        raise ValueError(f"unknown signal kind {kind!r}")
    x = x / (np.sqrt(np.mean(x ** 2)) + 1e-12) * SOURCE_RMS
    fade = min(n // 2, int(0.02 * sample_rate))
    if fade:
        ramp = 0.5 - 0.5 * np.cos(np.linspace(0, np.pi, fade))
        x[:fade] *= ramp
        x[-fade:] *= ramp[::-1]
    return x


def fibonacci_sphere(n: int) -> np.ndarray:
    """Near-uniform (azimuth, elevation) pairs in degrees."""
    i = np.arange(n) + 0.5
    el = np.degrees(np.arcsin(1 - 2 * i / n))
    az = (np.degrees(np.pi * (1 + 5 ** 0.5) * i) + 180.0) % 360.0 - 180.0
    return np.stack([az, el], axis=1)


def diffuse_noise(n: int, rng: np.random.Generator, rms: float, sample_rate: int = SAMPLE_RATE,
                  n_directions: int = 32, normalization: str = "unit") -> np.ndarray:
    out = np.zeros((4, n))
    for az, el in fibonacci_sphere(n_directions):
        out += foa_encode(rng.standard_normal(n), az, el, sample_rate, normalization).samples
    return out * rms / (np.sqrt(np.mean(out[0] ** 2)) + 1e-12)


def equirect_uv(azimuth: float, elevation: float) -> tuple[float, float]:
    return ((180.0 - azimuth) / 360.0) % 1.0, (90.0 - elevation) / 180.0


def uv_to_angles(u: float, v: float) -> tuple[float, float]:
    az = 180.0 - 360.0 * u
    return (az + 180.0) % 360.0 - 180.0, 90.0 - 180.0 * v


def sample_events(spec: SceneSpec, rng: np.random.Generator) -> list[SourceEvent]:
    n_frames = int(round(spec.clip_seconds / LABEL_HOP))
    events = []
    for _ in range(spec.n_events):
        length = int(rng.integers(int(spec.min_event_seconds / LABEL_HOP),
                                  int(spec.max_event_seconds / LABEL_HOP) + 1))
        length = min(length, n_frames)
        start = int(rng.integers(0, n_frames - length + 1))
        events.append(SourceEvent(
            class_idx=int(rng.integers(N_CLASSES)),
            onset=round(start * LABEL_HOP, 6),
            offset=round((start + length) * LABEL_HOP, 6),
            azimuth=float(rng.uniform(-180.0, 180.0)),
            elevation=float(rng.uniform(*spec.elevation_range)),
            distance=float(rng.uniform(*spec.distance_range)),
        ))
    return events


def render_scene(events, spec: SceneSpec, rng: np.random.Generator) -> Scene:
    sr = spec.sample_rate
    n = int(round(spec.clip_seconds * sr))
    n_frames = int(round(spec.clip_seconds / LABEL_HOP))
    mix = np.zeros((4, n))
    labels, keypoints = [], []
    speaker = 0
    for track, ev in enumerate(events):
        ev.validate(spec.clip_seconds)
        a, b = int(round(ev.onset * sr)), int(round(ev.offset * sr))
        sig = class_signal(ev.class_idx, b - a, rng, sr, ev.signal_kind) / ev.distance
        mix[:, a:b] += foa_encode(sig, ev.azimuth, ev.elevation, sr, spec.normalization).samples
        first, last = int(round(ev.onset / LABEL_HOP)), int(round(ev.offset / LABEL_HOP))
        for frame in range(first, min(last, n_frames)):
            labels.append(LabelRow(frame, ev.class_idx, track, ev.azimuth, ev.elevation, ev.distance * 100.0))
        if ev.class_idx in SPEECH_CLASSES and speaker < MAX_SPEAKERS:
            u, v = equirect_uv(ev.azimuth, ev.elevation)
            lo, hi = int(round(ev.onset * VIDEO_FPS)), int(round(ev.offset * VIDEO_FPS))
            keypoints.extend((k, speaker, u, v) for k in range(lo, hi))
            speaker += 1
    if spec.snr_db is not None:
        mix += diffuse_noise(n, rng, SOURCE_RMS * 10 ** (-spec.snr_db / 20), sr, normalization=spec.normalization)
    overlap = False
    for i, e1 in enumerate(events):
        for e2 in events[i + 1:]:
            if e1.class_idx == e2.class_idx and e1.onset < e2.offset and e2.onset < e1.offset:
                overlap = True
    labels.sort(key=lambda r: (r.frame, r.cls, r.track))
    keypoints.sort()
    return Scene(FoaWaveform(mix, sr), list(events), labels, keypoints, overlap, spec)


def synth_scene(spec: SceneSpec) -> Scene:
    rng = np.random.default_rng(spec.seed)
    return render_scene(sample_events(spec, rng), spec, rng)


def write_dataset(out_dir, n_clips: int, spec: SceneSpec, prefix: str = "clip") -> list[str]:
    """Write ``n_clips`` scenes as ``foa/``, ``labels/`` and ``keypoints/`` files; returns clip names."""
    out = Path(out_dir)
    for sub in ("foa", "labels", "keypoints"):
        (out / sub).mkdir(parents=True, exist_ok=True)
    names = []
    for i in range(n_clips):
        name = f"{prefix}_{i:04d}"
        clip_spec = SceneSpec(**{**spec.__dict__, "seed": spec.seed * 100003 + i})
        scene = synth_scene(clip_spec)
        write_foa_wav(out / "foa" / f"{name}.wav", scene.wave)
        write_labels_csv(out / "labels" / f"{name}.csv", scene.labels)
        write_keypoints_csv(out / "keypoints" / f"{name}.csv", scene.keypoints)
        names.append(name)
    return names
