"""File formats: FOA WAV, binary feature cache, label / keypoint / prediction CSVs."""

from __future__ import annotations

import csv
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.io import wavfile

from .features import FoaWaveform

CACHE_MAGIC = b"SELDFT1\0"


def read_foa_wav(path) -> FoaWaveform:
    try:
        sr, data = wavfile.read(str(path))
    except Exception as exc:  # scipy raises several types for malformed files
        raise ValueError(f"{path}: unreadable WAV ({exc})") from exc
    if data.ndim != 2 or data.shape[1] != 4:
        raise ValueError(f"{path}: expected 4 channels, got shape {data.shape}")
    if data.dtype == np.int16:
        samples = data.astype(np.float64) / 32768.0
    elif data.dtype == np.float32:
        samples = data.astype(np.float64)
    else:
        raise ValueError(f"{path}: unsupported sample type {data.dtype}")
    try:
        return FoaWaveform(samples.T, int(sr))
    except ValueError as exc:
        raise ValueError(f"{path}: {exc}") from exc


def write_foa_wav(path, wave: FoaWaveform) -> None:
    wavfile.write(str(path), wave.sample_rate, wave.samples.T.astype(np.float32))


def write_feature_cache(path, array: np.ndarray) -> None:
    """Write ``array`` as float32 with the ``SELDFT1`` header (little endian)."""
    array = np.ascontiguousarray(array, dtype="<f4")
    header = CACHE_MAGIC + struct.pack(f"<I{array.ndim}I", array.ndim, *array.shape)
    Path(path).write_bytes(header + array.tobytes())


def read_feature_cache(path) -> np.ndarray:
    blob = Path(path).read_bytes()
    if blob[:8] != CACHE_MAGIC:
        raise ValueError(f"{path}: bad feature cache magic")
    (rank,) = struct.unpack_from("<I", blob, 8)
    shape = struct.unpack_from(f"<{rank}I", blob, 12)
    offset = 12 + 4 * rank
    expected = int(np.prod(shape)) * 4
    if len(blob) - offset != expected:
        raise ValueError(f"{path}: payload size {len(blob) - offset} != {expected}")
    return np.frombuffer(blob, dtype="<f4", offset=offset).reshape(shape).astype(np.float32)


@dataclass(frozen=True)
class LabelRow:
    frame: int
    cls: int
    track: int
    azimuth: float
    elevation: float
    distance_cm: float


LABEL_HEADER = ["frame", "class", "track", "azimuth_deg", "elevation_deg", "distance_cm"]


def write_labels_csv(path, rows) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(LABEL_HEADER)
        for r in rows:
            w.writerow([r.frame, r.cls, r.track, f"{r.azimuth:.6f}", f"{r.elevation:.6f}", f"{r.distance_cm:.3f}"])


def _read_rows(path, required):
    try:
        with open(path, newline="", encoding="utf-8") as fh:
            reader = csv.DictReader(fh)
            missing = [k for k in required if k not in (reader.fieldnames or [])]
            if missing:
                raise ValueError(f"{path}: missing columns {missing}")
            return list(reader)
    except (OSError, UnicodeDecodeError, csv.Error) as exc:
        raise ValueError(f"{path}: {exc}") from exc


def read_labels_csv(path) -> list[LabelRow]:
    rows = []
    for i, r in enumerate(_read_rows(path, LABEL_HEADER), start=2):
        try:
            rows.append(LabelRow(int(r["frame"]), int(r["class"]), int(r["track"]),
                                 float(r["azimuth_deg"]), float(r["elevation_deg"]),
                                 float(r["distance_cm"])))
        except (TypeError, ValueError) as exc:
            raise ValueError(f"{path}:{i}: malformed label row ({exc})") from exc
    return rows


KEYPOINT_HEADER = ["frame_idx", "speaker_idx", "u", "v"]


def write_keypoints_csv(path, entries) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(KEYPOINT_HEADER)
        for frame, spk, u, v in entries:
            w.writerow([frame, spk, f"{u:.6f}", f"{v:.6f}"])


def read_keypoints_csv(path) -> list[tuple[int, int, float, float]]:
    out = []
    for i, r in enumerate(_read_rows(path, KEYPOINT_HEADER), start=2):
        try:
            out.append((int(r["frame_idx"]), int(r["speaker_idx"]), float(r["u"]), float(r["v"])))
        except (TypeError, ValueError) as exc:
            raise ValueError(f"{path}:{i}: malformed keypoint row ({exc})") from exc
    return out


@dataclass(frozen=True)
class EventRow:
    """One row of a prediction or reference file."""

    frame: int
    cls: int
    azimuth: float
    elevation: float
    distance: float | None = None
    confidence: float | None = None


def write_events_csv(path, rows, with_distance=False, with_confidence=False) -> None:
    header = ["frame", "class", "azimuth_deg", "elevation_deg"]
    if with_distance:
        header.append("distance_m")
    if with_confidence:
        header.append("confidence")
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        for r in rows:
            line = [r.frame, r.cls, f"{r.azimuth:.6f}", f"{r.elevation:.6f}"]
            if with_distance:
                line.append(f"{r.distance:.6f}")
            if with_confidence:
                line.append(f"{r.confidence:.6f}")
            w.writerow(line)


def read_events_csv(path) -> list[EventRow]:
    rows = []
    for i, r in enumerate(_read_rows(path, ["frame", "class", "azimuth_deg", "elevation_deg"]), start=2):
        try:
            dist = r.get("distance_m")
            conf = r.get("confidence")
            rows.append(EventRow(int(r["frame"]), int(r["class"]), float(r["azimuth_deg"]),
                                 float(r["elevation_deg"]),
                                 float(dist) if dist not in (None, "") else None,
                                 float(conf) if conf not in (None, "") else None))
        except (TypeError, ValueError) as exc:
            raise ValueError(f"{path}:{i}: malformed event row ({exc})") from exc
    return rows
