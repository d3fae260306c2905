"""Gaussian-likelihood visual vectors from mouth keypoints, and audio-visual fusion."""

from __future__ import annotations

import numpy as np

MAX_SPEAKERS = 6
VISUAL_WIDTH = 64
VIDEO_FPS = 10
SIGMA_U2 = 0.04
SIGMA_V2 = 0.08
REPEAT = 5  # audio frames per video frame


def grid(width: int = VISUAL_WIDTH) -> np.ndarray:
    return (np.arange(width) + 0.5) / width


def validate_keypoints(entries, n_frames: int | None = None, max_speakers: int = MAX_SPEAKERS):
    seen = set()
    for frame, spk, u, v in entries:
        if not 0 <= spk < max_speakers:
            raise ValueError(f"speaker index {spk} outside [0, {max_speakers})")
        if not (0.0 <= u <= 1.0 and 0.0 <= v <= 1.0):
            raise ValueError(f"keypoint ({u}, {v}) outside the unit square")
        if frame < 0 or (n_frames is not None and frame >= n_frames):
            raise ValueError(f"frame index {frame} outside the clip")
        if (frame, spk) in seen:
            raise ValueError(f"duplicate keypoint for frame {frame}, speaker {spk}")
        seen.add((frame, spk))


def gaussian_vectors(entries, duration_s: float, width: int = VISUAL_WIDTH,
                     sigma_u2: float = SIGMA_U2, sigma_v2: float = SIGMA_V2,
                     max_speakers: int = MAX_SPEAKERS) -> np.ndarray:
    """Encode keypoints ``(frame_idx, speaker_idx, u, v)`` as a (T_v, width, 2S) array.

    Channel ``2s`` holds the horizontal likelihood of speaker ``s`` and
    ``2s + 1`` the vertical one. Absent speakers stay zero.
    """
    n_frames = int(round(duration_s * VIDEO_FPS))
    validate_keypoints(entries, n_frames, max_speakers)
    out = np.zeros((n_frames, width, 2 * max_speakers), dtype=np.float32)
    g = grid(width)
    for frame, spk, u, v in entries:
        out[frame, :, 2 * spk] = np.exp(-((g - u) ** 2) / sigma_u2)
        out[frame, :, 2 * spk + 1] = np.exp(-((g - v) ** 2) / sigma_v2)
    return out


def fuse_multimodal(acoustic: np.ndarray, visual: np.ndarray, repeat: int = REPEAT) -> np.ndarray:
    """Repeat each video frame ``repeat`` times and concatenate on the channel axis."""
    up = np.repeat(visual, repeat, axis=0)
    if up.shape[0] != acoustic.shape[0] or up.shape[1] != acoustic.shape[1]:
        raise ValueError(f"cannot fuse acoustic {acoustic.shape} with visual {visual.shape}")
    return np.concatenate([acoustic, up.astype(acoustic.dtype)], axis=-1)
