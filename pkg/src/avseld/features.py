"""FOA acoustic front end: STFT, Mel filterbank, log-Mel and Mel-band intensity vectors."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.signal import get_window

SAMPLE_RATE = 24000
WINDOW_LEN = 1024
FRAME_RATE = 50  # feature frames per second
N_MELS = 64
EPS = 1e-8
CLIP_SECONDS = 10.0


@dataclass(frozen=True)
class FoaWaveform:
    """Four-channel first-order ambisonics signal, channel order w, x, y, z."""

    samples: np.ndarray  # (4, n_samples)
    sample_rate: int = SAMPLE_RATE

    def __post_init__(self):
        samples = np.asarray(self.samples)
        if samples.ndim != 2 or samples.shape[0] != 4:
            raise ValueError(f"FOA waveform needs shape (4, n_samples), got {samples.shape}")
        if not np.all(np.isfinite(samples)):
            raise ValueError("FOA waveform contains non-finite samples")
        if self.sample_rate <= 0:
            raise ValueError(f"sample_rate must be positive, got {self.sample_rate}")
        object.__setattr__(self, "samples", samples)

    @property
    def duration(self) -> float:
        return self.samples.shape[1] / self.sample_rate


@dataclass(frozen=True)
class FoaStft:
    frames: np.ndarray  # complex (4, T, window_len // 2 + 1)
    window_len: int
    hop: int
    sample_rate: int = SAMPLE_RATE


@dataclass(frozen=True)
class MelFilterbank:
    weights: np.ndarray  # (n_mels, n_bins)
    sample_rate: int


def hz_to_mel(f):
    return 2595.0 * np.log10(1.0 + np.asarray(f, dtype=np.float64) / 700.0)


def mel_to_hz(m):
    return 700.0 * (10.0 ** (np.asarray(m, dtype=np.float64) / 2595.0) - 1.0)


def mel_filterbank(sample_rate: int = SAMPLE_RATE, n_fft: int = WINDOW_LEN,
                   n_mels: int = N_MELS, fmin: float = 0.0, fmax: float | None = None) -> MelFilterbank:
    """HTK-scale triangular filters, each row normalised to unit sum.

    Unit-sum rows make the intensity projection a weighted average of unit
    vectors, so its magnitude never exceeds one.
    """
    fmax = sample_rate / 2 if fmax is None else fmax
    bin_freqs = np.arange(n_fft // 2 + 1) * sample_rate / n_fft
    edges = mel_to_hz(np.linspace(hz_to_mel(fmin), hz_to_mel(fmax), n_mels + 2))
    lower, center, upper = edges[:-2, None], edges[1:-1, None], edges[2:, None]
    rising = (bin_freqs[None, :] - lower) / (center - lower)
    falling = (upper - bin_freqs[None, :]) / (upper - center)
    weights = np.maximum(0.0, np.minimum(rising, falling))
    sums = weights.sum(axis=1, keepdims=True)
    if np.any(sums <= 0):
        raise ValueError("Mel band without any frequency bin; increase n_fft or reduce n_mels")
    return MelFilterbank(weights=weights / sums, sample_rate=sample_rate)


def default_hop(sample_rate: int = SAMPLE_RATE) -> int:
    return sample_rate // FRAME_RATE


def stft(wave: FoaWaveform, window_len: int = WINDOW_LEN, hop: int | None = None) -> FoaStft:
    """Hamming-window STFT of every FOA channel.

    Frame ``t`` is centred on sample ``t * hop``; the frame count is
    ``round(n_samples / hop)`` so a 10 s clip at 24 kHz gives 500 frames.
    """
    hop = default_hop(wave.sample_rate) if hop is None else hop
    x = wave.samples.astype(np.float64)
    n_samples = x.shape[1]
    n_frames = int(round(n_samples / hop))
    half = window_len // 2
    total = (n_frames - 1) * hop + window_len if n_frames > 0 else 0
    padded = np.zeros((4, max(total, half + n_samples)))
    padded[:, half:half + n_samples] = x
    idx = np.arange(n_frames)[:, None] * hop + np.arange(window_len)[None, :]
    window = get_window("hamming", window_len, fftbins=True)
    segments = padded[:, idx] * window
    frames = np.fft.rfft(segments, axis=-1)
    return FoaStft(frames=frames, window_len=window_len, hop=hop, sample_rate=wave.sample_rate)


def intensity_vectors(spec: FoaStft, fb: MelFilterbank, eps: float = EPS) -> np.ndarray:
    """Mel-band intensity maps, shape (T, n_mels, 3).

    The stored value is the negated, normalised active intensity, so that
    ``-feature`` points toward the source.
    """
    w, vec = spec.frames[0], spec.frames[1:]
    intensity = np.real(np.conj(w)[None] * vec)  # (3, T, F)
    norm = np.sqrt(np.sum(intensity ** 2, axis=0, keepdims=True))
    unit = intensity / (norm + eps)
    mel = -np.einsum("kf,ctf->tkc", fb.weights, unit)
    return np.clip(mel, -1.0, 1.0)


def log_mel(spec: FoaStft, fb: MelFilterbank, eps: float = EPS) -> np.ndarray:
    """Log-Mel power of w, x, y, z, shape (T, n_mels, 4)."""
    power = np.abs(spec.frames) ** 2  # (4, T, F)
    return np.log(np.einsum("kf,ctf->tkc", fb.weights, power) + eps)


def acoustic_features(wave: FoaWaveform, fb: MelFilterbank | None = None) -> np.ndarray:
    """Seven-channel input tensor (T, 64, 7): log-Mel w,x,y,z then intensity x,y,z."""
    if fb is None:
        fb = mel_filterbank(wave.sample_rate)
    spec = stft(wave)
    feat = np.concatenate([log_mel(spec, fb), intensity_vectors(spec, fb)], axis=-1)
    return feat.astype(np.float32)


def segment_waveform(wave: FoaWaveform, clip_seconds: float = CLIP_SECONDS) -> list[FoaWaveform]:
    """Split into consecutive fixed-length clips, zero-padding the remainder."""
    seg = int(round(clip_seconds * wave.sample_rate))
    n = wave.samples.shape[1]
    count = max(1, -(-n // seg))
    padded = np.zeros((4, count * seg), dtype=wave.samples.dtype)
    padded[:, :n] = wave.samples
    return [FoaWaveform(padded[:, i * seg:(i + 1) * seg], wave.sample_rate) for i in range(count)]


def doa_from_intensity(intensity: np.ndarray, log_power: np.ndarray | None = None) -> np.ndarray:
    """Unit DOA estimate from a (T, K, 3) intensity map.

    Cells are averaged uniformly, or weighted by omni power when the matching
    (T, K) log-Mel map of w is given, which keeps noise-only bands from
    diluting the estimate.
    """
    weights = np.ones(intensity.shape[:-1]) if log_power is None else np.exp(log_power)
    v = -(intensity * weights[..., None]).reshape(-1, 3).sum(axis=0)
    n = np.linalg.norm(v)
    if n == 0:
        raise ValueError("intensity map carries no directional energy")
    return v / n
