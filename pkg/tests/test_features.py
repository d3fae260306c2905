import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from avseld.features import (FoaWaveform, SAMPLE_RATE, acoustic_features, default_hop, doa_from_intensity,
                             intensity_vectors, log_mel, mel_filterbank, segment_waveform, stft)
from avseld.synth import foa_encode


@pytest.fixture(scope="module")
def fb():
    return mel_filterbank()


def _noise(seconds=1.0, seed=0):
    return np.random.default_rng(seed).standard_normal(int(seconds * SAMPLE_RATE))


def test_silence_gives_500_zero_frames():
    spec = stft(FoaWaveform(np.zeros((4, 10 * SAMPLE_RATE))))
    assert spec.frames.shape == (4, 500, 513)
    assert not np.any(spec.frames)


def test_hop_is_fifty_frames_per_second():
    assert default_hop(24000) == 480


def test_tone_peaks_at_nearest_bin():
    t = np.arange(SAMPLE_RATE) / SAMPLE_RATE
    samples = np.zeros((4, t.size))
    samples[0] = np.sin(2 * np.pi * 1000.0 * t)
    spec = stft(FoaWaveform(samples))
    expected = round(1000.0 * 1024 / SAMPLE_RATE)
    # edge frames straddle the zero padding; interior ones must all peak
    peaks = np.abs(spec.frames[0, 2:-2]).argmax(axis=-1)
    assert np.all(peaks == expected)


def test_filterbank_rows_are_weighted_averages(fb):
    assert fb.weights.shape == (64, 513)
    assert np.all(fb.weights >= 0)
    np.testing.assert_allclose(fb.weights.sum(axis=1), 1.0, atol=1e-12)


def test_omni_only_field_has_zero_intensity(fb):
    samples = np.zeros((4, SAMPLE_RATE))
    samples[0] = _noise()
    out = intensity_vectors(stft(FoaWaveform(samples)), fb)
    assert out.shape == (50, 64, 3)
    assert not np.any(out)


def _brute_force_band_direction(spec, fb, band, frame):
    # recompute one cell by explicit loops over frequency bins
    acc = np.zeros(3)
    for k in range(spec.frames.shape[-1]):
        w = spec.frames[0, frame, k]
        i = np.array([(np.conj(w) * spec.frames[c, frame, k]).real for c in (1, 2, 3)])
        n = np.sqrt(i @ i)
        acc += fb.weights[band, k] * i / (n + 1e-8)
    return -acc


def test_plane_wave_along_y_points_back_to_source(fb):
    wave = foa_encode(_noise(), 90.0, 0.0)
    spec = stft(wave)
    out = intensity_vectors(spec, fb)
    active = fb.weights[:, 1:-1].sum(axis=1) > 0
    np.testing.assert_allclose(out[10, active], np.tile([0.0, -1.0, 0.0], (active.sum(), 1)), atol=1e-6)
    for band in (3, 30, 60):
        np.testing.assert_allclose(out[10, band], np.clip(_brute_force_band_direction(spec, fb, band, 10), -1, 1),
                                   atol=1e-9)
    np.testing.assert_allclose(doa_from_intensity(out), [0.0, 1.0, 0.0], atol=1e-6)


def test_intensity_is_scale_invariant(fb):
    wave = foa_encode(_noise(), 30.0, 20.0)
    loud = FoaWaveform(wave.samples * 10.0)
    np.testing.assert_allclose(intensity_vectors(stft(loud), fb), intensity_vectors(stft(wave), fb), atol=1e-6)


@settings(max_examples=20, deadline=None)
@given(st.floats(-180, 180), st.floats(-80, 80))
def test_intensity_stays_in_unit_range(az, el):
    fb = mel_filterbank()
    out = intensity_vectors(stft(foa_encode(_noise(0.2), az, el)), fb)
    assert np.all(np.abs(out) <= 1.0) and np.all(np.isfinite(out))


def test_log_mel_of_silence_is_log_eps(fb):
    out = log_mel(stft(FoaWaveform(np.zeros((4, SAMPLE_RATE)))), fb)
    assert out.shape == (50, 64, 4)
    np.testing.assert_array_equal(out, np.log(1e-8))


def test_doubling_amplitude_adds_log4(fb):
    samples = np.stack([_noise(seed=i) for i in range(4)])
    a = log_mel(stft(FoaWaveform(samples)), fb)
    b = log_mel(stft(FoaWaveform(2 * samples)), fb)
    big = a > np.log(1e-8) + 10
    np.testing.assert_allclose((b - a)[big], np.log(4.0), atol=1e-6)


def test_acoustic_features_shape_and_silence():
    feat = acoustic_features(FoaWaveform(np.zeros((4, 10 * SAMPLE_RATE))))
    assert feat.shape == (500, 64, 7) and feat.dtype == np.float32
    np.testing.assert_array_equal(feat[..., :4], np.float32(np.log(1e-8)))
    np.testing.assert_array_equal(feat[..., 4:], 0.0)


def test_acoustic_features_are_deterministic():
    wave = foa_encode(_noise(2.0), -45.0, 10.0)
    a = acoustic_features(wave)
    b = acoustic_features(FoaWaveform(wave.samples.copy()))
    assert a.tobytes() == b.tobytes()


def test_segmenting_pads_and_splits():
    short = FoaWaveform(np.ones((4, 3 * SAMPLE_RATE)))
    (seg,) = segment_waveform(short)
    assert seg.samples.shape == (4, 10 * SAMPLE_RATE)
    assert not np.any(seg.samples[:, 3 * SAMPLE_RATE:])
    long = FoaWaveform(np.ones((4, 23 * SAMPLE_RATE)))
    segs = segment_waveform(long)
    assert len(segs) == 3
    assert not np.any(segs[2].samples[:, 3 * SAMPLE_RATE:])


@pytest.mark.parametrize("bad", [np.zeros((3, 100)), np.full((4, 10), np.nan)])
def test_waveform_rejects_bad_input(bad):
    with pytest.raises(ValueError):
        FoaWaveform(bad)
