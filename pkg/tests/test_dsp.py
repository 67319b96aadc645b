import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from wingbeat.audio import AudioBuffer
from wingbeat.dsp import (
    CLIP_DURATION_S,
    DspConfig,
    build_mel_filterbank,
    extract_features,
    frame_signal,
    hz_to_mel,
    mel_to_hz,
    mfcc,
    power_spectrum,
    power_spectra,
    spectrogram_image,
)
from wingbeat.errors import ConfigError

import reference as ref

RATE = 8000
CFG = DspConfig()


def make_clip(samples):
    return AudioBuffer(np.asarray(samples, dtype=float), RATE)


def random_clip(rng, seconds=CLIP_DURATION_S):
    return make_clip(rng.uniform(-1, 1, int(round(seconds * RATE))))


class TestMelScale:
    def test_zero(self):
        assert hz_to_mel(0.0) == 0.0

    def test_known_values(self):
        # direct evaluation of 2595*log10(1 + f/700)
        assert hz_to_mel(700.0) == pytest.approx(2595.0 * np.log10(2.0), rel=1e-12)
        assert hz_to_mel(8000.0) == pytest.approx(2840.0230467083065, rel=1e-9)

    def test_negative_rejected(self):
        with pytest.raises(ValueError):
            hz_to_mel(-1.0)

    @given(st.floats(min_value=0.0, max_value=2e4))
    def test_round_trip(self, f):
        assert mel_to_hz(hz_to_mel(f)) == pytest.approx(f, rel=1e-9, abs=1e-9)

    @given(st.floats(min_value=0.0, max_value=2e4), st.floats(min_value=1e-6, max_value=100.0))
    def test_strictly_increasing(self, f, delta):
        assert hz_to_mel(f + delta) > hz_to_mel(f)


class TestFraming:
    def test_frame_counts(self):
        assert len(frame_signal(np.zeros(800), CFG)) == 5
        assert len(frame_signal(np.zeros(256), CFG)) == 1
        assert len(frame_signal(np.zeros(100), CFG)) == 0

    def test_frames_start_at_hop_multiples(self):
        rng = np.random.default_rng(0)
        x = rng.uniform(-1, 1, 700)
        frames = frame_signal(x, CFG)
        emphasized = ref.ref_pre_emphasis(x, CFG.pre_emphasis)
        for i, frame in enumerate(frames):
            start = i * CFG.hop_length_samples
            np.testing.assert_allclose(frame, emphasized[start : start + 256], rtol=1e-12)

    def test_no_pre_emphasis_passthrough(self):
        cfg = DspConfig(pre_emphasis=0.0)
        x = np.linspace(-0.5, 0.5, 300)
        np.testing.assert_array_equal(frame_signal(x, cfg)[0], x[:256])


class TestPowerSpectrum:
    def test_zero_frame(self):
        np.testing.assert_array_equal(power_spectrum(np.zeros(256), CFG), np.zeros(257))

    def test_wrong_length_rejected(self):
        with pytest.raises(ValueError):
            power_spectrum(np.zeros(100), CFG)

    def test_sine_at_bin_concentrates(self):
        # bin k of a 512-point FFT of an unwindowed, unpadded 512-sample frame
        cfg = DspConfig(frame_length_samples=512, hop_length_samples=512,
                        window="rectangular", pre_emphasis=0.0)
        k = 32
        n = np.arange(512)
        frame = np.sin(2 * np.pi * k * n / 512)
        spec = power_spectrum(frame, cfg)
        peak = spec[k]
        others = np.delete(spec, k)
        assert others.max() <= 1e-9 * peak

    def test_matches_explicit_dft(self):
        rng = np.random.default_rng(1)
        frame = rng.uniform(-1, 1, 256)
        expected = ref.ref_power_spectrum(frame, "hamming", 512)
        np.testing.assert_allclose(power_spectrum(frame, CFG), expected, rtol=1e-9, atol=1e-12)

    def test_parseval(self):
        rng = np.random.default_rng(2)
        frame = rng.uniform(-1, 1, 256)
        spec = power_spectrum(frame, CFG)
        # two-sided accounting: interior bins appear twice in the full DFT
        two_sided = spec[0] + spec[-1] + 2 * spec[1:-1].sum()
        windowed = frame * np.hamming(256)
        energy = CFG.fft_size * np.sum(windowed**2)
        assert two_sided == pytest.approx(energy, rel=1e-6)

    def test_non_negative_property(self):
        rng = np.random.default_rng(3)
        for _ in range(20):
            frame = rng.uniform(-1, 1, 256)
            assert power_spectrum(frame, CFG).min() >= 0.0


class TestMelFilterbank:
    def test_shape(self):
        fb = build_mel_filterbank(CFG, RATE)
        assert fb.filters.shape == (26, 257)

    def test_centers_equally_spaced_in_mel(self):
        fb = build_mel_filterbank(CFG, RATE)
        gaps = np.diff(hz_to_mel(fb.center_frequencies_hz))
        np.testing.assert_allclose(gaps, gaps[0], atol=1e-9)
        assert np.all(np.diff(fb.center_frequencies_hz) > 0)
        assert fb.center_frequencies_hz[0] > 0
        assert fb.center_frequencies_hz[-1] < RATE / 2

    def test_rows_triangular_with_unit_peak(self):
        fb = build_mel_filterbank(CFG, RATE)
        for row in fb.filters:
            assert row.sum() > 0
            assert row.max() == pytest.approx(1.0, abs=1e-12)
            peak = int(np.argmax(row))
            rise = row[: peak + 1]
            fall = row[peak:]
            assert np.all(np.diff(rise[rise > 0]) >= -1e-12)
            nonzero_fall = fall[fall > 0]
            assert np.all(np.diff(nonzero_fall) <= 1e-12)

    def test_matches_reference_weights(self):
        fb = build_mel_filterbank(CFG, RATE)
        np.testing.assert_allclose(fb.filters, ref.ref_filter_weights(26, 512, RATE), atol=1e-12)

    def test_too_many_filters_rejected(self):
        cfg = DspConfig(frame_length_samples=64, hop_length_samples=32, fft_size=64,
                        n_mel_filters=33, n_mfcc=13)
        with pytest.raises(ConfigError):
            build_mel_filterbank(cfg, RATE)


class TestMfcc:
    def test_constant_mel_energy_gives_single_coefficient(self):
        fb = build_mel_filterbank(CFG, RATE)
        # synthesize a spectrum whose mel energies are constant by solving
        # against the filterbank row sums
        spec = np.ones(257)
        energies = fb.filters @ spec
        # feed the DCT directly through a spectrum scaled per-filter is fiddly;
        # instead check the documented identity on the DCT input itself
        coeffs = mfcc(spec, fb, CFG)
        assert coeffs.shape == (13,)
        # and the exact constant-vector identity via a uniform-energy filterbank
        uniform = type(fb)(filters=np.eye(26, 257), center_frequencies_hz=fb.center_frequencies_hz)
        const_spec = np.zeros(257)
        const_spec[:26] = 5.0
        c = mfcc(const_spec, uniform, CFG)
        assert abs(c[0]) > 0
        np.testing.assert_allclose(c[1:], 0.0, atol=1e-12)

    def test_matches_explicit_dct(self):
        rng = np.random.default_rng(4)
        fb = build_mel_filterbank(CFG, RATE)
        spec = rng.uniform(0, 10, 257)
        energies = fb.filters @ spec
        expected = ref.ref_dct2_ortho(np.log(energies + 1e-10))[:13]
        np.testing.assert_allclose(mfcc(spec, fb, CFG), expected, rtol=1e-9, atol=1e-12)

    def test_scaling_shifts_only_first_coefficient(self):
        rng = np.random.default_rng(5)
        fb = build_mel_filterbank(CFG, RATE)
        spec = rng.uniform(0.1, 10, 257)
        base = mfcc(spec, fb, CFG)
        doubled = mfcc(spec * 2, fb, CFG)
        # log floor is negligible against these energies
        np.testing.assert_allclose(doubled[1:], base[1:], rtol=1e-9, atol=1e-9)
        assert doubled[0] > base[0]

    def test_shape_mismatch_rejected(self):
        fb = build_mel_filterbank(CFG, RATE)
        with pytest.raises(ValueError):
            mfcc(np.ones(100), fb, CFG)


class TestExtractFeatures:
    def test_silent_clip_is_finite(self):
        feat = extract_features(make_clip(np.zeros(800)), CFG)
        assert feat.shape == (26,)
        assert np.all(np.isfinite(feat))

    def test_deterministic(self):
        rng = np.random.default_rng(6)
        clip = random_clip(rng)
        np.testing.assert_array_equal(extract_features(clip, CFG), extract_features(clip, CFG))

    def test_aggregates_five_frames(self):
        # 0.1 s at 8 kHz with frame 256 / hop 128 -> 5 frames; the SD half is
        # zero iff all frames agree, which random audio will not produce
        rng = np.random.default_rng(7)
        clip = random_clip(rng)
        feat = extract_features(clip, CFG)
        assert feat.shape == (26,)
        assert np.any(feat[13:] > 0)

    def test_wrong_duration_rejected(self):
        with pytest.raises(ValueError):
            extract_features(make_clip(np.zeros(900)), CFG)

    @settings(deadline=None, max_examples=10)
    @given(st.integers(min_value=0, max_value=2**32 - 1))
    def test_matches_brute_force_chain(self, seed):
        rng = np.random.default_rng(seed)
        clip = random_clip(rng)
        expected = ref.ref_clip_features(
            clip.samples, RATE, CFG.frame_length_samples, CFG.hop_length_samples,
            CFG.fft_size, CFG.n_mel_filters, CFG.n_mfcc, CFG.pre_emphasis, CFG.window,
        )
        np.testing.assert_allclose(extract_features(clip, CFG), expected, rtol=1e-6, atol=1e-6)


class TestSpectrogram:
    def test_silent_clip_uniform(self):
        img = spectrogram_image(make_clip(np.zeros(800)), CFG)
        assert img.dtype == np.uint8
        assert np.all(img == img[0, 0])

    def test_pure_tone_single_band(self):
        n = np.arange(1600)
        tone = 0.9 * np.sin(2 * np.pi * 1000.0 * n / RATE)
        img = spectrogram_image(make_clip(tone), CFG)
        row_energy = img.astype(float).sum(axis=1)
        # locate the expected row with an explicit DFT on the first frame
        emphasized = ref.ref_pre_emphasis(tone, CFG.pre_emphasis)
        spec = ref.ref_power_spectrum(emphasized[:256], "hamming", 512)
        assert abs(int(np.argmax(row_energy)) - int(np.argmax(spec))) <= 1

    def test_width_is_frame_count(self):
        clip = make_clip(np.zeros(1000))
        img = spectrogram_image(clip, CFG)
        assert img.shape == (257, len(frame_signal(clip, CFG)))

    def test_batch_matches_single(self):
        rng = np.random.default_rng(8)
        frames = frame_signal(random_clip(rng), CFG)
        batch = power_spectra(frames, CFG)
        for i, frame_spec in enumerate(batch):
            raw = frames[i]
            np.testing.assert_array_equal(frame_spec, power_spectra(raw[None, :], CFG)[0])
