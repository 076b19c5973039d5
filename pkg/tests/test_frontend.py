import math

import numpy as np
import pytest

from cascade_asr import frontend
from cascade_asr.errors import ConfigError, ContractError, ParseError
from cascade_asr.frontend import (AudioSignal, FeatureMatrix, FrontendConfig,
                                  cmvn_by_speaker, log_mel, mel_filterbank,
                                  speed_perturb, stack_and_downsample)


def tone(freq, dur_s=1.0, rate=16000, amp=0.3):
    t = np.arange(int(dur_s * rate)) / rate
    return AudioSignal(samples=amp * np.sin(2 * np.pi * freq * t),
                       sample_rate=rate)


class TestLogMel:
    def test_frame_count_one_second(self):
        fm = log_mel(tone(440.0), FrontendConfig())
        assert fm.frames.shape == (98, 80)  # floor((16000-400)/160)+1
        assert fm.frame_shift_ms == 10.0

    def test_zero_signal_hits_log_floor(self):
        cfg = FrontendConfig()
        fm = log_mel(AudioSignal(np.zeros(16000), 16000), cfg)
        np.testing.assert_allclose(fm.frames, math.log(cfg.log_floor))

    def test_sine_at_filter_center_peaks_there(self):
        cfg = FrontendConfig()
        _, centers = mel_filterbank(80, 512, 16000, cfg.mel_low_hz, 0.0)
        for j in (30, 45, 60):
            fm = log_mel(tone(centers[j]), cfg)
            interior = fm.frames[5:-5]
            assert (interior.argmax(axis=1) == j).all()

    def test_too_short_audio_rejected(self):
        with pytest.raises(ContractError, match="too short"):
            log_mel(AudioSignal(np.zeros(100), 16000), FrontendConfig())

    def test_deterministic(self):
        a = log_mel(tone(523.0), FrontendConfig()).frames
        b = log_mel(tone(523.0), FrontendConfig()).frames
        np.testing.assert_array_equal(a, b)


class TestCMVN:
    def _features(self):
        rng = np.random.default_rng(0)
        return [
            FeatureMatrix(rng.normal(2.0, 3.0, size=(50, 8)), 10.0, "u1", "spkA"),
            FeatureMatrix(rng.normal(-1.0, 0.5, size=(30, 8)), 10.0, "u2", "spkA"),
            FeatureMatrix(rng.normal(5.0, 2.0, size=(40, 8)), 10.0, "u3", "spkB"),
        ]

    def test_per_speaker_zero_mean_unit_variance(self):
        out = cmvn_by_speaker(self._features())
        a = np.concatenate([out[0].frames, out[1].frames])
        b = out[2].frames
        for block in (a, b):
            assert np.abs(block.mean(axis=0)).max() < 1e-6
            np.testing.assert_allclose(block.var(axis=0), 1.0, atol=1e-6)

    def test_hand_computed_two_frames(self):
        out = cmvn_by_speaker(
            [FeatureMatrix(np.array([[1.0], [3.0]]), 10.0, "u", "s")])
        np.testing.assert_allclose(out[0].frames, [[-1.0], [1.0]])

    def test_degenerate_dim_only_mean_subtracted(self):
        frames = np.array([[1.0, 7.0], [2.0, 7.0], [3.0, 7.0]])
        out = cmvn_by_speaker([FeatureMatrix(frames, 10.0, "u", "s")])
        np.testing.assert_allclose(out[0].frames[:, 1], 0.0)

    def test_idempotent(self):
        once = cmvn_by_speaker(self._features())
        twice = cmvn_by_speaker(once)
        for a, b in zip(once, twice):
            np.testing.assert_allclose(a.frames, b.frames, atol=1e-9)

    def test_preserves_order(self):
        out = cmvn_by_speaker(self._features())
        assert [fm.utterance_id for fm in out] == ["u1", "u2", "u3"]


class TestStackDownsample:
    def test_paper_shape(self):
        fm = FeatureMatrix(np.arange(9 * 80, dtype=float).reshape(9, 80),
                           10.0, "u", "s")
        out = stack_and_downsample(fm, left=3, factor=3)
        assert out.frames.shape == (3, 320)
        assert out.frame_shift_ms == 30.0

    def test_left_edge_replicates_frame_zero(self):
        fm = FeatureMatrix(np.arange(12, dtype=float).reshape(4, 3),
                           10.0, "u", "s")
        out = stack_and_downsample(fm, left=3, factor=3)
        # first output frame covers t = -3..0, all clipped to frame 0
        np.testing.assert_array_equal(out.frames[0],
                                      np.tile(fm.frames[0], 4))

    def test_ceil_length(self):
        fm = FeatureMatrix(np.zeros((10, 2)), 10.0, "u", "s")
        assert stack_and_downsample(fm, 3, 3).frames.shape[0] == 4

    def test_identity_config(self):
        fm = FeatureMatrix(np.random.default_rng(1).normal(size=(7, 5)),
                           10.0, "u", "s")
        out = stack_and_downsample(fm, left=0, factor=1)
        np.testing.assert_array_equal(out.frames, fm.frames)
        assert out.frame_shift_ms == fm.frame_shift_ms

    @pytest.mark.parametrize("factor,shift", [(3, 30.0), (5, 50.0), (7, 70.0)])
    def test_frame_rate_axis(self, factor, shift):
        fm = FeatureMatrix(np.zeros((100, 4)), 10.0, "u", "s")
        assert stack_and_downsample(fm, 3, factor).frame_shift_ms == shift

    def test_content_is_stacked_history(self):
        fm = FeatureMatrix(np.arange(20, dtype=float).reshape(10, 2),
                           10.0, "u", "s")
        out = stack_and_downsample(fm, left=2, factor=2)
        # output frame 2 sits at t=4, stacking frames 2,3,4
        np.testing.assert_array_equal(
            out.frames[2], np.concatenate([fm.frames[2], fm.frames[3],
                                           fm.frames[4]]))


class TestSpeedPerturb:
    def test_identity_factor(self):
        audio = tone(100.0, 0.1)
        out = speed_perturb(audio, 1.0)
        np.testing.assert_array_equal(out.samples, audio.samples)

    def test_paper_factors_lengths(self):
        audio = AudioSignal(np.zeros(1000), 16000)
        assert speed_perturb(audio, 0.9).samples.shape[0] == 900
        assert speed_perturb(audio, 1.1).samples.shape[0] == 1100

    def test_affine_signals_preserved(self):
        ramp = AudioSignal(np.linspace(-0.5, 0.5, 800), 8000)
        out = speed_perturb(ramp, 0.9)
        slope = (ramp.samples[1] - ramp.samples[0]) * (1 / 0.9) * 0.9
        expect = ramp.samples[0] + (ramp.samples[1] - ramp.samples[0]) * \
            np.arange(out.samples.shape[0]) / 0.9
        np.testing.assert_allclose(out.samples, expect, atol=1e-9)

    def test_rate_unchanged_and_bad_factor(self):
        audio = AudioSignal(np.zeros(100), 8000)
        assert speed_perturb(audio, 1.1).sample_rate == 8000
        with pytest.raises(ConfigError):
            speed_perturb(audio, 0.0)


class TestWavIO:
    def test_round_trip(self, tmp_path):
        audio = tone(440.0, 0.05)
        path = tmp_path / "a.wav"
        frontend.write_wav(path, audio)
        back = frontend.read_wav(path)
        assert back.sample_rate == 16000
        np.testing.assert_allclose(back.samples, audio.samples, atol=1e-4)

    def test_feature_cache_round_trip(self, tmp_path):
        fm = FeatureMatrix(
            np.random.default_rng(2).normal(size=(13, 5)).astype(np.float32)
            .astype(np.float64), 30.0, "u", "s")
        path = tmp_path / "u.feat"
        frontend.write_feature_file(path, fm)
        back = frontend.read_feature_file(path, frame_shift_ms=30.0)
        np.testing.assert_array_equal(back.frames, fm.frames)
