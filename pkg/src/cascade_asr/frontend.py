"""Waveform -> stacked, normalized log-Mel features.

Pipeline: Hann-windowed magnitude spectra -> triangular Mel filterbank ->
natural log with a floor -> per-speaker mean/variance normalization ->
left-stacking with downsampling.  Speed perturbation (0.9 / 1.1) rescales
the waveform by linear interpolation before feature extraction.
"""

from __future__ import annotations

import struct
import wave
from dataclasses import dataclass, field, replace

import numpy as np

from .errors import ConfigError, ContractError, ParseError


@dataclass
class AudioSignal:
    samples: np.ndarray       # float in [-1, 1]
    sample_rate: int

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=np.float64)
        if self.sample_rate <= 0:
            raise ConfigError(f"sample_rate must be positive, "
                              f"got {self.sample_rate}")


@dataclass
class FeatureMatrix:
    frames: np.ndarray        # T x d
    frame_shift_ms: float
    utterance_id: str = ""
    speaker_id: str = ""

    @property
    def dim(self):
        return self.frames.shape[1]


@dataclass
class FrontendConfig:
    window_ms: float = 25.0
    shift_ms: float = 10.0
    n_mels: int = 80
    n_fft: int = 0            # 0 = next power of two >= window length
    left_stack: int = 3
    downsample_factor: int = 3
    mel_low_hz: float = 20.0
    mel_high_hz: float = 0.0  # 0 = Nyquist
    log_floor: float = 1e-10

    def fft_size(self, win_samples):
        if self.n_fft:
            if self.n_fft < win_samples:
                raise ConfigError(f"n_fft {self.n_fft} < window "
                                  f"length {win_samples}")
            return self.n_fft
        n = 1
        while n < win_samples:
            n *= 2
        return n


def read_wav(path):
    """PCM16 mono WAV -> AudioSignal; anything else is rejected."""
    with wave.open(str(path), "rb") as w:
        if w.getnchannels() != 1:
            raise ParseError(f"{path}: expected mono audio, "
                             f"got {w.getnchannels()} channels")
        if w.getsampwidth() != 2:
            raise ParseError(f"{path}: expected 16-bit PCM, "
                             f"got sample width {w.getsampwidth()}")
        rate = w.getframerate()
        raw = w.readframes(w.getnframes())
    samples = np.frombuffer(raw, dtype="<i2").astype(np.float64) / 32768.0
    return AudioSignal(samples=samples, sample_rate=rate)


def write_wav(path, audio):
    """Write AudioSignal as PCM16 mono (test fixtures and synthesis)."""
    pcm = np.clip(np.round(audio.samples * 32767.0), -32768, 32767)
    with wave.open(str(path), "wb") as w:
        w.setnchannels(1)
        w.setsampwidth(2)
        w.setframerate(audio.sample_rate)
        w.writeframes(pcm.astype("<i2").tobytes())


def hz_to_mel(f):
    return 2595.0 * np.log10(1.0 + np.asarray(f, dtype=np.float64) / 700.0)


def mel_to_hz(m):
    return 700.0 * (10.0 ** (np.asarray(m, dtype=np.float64) / 2595.0) - 1.0)


def mel_filterbank(n_mels, n_fft, sample_rate, low_hz, high_hz):
    """Triangular filters equally spaced on the Mel scale.

    Returns (filters, center_hz) with filters of shape n_mels x (n_fft/2+1),
    each peaking at 1 at its center frequency.
    """
    if high_hz <= 0:
        high_hz = sample_rate / 2.0
    pts = mel_to_hz(np.linspace(hz_to_mel(low_hz), hz_to_mel(high_hz),
                                n_mels + 2))
    bins = np.fft.rfftfreq(n_fft, d=1.0 / sample_rate)
    filters = np.zeros((n_mels, bins.shape[0]))
    for j in range(n_mels):
        lo, mid, hi = pts[j], pts[j + 1], pts[j + 2]
        up = (bins - lo) / (mid - lo)
        down = (hi - bins) / (hi - mid)
        filters[j] = np.clip(np.minimum(up, down), 0.0, None)
    return filters, pts[1:-1]


def log_mel(audio, cfg):
    """80-d log-Mel features with a 25 ms window and 10 ms shift.

    Frame count is floor((N - W)/H) + 1; audio shorter than one window is
    an error.
    """
    win = int(round(cfg.window_ms * audio.sample_rate / 1000.0))
    hop = int(round(cfg.shift_ms * audio.sample_rate / 1000.0))
    n = audio.samples.shape[0]
    if n < win:
        raise ContractError(f"audio too short: {n} samples < one "
                            f"{win}-sample window")
    n_fft = cfg.fft_size(win)
    n_frames = (n - win) // hop + 1
    window = np.hanning(win)
    filters, _ = mel_filterbank(cfg.n_mels, n_fft, audio.sample_rate,
                                cfg.mel_low_hz, cfg.mel_high_hz)
    idx = np.arange(win)[None, :] + hop * np.arange(n_frames)[:, None]
    frames = audio.samples[idx] * window
    mag = np.abs(np.fft.rfft(frames, n=n_fft, axis=1))
    energies = mag @ filters.T
    feats = np.log(np.maximum(energies, cfg.log_floor))
    return FeatureMatrix(frames=feats, frame_shift_ms=cfg.shift_ms)


def cmvn_by_speaker(feature_list):
    """Per-speaker, per-dimension normalization to mean 0 / variance 1.

    All utterances of a speaker must be present in the call; dimensions
    with (population) variance below 1e-10 are only mean-subtracted.
    """
    groups = {}
    for i, fm in enumerate(feature_list):
        groups.setdefault(fm.speaker_id, []).append(i)
    out = [None] * len(feature_list)
    for idxs in groups.values():
        stacked = np.concatenate([feature_list[i].frames for i in idxs],
                                 axis=0)
        mean = stacked.mean(axis=0)
        var = stacked.var(axis=0)
        scale = 1.0 / np.sqrt(np.where(var < 1e-10, 1.0, var))
        for i in idxs:
            out[i] = replace(feature_list[i],
                             frames=(feature_list[i].frames - mean) * scale)
    return out


def stack_and_downsample(features, left=3, factor=3):
    """Concatenate `left` history frames onto each kept frame, keeping
    every factor-th frame.  Output frame t' covers input frames
    [t-left .. t] at t = t'*factor, with the left edge replicated."""
    if left < 0 or factor < 1:
        raise ConfigError(f"invalid stacking: left={left}, factor={factor}")
    frames = features.frames
    t_in, d = frames.shape
    t_out = -(-t_in // factor)  # ceil
    centers = np.arange(t_out) * factor
    cols = []
    for off in range(-left, 1):
        idx = np.clip(centers + off, 0, t_in - 1)
        cols.append(frames[idx])
    return replace(features,
                   frames=np.concatenate(cols, axis=1),
                   frame_shift_ms=features.frame_shift_ms * factor)


def speed_perturb(audio, factor):
    """Rescale duration to round(N*factor) samples via linear interpolation
    of the original at positions i/factor; sample rate unchanged."""
    if factor <= 0:
        raise ConfigError(f"speed factor must be positive, got {factor}")
    n = audio.samples.shape[0]
    out_n = int(round(n * factor))
    if factor == 1.0:
        return AudioSignal(samples=audio.samples.copy(),
                           sample_rate=audio.sample_rate)
    pos = np.arange(out_n, dtype=np.float64) / factor
    resampled = np.interp(pos, np.arange(n, dtype=np.float64), audio.samples)
    return AudioSignal(samples=resampled, sample_rate=audio.sample_rate)


def extract_features(audio, cfg):
    """log-Mel for one utterance, before CMVN and stacking."""
    return log_mel(audio, cfg)


# -- binary feature cache --------------------------------------------------

def write_feature_file(path, features):
    """Header = two little-endian uint32 (rows, cols), then row-major
    little-endian float32 frames."""
    frames = np.ascontiguousarray(features.frames, dtype="<f4")
    with open(path, "wb") as f:
        f.write(struct.pack("<II", frames.shape[0], frames.shape[1]))
        f.write(frames.tobytes())


def read_feature_file(path, frame_shift_ms=30.0, utterance_id="",
                      speaker_id=""):
    with open(path, "rb") as f:
        rows, cols = struct.unpack("<II", f.read(8))
        data = np.frombuffer(f.read(rows * cols * 4), dtype="<f4")
    if data.shape[0] != rows * cols:
        raise ParseError(f"{path}: truncated feature file")
    return FeatureMatrix(frames=data.reshape(rows, cols).astype(np.float64),
                         frame_shift_ms=frame_shift_ms,
                         utterance_id=utterance_id, speaker_id=speaker_id)
