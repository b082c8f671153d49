"""Acoustic front-end: 80-dim log-Mel filterbank features and on-the-fly
waveform augmentation (noise, reverberation, gain, speed).

Audio I/O is 16-bit PCM mono WAV at 16 kHz; other sample rates are rejected
rather than resampled. Noise/RIR corpora are directory trees with a
``manifest.csv`` listing ``relative_path,category`` per line.
"""

import csv
import math
import os
import random
from dataclasses import dataclass, field

import numpy as np
from scipy.io import wavfile
from scipy.signal import fftconvolve, resample_poly

SAMPLE_RATE = 16000
N_MELS = 80
FRAME_LENGTH = 0.025  # s
FRAME_SHIFT = 0.010  # s
MEL_LOW_HZ = 20.0
MEL_HIGH_HZ = 7600.0
LOG_FLOOR = 1e-10


class AudioError(ValueError):
    pass


@dataclass
class Waveform:
    samples: np.ndarray  # float64, mono
    sample_rate: int = SAMPLE_RATE

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=np.float64)
        if self.samples.ndim != 1:
            raise AudioError("waveform must be mono")
        if not np.all(np.isfinite(self.samples)):
            raise AudioError("waveform contains non-finite samples")
        if self.sample_rate <= 0:
            raise AudioError("sample rate must be positive")

    @property
    def duration(self) -> float:
        return len(self.samples) / self.sample_rate


@dataclass
class AugmentationConfig:
    noise_corpus_path: str = None
    rir_corpus_path: str = None
    # target SNR interval in dB per noise category
    snr_ranges: dict = field(default_factory=lambda: {
        "noise": (0.0, 15.0), "music": (5.0, 15.0), "babble": (13.0, 20.0)})
    gain_range_db: tuple = (-6.0, 6.0)
    speed_factors: tuple = (0.9, 1.0, 1.1)
    prob_noise: float = 0.25
    prob_reverb: float = 0.25
    prob_gain: float = 0.25
    prob_speed: float = 0.25

    def __post_init__(self):
        for p in (self.prob_noise, self.prob_reverb, self.prob_gain,
                  self.prob_speed):
            if not 0.0 <= p <= 1.0:
                raise ValueError("probabilities must lie in [0, 1]")
        if 1.0 not in self.speed_factors:
            raise ValueError("speed factor 1.0 must be available")


def read_wav(path) -> Waveform:
    rate, data = wavfile.read(path)
    if rate != SAMPLE_RATE:
        raise AudioError(f"{path}: expected {SAMPLE_RATE} Hz, got {rate}")
    if data.ndim != 1:
        raise AudioError(f"{path}: expected mono audio")
    if data.dtype != np.int16:
        raise AudioError(f"{path}: expected 16-bit PCM, got {data.dtype}")
    return Waveform(data.astype(np.float64) / 32768.0, rate)


def write_wav(path, w: Waveform):
    clipped = np.clip(w.samples, -1.0, 1.0 - 1.0 / 32768.0)
    wavfile.write(path, w.sample_rate, (clipped * 32768.0).astype(np.int16))


def hz_to_mel(hz):
    return 2595.0 * np.log10(1.0 + np.asarray(hz, dtype=np.float64) / 700.0)


def mel_to_hz(mel):
    return 700.0 * (10.0 ** (np.asarray(mel, dtype=np.float64) / 2595.0) - 1.0)


def mel_filterbank(n_mels=N_MELS, n_fft=512, sample_rate=SAMPLE_RATE,
                   low_hz=MEL_LOW_HZ, high_hz=MEL_HIGH_HZ):
    """Triangular mel filters over FFT bin center frequencies,
    shape [n_mels, n_fft // 2 + 1]."""
    mel_points = np.linspace(hz_to_mel(low_hz), hz_to_mel(high_hz), n_mels + 2)
    hz_points = mel_to_hz(mel_points)
    fft_freqs = np.arange(n_fft // 2 + 1) * sample_rate / n_fft
    fbank = np.zeros((n_mels, n_fft // 2 + 1))
    for m in range(n_mels):
        left, center, right = hz_points[m], hz_points[m + 1], hz_points[m + 2]
        up = (fft_freqs - left) / (center - left)
        down = (right - fft_freqs) / (right - center)
        fbank[m] = np.maximum(0.0, np.minimum(up, down))
    return fbank


def compute_logmel(w: Waveform, mean_normalize=True) -> np.ndarray:
    """80 x T log-Mel filterbank energies, 25 ms frames at 10 ms shift.

    Power spectrum (magnitude squared) projected through the mel filterbank,
    floored before the log. Optional per-utterance mean subtraction over time.
    """
    if w.sample_rate != SAMPLE_RATE:
        raise AudioError(f"expected {SAMPLE_RATE} Hz input, got {w.sample_rate}")
    frame_len = int(round(FRAME_LENGTH * w.sample_rate))
    hop = int(round(FRAME_SHIFT * w.sample_rate))
    if len(w.samples) < frame_len:
        raise AudioError("audio shorter than one frame")
    n_frames = 1 + (len(w.samples) - frame_len) // hop
    n_fft = 512
    window = np.hanning(frame_len)
    idx = np.arange(frame_len)[None, :] + hop * np.arange(n_frames)[:, None]
    frames = w.samples[idx] * window
    spectrum = np.abs(np.fft.rfft(frames, n=n_fft, axis=1)) ** 2
    fbank = mel_filterbank(n_fft=n_fft, sample_rate=w.sample_rate)
    mel_energy = spectrum @ fbank.T  # [T, 80]
    feats = np.log(np.maximum(mel_energy, LOG_FLOOR)).T  # [80, T]
    if mean_normalize:
        feats = feats - feats.mean(axis=1, keepdims=True)
    return feats


def sample_training_chunk(w: Waveform, duration, seed) -> Waveform:
    """Uniform random fixed-length crop; shorter audio is tiled to length."""
    if duration <= 0:
        raise ValueError("duration must be positive")
    n = int(round(duration * w.sample_rate))
    samples = w.samples
    if len(samples) < n:
        reps = int(math.ceil(n / len(samples)))
        samples = np.tile(samples, reps)
    rng = random.Random(seed)
    offset = rng.randrange(len(samples) - n + 1)
    return Waveform(samples[offset:offset + n], w.sample_rate)


def load_corpus_manifest(corpus_path):
    """Read ``manifest.csv`` mapping category -> list of WAV paths."""
    manifest = os.path.join(corpus_path, "manifest.csv")
    by_category = {}
    with open(manifest, newline="", encoding="utf-8") as f:
        for row in csv.reader(f):
            if not row:
                continue
            rel, category = row[0], row[1]
            by_category.setdefault(category, []).append(
                os.path.join(corpus_path, rel))
    for paths in by_category.values():
        paths.sort()
    return by_category


def _signal_power(x):
    return float(np.mean(np.square(x))) + 1e-30


def add_noise(w: Waveform, noise: Waveform, snr_db) -> Waveform:
    """Mix noise scaled so the clean-to-noise power ratio hits snr_db."""
    n = noise.samples
    if len(n) < len(w.samples):
        n = np.tile(n, int(math.ceil(len(w.samples) / len(n))))
    n = n[:len(w.samples)]
    scale = math.sqrt(_signal_power(w.samples) /
                      (_signal_power(n) * 10.0 ** (snr_db / 10.0)))
    return Waveform(w.samples + scale * n, w.sample_rate)


def add_reverb(w: Waveform, rir: Waveform) -> Waveform:
    wet = fftconvolve(w.samples, rir.samples)[:len(w.samples)]
    # keep overall level comparable to the dry signal
    norm = math.sqrt(_signal_power(wet) / _signal_power(w.samples))
    return Waveform(wet / max(norm, 1e-10), w.sample_rate)


def apply_gain(w: Waveform, gain_db) -> Waveform:
    return Waveform(w.samples * 10.0 ** (gain_db / 20.0), w.sample_rate)


def change_speed(w: Waveform, factor) -> Waveform:
    """Resample so playback is ``factor`` times faster (duration scales
    by 1/factor)."""
    if factor == 1.0:
        return w
    frac = int(round(factor * 100))
    samples = resample_poly(w.samples, up=100, down=frac)
    return Waveform(samples, w.sample_rate)


def augment(w: Waveform, cfg: AugmentationConfig, seed) -> Waveform:
    """Apply an independently sampled subset of the four augmentations.

    Deterministic given seed; corpora are only touched when the matching
    branch is selected.
    """
    rng = random.Random(seed)
    out = w
    if rng.random() < cfg.prob_noise:
        by_cat = load_corpus_manifest(cfg.noise_corpus_path)
        category = rng.choice(sorted(by_cat))
        noise = read_wav(rng.choice(by_cat[category]))
        lo, hi = cfg.snr_ranges.get(category, (0.0, 15.0))
        out = add_noise(out, noise, rng.uniform(lo, hi))
    if rng.random() < cfg.prob_reverb:
        by_cat = load_corpus_manifest(cfg.rir_corpus_path)
        paths = [p for ps in by_cat.values() for p in ps]
        out = add_reverb(out, read_wav(rng.choice(sorted(paths))))
    if rng.random() < cfg.prob_gain:
        out = apply_gain(out, rng.uniform(*cfg.gain_range_db))
    if rng.random() < cfg.prob_speed:
        out = change_speed(out, rng.choice(sorted(cfg.speed_factors)))
    return out
