"""Word waveform -> normalized, fixed-width log-mel spectrogram."""
from __future__ import annotations

import wave
from dataclasses import dataclass

import numpy as np

from .errors import FormatError, InputError, ParameterError

SAMPLE_RATE = 16000
N_MELS = 40
WINDOW_MS = 25
SHIFT_MS = 10


@dataclass(frozen=True)
class FrontendConfig:
    fft_size: int = 512
    mel_low: float = 20.0
    mel_high: float = 8000.0
    window_fn: str = "hamming"
    log_floor: float = 1e-10
    target_frames: int = 100
    n_mels: int = N_MELS

    @property
    def window_length(self):
        return SAMPLE_RATE * WINDOW_MS // 1000

    @property
    def hop_length(self):
        return SAMPLE_RATE * SHIFT_MS // 1000

    def validate(self):
        if self.fft_size < self.window_length:
            raise ParameterError(f"fft_size {self.fft_size} shorter than window of {self.window_length} samples")
        if not 0 <= self.mel_low < self.mel_high <= SAMPLE_RATE / 2:
            raise ParameterError(f"need 0 <= mel_low < mel_high <= {SAMPLE_RATE / 2}")
        if self.window_fn not in _WINDOWS:
            raise ParameterError(f"unknown window function {self.window_fn!r}")
        if self.target_frames < 1:
            raise ParameterError("target_frames must be >= 1")
        if not self.log_floor > 0:
            raise ParameterError("log_floor must be positive")
        return self


_WINDOWS = {"hamming": np.hamming, "hann": np.hanning}


@dataclass
class Waveform:
    samples: np.ndarray
    sample_rate: int = SAMPLE_RATE

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=np.float64)
        if self.sample_rate != SAMPLE_RATE:
            raise FormatError(f"unsupported sample rate {self.sample_rate} Hz; only {SAMPLE_RATE} Hz is accepted")
        if self.samples.ndim != 1 or self.samples.size == 0:
            raise InputError("waveform must be a nonempty 1-D sample array")

    def segment(self, start_ms, end_ms):
        start = int(round(start_ms * self.sample_rate / 1000))
        end = int(round(end_ms * self.sample_rate / 1000))
        if not 0 <= start < end <= self.samples.size:
            raise InputError(f"segment [{start_ms}, {end_ms}] ms outside waveform of {self.samples.size} samples")
        return Waveform(self.samples[start:end], self.sample_rate)


def read_wav(path):
    """Read 16-bit signed PCM, mono, 16 kHz; anything else is a FormatError."""
    try:
        with wave.open(str(path), "rb") as f:
            channels, width, rate = f.getnchannels(), f.getsampwidth(), f.getframerate()
            frames = f.readframes(f.getnframes())
    except (wave.Error, EOFError) as exc:
        raise FormatError(f"{path}: not a PCM WAV file ({exc})") from exc
    if channels != 1:
        raise FormatError(f"{path}: expected mono audio, got {channels} channels")
    if width != 2:
        raise FormatError(f"{path}: expected 16-bit samples, got {8 * width}-bit")
    if rate != SAMPLE_RATE:
        raise FormatError(f"{path}: expected {SAMPLE_RATE} Hz, got {rate} Hz")
    samples = np.frombuffer(frames, dtype="<i2").astype(np.float64) / 32768.0
    return Waveform(samples, rate)


def write_wav(path, wave_or_samples):
    samples = wave_or_samples.samples if isinstance(wave_or_samples, Waveform) else np.asarray(wave_or_samples)
    pcm = np.clip(np.round(samples * 32768.0), -32768, 32767).astype("<i2")
    with wave.open(str(path), "wb") as f:
        f.setnchannels(1)
        f.setsampwidth(2)
        f.setframerate(SAMPLE_RATE)
        f.writeframes(pcm.tobytes())


def hz_to_mel(f):
    return 2595.0 * np.log10(1.0 + np.asarray(f, dtype=np.float64) / 700.0)


def mel_to_hz(m):
    return 700.0 * (10.0 ** (np.asarray(m, dtype=np.float64) / 2595.0) - 1.0)


def mel_band_edges(cfg=FrontendConfig()):
    """The n_mels + 2 triangle corner frequencies in Hz, equally spaced in mel."""
    return mel_to_hz(np.linspace(hz_to_mel(cfg.mel_low), hz_to_mel(cfg.mel_high), cfg.n_mels + 2))


def mel_filterbank(cfg=FrontendConfig()):
    """n_mels x (fft_size//2 + 1) matrix of unit-peak triangular filters."""
    edges = mel_band_edges(cfg)
    freqs = np.arange(cfg.fft_size // 2 + 1) * SAMPLE_RATE / cfg.fft_size
    lo, centre, hi = edges[:-2, None], edges[1:-1, None], edges[2:, None]
    rising = (freqs - lo) / (centre - lo)
    falling = (hi - freqs) / (hi - centre)
    return np.maximum(0.0, np.minimum(rising, falling))


def frame_count(n_samples, cfg=FrontendConfig()):
    return (n_samples - cfg.window_length) // cfg.hop_length + 1


def log_mel_spectrogram(wave_, cfg=FrontendConfig()):
    """40 x T log filterbank energies, mel bands on axis 0 and frames on axis 1."""
    cfg.validate()
    if not isinstance(wave_, Waveform):
        wave_ = Waveform(wave_)
    n = wave_.samples.size
    win_len, hop = cfg.window_length, cfg.hop_length
    if n < win_len:
        raise InputError(f"waveform of {n} samples is shorter than one {win_len}-sample window")
    n_frames = frame_count(n, cfg)
    idx = np.arange(win_len)[None, :] + hop * np.arange(n_frames)[:, None]
    frames = wave_.samples[idx] * _WINDOWS[cfg.window_fn](win_len)
    power = np.abs(np.fft.rfft(frames, n=cfg.fft_size, axis=1)) ** 2
    energies = power @ mel_filterbank(cfg).T
    return np.log(np.maximum(energies, cfg.log_floor)).T


def normalize_spectrogram(spec):
    """Subtract the global mean, divide by the global (population) std."""
    spec = np.asarray(spec, dtype=np.float64)
    if spec.size == 0 or np.ptp(spec) == 0:
        # the mean of a constant grid is not always exact in floating point
        return np.zeros_like(spec)
    centred = spec - spec.mean()
    std = centred.std()
    return centred / std if std >= 1e-8 else centred


def fit_to_width(spec, target=100):
    """Zero-pad or truncate symmetrically along time to ``target`` frames.

    The odd leftover frame goes on the right in both directions.
    """
    if target < 1:
        raise ParameterError("target width must be >= 1")
    spec = np.asarray(spec)
    t = spec.shape[1]
    if t < target:
        left = (target - t) // 2
        return np.pad(spec, ((0, 0), (left, target - t - left)))
    if t > target:
        left = (t - target) // 2
        return spec[:, left:left + target]
    return spec


def word_spectrogram(wave_, cfg=FrontendConfig()):
    """Extract -> normalize -> fit, the full per-word pipeline."""
    return fit_to_width(normalize_spectrogram(log_mel_spectrogram(wave_, cfg)), cfg.target_frames)
