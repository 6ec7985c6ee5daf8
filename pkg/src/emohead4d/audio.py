"""WAV ingestion and the log-mel featuriser standing in for a learned speech encoder."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

N_MELS = 80
FEATURE_RATE = 100          # feature frames per second
ENERGY_FLOOR = 1e-10
LOG_FLOOR = float(np.log(ENERGY_FLOOR))


class IngestionError(ValueError):
    pass


@dataclass
class AudioFeatures:
    frames: np.ndarray       # (T, N_MELS)
    sample_rate: int
    fps: float

    def __len__(self):
        return len(self.frames)


def read_wav(path):
    """Mono float waveform in [-1, 1] and its sample rate. Stereo is averaged."""
    from scipy.io import wavfile

    try:
        sr, data = wavfile.read(str(path))
    except (ValueError, OSError, EOFError) as exc:
        raise IngestionError(f"cannot read {path}: {exc}") from exc
    if data.dtype == np.int16:
        wav = data.astype(np.float64) / 32768.0
    elif data.dtype == np.int32:
        wav = data.astype(np.float64) / 2147483648.0
    elif data.dtype == np.uint8:
        wav = (data.astype(np.float64) - 128.0) / 128.0
    elif data.dtype in (np.float32, np.float64):
        wav = data.astype(np.float64)
    else:
        raise IngestionError(f"unsupported sample type {data.dtype}")
    if wav.ndim == 2:
        wav = wav.mean(axis=1)
    return wav, int(sr)


def to_pcm16(waveform):
    return np.clip(np.round(np.asarray(waveform, dtype=np.float64) * 32768.0), -32768, 32767).astype("<i2")


def write_wav(path, waveform, sample_rate):
    from scipy.io import wavfile

    pcm = to_pcm16(waveform)
    wavfile.write(str(path), int(sample_rate), pcm)


def hz_to_mel(f):
    return 2595.0 * np.log10(1.0 + np.asarray(f, dtype=np.float64) / 700.0)


def mel_to_hz(m):
    return 700.0 * (10.0 ** (np.asarray(m, dtype=np.float64) / 2595.0) - 1.0)


def mel_band_edges(sample_rate, n_mels=N_MELS):
    """``n_mels + 2`` band edge frequencies (Hz), equally spaced on the mel scale."""
    return mel_to_hz(np.linspace(0.0, hz_to_mel(sample_rate / 2.0), n_mels + 2))


def mel_filterbank(sample_rate, n_fft, n_mels=N_MELS):
    """Triangular filters ``(n_mels, n_fft // 2 + 1)`` with unit peak."""
    edges = mel_band_edges(sample_rate, n_mels)
    freqs = np.arange(n_fft // 2 + 1) * sample_rate / n_fft
    lo, mid, hi = edges[:-2, None], edges[1:-1, None], edges[2:, None]
    up = (freqs - lo) / (mid - lo)
    down = (hi - freqs) / (hi - mid)
    return np.maximum(0.0, np.minimum(up, down))


def aligned_frame_count(n_samples, sample_rate, fps) -> int:
    """``round(duration * fps)`` with halves rounded up, never below 1."""
    return max(1, int(np.floor(n_samples * fps / sample_rate + 0.5)))


def log_mel(waveform, sample_rate, n_mels=N_MELS):
    """Log-mel energies at ``FEATURE_RATE`` frames per second, centred frames."""
    hop = sample_rate / FEATURE_RATE
    win = int(round(0.025 * sample_rate))
    n_fft = 1 << int(np.ceil(np.log2(win)))
    n_frames = 1 + int(len(waveform) // hop)
    padded = np.pad(waveform, (n_fft // 2, n_fft // 2 + 1))
    starts = np.round(np.arange(n_frames) * hop).astype(np.int64)
    window = np.zeros(n_fft)
    off = (n_fft - win) // 2
    window[off:off + win] = np.hanning(win)
    idx = starts[:, None] + np.arange(n_fft)[None, :]
    frames = padded[np.minimum(idx, len(padded) - 1)] * window
    power = np.abs(np.fft.rfft(frames, axis=1)) ** 2
    energy = power @ mel_filterbank(sample_rate, n_fft, n_mels).T
    return np.log(np.maximum(energy, ENERGY_FLOOR))


def extract_audio_features(waveform, sample_rate, fps: float = 25.0) -> AudioFeatures:
    """80-band log-mel resampled linearly to one row per video frame."""
    wav = np.asarray(waveform, dtype=np.float64).reshape(-1)
    if sample_rate < 8000:
        raise IngestionError(f"sample rate {sample_rate} Hz is below 8 kHz")
    if wav.size == 0:
        raise IngestionError("empty waveform")
    if not np.all(np.isfinite(wav)):
        raise IngestionError("waveform contains non-finite samples")
    mel = log_mel(wav, sample_rate)
    T = aligned_frame_count(len(wav), sample_rate, fps)
    pos = np.arange(T) / fps * FEATURE_RATE
    src = np.arange(len(mel))
    out = np.stack([np.interp(pos, src, mel[:, b]) for b in range(mel.shape[1])], axis=1)
    return AudioFeatures(out, int(sample_rate), float(fps))
