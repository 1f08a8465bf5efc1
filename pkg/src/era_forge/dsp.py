"""Waveform to log-mel feature conversion and the MELS feature cache format."""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from fractions import Fraction
from pathlib import Path

import numpy as np
from scipy.io import wavfile
from scipy.signal import resample_poly

DEFAULT_RATE = 22050
DEFAULT_WIN = 2048
DEFAULT_HOP = 512
DEFAULT_MELS = 224
DEFAULT_EXCERPT = 1024

MELS_MAGIC = b"MELS"
MELS_VERSION = 1


class DSPError(ValueError):
    pass


@dataclass(frozen=True)
class Waveform:
    samples: np.ndarray
    sample_rate: int

    def __post_init__(self):
        if self.sample_rate <= 0:
            raise DSPError(f"sample_rate must be positive, got {self.sample_rate}")
        samples = np.asarray(self.samples, dtype=np.float64)
        if samples.ndim != 1:
            raise DSPError("waveform must be mono (1-D)")
        if not np.all(np.isfinite(samples)):
            raise DSPError("waveform contains non-finite samples")
        object.__setattr__(self, "samples", samples)

    def __len__(self) -> int:
        return len(self.samples)

    @property
    def duration(self) -> float:
        return len(self.samples) / self.sample_rate


@dataclass(frozen=True)
class MelSpectrogram:
    values: np.ndarray  # [n_mels, n_frames]
    sample_rate: int = DEFAULT_RATE
    hop: int = DEFAULT_HOP
    win: int = DEFAULT_WIN

    @property
    def n_mels(self) -> int:
        return self.values.shape[0]

    @property
    def n_frames(self) -> int:
        return self.values.shape[1]


@dataclass(frozen=True)
class MelFilterbank:
    weights: np.ndarray  # [n_mels, win // 2 + 1]
    f_min: float
    f_max: float
    centers_hz: np.ndarray = field(repr=False)

    @property
    def n_mels(self) -> int:
        return self.weights.shape[0]


def hz_to_mel(f):
    return 2595.0 * np.log10(1.0 + np.asarray(f, dtype=np.float64) / 700.0)


def mel_to_hz(m):
    return 700.0 * (10.0 ** (np.asarray(m, dtype=np.float64) / 2595.0) - 1.0)


def resample(w: Waveform, target_rate: int) -> Waveform:
    """Band-limited polyphase resampling to ``target_rate``."""
    if target_rate <= 0:
        raise DSPError(f"target_rate must be positive, got {target_rate}")
    if len(w) == 0:
        raise DSPError("empty waveform")
    if target_rate == w.sample_rate:
        return Waveform(w.samples.copy(), w.sample_rate)
    ratio = Fraction(target_rate, w.sample_rate)
    out = resample_poly(w.samples, ratio.numerator, ratio.denominator)
    return Waveform(out, target_rate)


def hann(win: int) -> np.ndarray:
    # periodic Hann: peak 1.0 lands on sample win // 2
    n = np.arange(win)
    return 0.5 - 0.5 * np.cos(2.0 * np.pi * n / win)


def n_frames_for(length: int, win: int, hop: int) -> int:
    return (length - win) // hop + 1


def stft_magnitude(w: Waveform | np.ndarray, win: int = DEFAULT_WIN, hop: int = DEFAULT_HOP) -> np.ndarray:
    """Hann-windowed magnitude STFT without centering, shape ``[win//2 + 1, n_frames]``."""
    x = w.samples if isinstance(w, Waveform) else np.asarray(w, dtype=np.float64)
    if win <= 0 or win & (win - 1):
        raise DSPError(f"win must be a power of two, got {win}")
    if not 0 < hop <= win:
        raise DSPError(f"hop must satisfy 0 < hop <= win, got hop={hop}, win={win}")
    if len(x) < win:
        raise DSPError(f"signal too short: {len(x)} samples < win {win}")
    n_frames = n_frames_for(len(x), win, hop)
    frames = np.lib.stride_tricks.sliding_window_view(x, win)[::hop][:n_frames]
    spec = np.fft.rfft(frames * hann(win), axis=1)
    return np.abs(spec).T


def _triangles(freqs: np.ndarray, edges_hz: np.ndarray) -> np.ndarray:
    lower, center, upper = edges_hz[:-2, None], edges_hz[1:-1, None], edges_hz[2:, None]
    rising = (freqs[None, :] - lower) / (center - lower)
    falling = (upper - freqs[None, :]) / (upper - center)
    return np.maximum(0.0, np.minimum(rising, falling))


def mel_filterbank(
    n_mels: int = DEFAULT_MELS,
    win: int = DEFAULT_WIN,
    sample_rate: int = DEFAULT_RATE,
    f_min: float = 0.0,
    f_max: float | None = None,
) -> MelFilterbank:
    """Peak-1.0 triangular filters with centers equally spaced in HTK mel."""
    if f_max is None:
        f_max = sample_rate / 2.0
    if n_mels < 1:
        raise DSPError("n_mels must be >= 1")
    if not f_min < f_max <= sample_rate / 2.0:
        raise DSPError(f"need f_min < f_max <= sample_rate/2, got {f_min}, {f_max}")
    n_bins = win // 2 + 1
    if n_mels > n_bins:
        raise DSPError(f"filterbank overcomplete: {n_mels} mels for {n_bins} FFT bins")
    edges = mel_to_hz(np.linspace(hz_to_mel(f_min), hz_to_mel(f_max), n_mels + 2))
    freqs = np.arange(n_bins) * sample_rate / win
    weights = _triangles(freqs, edges)
    empty = np.flatnonzero(weights.sum(axis=1) == 0)
    if empty.size:
        raise DSPError(f"filterbank overcomplete: filters {empty.tolist()} cover no FFT bin")
    return MelFilterbank(weights, float(f_min), float(f_max), edges[1:-1])


def filter_response(fb: MelFilterbank, freqs_hz) -> np.ndarray:
    """Evaluate the continuous triangles of ``fb`` at arbitrary frequencies."""
    centers_mel = hz_to_mel(fb.centers_hz)
    if fb.n_mels > 1:
        step = centers_mel[1] - centers_mel[0]
    else:
        step = (hz_to_mel(fb.f_max) - hz_to_mel(fb.f_min)) / 2.0
    edges_mel = np.concatenate([[centers_mel[0] - step], centers_mel, [centers_mel[-1] + step]])
    return _triangles(np.atleast_1d(np.asarray(freqs_hz, dtype=np.float64)), mel_to_hz(edges_mel))


def melspectrogram(
    w: Waveform,
    n_mels: int = DEFAULT_MELS,
    win: int = DEFAULT_WIN,
    hop: int = DEFAULT_HOP,
    f_min: float = 0.0,
    f_max: float | None = None,
    filterbank: MelFilterbank | None = None,
) -> MelSpectrogram:
    """``log(1 + filterbank @ |STFT|)`` of an already-resampled waveform."""
    mag = stft_magnitude(w, win, hop)
    fb = filterbank or mel_filterbank(n_mels, win, w.sample_rate, f_min, f_max)
    return MelSpectrogram(np.log1p(fb.weights @ mag), w.sample_rate, hop, win)


def sample_excerpt(
    m: MelSpectrogram | np.ndarray,
    n_frames: int = DEFAULT_EXCERPT,
    rng_seed: int | np.random.Generator | None = None,
    pad: bool = False,
):
    """Random contiguous ``n_frames``-wide column slice.

    Accepts either a :class:`MelSpectrogram` or a bare ``[n_mels, frames]`` array and
    returns the same kind. With ``pad=True`` short sources are zero-padded on the right.
    """
    values = m.values if isinstance(m, MelSpectrogram) else m
    total = values.shape[1]
    if total < n_frames:
        if not pad:
            raise DSPError(f"excerpt longer than source: {n_frames} > {total} frames")
        values = np.pad(values, ((0, 0), (0, n_frames - total)))
        start = 0
    else:
        rng = rng_seed if isinstance(rng_seed, np.random.Generator) else np.random.default_rng(rng_seed)
        start = int(rng.integers(0, total - n_frames + 1))
    out = values[:, start:start + n_frames]
    if isinstance(m, MelSpectrogram):
        return MelSpectrogram(out, m.sample_rate, m.hop, m.win)
    return out


def read_wav(path: str | Path) -> Waveform:
    """Read 16-bit PCM or float WAV, averaging channels to mono."""
    rate, data = wavfile.read(str(path))
    if data.dtype == np.int16:
        x = data.astype(np.float64) / 32768.0
    elif data.dtype == np.int32:
        x = data.astype(np.float64) / 2147483648.0
    elif data.dtype == np.uint8:
        x = (data.astype(np.float64) - 128.0) / 128.0
    else:
        x = data.astype(np.float64)
    if x.ndim == 2:
        x = x.mean(axis=1)
    return Waveform(x, int(rate))


def write_mels(path: str | Path, values: np.ndarray) -> None:
    values = np.ascontiguousarray(values, dtype="<f4")
    n_mels, n_frames = values.shape
    with open(path, "wb") as fh:
        fh.write(MELS_MAGIC)
        fh.write(struct.pack("<III", MELS_VERSION, n_mels, n_frames))
        fh.write(values.tobytes())


def read_mels(path: str | Path) -> np.ndarray:
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[:4] != MELS_MAGIC:
        raise DSPError(f"{path}: not a MELS file")
    version, n_mels, n_frames = struct.unpack_from("<III", blob, 4)
    if version != MELS_VERSION:
        raise DSPError(f"{path}: unsupported MELS version {version}")
    values = np.frombuffer(blob, dtype="<f4", offset=16, count=n_mels * n_frames)
    return values.reshape(n_mels, n_frames).astype(np.float32)
