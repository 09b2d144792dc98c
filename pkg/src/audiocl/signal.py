"""Waveform I/O and the waveform -> log-mel feature pipeline.

Frames are taken fully inside the signal (no centering, no padding), so an
input of length ``n`` analysed with window ``w`` and hop ``h`` yields exactly
``(n - w) // h + 1`` frames.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

LOG_FLOOR = 1e-10


class WavError(ValueError):
    """Base class for WAV decoding failures."""


class MalformedWavError(WavError):
    pass


class UnsupportedEncodingError(WavError):
    pass


@dataclass(frozen=True, eq=False)
class Waveform:
    samples: np.ndarray
    sample_rate: int

    def __post_init__(self):
        samples = np.asarray(self.samples, dtype=np.float64)
        if samples.ndim != 1 or samples.size == 0:
            raise ValueError("waveform must be a nonempty 1-D sequence")
        if not np.all(np.isfinite(samples)):
            raise ValueError("waveform contains non-finite samples")
        if int(self.sample_rate) <= 0:
            raise ValueError(f"sample_rate must be positive, got {self.sample_rate}")
        object.__setattr__(self, "samples", samples)
        object.__setattr__(self, "sample_rate", int(self.sample_rate))

    def __len__(self):
        return self.samples.size

    @property
    def duration(self) -> float:
        return self.samples.size / self.sample_rate


@dataclass(frozen=True, eq=False)
class ComplexSpectrogram:
    bins: np.ndarray  # (n_fft // 2 + 1, frames)
    n_fft: int
    hop: int


@dataclass(frozen=True, eq=False)
class MelSpectrogram:
    values: np.ndarray  # (n_mels, frames)
    sample_rate: int

    @property
    def n_mels(self) -> int:
        return self.values.shape[0]

    @property
    def n_frames(self) -> int:
        return self.values.shape[1]


@dataclass(frozen=True)
class FeatureConfig:
    sample_rate: int = 22050
    n_fft: int = 1024
    hop: int = 600
    n_mels: int = 128
    floor: float = LOG_FLOOR
    _fb_cache: dict = field(default_factory=dict, init=False, repr=False, compare=False)

    def n_frames(self, n_samples: int) -> int:
        return frame_count(n_samples, self.n_fft, self.hop)

    def filterbank(self) -> np.ndarray:
        fb = self._fb_cache.get("fb")
        if fb is None:
            fb = mel_filterbank(self.n_mels, self.n_fft, self.sample_rate)
            fb.setflags(write=False)
            self._fb_cache["fb"] = fb
        return fb


# ---------------------------------------------------------------------------
# WAV I/O
# ---------------------------------------------------------------------------

_PCM = 1
_IEEE_FLOAT = 3
_EXTENSIBLE = 0xFFFE


def read_wav(path) -> Waveform:
    """Decode a PCM16 or float32 RIFF/WAVE file, averaging channels to mono."""
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"no such WAV file: {path}")
    data = path.read_bytes()
    if len(data) < 12 or data[:4] != b"RIFF" or data[8:12] != b"WAVE":
        raise MalformedWavError(f"{path}: missing RIFF/WAVE header")

    fmt = None
    payload = None
    pos = 12
    while pos + 8 <= len(data):
        chunk_id = data[pos:pos + 4]
        (size,) = struct.unpack("<I", data[pos + 4:pos + 8])
        body = data[pos + 8:pos + 8 + size]
        if len(body) < size:
            raise MalformedWavError(f"{path}: truncated {chunk_id!r} chunk")
        if chunk_id == b"fmt ":
            fmt = body
        elif chunk_id == b"data":
            payload = body
        pos += 8 + size + (size & 1)

    if fmt is None or len(fmt) < 16:
        raise MalformedWavError(f"{path}: missing or short fmt chunk")
    if payload is None:
        raise MalformedWavError(f"{path}: missing data chunk")

    tag, channels, rate, _, block_align, bits = struct.unpack("<HHIIHH", fmt[:16])
    if tag == _EXTENSIBLE and len(fmt) >= 26:
        (tag,) = struct.unpack("<H", fmt[24:26])
    if channels < 1 or rate < 1:
        raise MalformedWavError(f"{path}: invalid channel count or sample rate")

    if tag == _PCM and bits == 16:
        raw = np.frombuffer(payload[: len(payload) // 2 * 2], dtype="<i2")
        samples = raw.astype(np.float64) / 32768.0
    elif tag == _IEEE_FLOAT and bits == 32:
        raw = np.frombuffer(payload[: len(payload) // 4 * 4], dtype="<f4")
        samples = raw.astype(np.float64)
    else:
        raise UnsupportedEncodingError(
            f"{path}: unsupported WAV encoding (format tag 0x{tag:04x}, {bits} bits); "
            "only PCM 16-bit and IEEE float 32-bit are accepted"
        )

    n = samples.size // channels
    if n == 0:
        raise MalformedWavError(f"{path}: data chunk holds no complete frames")
    samples = samples[: n * channels].reshape(n, channels).mean(axis=1)
    return Waveform(samples, rate)


def write_wav(path, w: Waveform, encoding: str = "float32") -> None:
    """Write a mono WAV file as float32 (default) or clipped PCM16."""
    if encoding == "float32":
        tag, bits = _IEEE_FLOAT, 32
        payload = w.samples.astype("<f4").tobytes()
    elif encoding == "pcm16":
        tag, bits = _PCM, 16
        clipped = np.clip(np.round(w.samples * 32768.0), -32768, 32767)
        payload = clipped.astype("<i2").tobytes()
    else:
        raise ValueError(f"unknown encoding {encoding!r}")
    block = bits // 8
    fmt = struct.pack("<HHIIHH", tag, 1, w.sample_rate, w.sample_rate * block, block, bits)
    body = b"WAVE" + b"fmt " + struct.pack("<I", len(fmt)) + fmt
    body += b"data" + struct.pack("<I", len(payload)) + payload
    Path(path).write_bytes(b"RIFF" + struct.pack("<I", len(body)) + body)


# ---------------------------------------------------------------------------
# Spectral analysis
# ---------------------------------------------------------------------------

def hann(n: int) -> np.ndarray:
    """Periodic Hann window."""
    return 0.5 - 0.5 * np.cos(2.0 * np.pi * np.arange(n) / n)


def frame_count(n_samples: int, window: int, hop: int) -> int:
    if n_samples < window:
        raise ValueError(f"signal of {n_samples} samples is shorter than one window ({window})")
    return (n_samples - window) // hop + 1


def frames(x: np.ndarray, window: int, hop: int) -> np.ndarray:
    """View of ``x`` as overlapping frames, shape (n_frames, window)."""
    n = frame_count(x.size, window, hop)
    return np.lib.stride_tricks.sliding_window_view(x, window)[: (n - 1) * hop + 1 : hop]


def stft(w, window: int = 1024, hop: int = 600) -> ComplexSpectrogram:
    """Hann-windowed short-time Fourier transform without padding.

    Parameters
    ----------
    w : Waveform or array_like
        Input signal.
    window : int
        Frame length, also the DFT size.
    hop : int
        Distance between successive frame starts.

    Returns
    -------
    ComplexSpectrogram
        ``bins[k, t]`` is the k-th DFT coefficient of frame t.
    """
    if window <= 0 or hop <= 0:
        raise ValueError("window and hop must be positive")
    x = w.samples if isinstance(w, Waveform) else np.asarray(w, dtype=np.float64)
    segs = frames(x, window, hop) * hann(window)
    return ComplexSpectrogram(np.fft.rfft(segs, axis=1).T, window, hop)


def hz_to_mel(f):
    return 2595.0 * np.log10(1.0 + np.asarray(f, dtype=np.float64) / 700.0)


def mel_to_hz(m):
    return 700.0 * (10.0 ** (np.asarray(m, dtype=np.float64) / 2595.0) - 1.0)


def mel_frequencies(n_mels: int, sample_rate: int) -> np.ndarray:
    """Edges of the triangular filters in Hz: ``n_mels + 2`` points from 0 to Nyquist."""
    return mel_to_hz(np.linspace(0.0, hz_to_mel(sample_rate / 2.0), n_mels + 2))


def mel_filterbank(n_mels: int, n_fft: int, sample_rate: int) -> np.ndarray:
    """Triangular mel filterbank of shape (n_mels, n_fft // 2 + 1), unit peak height."""
    if n_mels < 1:
        raise ValueError("n_mels must be at least 1")
    if n_fft <= 0 or n_fft % 2:
        raise ValueError("n_fft must be a positive even number")
    if sample_rate <= 0:
        raise ValueError("sample_rate must be positive")

    edges = mel_frequencies(n_mels, sample_rate)
    freqs = np.arange(n_fft // 2 + 1) * sample_rate / n_fft
    left, center, right = edges[:-2, None], edges[1:-1, None], edges[2:, None]
    rising = (freqs - left) / (center - left)
    falling = (right - freqs) / (right - center)
    fb = np.maximum(0.0, np.minimum(rising, falling))

    empty = np.flatnonzero(fb.sum(axis=1) <= 0)
    if empty.size:
        raise ValueError(
            f"n_mels={n_mels} is too large for n_fft={n_fft} at {sample_rate} Hz: "
            f"{empty.size} filter(s) contain no FFT bin"
        )
    return fb


def power_to_log(power: np.ndarray, floor: float = LOG_FLOOR) -> np.ndarray:
    return np.log(np.maximum(power, floor))


def log_mel(w: Waveform, cfg: FeatureConfig | None = None) -> MelSpectrogram:
    cfg = cfg or FeatureConfig(sample_rate=w.sample_rate)
    spec = stft(w, cfg.n_fft, cfg.hop)
    power = spec.bins.real ** 2 + spec.bins.imag ** 2
    return MelSpectrogram(power_to_log(cfg.filterbank() @ power, cfg.floor), w.sample_rate)
