"""Label-preserving transformations: pitch shifting, reverberation, and
time-frequency masking, plus the random policy that picks two of them per
instance.

Pitch shifting and reverberation act on waveforms; masking acts on the
log-mel grid, so it can only be applied after feature extraction.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .signal import FeatureConfig, MelSpectrogram, Waveform, frame_count, hann, log_mel

SEMITONES = (-2.5, -2.0, -1.5, -1.0, -0.5, 0.5, 1.0, 1.5, 2.0, 2.5)
RT60_RANGE_MS = (200.0, 1000.0)
POLICIES = ("pitch", "reverb", "tfmask", "combination")

PV_FFT = 1024
PV_HOP = 256


# ---------------------------------------------------------------------------
# Transform descriptors
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class PitchShift:
    semitones: float

    domain = "waveform"


@dataclass(frozen=True)
class Reverb:
    rir_index: int

    domain = "waveform"


@dataclass(frozen=True)
class TFMask:
    """Masking with a mask drawn from ``seed`` once the grid size is known."""

    seed: int

    domain = "spectrogram"


@dataclass(frozen=True)
class MaskSpec:
    freq_masks: tuple = ()  # (start bin, width) pairs
    time_masks: tuple = ()  # (start frame, width) pairs

    def validate(self, n_mels: int, n_frames: int) -> None:
        for kind, masks, limit in (("freq", self.freq_masks, n_mels), ("time", self.time_masks, n_frames)):
            for start, width in masks:
                if width < 0 or start < 0 or start + width > limit:
                    raise ValueError(
                        f"{kind} mask (start={start}, width={width}) outside grid of size {limit}"
                    )

    def area(self, n_mels: int, n_frames: int) -> np.ndarray:
        """Boolean grid marking masked cells."""
        hit = np.zeros((n_mels, n_frames), dtype=bool)
        for start, width in self.freq_masks:
            hit[start:start + width, :] = True
        for start, width in self.time_masks:
            hit[:, start:start + width] = True
        return hit


@dataclass(frozen=True)
class MaskParams:
    max_freq_masks: int = 2
    max_time_masks: int = 2
    freq_width_ratio: float = 1 / 8
    time_width_ratio: float = 1 / 8


# ---------------------------------------------------------------------------
# Pitch shifting
# ---------------------------------------------------------------------------

def _analyze(x: np.ndarray, n_fft: int, hop: int) -> np.ndarray:
    pad = np.pad(x, (n_fft // 2, n_fft // 2))
    n = frame_count(pad.size, n_fft, hop)
    segs = np.lib.stride_tricks.sliding_window_view(pad, n_fft)[: (n - 1) * hop + 1 : hop]
    return np.fft.rfft(segs * hann(n_fft), axis=1).T


def _synthesize(spec: np.ndarray, n_fft: int, hop: int, length: int) -> np.ndarray:
    win = hann(n_fft)
    segs = np.fft.irfft(spec.T, n=n_fft, axis=1) * win
    total = n_fft + hop * (segs.shape[0] - 1)
    out = np.zeros(total)
    norm = np.zeros(total)
    for t, seg in enumerate(segs):
        out[t * hop:t * hop + n_fft] += seg
        norm[t * hop:t * hop + n_fft] += win ** 2
    out = np.divide(out, norm, out=np.zeros_like(out), where=norm > 1e-10)
    out = out[n_fft // 2:]
    if out.size < length:
        out = np.pad(out, (0, length - out.size))
    return out[:length]


def time_stretch(x: np.ndarray, rate: float, n_fft: int = PV_FFT, hop: int = PV_HOP) -> np.ndarray:
    """Phase-vocoder time stretch; output length is round(len(x) / rate)."""
    spec = _analyze(x, n_fft, hop)
    n_frames = spec.shape[1]
    steps = np.arange(0.0, n_frames, rate)
    spec = np.pad(spec, ((0, 0), (0, 2)))
    advance = 2.0 * np.pi * hop * np.arange(spec.shape[0]) / n_fft

    i = steps.astype(np.int64)
    frac = steps - i
    left, right = spec[:, i], spec[:, i + 1]
    mag = (1.0 - frac) * np.abs(left) + frac * np.abs(right)
    dphi = np.angle(right) - np.angle(left) - advance[:, None]
    dphi -= 2.0 * np.pi * np.round(dphi / (2.0 * np.pi))
    increments = advance[:, None] + dphi
    phase = np.empty_like(mag)
    phase[:, 0] = np.angle(spec[:, 0])
    phase[:, 1:] = phase[:, :1] + np.cumsum(increments[:, :-1], axis=1)
    out = mag * np.exp(1j * phase)
    return _synthesize(out, n_fft, hop, int(round(x.size / rate)))


def pitch_shift(w: Waveform, semitones: float) -> Waveform:
    """Shift pitch by ``semitones`` without changing duration.

    The signal is time-stretched by the frequency ratio with a phase vocoder
    and then linearly resampled back to its original length.
    """
    if not math.isfinite(semitones) or abs(semitones) > 12:
        raise ValueError(f"semitones must be finite with |semitones| <= 12, got {semitones}")
    if len(w) < PV_FFT:
        raise ValueError(f"waveform of {len(w)} samples is too short for pitch shifting ({PV_FFT} needed)")
    ratio = 2.0 ** (semitones / 12.0)
    stretched = time_stretch(w.samples, 1.0 / ratio)
    n = len(w)
    pos = np.arange(n) * (stretched.size / n)
    return Waveform(np.interp(pos, np.arange(stretched.size), stretched), w.sample_rate)


# ---------------------------------------------------------------------------
# Reverberation
# ---------------------------------------------------------------------------

def synth_rir(rt60: float, sample_rate: int, rng: np.random.Generator, tail_level: float = 0.25) -> Waveform:
    """Synthetic room impulse response with reverberation time ``rt60`` in ms.

    Gaussian noise under an exponential envelope that falls by 60 dB after
    ``rt60``, preceded by a unit direct-path impulse, then peak-normalized.
    """
    if not RT60_RANGE_MS[0] <= rt60 <= RT60_RANGE_MS[1]:
        raise ValueError(f"rt60 must lie in {RT60_RANGE_MS} ms, got {rt60}")
    seconds = rt60 / 1000.0
    n = int(math.ceil(1.5 * seconds * sample_rate)) + 1
    t = np.arange(n) / sample_rate
    h = tail_level * rng.standard_normal(n) * np.exp(-t * 3.0 * math.log(10.0) / seconds)
    h[0] = 1.0
    return Waveform(h / np.max(np.abs(h)), sample_rate)


class RirBank:
    """A fixed, seeded collection of synthetic RIRs.

    RIR ``i`` depends only on ``(seed, i)``, so entries are generated on first
    use and any subset regenerates bit-identically.
    """

    def __init__(self, size: int = 500, sample_rate: int = 22050, seed: int = 0,
                 rt60_range: tuple = RT60_RANGE_MS):
        if size < 1:
            raise ValueError("bank size must be at least 1")
        self.size = size
        self.sample_rate = sample_rate
        self.seed = seed
        self.rt60_range = tuple(rt60_range)
        self._cache: dict[int, tuple[float, Waveform]] = {}

    def __len__(self):
        return self.size

    def _entry(self, i: int) -> tuple[float, Waveform]:
        if not 0 <= i < self.size:
            raise IndexError(f"RIR index {i} outside bank of size {self.size}")
        entry = self._cache.get(i)
        if entry is None:
            rng = np.random.default_rng([self.seed, i])
            rt60 = float(rng.uniform(*self.rt60_range))
            entry = (rt60, synth_rir(rt60, self.sample_rate, rng))
            self._cache[i] = entry
        return entry

    def __getitem__(self, i: int) -> Waveform:
        return self._entry(i)[1]

    def rt60(self, i: int) -> float:
        return self._entry(i)[0]

    @property
    def rirs(self) -> list[Waveform]:
        return [self[i] for i in range(self.size)]


def _fft_convolve(x: np.ndarray, h: np.ndarray, length: int) -> np.ndarray:
    n = x.size + h.size - 1
    nfft = 1 << (n - 1).bit_length()
    return np.fft.irfft(np.fft.rfft(x, nfft) * np.fft.rfft(h, nfft), nfft)[:length]


def apply_reverb(w: Waveform, rir: Waveform) -> Waveform:
    """Convolve with ``rir``, keep the first len(w) samples, restore the input peak."""
    if w.sample_rate != rir.sample_rate:
        raise ValueError(f"sample-rate mismatch: waveform {w.sample_rate} Hz, RIR {rir.sample_rate} Hz")
    wet = _fft_convolve(w.samples, rir.samples, len(w))
    peak_in = np.max(np.abs(w.samples))
    peak_out = np.max(np.abs(wet))
    if peak_out > 0:
        wet = wet * (peak_in / peak_out)
    else:
        wet = np.zeros_like(wet)
    return Waveform(wet, w.sample_rate)


# ---------------------------------------------------------------------------
# Time-frequency masking
# ---------------------------------------------------------------------------

def tf_mask(spec: MelSpectrogram, mask: MaskSpec) -> MelSpectrogram:
    values = spec.values
    mask.validate(*values.shape)
    hit = mask.area(*values.shape)
    out = values.copy()
    out[hit] = values.min()
    return MelSpectrogram(out, spec.sample_rate)


def sample_mask(rng: np.random.Generator, n_mels: int, n_frames: int,
                params: MaskParams = MaskParams()) -> MaskSpec:
    if n_mels < 1 or n_frames < 1:
        raise ValueError("cannot mask an empty grid")

    def draw(max_count, size, ratio):
        max_width = max(1, int(size * ratio))
        masks = []
        for _ in range(int(rng.integers(0, max_count + 1))):
            width = int(rng.integers(1, max_width + 1))
            start = int(rng.integers(0, size - width + 1))
            masks.append((start, width))
        return tuple(masks)

    return MaskSpec(
        freq_masks=draw(params.max_freq_masks, n_mels, params.freq_width_ratio),
        time_masks=draw(params.max_time_masks, n_frames, params.time_width_ratio),
    )


# ---------------------------------------------------------------------------
# Policy
# ---------------------------------------------------------------------------

def sample_transform(policy: str, rng: np.random.Generator, bank_size: int = 500):
    if policy == "combination":
        policy = "pitch" if rng.random() < 0.5 else "reverb"
    if policy == "pitch":
        return PitchShift(SEMITONES[int(rng.integers(len(SEMITONES)))])
    if policy == "reverb":
        return Reverb(int(rng.integers(bank_size)))
    if policy == "tfmask":
        return TFMask(int(rng.integers(2**63 - 1)))
    raise ValueError(f"unknown transform policy {policy!r}; expected one of {POLICIES}")


def sample_transform_pair(policy: str, rng: np.random.Generator, bank_size: int = 500):
    """Two independently drawn transforms allowed by ``policy``."""
    if policy not in POLICIES:
        raise ValueError(f"unknown transform policy {policy!r}; expected one of {POLICIES}")
    return sample_transform(policy, rng, bank_size), sample_transform(policy, rng, bank_size)


class Augmenter:
    """Applies transform descriptors and produces network features.

    Holds the RIR bank, the feature configuration and the masking parameters
    so that a transform descriptor alone determines its effect.
    """

    def __init__(self, features: FeatureConfig, bank: RirBank | None = None,
                 mask_params: MaskParams = MaskParams()):
        self.features = features
        self.bank = bank if bank is not None else RirBank(sample_rate=features.sample_rate)
        self.mask_params = mask_params

    def apply(self, t, x):
        if isinstance(t, PitchShift):
            if not isinstance(x, Waveform):
                raise TypeError("PitchShift applies to waveforms, got " + type(x).__name__)
            return pitch_shift(x, t.semitones)
        if isinstance(t, Reverb):
            if not isinstance(x, Waveform):
                raise TypeError("Reverb applies to waveforms, got " + type(x).__name__)
            return apply_reverb(x, self.bank[t.rir_index])
        if isinstance(t, TFMask):
            if not isinstance(x, MelSpectrogram):
                raise TypeError("TFMask applies to mel spectrograms; extract features first")
            rng = np.random.default_rng(t.seed)
            return tf_mask(x, sample_mask(rng, x.n_mels, x.n_frames, self.mask_params))
        raise TypeError(f"unknown transform {t!r}")

    def features_of(self, w: Waveform, t=None, base: MelSpectrogram | None = None) -> np.ndarray:
        """Log-mel grid of ``w`` after transform ``t`` (applied in its own domain).

        ``base`` may carry the precomputed features of the untransformed
        waveform, which spectrogram-domain transforms reuse.
        """
        if t is None or t.domain == "spectrogram":
            spec = base if base is not None else log_mel(w, self.features)
            return spec.values if t is None else self.apply(t, spec).values
        return log_mel(self.apply(t, w), self.features).values
