"""Waveform/spectrogram conversion, masking, resampling, and WAV I/O.

Time-frequency layout convention used across the package: matrices are
(T, F) with T analysis frames and F = frame_len/2 + 1 frequency bins, and
TF-indexed flat vectors use row-major, time-major order, flat index
i = t*F + f. ``flatten_tf``/``unflatten_tf`` are the canonical converters.
"""

from __future__ import annotations

from dataclasses import dataclass
from fractions import Fraction

import numpy as np
from scipy.io import wavfile
from scipy.signal import resample_poly
from scipy.signal.windows import hann

from .errors import DimensionError, InputTooShortError, InvalidInputError

# Overlap-add normalization floor; bins where the squared-window sum is
# below this (signal edges) are left unnormalized rather than amplified.
_WSS_FLOOR = 1e-10

_MASK_SUM_TOL = 1e-6


@dataclass
class Waveform:
    """Mono audio signal.

    Attributes:
        samples: 1-D float array.
        sample_rate: sampling rate in Hz, > 0.
    """

    samples: np.ndarray
    sample_rate: int

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=np.float64)
        if self.samples.ndim != 1:
            raise InvalidInputError(
                f"waveform must be mono 1-D, got shape {self.samples.shape}"
            )
        if self.sample_rate <= 0:
            raise InvalidInputError(f"sample_rate must be > 0, got {self.sample_rate}")
        if not np.all(np.isfinite(self.samples)):
            raise InvalidInputError("waveform contains non-finite samples")

    @property
    def duration(self) -> float:
        return len(self.samples) / self.sample_rate


@dataclass
class Spectrogram:
    """Magnitude/phase time-frequency representation.

    Attributes:
        magnitude: (T, F) nonnegative array.
        phase: (T, F) array of radians.
        frame_len: analysis frame length in samples.
        hop: frame advance in samples.
        sample_rate: source sampling rate in Hz.
    """

    magnitude: np.ndarray
    phase: np.ndarray
    frame_len: int
    hop: int
    sample_rate: int

    def __post_init__(self):
        self.magnitude = np.asarray(self.magnitude, dtype=np.float64)
        self.phase = np.asarray(self.phase, dtype=np.float64)
        if self.magnitude.ndim != 2 or self.magnitude.shape != self.phase.shape:
            raise DimensionError(
                f"magnitude {self.magnitude.shape} and phase {self.phase.shape} "
                "must be matching 2-D arrays"
            )
        if self.magnitude.shape[1] != self.frame_len // 2 + 1:
            raise DimensionError(
                f"expected F = frame_len/2 + 1 = {self.frame_len // 2 + 1} bins, "
                f"got {self.magnitude.shape[1]}"
            )
        if np.any(self.magnitude < 0):
            raise InvalidInputError("magnitude must be nonnegative")

    @property
    def shape(self):
        return self.magnitude.shape

    @property
    def tf_count(self) -> int:
        return self.magnitude.shape[0] * self.magnitude.shape[1]


@dataclass
class MaskSet:
    """k time-frequency masks in [0, 1] that sum to one per bin."""

    masks: list

    def __post_init__(self):
        self.masks = [np.asarray(m, dtype=np.float64) for m in self.masks]
        if not self.masks:
            raise InvalidInputError("mask set is empty")
        shape = self.masks[0].shape
        for m in self.masks:
            if m.ndim != 2 or m.shape != shape:
                raise DimensionError("all masks must share one 2-D shape")
            if np.any(m < -1e-9) or np.any(m > 1.0 + 1e-9):
                raise InvalidInputError("mask values must lie in [0, 1]")
        total = np.sum(self.masks, axis=0)
        if np.max(np.abs(total - 1.0)) > _MASK_SUM_TOL:
            raise InvalidInputError("masks must sum to one per bin")

    def __len__(self) -> int:
        return len(self.masks)


def flatten_tf(mat: np.ndarray) -> np.ndarray:
    """Flatten a (T, F) matrix to length TF with flat index i = t*F + f."""
    if mat.ndim != 2:
        raise DimensionError(f"expected (T, F) matrix, got shape {mat.shape}")
    return mat.reshape(-1)


def unflatten_tf(vec: np.ndarray, t: int, f: int) -> np.ndarray:
    """Inverse of flatten_tf for known frame/bin counts."""
    vec = np.asarray(vec)
    if vec.size != t * f:
        raise DimensionError(f"cannot reshape {vec.size} values to ({t}, {f})")
    return vec.reshape(t, f)


def hann_window(frame_len: int) -> np.ndarray:
    """Periodic Hann window of the given even length."""
    return hann(frame_len, sym=False)


def frame_params(sample_rate: int, frame_ms: float, overlap: float):
    """Frame length and hop in samples for a frame duration and overlap fraction."""
    frame_len = int(round(frame_ms * sample_rate / 1000.0))
    if frame_len < 2 or frame_len % 2 != 0:
        raise InvalidInputError(
            f"frame length must be even and >= 2 samples, got {frame_len}"
        )
    if not 0.0 <= overlap < 1.0:
        raise InvalidInputError(f"overlap must be in [0, 1), got {overlap}")
    hop = int(round(frame_len * (1.0 - overlap)))
    if hop < 1:
        raise InvalidInputError("hop must be at least one sample")
    return frame_len, hop


def stft(w: Waveform, frame_ms: float = 64.0, overlap: float = 0.75) -> Spectrogram:
    """Short-time Fourier transform with a periodic Hann analysis window.

    Args:
        w: input waveform, already at the target sample rate.
        frame_ms: frame duration in milliseconds.
        overlap: fraction of frame overlap; hop = frame_len * (1 - overlap).

    Returns:
        Spectrogram with T = 1 + (n - frame_len) // hop frames and
        F = frame_len/2 + 1 bins. No padding is applied; trailing samples
        that do not fill a frame are dropped.
    """
    frame_len, hop = frame_params(w.sample_rate, frame_ms, overlap)
    n = len(w.samples)
    if n < frame_len:
        raise InputTooShortError(
            f"waveform has {n} samples, need at least {frame_len}"
        )
    window = hann_window(frame_len)
    num_frames = 1 + (n - frame_len) // hop
    spec = np.empty((num_frames, frame_len // 2 + 1), dtype=np.complex128)
    for t in range(num_frames):
        seg = w.samples[t * hop : t * hop + frame_len]
        spec[t] = np.fft.rfft(seg * window)
    return Spectrogram(
        magnitude=np.abs(spec),
        phase=np.angle(spec),
        frame_len=frame_len,
        hop=hop,
        sample_rate=w.sample_rate,
    )


def istft(s: Spectrogram) -> Waveform:
    """Inverse STFT by weighted overlap-add.

    Each frame is inverted, multiplied by the synthesis (Hann) window, and
    overlap-added; the result is normalized by the overlap-added squared
    windows, which are constant mid-signal for Hann at 75% overlap. Edge
    regions where the window sum has not ramped up are left unnormalized,
    so reconstruction is exact only away from the first and last frames.

    Args:
        s: spectrogram with consistent frame_len/hop metadata.

    Returns:
        Waveform of length (T - 1) * hop + frame_len.
    """
    window = hann_window(s.frame_len)
    num_frames = s.magnitude.shape[0]
    out_len = (num_frames - 1) * s.hop + s.frame_len
    out = np.zeros(out_len)
    wss = np.zeros(out_len)
    spec = s.magnitude * np.exp(1j * s.phase)
    for t in range(num_frames):
        frame = np.fft.irfft(spec[t], n=s.frame_len)
        lo = t * s.hop
        out[lo : lo + s.frame_len] += frame * window
        wss[lo : lo + s.frame_len] += window * window
    nz = wss > _WSS_FLOOR
    out[nz] /= wss[nz]
    return Waveform(samples=out, sample_rate=s.sample_rate)


def apply_mask(mix: Spectrogram, m: MaskSet) -> list:
    """Apply each mask to the mixture magnitude, copying the mixture phase."""
    out = []
    for mask in m.masks:
        if mask.shape != mix.magnitude.shape:
            raise DimensionError(
                f"mask shape {mask.shape} does not match mixture {mix.magnitude.shape}"
            )
        out.append(
            Spectrogram(
                magnitude=mix.magnitude * mask,
                phase=mix.phase,
                frame_len=mix.frame_len,
                hop=mix.hop,
                sample_rate=mix.sample_rate,
            )
        )
    return out


def energy_topfrac_indicator(mix: Spectrogram, fraction: float) -> np.ndarray:
    """Boolean vector marking the top-energy fraction of T-F bins.

    Energy is squared magnitude. Exactly ceil(fraction * TF) bins are set;
    ties are broken toward the lower flat index (i = t*F + f).

    Args:
        mix: mixture spectrogram.
        fraction: in (0, 1]; 1 selects every bin.

    Returns:
        Boolean array of length TF.
    """
    if not 0.0 < fraction <= 1.0:
        raise InvalidInputError(f"fraction must be in (0, 1], got {fraction}")
    energy = flatten_tf(mix.magnitude) ** 2
    n_keep = int(np.ceil(fraction * energy.size))
    # Stable sort on -energy keeps lower flat indices first among ties.
    order = np.argsort(-energy, kind="stable")
    keep = np.zeros(energy.size, dtype=bool)
    keep[order[:n_keep]] = True
    return keep


def resample(w: Waveform, target_rate: int) -> Waveform:
    """Band-limited rational-ratio resampling; identity when rates match.

    Args:
        w: input waveform.
        target_rate: desired sampling rate in Hz.

    Returns:
        Waveform at target_rate.
    """
    if target_rate <= 0:
        raise InvalidInputError(f"target_rate must be > 0, got {target_rate}")
    if target_rate == w.sample_rate:
        return Waveform(samples=w.samples, sample_rate=w.sample_rate)
    ratio = Fraction(int(target_rate), int(w.sample_rate))
    out = resample_poly(w.samples, ratio.numerator, ratio.denominator)
    return Waveform(samples=out, sample_rate=target_rate)


def read_wav(path) -> Waveform:
    """Read a mono PCM-16 or float-32 WAV file.

    PCM-16 samples are scaled to [-1, 1) by 1/32768; float data is passed
    through unchanged. Multi-channel files are rejected.
    """
    rate, data = wavfile.read(path)
    if data.ndim != 1:
        raise InvalidInputError(
            f"{path}: expected mono audio, got {data.shape[1]} channels"
        )
    if data.dtype == np.int16:
        samples = data.astype(np.float64) / 32768.0
    elif data.dtype in (np.float32, np.float64):
        samples = data.astype(np.float64)
    else:
        raise InvalidInputError(f"{path}: unsupported WAV sample format {data.dtype}")
    return Waveform(samples=samples, sample_rate=int(rate))


def write_wav(path, w: Waveform, fmt: str = "float32") -> None:
    """Write a mono WAV file as IEEE float-32 or PCM 16-bit.

    Args:
        path: output file path.
        w: waveform to write.
        fmt: "float32" (exact for values representable in float32) or
            "int16" (clipped to [-1, 1] and scaled by 32767).
    """
    if fmt == "float32":
        wavfile.write(path, w.sample_rate, w.samples.astype(np.float32))
    elif fmt == "int16":
        clipped = np.clip(w.samples, -1.0, 1.0)
        wavfile.write(
            path, w.sample_rate, np.round(clipped * 32767.0).astype(np.int16)
        )
    else:
        raise InvalidInputError(f"unsupported WAV format {fmt!r}")
