"""Log-mel spectrogram frontend.

Converts 16 kHz PCM audio into 64-bin log-mel spectrograms with a 64 ms
window and 10 ms hop, and provides the segment cropping/padding and
dataset statistics used by the rest of the pipeline.

Conventions pinned here (tests depend on them):
  - STFT: periodic Hann window, no centering, power spectrum.
  - Mel scale: HTK formula m = 2595*log10(1 + f/700), triangular filters
    at 66 equally mel-spaced points over [f_min, f_max], no normalization.
  - Log: natural log of (mel_energy + log_floor).
  - Short segments are padded with log(log_floor), the value silence maps
    to, split as evenly as possible between head and tail.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable

import numpy as np
from scipy.io import wavfile

REQUIRED_SAMPLE_RATE = 16000
DEFAULT_LOG_FLOOR = 1e-7

#: Log-domain value of digital silence under the default config.
LOG_SILENCE = math.log(DEFAULT_LOG_FLOOR)


class AudioIOError(RuntimeError):
    """Raised for unreadable or unsupported audio files."""


@dataclass(frozen=True)
class FrontendConfig:
    """Feature extraction parameters (defaults are the pipeline standard)."""

    sample_rate: int = REQUIRED_SAMPLE_RATE
    window_ms: int = 64
    hop_ms: int = 10
    n_mels: int = 64
    f_min: float = 60.0
    f_max: float = 7800.0
    log_floor: float = DEFAULT_LOG_FLOOR

    def __post_init__(self) -> None:
        if not 0 < self.f_min < self.f_max:
            raise ValueError(f"need 0 < f_min < f_max, got [{self.f_min}, {self.f_max}]")
        if self.f_max > self.sample_rate / 2:
            raise ValueError(f"f_max {self.f_max} above Nyquist {self.sample_rate / 2}")
        if self.window_ms <= self.hop_ms:
            raise ValueError("window must be longer than hop")
        if self.log_floor <= 0:
            raise ValueError("log_floor must be positive")

    @property
    def window_samples(self) -> int:
        return self.sample_rate * self.window_ms // 1000

    @property
    def hop_samples(self) -> int:
        return self.sample_rate * self.hop_ms // 1000

    @property
    def silence_value(self) -> float:
        """Log-mel value of an all-zero signal."""
        return math.log(self.log_floor)


@dataclass(frozen=True)
class NormStats:
    """Scalar standardization statistics of a training corpus."""

    mu: float
    sigma: float

    def __post_init__(self) -> None:
        if not self.sigma > 0:
            raise ValueError(f"sigma must be positive, got {self.sigma}")


@dataclass(frozen=True)
class Waveform:
    samples: np.ndarray  # float32, 1-D, in [-1, 1]
    sample_rate: int


def load_wav(path: str | Path) -> Waveform:
    """Load a PCM WAV file as a mono float32 waveform.

    Accepts 16-bit signed integer or 32-bit float payloads; multi-channel
    files are averaged down to mono. Files whose sample rate is not 16 kHz
    are rejected (resampling is out of scope).
    """
    path = Path(path)
    try:
        rate, data = wavfile.read(path)
    except FileNotFoundError:
        raise AudioIOError(f"no such file: {path}") from None
    except Exception as exc:
        raise AudioIOError(f"unreadable WAV file {path}: {exc}") from exc

    if rate != REQUIRED_SAMPLE_RATE:
        raise AudioIOError(
            f"unsupported sample rate {rate} in {path} (expected {REQUIRED_SAMPLE_RATE})"
        )

    if data.dtype == np.int16:
        samples = data.astype(np.float64) / 32768.0
    elif data.dtype == np.float32:
        samples = data.astype(np.float64)
    else:
        raise AudioIOError(
            f"unsupported sample encoding {data.dtype} in {path} "
            "(expected 16-bit PCM or 32-bit float)"
        )

    if samples.ndim == 2:
        samples = samples.mean(axis=1)
    elif samples.ndim != 1:
        raise AudioIOError(f"unsupported channel layout {data.shape} in {path}")

    if not np.all(np.isfinite(samples)):
        raise AudioIOError(f"non-finite samples in {path}")
    return Waveform(samples.astype(np.float32), int(rate))


def hz_to_mel(f: float) -> float:
    return 2595.0 * math.log10(1.0 + f / 700.0)


def mel_to_hz(m: float) -> float:
    return 700.0 * (10.0 ** (m / 2595.0) - 1.0)


def mel_filter_centers(cfg: FrontendConfig) -> np.ndarray:
    """Center frequencies (Hz) of the triangular mel filters."""
    pts = np.linspace(hz_to_mel(cfg.f_min), hz_to_mel(cfg.f_max), cfg.n_mels + 2)
    return np.array([mel_to_hz(m) for m in pts[1:-1]])


def mel_filterbank(cfg: FrontendConfig) -> np.ndarray:
    """Triangular mel filterbank, shape (n_mels, n_fft // 2 + 1), float64.

    Filters peak at 1 and are not area-normalized.
    """
    n_fft = cfg.window_samples
    fft_freqs = np.arange(n_fft // 2 + 1) * cfg.sample_rate / n_fft
    pts = np.linspace(hz_to_mel(cfg.f_min), hz_to_mel(cfg.f_max), cfg.n_mels + 2)
    hz = np.array([mel_to_hz(m) for m in pts])

    fb = np.zeros((cfg.n_mels, len(fft_freqs)))
    for m in range(cfg.n_mels):
        lo, ctr, hi = hz[m], hz[m + 1], hz[m + 2]
        rising = (fft_freqs - lo) / (ctr - lo)
        falling = (hi - fft_freqs) / (hi - ctr)
        fb[m] = np.clip(np.minimum(rising, falling), 0.0, None)
    return fb


def frame_count(n_samples: int, cfg: FrontendConfig | None = None) -> int:
    """Number of STFT frames for a waveform of n_samples (no centering)."""
    cfg = cfg or FrontendConfig()
    if n_samples < cfg.window_samples:
        raise ValueError(
            f"waveform too short: {n_samples} samples < window {cfg.window_samples}"
        )
    return 1 + (n_samples - cfg.window_samples) // cfg.hop_samples


def compute_logmel(w: Waveform, cfg: FrontendConfig | None = None) -> np.ndarray:
    """Log-mel spectrogram of a waveform, shape (n_mels, T), float32.

    T = 1 + floor((len - window) / hop). Deterministic: the same waveform
    always yields bit-identical output.
    """
    cfg = cfg or FrontendConfig()
    if w.sample_rate != cfg.sample_rate:
        raise ValueError(f"waveform rate {w.sample_rate} != config rate {cfg.sample_rate}")
    x = np.asarray(w.samples, dtype=np.float64)
    n_fft = cfg.window_samples
    t = frame_count(len(x), cfg)

    frames = np.lib.stride_tricks.sliding_window_view(x, n_fft)[:: cfg.hop_samples][:t]
    n = np.arange(n_fft)
    window = 0.5 - 0.5 * np.cos(2.0 * np.pi * n / n_fft)  # periodic Hann
    spectrum = np.fft.rfft(frames * window, axis=1)
    power = spectrum.real**2 + spectrum.imag**2

    mel = power @ mel_filterbank(cfg).T  # (T, n_mels)
    return np.log(mel + cfg.log_floor).T.astype(np.float32)


def crop_or_pad(
    s: np.ndarray,
    t_target: int,
    rng: np.random.Generator,
    pad_value: float = LOG_SILENCE,
) -> np.ndarray:
    """Fit a spectrogram to t_target frames.

    Longer inputs lose a uniformly random contiguous window; shorter ones
    get pad_value frames, split as evenly as possible between head and
    tail (tail gets the odd frame). Retained cells are copied exactly.
    """
    if t_target < 1:
        raise ValueError(f"t_target must be >= 1, got {t_target}")
    t = s.shape[1]
    if t == t_target:
        return s.copy()
    if t > t_target:
        start = int(rng.integers(0, t - t_target + 1))
        return s[:, start : start + t_target].copy()
    deficit = t_target - t
    head = deficit // 2
    return np.pad(
        s, ((0, 0), (head, deficit - head)), constant_values=np.float32(pad_value)
    )


def compute_dataset_stats(segments: Iterable[np.ndarray]) -> NormStats:
    """Scalar mean and population std over all cells of all segments.

    Single streaming pass with float64 sum / sum-of-squares accumulators.
    Raises on an empty dataset or a (near-)constant one.
    """
    n = 0
    acc = 0.0
    acc_sq = 0.0
    for seg in segments:
        cells = np.asarray(seg, dtype=np.float64)
        n += cells.size
        acc += float(cells.sum())
        acc_sq += float((cells * cells).sum())
    if n == 0:
        raise ValueError("empty dataset")
    mu = acc / n
    var = max(acc_sq / n - mu * mu, 0.0)
    sigma = math.sqrt(var)
    if sigma < 1e-8:
        raise ValueError(f"degenerate stats: sigma {sigma} below 1e-8")
    return NormStats(mu=mu, sigma=sigma)


def read_manifest(path: str | Path) -> list[tuple[Path, str]]:
    """Read a `path,label` CSV manifest.

    Paths are resolved relative to the manifest's directory. Returns
    (absolute path, label string) pairs in file order.
    """
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"no such manifest: {path}")
    items: list[tuple[Path, str]] = []
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or [h.strip() for h in header[:2]] != ["path", "label"]:
            raise ValueError(f"manifest {path} must start with a 'path,label' header")
        for row in reader:
            if not row:
                continue
            items.append((path.parent / row[0], row[1]))
    return items
