"""Spectrogram view-pair augmentation.

The full chain is Pre-Normalization -> Mixup -> Random Resize Crop ->
Post-Normalization. A single segment is standardized with dataset
statistics, duplicated, and each copy is independently mixed with a past
segment from a FIFO memory bank and then randomly resized/cropped. The
post-normalization step runs at training-batch level over both branches
jointly (see the trainer).

All randomized operations take an explicit numpy Generator and are
deterministic functions of (inputs, generator state). Draw order within
each operation is pinned and must not be reordered.
"""

from __future__ import annotations

import math
from collections import deque
from dataclasses import dataclass, field
from functools import lru_cache
from typing import NamedTuple

import numpy as np

from .dsp import NormStats


@dataclass(frozen=True)
class MixupConfig:
    alpha: float = 0.4  # mixing-ratio upper bound, lambda ~ U(0, alpha)
    bank_capacity: int = 2048

    def __post_init__(self) -> None:
        if not 0.0 <= self.alpha <= 1.0:
            raise ValueError(f"alpha must be in [0, 1], got {self.alpha}")
        if self.bank_capacity < 1:
            raise ValueError("bank_capacity must be >= 1")


@dataclass(frozen=True)
class RrcConfig:
    freq_scale_range: tuple[float, float] = (0.6, 1.5)
    time_scale_range: tuple[float, float] = (0.6, 1.5)
    virtual_time_scale: float = 1.5
    virtual_freq_scale: float = 1.0

    def __post_init__(self) -> None:
        for name in ("freq_scale_range", "time_scale_range"):
            lo, hi = getattr(self, name)
            if not 0 < lo <= hi:
                raise ValueError(f"{name} must satisfy 0 < lo <= hi, got ({lo}, {hi})")
        if self.virtual_time_scale < 1.0 or self.virtual_freq_scale < 1.0:
            raise ValueError("virtual crop boundary cannot be smaller than the input")


@dataclass(frozen=True)
class GaussianConfig:
    sigma: float = 0.4  # std of the noise counterpart
    alpha: float = 0.4  # lambda upper bound for the noise mix


class ViewPair(NamedTuple):
    v: np.ndarray
    v_prime: np.ndarray


class MemoryBank:
    """FIFO queue of past segments supplying mixup counterparts.

    Eviction is strictly oldest-first. All stored segments must share one
    shape; mismatches are rejected.
    """

    def __init__(self, capacity: int = 2048):
        if capacity < 1:
            raise ValueError("capacity must be >= 1")
        self.capacity = capacity
        self._queue: deque[np.ndarray] = deque()

    def __len__(self) -> int:
        return len(self._queue)

    @property
    def contents(self) -> tuple[np.ndarray, ...]:
        """Stored segments, oldest first."""
        return tuple(self._queue)

    def push_then_sample(self, x: np.ndarray, rng: np.random.Generator) -> np.ndarray:
        """Enqueue x and return a uniform sample of the *previous* contents.

        Returns x itself when the bank was empty, so a cold bank degrades
        to identity mixing.
        """
        if self._queue and self._queue[0].shape != x.shape:
            raise ValueError(
                f"segment shape {x.shape} does not match bank shape {self._queue[0].shape}"
            )
        prior = self._queue
        counterpart = prior[int(rng.integers(0, len(prior)))] if prior else x
        if len(self._queue) == self.capacity:
            self._queue.popleft()
        self._queue.append(x.copy())
        return counterpart


def pre_normalize(x: np.ndarray, stats: NormStats) -> np.ndarray:
    """Standardize a segment with dataset statistics."""
    out = (np.asarray(x, dtype=np.float64) - stats.mu) / stats.sigma
    return out.astype(np.float32)


def log_mixup_exp(x_i: np.ndarray, x_k: np.ndarray, lam: float) -> np.ndarray:
    """Mix two log-domain segments in the linear-energy domain.

    Cellwise log((1-lam)*exp(x_i) + lam*exp(x_k)), computed in the
    max-shifted form so large log-energies cannot overflow. The lam=0 and
    lam=1 endpoints return exact copies.
    """
    x_i = np.asarray(x_i)
    x_k = np.asarray(x_k)
    if x_i.shape != x_k.shape:
        raise ValueError(f"shape mismatch: {x_i.shape} vs {x_k.shape}")
    if not 0.0 <= lam <= 1.0:
        raise ValueError(f"lam must be in [0, 1], got {lam}")
    if lam == 0.0:
        return x_i.astype(np.float32, copy=True)
    if lam == 1.0:
        return x_k.astype(np.float32, copy=True)
    a = x_i.astype(np.float64)
    b = x_k.astype(np.float64)
    m = np.maximum(a, b)
    out = m + np.log((1.0 - lam) * np.exp(a - m) + lam * np.exp(b - m))
    return out.astype(np.float32)


def mixup_block(
    x: np.ndarray,
    bank: MemoryBank,
    cfg: MixupConfig,
    rng: np.random.Generator,
) -> np.ndarray:
    """Mix a normalized segment with a random past segment from the bank.

    Draw order: lambda ~ U(0, alpha) first, then the bank counterpart.
    """
    lam = float(rng.uniform(0.0, cfg.alpha))
    counterpart = bank.push_then_sample(x, rng)
    return log_mixup_exp(x, counterpart, lam)


def gaussian_block(
    x: np.ndarray,
    cfg: GaussianConfig,
    rng: np.random.Generator,
) -> np.ndarray:
    """Ablation block: mix with an i.i.d. Gaussian noise counterpart.

    Draw order: lambda ~ U(0, alpha), then the noise matrix.
    """
    lam = float(rng.uniform(0.0, cfg.alpha))
    noise = rng.normal(0.0, cfg.sigma, size=x.shape).astype(np.float32)
    return log_mixup_exp(x, noise, lam)


class CropGeometry(NamedTuple):
    f_size: int
    t_size: int
    f_start: int  # within the virtual boundary
    t_start: int
    boundary_f: int
    boundary_t: int
    input_f0: int  # input placement within the boundary
    input_t0: int


def sample_crop_geometry(
    f: int, t: int, cfg: RrcConfig, rng: np.random.Generator
) -> CropGeometry:
    """Sample the crop rectangle for random_resize_crop.

    Crop size: F_C = floor(min(U(h1,h2), 1.0) * F), T_C = floor(U(w1,w2) * T),
    both clamped to >= 1. The input sits centered in a virtual boundary that
    is virtual_time_scale times longer; offsets are uniform over placements
    that keep the crop inside the boundary, with the frequency extent
    further restricted to the input's rows (the min() clamp guarantees it
    fits). Draw order: freq scale, time scale, freq offset, time offset.
    """
    f_scale = min(float(rng.uniform(*cfg.freq_scale_range)), 1.0)
    t_scale = float(rng.uniform(*cfg.time_scale_range))
    f_size = max(1, math.floor(f_scale * f))
    boundary_f = math.floor(cfg.virtual_freq_scale * f)
    boundary_t = math.floor(cfg.virtual_time_scale * t)
    t_size = min(max(1, math.floor(t_scale * t)), boundary_t)
    input_f0 = (boundary_f - f) // 2
    input_t0 = (boundary_t - t) // 2
    f_start = int(rng.integers(input_f0, input_f0 + f - f_size + 1))
    t_start = int(rng.integers(0, boundary_t - t_size + 1))
    return CropGeometry(
        f_size, t_size, f_start, t_start, boundary_f, boundary_t, input_f0, input_t0
    )


def _cubic_weight(t: float) -> float:
    # Catmull-Rom kernel (cubic convolution, a = -0.5).
    at = abs(t)
    if at <= 1.0:
        return (1.5 * at - 2.5) * at * at + 1.0
    if at < 2.0:
        return ((-0.5 * at + 2.5) * at - 4.0) * at + 2.0
    return 0.0


@lru_cache(maxsize=1024)
def _resize_matrix(n_src: int, n_dst: int) -> np.ndarray:
    """Row-stochastic-ish (n_dst, n_src) bicubic interpolation matrix.

    Half-pixel center mapping; out-of-range taps replicate the edge sample.
    At scale 1 the rows are exact one-hot, so resizing is bit-exact.
    Cached arrays are read-only.
    """
    w = np.zeros((n_dst, n_src))
    scale = n_src / n_dst
    for i in range(n_dst):
        src = (i + 0.5) * scale - 0.5
        base = math.floor(src)
        frac = src - base
        for k in range(4):
            j = base - 1 + k
            w[i, min(max(j, 0), n_src - 1)] += _cubic_weight(frac - (k - 1))
    w.setflags(write=False)
    return w


def resize_bicubic(a: np.ndarray, out_shape: tuple[int, int]) -> np.ndarray:
    """Separable bicubic (Catmull-Rom) resize without value clamping."""
    rows = _resize_matrix(a.shape[0], out_shape[0])
    cols = _resize_matrix(a.shape[1], out_shape[1])
    out = rows @ a.astype(np.float64) @ cols.T
    return out.astype(np.float32)


def random_resize_crop(
    x: np.ndarray, cfg: RrcConfig, rng: np.random.Generator
) -> np.ndarray:
    """Random crop from the virtual boundary, resized back to input size.

    Cells of the boundary outside the input are zero (the dataset mean
    after pre-normalization). Interpolation may overshoot the crop's value
    range; no clamping is applied.
    """
    f, t = x.shape
    if f < 2 or t < 2:
        raise ValueError(f"input must be at least 2x2, got {x.shape}")
    g = sample_crop_geometry(f, t, cfg, rng)
    canvas = np.zeros((g.boundary_f, g.boundary_t), dtype=np.float32)
    canvas[g.input_f0 : g.input_f0 + f, g.input_t0 : g.input_t0 + t] = x
    crop = canvas[g.f_start : g.f_start + g.f_size, g.t_start : g.t_start + g.t_size]
    return resize_bicubic(crop, (f, t))


def post_normalize(batch: np.ndarray | list[np.ndarray]) -> np.ndarray:
    """Standardize a whole batch with its own scalar mean/std.

    One (mean, std) pair is computed over every cell of every segment, so
    the returned stack has mean 0 and std 1 to within float32 rounding.
    """
    stacked = np.stack([np.asarray(b) for b in batch]) if isinstance(batch, list) else np.asarray(batch)
    cells = stacked.astype(np.float64)
    mean = cells.mean()
    std = cells.std()
    if std < 1e-8:
        raise ValueError(f"degenerate batch: std {std} below 1e-8")
    return ((cells - mean) / std).astype(np.float32)


def make_views(
    x: np.ndarray,
    stats: NormStats,
    bank: MemoryBank,
    mix_cfg: MixupConfig,
    rrc_cfg: RrcConfig,
    rng: np.random.Generator,
) -> ViewPair:
    """Full default chain: pre-normalize, then mixup + RRC per branch.

    Both branches draw independent mixing ratios and counterparts from the
    same augmentation distribution. Post-normalization is not applied here;
    it runs per training batch across both branches jointly.
    """
    normed = pre_normalize(x, stats)
    v = random_resize_crop(mixup_block(normed, bank, mix_cfg, rng), rrc_cfg, rng)
    v_prime = random_resize_crop(mixup_block(normed, bank, mix_cfg, rng), rrc_cfg, rng)
    return ViewPair(v, v_prime)


@dataclass(frozen=True)
class AugmentationConfig:
    """Block selection for the augmentation chain (ablations toggle these)."""

    use_pre_norm: bool = True
    use_mixup: bool = True
    use_gaussian: bool = False
    use_rrc: bool = True
    use_post_norm: bool = True
    mixup: MixupConfig = field(default_factory=MixupConfig)
    rrc: RrcConfig = field(default_factory=RrcConfig)
    gaussian: GaussianConfig = field(default_factory=GaussianConfig)


class AugmentationPipeline:
    """Stateful view-pair builder: owns the memory bank between steps.

    Blocks run in the fixed order pre-norm -> mixup -> gaussian -> rrc.
    Post-normalization is batch-level and therefore applied by the caller
    (see use_post_norm on the config).
    """

    def __init__(self, cfg: AugmentationConfig, stats: NormStats | None):
        if cfg.use_pre_norm and stats is None:
            raise ValueError("pre-normalization requires dataset stats")
        self.cfg = cfg
        self.stats = stats
        self.bank = MemoryBank(cfg.mixup.bank_capacity)

    def augment_one(self, x: np.ndarray, rng: np.random.Generator) -> np.ndarray:
        """One branch of the chain, applied to an already normalized segment."""
        if self.cfg.use_mixup:
            x = mixup_block(x, self.bank, self.cfg.mixup, rng)
        if self.cfg.use_gaussian:
            x = gaussian_block(x, self.cfg.gaussian, rng)
        if self.cfg.use_rrc:
            x = random_resize_crop(x, self.cfg.rrc, rng)
        return x

    def make_views(self, x: np.ndarray, rng: np.random.Generator) -> ViewPair:
        if self.cfg.use_pre_norm:
            assert self.stats is not None
            x = pre_normalize(x, self.stats)
        else:
            x = np.asarray(x, dtype=np.float32)
        return ViewPair(self.augment_one(x, rng), self.augment_one(x, rng))
