"""Encoder CNN, projection/prediction heads, losses, and gradient checks.

The encoder is three conv(3x3, 64ch) + BN + ReLU + maxpool(2x2) blocks,
a reshape to (B, T/8, channels * F/8), two linear layers with dropout in
between, and a final max-plus-mean pooling over time. Heads are
linear -> BN -> ReLU -> linear MLPs (hidden 4096, output 256).

Gradient correctness is defined operationally: finite_diff_check compares
autograd gradients against central differences parameter by parameter.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
import torch
from torch import nn


@dataclass(frozen=True)
class EncoderConfig:
    """Encoder hyperparameters. Paper-parity uses embed_dim in {512, 1024,
    2048} with 64 channels and 64 mel bins; toy configs may shrink all of
    them (n_mels must stay divisible by 8 for the three poolings)."""

    embed_dim: int = 2048
    conv_channels: int = 64
    n_mels: int = 64
    dropout: float = 0.3

    def __post_init__(self) -> None:
        if self.embed_dim < 1 or self.conv_channels < 1:
            raise ValueError("embed_dim and conv_channels must be >= 1")
        if self.n_mels % 8 != 0 or self.n_mels < 8:
            raise ValueError(f"n_mels must be a positive multiple of 8, got {self.n_mels}")
        if not 0.0 <= self.dropout < 1.0:
            raise ValueError(f"dropout must be in [0, 1), got {self.dropout}")

    @property
    def feature_dim(self) -> int:
        """Width of the flattened conv features: channels * (n_mels / 8)."""
        return self.conv_channels * (self.n_mels // 8)


def max_mean_pool(x: torch.Tensor) -> torch.Tensor:
    """Elementwise max over time plus elementwise mean over time.

    x: (B, T, D) -> (B, D). Both terms are permutation-invariant along T.
    """
    return x.max(dim=1).values + x.mean(dim=1)


class AudioEncoder(nn.Module):
    """Spectrogram encoder producing a fixed-size embedding per clip."""

    def __init__(self, cfg: EncoderConfig):
        super().__init__()
        self.cfg = cfg
        c = cfg.conv_channels
        self.conv1 = nn.Conv2d(1, c, kernel_size=3, padding=1)
        self.bn1 = nn.BatchNorm2d(c)
        self.conv2 = nn.Conv2d(c, c, kernel_size=3, padding=1)
        self.bn2 = nn.BatchNorm2d(c)
        self.conv3 = nn.Conv2d(c, c, kernel_size=3, padding=1)
        self.bn3 = nn.BatchNorm2d(c)
        self.pool = nn.MaxPool2d(2, stride=2)
        self.relu = nn.ReLU()
        self.fc1 = nn.Linear(cfg.feature_dim, cfg.embed_dim)
        self.dropout = nn.Dropout(cfg.dropout)
        self.fc2 = nn.Linear(cfg.embed_dim, cfg.embed_dim)

    def features(self, x: torch.Tensor) -> torch.Tensor:
        """Per-frame features before temporal pooling: (B, T/8, embed_dim)."""
        if x.dim() != 4 or x.shape[1] != 1:
            raise ValueError(f"expected (B, 1, F, T) input, got {tuple(x.shape)}")
        f, t = x.shape[2], x.shape[3]
        if f != self.cfg.n_mels:
            raise ValueError(f"expected {self.cfg.n_mels} frequency bins, got {f}")
        if t % 8 != 0 or t < 8:
            raise ValueError(f"time frames must be a positive multiple of 8, got {t}")
        if not torch.isfinite(x).all():
            raise ValueError("non-finite values in encoder input")

        x = self.pool(self.relu(self.bn1(self.conv1(x))))
        x = self.pool(self.relu(self.bn2(self.conv2(x))))
        x = self.pool(self.relu(self.bn3(self.conv3(x))))
        # (B, C, F/8, T/8) -> (B, T/8, C * F/8); feature index = c * (F/8) + f
        b, c, f8, t8 = x.shape
        x = x.permute(0, 3, 1, 2).reshape(b, t8, c * f8)
        x = self.relu(self.fc1(x))
        x = self.dropout(x)
        return self.relu(self.fc2(x))

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return max_mean_pool(self.features(x))


class MlpHead(nn.Module):
    """Projection/prediction head: linear -> BN -> ReLU -> linear."""

    def __init__(self, in_dim: int, hidden: int = 4096, out_dim: int = 256):
        super().__init__()
        self.fc1 = nn.Linear(in_dim, hidden)
        self.bn = nn.BatchNorm1d(hidden)
        self.fc2 = nn.Linear(hidden, out_dim)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.fc2(torch.relu(self.bn(self.fc1(x))))


def seeded_init_(module: nn.Module, seed: int) -> nn.Module:
    """Deterministically initialize conv/linear/BN layers in place.

    Kaiming-uniform fan-in for weights, zero biases, BN scale 1 / shift 0.
    Uses a private generator so global RNG state is untouched.
    """
    gen = torch.Generator().manual_seed(seed)
    with torch.no_grad():
        for m in module.modules():
            if isinstance(m, (nn.Conv2d, nn.Linear)):
                fan_in = m.weight.shape[1] * (
                    m.weight.shape[2] * m.weight.shape[3] if m.weight.dim() == 4 else 1
                )
                bound = math.sqrt(6.0 / fan_in)
                m.weight.uniform_(-bound, bound, generator=gen)
                if m.bias is not None:
                    m.bias.zero_()
            elif isinstance(m, (nn.BatchNorm1d, nn.BatchNorm2d)):
                m.weight.fill_(1.0)
                m.bias.zero_()
                m.running_mean.zero_()
                m.running_var.fill_(1.0)
    return module


def init_encoder(cfg: EncoderConfig, seed: int) -> AudioEncoder:
    return seeded_init_(AudioEncoder(cfg), seed)  # type: ignore[return-value]


def count_params(module: nn.Module) -> int:
    """Learnable parameter count (BN running statistics excluded)."""
    return sum(p.numel() for p in module.parameters() if p.requires_grad)


def byol_loss(q: torch.Tensor, z_target: torch.Tensor) -> torch.Tensor:
    """Twin-network regression loss: 2 - 2 * cosine(q, z), batch-averaged.

    The target receives no gradient. Norms are floored at 1e-12 so zero
    vectors stay finite. Range is [0, 4].
    """
    z = z_target.detach()
    qn = q / q.norm(dim=1, keepdim=True).clamp_min(1e-12)
    zn = z / z.norm(dim=1, keepdim=True).clamp_min(1e-12)
    return (2.0 - 2.0 * (qn * zn).sum(dim=1)).mean()


@dataclass
class GradCheckReport:
    max_rel_err: float
    n_checked: int
    tolerance: float
    worst_param: str = ""
    failures: list[tuple[str, int, float]] = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return not self.failures


def finite_diff_check(
    model: nn.Module,
    loss_fn,
    step: float = 1e-3,
    tolerance: float = 1e-2,
    max_per_tensor: int | None = None,
    seed: int = 0,
    denom_floor: float = 1e-3,
) -> GradCheckReport:
    """Compare autograd gradients to central finite differences.

    loss_fn is a zero-argument callable that runs the forward pass on the
    model's current parameters; it must be deterministic across calls. The
    model is put in eval mode for the duration (dropout off, BN on running
    statistics). Every parameter tensor is visited; within a tensor, at
    most max_per_tensor elements are checked (a seeded uniform sample).

    Relative error per element is |fd - grad| / max(|fd|, |grad|,
    denom_floor); elements above tolerance are reported as failures.
    """
    was_training = model.training
    model.eval()
    try:
        loss = loss_fn()
        for p in model.parameters():
            p.grad = None
        loss.backward()
        grads = {
            name: (p.grad.detach().clone() if p.grad is not None else torch.zeros_like(p))
            for name, p in model.named_parameters()
            if p.requires_grad
        }
        rng = np.random.default_rng(seed)
        report = GradCheckReport(max_rel_err=0.0, n_checked=0, tolerance=tolerance)
        with torch.no_grad():
            for name, p in model.named_parameters():
                if not p.requires_grad:
                    continue
                flat = p.data.view(-1)
                n = flat.numel()
                if max_per_tensor is None or n <= max_per_tensor:
                    indices = range(n)
                else:
                    indices = sorted(rng.choice(n, size=max_per_tensor, replace=False).tolist())
                grad_flat = grads[name].view(-1)
                for i in indices:
                    orig = flat[i].item()
                    flat[i] = orig + step
                    loss_plus = float(loss_fn())
                    flat[i] = orig - step
                    loss_minus = float(loss_fn())
                    flat[i] = orig
                    fd = (loss_plus - loss_minus) / (2.0 * step)
                    g = float(grad_flat[i])
                    rel = abs(fd - g) / max(abs(fd), abs(g), denom_floor)
                    report.n_checked += 1
                    if rel > report.max_rel_err:
                        report.max_rel_err = rel
                        report.worst_param = f"{name}[{i}]"
                    if rel > tolerance:
                        report.failures.append((name, int(i), rel))
        return report
    finally:
        model.train(was_training)
