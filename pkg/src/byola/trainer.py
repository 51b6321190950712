"""Twin-network bootstrap training loop.

Each step builds a view pair per segment, post-normalizes the whole batch
across both branches, computes the symmetric twin-network loss, applies
one Adam update to the online weights, then one EMA update of the target
weights (in that order). The target network is never touched by the
optimizer.

Determinism: every epoch derives its own numpy and torch seeds from the
base seed, the memory bank travels inside checkpoints, and Adam moments
are persisted, so a resumed run continues the exact loss curve of an
uninterrupted one.
"""

from __future__ import annotations

import copy
import hashlib
from pathlib import Path
from typing import NamedTuple, Sequence

import numpy as np
import torch
from torch import nn

from .augment import AugmentationPipeline, post_normalize
from .checkpoint import CheckpointError, load_container, load_module_state, save_container
from .config import RunConfig, TrainConfig, run_config_from_dict, run_config_to_dict
from .dsp import (
    FrontendConfig,
    NormStats,
    compute_dataset_stats,
    compute_logmel,
    crop_or_pad,
    load_wav,
    read_manifest,
)
from .networks import AudioEncoder, EncoderConfig, MlpHead, byol_loss, seeded_init_

PROJECTION_HIDDEN = 4096
PROJECTION_DIM = 256


def derive_seed(base: int, *keys) -> int:
    """Stable sub-seed from a base seed and a key path."""
    tag = ":".join([str(base), *map(str, keys)])
    return int.from_bytes(hashlib.sha256(tag.encode()).digest()[:8], "little") >> 1


class ByolLearner:
    """Online encoder/projector/predictor plus EMA target encoder/projector."""

    def __init__(
        self,
        encoder_cfg: EncoderConfig,
        train_cfg: TrainConfig,
        proj_hidden: int = PROJECTION_HIDDEN,
        proj_dim: int = PROJECTION_DIM,
    ):
        self.encoder_cfg = encoder_cfg
        self.train_cfg = train_cfg
        self.proj_hidden = proj_hidden
        self.proj_dim = proj_dim
        self.tau = train_cfg.tau
        self.step_count = 0

        seed = train_cfg.seed
        d = encoder_cfg.embed_dim
        self.online = nn.ModuleDict(
            {
                "encoder": seeded_init_(AudioEncoder(encoder_cfg), derive_seed(seed, "enc")),
                "projector": seeded_init_(
                    MlpHead(d, proj_hidden, proj_dim), derive_seed(seed, "proj")
                ),
                "predictor": seeded_init_(
                    MlpHead(proj_dim, proj_hidden, proj_dim), derive_seed(seed, "pred")
                ),
            }
        )
        self.target = nn.ModuleDict(
            {
                "encoder": copy.deepcopy(self.online["encoder"]),
                "projector": copy.deepcopy(self.online["projector"]),
            }
        )
        for p in self.target.parameters():
            p.requires_grad_(False)
        # Target BN runs on batch statistics during training (mirroring the
        # online branch); momentum 0 keeps its running stats frozen so only
        # the EMA update writes them.
        for m in self.target.modules():
            if isinstance(m, (nn.BatchNorm1d, nn.BatchNorm2d)):
                m.momentum = 0.0

        self.optimizer = torch.optim.Adam(
            self.online.parameters(),
            lr=train_cfg.lr,
            betas=(train_cfg.adam_beta1, train_cfg.adam_beta2),
            eps=train_cfg.adam_eps,
        )

    def train_mode(self) -> None:
        self.online.train()
        self.target.train()

    def eval_mode(self) -> None:
        self.online.eval()
        self.target.eval()


def symmetric_loss(
    learner: ByolLearner, v: torch.Tensor, v_prime: torch.Tensor
) -> tuple[torch.Tensor, torch.Tensor]:
    """Both-direction twin loss; returns (loss, online embeddings of v).

    Each view passes through the online encoder/projector/predictor and is
    regressed onto the target projection of the other view. The target
    branch contributes no gradients. Range is [0, 8].
    """
    enc = learner.online["encoder"]
    proj = learner.online["projector"]
    pred = learner.online["predictor"]
    y1 = enc(v)
    q1 = pred(proj(y1))
    q2 = pred(proj(enc(v_prime)))
    with torch.no_grad():
        t1 = learner.target["projector"](learner.target["encoder"](v_prime))
        t2 = learner.target["projector"](learner.target["encoder"](v))
    return byol_loss(q1, t1) + byol_loss(q2, t2), y1


def ema_update(learner: ByolLearner) -> None:
    """Move every target parameter toward its online twin: t <- tau*t + (1-tau)*o.

    Float buffers (BN running statistics) follow the same rule; integer
    buffers are left alone.
    """
    tau = learner.tau
    with torch.no_grad():
        for key in ("encoder", "projector"):
            tgt, onl = learner.target[key], learner.online[key]
            for pt, po in zip(tgt.parameters(), onl.parameters()):
                pt.mul_(tau).add_(po.detach(), alpha=1.0 - tau)
            for bt, bo in zip(tgt.buffers(), onl.buffers()):
                if bt.dtype.is_floating_point:
                    bt.mul_(tau).add_(bo, alpha=1.0 - tau)


class CollapseMetrics(NamedTuple):
    mean_std: float
    effective_rank: float


def collapse_metrics(embeddings: np.ndarray) -> CollapseMetrics:
    """Representation-collapse diagnostics for a (B, d) embedding batch.

    mean_std averages the per-dimension std across the batch; effective
    rank is exp(entropy) of the normalized singular values of the centered
    matrix (1.0 for rank-1 or constant embeddings).
    """
    emb = np.asarray(embeddings, dtype=np.float64)
    if emb.ndim != 2 or emb.shape[0] < 2:
        raise ValueError(f"need a (B>=2, d) matrix, got {emb.shape}")
    mean_std = float(emb.std(axis=0).mean())
    centered = emb - emb.mean(axis=0)
    sv = np.linalg.svd(centered, compute_uv=False)
    total = float(sv.sum())
    if total <= 1e-12:
        return CollapseMetrics(mean_std, 1.0)
    p = sv / total
    p = p[p > 0]
    return CollapseMetrics(mean_std, float(np.exp(-(p * np.log(p)).sum())))


class StepMetrics(NamedTuple):
    loss: float
    mean_std: float
    effective_rank: float


def views_to_tensors(
    pairs: Sequence, use_post_norm: bool
) -> tuple[torch.Tensor, torch.Tensor]:
    """Stack view pairs into (B,1,F,T) tensors, post-normalizing jointly."""
    views = np.stack([p.v for p in pairs] + [p.v_prime for p in pairs])
    if use_post_norm:
        views = post_normalize(views)
    t = torch.from_numpy(views).unsqueeze(1)
    b = len(pairs)
    return t[:b], t[b:]


def train_step(
    learner: ByolLearner,
    pipeline: AugmentationPipeline,
    raw_batch: Sequence[np.ndarray],
    rng: np.random.Generator,
) -> StepMetrics:
    """One optimizer update plus one EMA update on a batch of raw segments."""
    pairs = [pipeline.make_views(x, rng) for x in raw_batch]
    v, v_prime = views_to_tensors(pairs, pipeline.cfg.use_post_norm)
    learner.train_mode()
    loss, y1 = symmetric_loss(learner, v, v_prime)
    if not torch.isfinite(loss):
        raise RuntimeError(
            f"non-finite loss {float(loss)} at step {learner.step_count}; aborting"
        )
    learner.optimizer.zero_grad(set_to_none=True)
    loss.backward()
    learner.optimizer.step()
    ema_update(learner)
    learner.step_count += 1
    ms, er = collapse_metrics(y1.detach().numpy())
    return StepMetrics(float(loss.detach()), ms, er)


class JournalRow(NamedTuple):
    epoch: int
    step: int
    loss: float
    mean_std: float
    effective_rank: float


def load_logmels(
    manifest_path: str | Path, cfg: FrontendConfig | None = None
) -> list[np.ndarray]:
    """Decode every manifest clip to a log-mel spectrogram, in file order."""
    cfg = cfg or FrontendConfig()
    return [compute_logmel(load_wav(p), cfg) for p, _ in read_manifest(manifest_path)]


def save_checkpoint(
    path: str | Path,
    learner: ByolLearner,
    stats: NormStats,
    cfg: RunConfig,
    epochs_completed: int,
    bank=None,
    method: str = "byol",
    head_tensors: dict[str, np.ndarray] | None = None,
) -> None:
    """Persist a full training state: weights, Adam moments, memory bank."""
    tensors: dict[str, np.ndarray] = {}
    for prefix, module in (("online.", learner.online), ("target.", learner.target)):
        for key, value in module.state_dict().items():
            tensors[prefix + key] = value.detach().cpu().numpy().astype(np.float32)
    optim_steps: dict[str, int] = {}
    for name, param in learner.online.named_parameters():
        state = learner.optimizer.state.get(param)
        if state:
            tensors[f"optim.{name}.exp_avg"] = state["exp_avg"].numpy().astype(np.float32)
            tensors[f"optim.{name}.exp_avg_sq"] = (
                state["exp_avg_sq"].numpy().astype(np.float32)
            )
            step = state["step"]
            optim_steps[name] = int(step.item() if torch.is_tensor(step) else step)
    if bank is not None and len(bank) > 0:
        tensors["bank.segments"] = np.stack(bank.contents)
    if head_tensors:
        tensors.update(head_tensors)
    extra = {
        "step_count": learner.step_count,
        "epochs_completed": epochs_completed,
        "optim_steps": optim_steps,
        "proj_hidden": learner.proj_hidden,
        "proj_dim": learner.proj_dim,
    }
    save_container(
        path,
        tensors,
        norm_stats=stats,
        method=method,
        config=run_config_to_dict(cfg),
        extra=extra,
    )


def restore_learner(path: str | Path, strict: bool = True):
    """Rebuild a ByolLearner (weights, Adam state, step count) from disk.

    Returns (learner, stats, run config, extra dict, bank array or None).
    """
    c = load_container(path, strict=strict)
    if c.config is None or c.norm_stats is None:
        raise CheckpointError(f"{path} lacks config or normalization stats")
    cfg = run_config_from_dict(c.config)
    learner = ByolLearner(
        cfg.encoder,
        cfg.train,
        proj_hidden=int(c.extra.get("proj_hidden", PROJECTION_HIDDEN)),
        proj_dim=int(c.extra.get("proj_dim", PROJECTION_DIM)),
    )
    load_module_state(learner.online, c.tensors, "online.")
    load_module_state(learner.target, c.tensors, "target.")
    for p in learner.target.parameters():
        p.requires_grad_(False)
    optim_steps = c.extra.get("optim_steps", {})
    for name, param in learner.online.named_parameters():
        key = f"optim.{name}.exp_avg"
        if key in c.tensors:
            learner.optimizer.state[param] = {
                "step": torch.tensor(float(optim_steps[name])),
                "exp_avg": torch.from_numpy(c.tensors[key].copy()),
                "exp_avg_sq": torch.from_numpy(c.tensors[f"optim.{name}.exp_avg_sq"].copy()),
            }
    learner.step_count = int(c.extra.get("step_count", 0))
    bank = c.tensors.get("bank.segments")
    return learner, c.norm_stats, cfg, c.extra, bank


def _same_config_ignoring_epochs(a: RunConfig, b: RunConfig) -> bool:
    da, db = run_config_to_dict(a), run_config_to_dict(b)
    da["train"].pop("epochs")
    db["train"].pop("epochs")
    return da == db


def pretrain(
    cfg: RunConfig,
    out_path: str | Path,
    journal_path: str | Path | None = None,
    figure_path: str | Path | None = None,
    resume_from: str | Path | None = None,
    logmels: list[np.ndarray] | None = None,
) -> list[JournalRow]:
    """Run the full self-supervised pretraining loop.

    Dataset stats are computed once over every cell of every training
    clip. Each epoch shuffles clips with an epoch-derived seed, crops each
    to segment_frames, and drops the last incomplete batch. The final
    checkpoint carries everything needed for bit-exact resumption; pass
    resume_from to continue an earlier run of the same config (only
    train.epochs may differ).
    """
    if logmels is None:
        if cfg.data.manifest is None:
            raise ValueError("config has no data.manifest and no logmels were given")
        logmels = load_logmels(cfg.data.manifest, cfg.frontend)
    if not logmels:
        raise ValueError("empty pretraining dataset")

    start_epoch = 0
    if resume_from is not None:
        learner, stats, ck_cfg, extra, bank_arr = restore_learner(resume_from)
        if not _same_config_ignoring_epochs(ck_cfg, cfg):
            raise CheckpointError(
                f"cannot resume: {resume_from} was trained with a different config"
            )
        start_epoch = int(extra["epochs_completed"])
        if start_epoch > cfg.train.epochs:
            raise ValueError(
                f"checkpoint already has {start_epoch} epochs, config asks for "
                f"{cfg.train.epochs}"
            )
        pipeline = AugmentationPipeline(cfg.augmentation_config(), stats)
        if bank_arr is not None:
            seed_rng = np.random.default_rng(0)  # bank refill consumes no samples
            for seg in bank_arr:
                pipeline.bank.push_then_sample(seg, seed_rng)
    else:
        stats = compute_dataset_stats(logmels)
        learner = ByolLearner(cfg.encoder, cfg.train)
        pipeline = AugmentationPipeline(cfg.augmentation_config(), stats)

    base_seed = cfg.train.seed
    batch = cfg.train.batch_size
    n = len(logmels)
    rows: list[JournalRow] = []
    for epoch in range(start_epoch, cfg.train.epochs):
        if n < batch:
            raise ValueError(f"dataset of {n} clips cannot fill one batch of {batch}")
        rng = np.random.default_rng(derive_seed(base_seed, "epoch", epoch))
        torch.manual_seed(derive_seed(base_seed, "torch", epoch))
        order = rng.permutation(n)
        for lo in range(0, n - batch + 1, batch):
            segments = [
                crop_or_pad(logmels[i], cfg.train.segment_frames, rng)
                for i in order[lo : lo + batch]
            ]
            metrics = train_step(learner, pipeline, segments, rng)
            rows.append(
                JournalRow(
                    epoch, learner.step_count, metrics.loss,
                    metrics.mean_std, metrics.effective_rank,
                )
            )

    save_checkpoint(
        out_path, learner, stats, cfg,
        epochs_completed=cfg.train.epochs, bank=pipeline.bank,
    )
    if journal_path is not None or figure_path is not None:
        from . import reports

        if journal_path is not None:
            reports.write_journal(journal_path, rows, method="byol")
        if figure_path is not None:
            reports.plot_journal(figure_path, rows, title="pretraining journal")
    return rows
