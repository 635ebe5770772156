"""
Training loop for the conditional denoiser.

Each step draws a token-budgeted batch, hides condition channels at random,
corrupts the sequences at uniformly drawn steps and minimizes cross-entropy
over the masked positions, weighted per step.
"""

import json
import logging
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
import torch
import torch.nn.functional as F

from .config import TrainConfig
from .denoiser import ConditionTensors, Denoiser, collate_sequences, condition_batch
from .diffusion import NoiseSchedule, corrupt_batch, make_schedule
from .errors import AlreadyCorrupted, DivergedAtStep, EmptyDataset, UsageError
from .seqcore import ANNOTATION_TYPES, MASK_ID, AnnotationSet, ConditionBundle, Sequence
from .utils import make_rng

logger = logging.getLogger(__name__)

CHANNELS = ("annotations", "motif", "structure")


@dataclass
class LossBreakdown:
    """
    Weighted cross-entropy of one batch.

    total is the mean over rows of step_weight * (mean cross-entropy over that row's masked positions).
    """

    total: torch.Tensor
    per_position_weights: torch.Tensor
    step_weight: torch.Tensor
    masked_count: int
    cross_entropy: torch.Tensor = field(repr=False, default=None)


@dataclass
class TrainResult:
    model: Denoiser
    log: list
    manifest: dict


def step_weights(t: np.ndarray, kind: str) -> np.ndarray:
    """Per-row loss weight: 1/t for reciprocal-t, 1 for uniform."""
    t = np.asarray(t, dtype=np.float64)
    if kind == "reciprocal-t":
        return 1.0 / t
    if kind == "uniform":
        return np.ones_like(t)
    raise UsageError(f"unknown lambda kind {kind!r}")


def dropout_conditions(bundle: ConditionBundle, p: float, rng: np.random.Generator,
                       mode: str = "channel") -> ConditionBundle:
    """
    Hide condition channels independently with probability p.

    The same number of uniforms is drawn whatever the bundle holds, so the
    generator advances identically for conditional and unconditional data.

    Args:
        bundle: Conditions of one training example
        p: Drop probability per channel
        rng: Generator owned by the training loop
        mode: "channel" drops the annotation types together; "per-type" drops each type on its own

    Returns:
        ConditionBundle: Copy with dropped channels absent
    """
    if not 0.0 <= p <= 1.0:
        raise UsageError(f"dropout probability must lie in [0, 1], got {p}")
    drop = rng.random(len(CHANNELS)) < p
    annotations = bundle.annotations
    if mode == "per-type":
        drop_type = rng.random(len(ANNOTATION_TYPES)) < p
        if annotations is not None:
            kept = {kind: set() if drop_type[i] else annotations.get(kind) for i, kind in enumerate(ANNOTATION_TYPES)}
            annotations = AnnotationSet(**kept)
            if annotations.is_empty():
                annotations = None
    elif drop[0]:
        annotations = None
    return ConditionBundle(
        annotations=annotations,
        motif=None if drop[1] else bundle.motif,
        structure=None if drop[2] else bundle.structure,
    )


def masked_loss(model: Denoiser, x_t: torch.Tensor, targets: torch.Tensor, masked: torch.Tensor,
                valid: torch.Tensor, cond: ConditionTensors, t: np.ndarray, lambda_kind: str) -> LossBreakdown:
    """
    Loss for an already corrupted batch.

    Args:
        model: Denoiser
        x_t: [B, L] corrupted ids
        targets: [B, L] clean ids
        masked: [B, L] bool, True where x_t holds a mask that was a clean token
        valid: [B, L] bool
        cond: Collated conditions
        t: [B] steps
        lambda_kind: "reciprocal-t" or "uniform"
    """
    logits = model(x_t, cond, valid)
    weights = masked.to(logits.dtype)
    safe_targets = torch.where(masked, targets, torch.zeros_like(targets))
    ce = F.cross_entropy(logits.transpose(1, 2), safe_targets, reduction="none")
    per_row = (ce * weights).sum(dim=1) / weights.sum(dim=1).clamp(min=1.0)
    lam = torch.as_tensor(step_weights(t, lambda_kind), dtype=logits.dtype)
    total = (lam * per_row).mean()
    return LossBreakdown(total, weights, lam, int(masked.sum()), ce)


def batch_loss(model: Denoiser, seqs, bundles, t: np.ndarray, schedule: NoiseSchedule, rng: np.random.Generator,
               lambda_kind: str = "reciprocal-t", feature_cache: Optional[dict] = None) -> LossBreakdown:
    """Corrupt a batch of clean sequences and compute its loss."""
    ids, valid = collate_sequences(seqs)
    position = torch.nonzero((ids == MASK_ID) & valid)
    if len(position):
        raise AlreadyCorrupted(int(position[0, 1]))
    x_t, masked = corrupt_batch(ids.numpy(), np.asarray(t), schedule, rng, valid.numpy())
    cond = condition_batch(bundles, ids.shape[1], model.sizes, feature_cache)
    return masked_loss(model, torch.as_tensor(x_t), ids, torch.as_tensor(masked), valid, cond, t, lambda_kind)


def loss(x0: Sequence, bundle: ConditionBundle, t: int, model: Denoiser, schedule: NoiseSchedule,
         rng: np.random.Generator, lambda_kind: str = "reciprocal-t") -> LossBreakdown:
    """
    Weighted cross-entropy of one clean sequence corrupted to step t.

    Returns:
        LossBreakdown: total is 0 when no position is masked

    Raises:
        AlreadyCorrupted: x0 holds a mask token
    """
    return batch_loss(model, [x0], [bundle], np.array([t]), schedule, rng, lambda_kind)


def draw_batch(lengths: np.ndarray, batch_tokens: int, rng: np.random.Generator) -> list:
    """Record indices drawn with replacement until their lengths reach the token budget."""
    indices, tokens = [], 0
    while tokens < batch_tokens or not indices:
        index = int(rng.integers(len(lengths)))
        indices.append(index)
        tokens += int(lengths[index])
    return indices


def warmup_steps(config: TrainConfig) -> int:
    return max(1, int(round(config.warmup_frac * config.max_steps)))


def make_optimizer(model: Denoiser, config: TrainConfig) -> tuple:
    """AdamW over trainable parameters with linear warmup to the peak rate, constant afterwards."""
    params = [param for param in model.parameters() if param.requires_grad]
    optimizer = torch.optim.AdamW(params, lr=config.lr, betas=tuple(config.betas), weight_decay=config.weight_decay)
    warmup = warmup_steps(config)
    scheduler = torch.optim.lr_scheduler.LambdaLR(optimizer, lambda step: min(1.0, (step + 1) / warmup))
    return optimizer, scheduler


def train_manifest(config: TrainConfig, log: list) -> dict:
    """Optimizer settings actually used plus a loss summary."""
    return {
        "optimizer": "AdamW",
        "lr": config.lr,
        "betas": list(config.betas),
        "weight_decay": config.weight_decay,
        "warmup_steps": warmup_steps(config),
        "T": config.T,
        "schedule_kind": config.schedule_kind,
        "lambda_kind": config.lambda_kind,
        "condition_dropout": config.condition_dropout,
        "condition_dropout_mode": config.condition_dropout_mode,
        "batch_tokens": config.batch_tokens,
        "steps": len(log),
        "seed": config.seed,
        "frozen_groups": list(config.frozen_groups()),
        "initial_loss": log[0]["loss"] if log else None,
        "final_loss": log[-1]["loss"] if log else None,
    }


def train(dataset, config: TrainConfig, model: Denoiser, schedule: Optional[NoiseSchedule] = None) -> TrainResult:
    """
    Optimize the denoiser in place.

    Deterministic for a fixed config.seed: batching, condition dropout,
    step draws and corruption all come from one numpy generator.

    Args:
        dataset: Sequence of (Sequence, ConditionBundle) pairs
        config: Training settings
        model: Initialized denoiser, updated in place
        schedule: Noise schedule; built from config when omitted

    Returns:
        TrainResult: The model, per-step log records and the training manifest

    Raises:
        EmptyDataset: No examples
        DivergedAtStep: Non-finite loss or parameters
    """
    dataset = list(dataset)
    if not dataset:
        raise EmptyDataset("training dataset is empty")
    schedule = schedule or make_schedule(config.T, config.schedule_kind)
    if schedule.T != config.T:
        raise UsageError(f"schedule has T={schedule.T}, config has T={config.T}")

    rng = make_rng(config.seed)
    torch.manual_seed(config.seed)
    lengths = np.array([len(seq) for seq, _ in dataset])
    feature_cache = {}
    log = []

    if config.max_steps == 0:
        return TrainResult(model, log, train_manifest(config, log))

    model.freeze(config.frozen_groups())
    optimizer, scheduler = make_optimizer(model, config)
    model.train()
    logger.info(f"Training for {config.max_steps} steps on {len(dataset)} examples (T={config.T})")

    for step in range(1, config.max_steps + 1):
        indices = draw_batch(lengths, config.batch_tokens, rng)
        seqs = [dataset[i][0] for i in indices]
        bundles = [
            dropout_conditions(dataset[i][1], config.condition_dropout, rng, config.condition_dropout_mode)
            for i in indices
        ]
        t = rng.integers(1, config.T + 1, size=len(indices))
        lr = optimizer.param_groups[0]["lr"]

        breakdown = batch_loss(model, seqs, bundles, t, schedule, rng, config.lambda_kind, feature_cache)
        if not torch.isfinite(breakdown.total):
            logger.error(f"Loss is {breakdown.total.item()} at step {step}")
            raise DivergedAtStep(step)

        optimizer.zero_grad(set_to_none=True)
        breakdown.total.backward()
        optimizer.step()
        scheduler.step()

        n_tokens = int(sum(len(seq) for seq in seqs))
        record = {
            "step": step,
            "loss": float(breakdown.total.item()),
            "lambda_t_mean": float(breakdown.step_weight.mean().item()),
            "masked_frac": breakdown.masked_count / n_tokens,
            "lr": lr,
        }
        log.append(record)
        if step % config.log_every == 0 or step == config.max_steps:
            logger.info(f"step {step}: loss {record['loss']:.4f}, masked {record['masked_frac']:.3f}, lr {lr:.2e}")
        else:
            logger.debug(f"step {step}: loss {record['loss']:.4f}")

    model.eval()
    model.freeze(())
    for name, param in model.named_parameters():
        if not torch.isfinite(param).all():
            logger.error(f"Parameter {name} is not finite after training")
            raise DivergedAtStep(config.max_steps)
    return TrainResult(model, log, train_manifest(config, log))


def format_log(log: list) -> str:
    """Line-delimited JSON training log."""
    return "".join(json.dumps(record) + "\n" for record in log)


def gradient_check(model: Denoiser, seqs, bundles, t: np.ndarray, schedule: NoiseSchedule, seed: int = 0,
                   groups=None, samples: int = 4, eps: float = 1e-5, lambda_kind: str = "reciprocal-t") -> dict:
    """
    Compare analytic gradients with central finite differences.

    The model must hold float64 parameters. Corruption is drawn once so the
    loss is a deterministic function of the parameters.

    Args:
        model: Float64 denoiser
        seqs, bundles: Batch
        t: [B] steps
        schedule: Noise schedule
        seed: Seed for corruption and element selection
        groups: Tensor groups to check; all non-empty groups by default
        samples: Parameter elements checked per group
        eps: Finite-difference half step

    Returns:
        dict: {group: max relative error |a - n| / max(|a|, |n|, 1e-5)}
    """
    if model.dtype != torch.float64:
        raise UsageError("gradient_check needs a float64 model")
    rng = make_rng(seed)
    ids, valid = collate_sequences(seqs)
    x_t, masked = corrupt_batch(ids.numpy(), np.asarray(t), schedule, rng, valid.numpy())
    x_t, masked = torch.as_tensor(x_t), torch.as_tensor(masked)
    cond = condition_batch(bundles, ids.shape[1], model.sizes)

    def objective() -> torch.Tensor:
        return masked_loss(model, x_t, ids, masked, valid, cond, t, lambda_kind).total

    model.zero_grad(set_to_none=True)
    objective().backward()

    errors = {}
    with torch.no_grad():
        for group, members in model.parameter_groups().items():
            if groups is not None and group not in groups:
                continue
            members = [(name, param) for name, param in members if param.numel()]
            if not members:
                continue
            sizes = np.array([param.numel() for _, param in members])
            worst = 0.0
            for flat in rng.choice(int(sizes.sum()), size=min(samples, int(sizes.sum())), replace=False):
                member = int(np.searchsorted(np.cumsum(sizes), flat, side="right"))
                offset = int(flat - (np.cumsum(sizes)[member - 1] if member else 0))
                _, param = members[member]
                view = param.view(-1)
                analytic = float(param.grad.view(-1)[offset]) if param.grad is not None else 0.0
                original = float(view[offset])
                view[offset] = original + eps
                plus = float(objective())
                view[offset] = original - eps
                minus = float(objective())
                view[offset] = original
                numeric = (plus - minus) / (2 * eps)
                error = abs(analytic - numeric) / max(abs(analytic), abs(numeric), 1e-5)
                worst = max(worst, error)
            errors[group] = worst
            logger.debug(f"Gradient check {group}: max relative error {worst:.2e}")
    return errors
