"""
Conditional sampling.

Generation starts from an all-mask sequence and reveals tokens over a fixed
number of steps. At each step the denoiser scores every still-masked position;
the most confident positions are committed until the number of revealed tokens
matches the noise schedule at that point. Committed tokens never change.
"""

import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from io import StringIO
from typing import Callable, Optional

import numpy as np
import torch
from Bio import SeqIO
from Bio.Seq import Seq
from Bio.SeqRecord import SeqRecord
from scipy.special import softmax

from .config import SampleConfig
from .denoiser import Denoiser, collate_sequences, condition_batch
from .diffusion import NoiseSchedule, resample_schedule, reverse_posterior, schedule_from_alphas
from .errors import ScorerError, StructureTooShort
from .seqcore import (
    MASK_ID,
    AnnotationSet,
    BackboneStructure,
    ConditionBundle,
    MotifSpec,
    Sequence,
    apply_motif,
    decode_sequence,
)
from .utils import atomic_write_text, format_float, make_rng

logger = logging.getLogger(__name__)

Scorer = Callable[[Sequence, AnnotationSet], float]


@dataclass(frozen=True)
class Sample:
    """One generated sequence with the mean log-probability of its committed tokens."""

    sequence: Sequence
    model_confidence: float
    seed: int
    mode: str


@dataclass(frozen=True)
class ScoredCandidate:
    sequence: Sequence
    model_confidence: float
    func_score: float
    seed: int
    mode: str = "rerank"

    @property
    def combined(self) -> float:
        return self.model_confidence + self.func_score


def unmask_targets(length: int, alphas: np.ndarray, already: int = 0) -> list:
    """
    Revealed-token count after each sampling step.

    Step s reveals up to round(length * (1 - alphas[s])); the last step reveals everything.
    Positions fixed before sampling count as revealed from the start.
    """
    targets = [max(already, int(math.floor(length * (1.0 - alpha) + 0.5))) for alpha in alphas[1:]]
    targets[-1] = length
    return targets


def motif_mode(bundle: ConditionBundle, cfg: SampleConfig) -> str:
    if bundle.motif is None or not bundle.motif.spans:
        return "none"
    if cfg.motif_mode == "dynamic" or bundle.motif.dynamic_update:
        return "dynamic"
    return "fixed"


def choose_length(bundle: ConditionBundle, cfg: SampleConfig, rng: np.random.Generator) -> int:
    if bundle.structure is not None:
        return len(bundle.structure)
    if cfg.length is not None:
        return cfg.length
    low, high = cfg.length_range
    return int(rng.integers(low, high + 1))


def _log_probs(model: Denoiser, x: torch.Tensor, cond) -> np.ndarray:
    with torch.no_grad():
        logits = model(x, cond)[0]
    return torch.log_softmax(logits.to(torch.float64), dim=-1).numpy()


def sample_scored(bundle: ConditionBundle, model: Denoiser, schedule: NoiseSchedule, cfg: SampleConfig,
                  trace: Optional[list] = None) -> Sample:
    """
    Generate one sequence and report its model confidence.

    Args:
        bundle: Any subset of conditions, including none
        model: Denoiser in eval mode
        schedule: Training noise schedule; resampled to cfg.steps points
        cfg: Sampling settings; cfg.seed fixes length draw, commit order and token noise
        trace: When given, receives the id array after every step

    Returns:
        Sample: Fully unmasked sequence
    """
    rng = make_rng(cfg.seed)
    bundle = bundle.normalized()
    length = choose_length(bundle, cfg, rng)
    mode = motif_mode(bundle, cfg)

    x = Sequence.all_mask(length)
    if mode == "fixed":
        x = apply_motif(x, bundle.motif)
    elif bundle.motif is not None:
        bundle.motif.check_fits(length)
    ids = x.to_array()
    fixed = ids != MASK_ID

    cond = condition_batch([bundle], length, model.sizes)
    alphas = resample_schedule(schedule, cfg.steps)
    committed_log_probs = []

    if cfg.exact_posterior:
        grid = schedule_from_alphas(alphas)
        for t in range(cfg.steps, 0, -1):
            log_probs = _log_probs(model, torch.as_tensor(ids)[None], cond)
            x0_probs = np.zeros_like(log_probs)
            x0_probs[:, :MASK_ID] = softmax(log_probs[:, :MASK_ID] / cfg.temperature, axis=1)
            posterior = reverse_posterior(ids, x0_probs, grid, t)
            draws = rng.random(length)
            picks = (posterior.cumsum(axis=1) < draws[:, None]).sum(axis=1).clip(max=MASK_ID)
            revealed = (ids == MASK_ID) & (picks != MASK_ID)
            committed_log_probs.extend(log_probs[revealed, picks[revealed]].tolist())
            ids = np.where(revealed, picks, ids)
            if trace is not None:
                trace.append(ids.copy())
    else:
        targets = unmask_targets(length, alphas, int(fixed.sum()))
        for step, target in enumerate(targets, start=1):
            masked = np.flatnonzero(ids == MASK_ID)
            n_new = target - (length - masked.size)
            if n_new > 0:
                log_probs = _log_probs(model, torch.as_tensor(ids)[None], cond)[masked, :MASK_ID]
                if cfg.gumbel:
                    tokens = np.argmax(log_probs / cfg.temperature + rng.gumbel(size=log_probs.shape), axis=1)
                else:
                    tokens = np.argmax(log_probs, axis=1)
                confidence = log_probs.max(axis=1)
                if cfg.gumbel:
                    confidence = confidence + cfg.temperature * rng.gumbel(size=masked.size)
                # equal confidences resolve in a seeded random order
                shuffle = rng.permutation(masked.size)
                order = shuffle[np.argsort(-confidence[shuffle], kind="stable")][:n_new]
                ids[masked[order]] = tokens[order]
                committed_log_probs.extend(log_probs[order, tokens[order]].tolist())
            if trace is not None:
                trace.append(ids.copy())
            logger.debug(f"step {step}: {length - int((ids == MASK_ID).sum())}/{length} revealed")

    confidence = float(np.mean(committed_log_probs)) if committed_log_probs else 0.0
    if mode == "none":
        mode = "inverse_fold" if bundle.structure is not None else "sample"
    return Sample(Sequence.from_array(ids), confidence, cfg.seed, mode)


def sample(bundle: ConditionBundle, model: Denoiser, schedule: NoiseSchedule, cfg: SampleConfig) -> Sequence:
    """
    Generate one sequence under any subset of conditions.

    Deterministic for a fixed cfg.seed; an empty bundle gives unconditional generation.
    """
    return sample_scored(bundle, model, schedule, cfg).sequence


def inpaint(motif: MotifSpec, bundle: ConditionBundle, model: Denoiser, schedule: NoiseSchedule,
            cfg: SampleConfig) -> Sequence:
    """
    Generate around a motif.

    In fixed mode the motif residues are written into their spans before
    sampling and never change; in dynamic mode the motif only steers the
    control branch and the sampler may rewrite those positions.

    Raises:
        SpanOutOfRange: The motif does not fit the output length
    """
    return sample(ConditionBundle(bundle.annotations, motif, bundle.structure), model, schedule, cfg)


def inverse_fold(structure: BackboneStructure, bundle: ConditionBundle, model: Denoiser, schedule: NoiseSchedule,
                 cfg: SampleConfig) -> Sequence:
    """
    Design a sequence for a backbone; the output has one residue per structure residue.

    Raises:
        StructureTooShort: Fewer than 3 residues
    """
    if len(structure) < 3:
        raise StructureTooShort(len(structure))
    return sample(ConditionBundle(bundle.annotations, bundle.motif, structure), model, schedule, cfg)


def generate_reranked(bundle: ConditionBundle, model: Denoiser, schedule: NoiseSchedule, cfg: SampleConfig,
                      scorer: Scorer, workers: int = 1) -> ScoredCandidate:
    """
    Draw cfg.n_candidates samples and keep the best by confidence plus weighted function score.

    Candidate i uses seed cfg.seed + i. Ties go to the higher model confidence, then the lower seed.

    Args:
        bundle: Conditions shared by every candidate
        model: Denoiser in eval mode
        schedule: Noise schedule
        cfg: Sampling settings; n_candidates and func_weight apply here
        scorer: Function score of a sequence for the requested annotations
        workers: Threads drawing candidates; the result does not depend on it

    Returns:
        ScoredCandidate: Selected candidate

    Raises:
        ScorerError: The scorer returned a non-finite value
    """
    seeds = [cfg.seed + offset for offset in range(cfg.n_candidates)]
    configs = [cfg.model_copy(update={"seed": seed}) for seed in seeds]

    if workers > 1 and len(configs) > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            samples = list(pool.map(lambda c: sample_scored(bundle, model, schedule, c), configs))
    else:
        samples = [sample_scored(bundle, model, schedule, c) for c in configs]

    annotations = bundle.annotations or AnnotationSet()
    candidates = []
    for drawn in samples:
        score = scorer(drawn.sequence, annotations)
        if score is None or not math.isfinite(score):
            logger.error(f"Scorer returned {score!r} for candidate seed {drawn.seed}")
            raise ScorerError(score, drawn.seed)
        candidates.append(ScoredCandidate(drawn.sequence, drawn.model_confidence, float(score), drawn.seed))

    best = max(
        candidates,
        key=lambda c: (c.model_confidence + cfg.func_weight * c.func_score, c.model_confidence, -c.seed),
    )
    logger.info(f"Selected seed {best.seed} of {len(candidates)} candidates "
                f"(conf {best.model_confidence:.4f}, func {best.func_score:.4f})")
    return best


@dataclass(frozen=True)
class GeneratedRecord:
    id: str
    sequence: Sequence
    mode: str
    seed: int
    conf: float
    func: Optional[float] = None

    def header(self) -> str:
        func = "NA" if self.func is None else repr(format_float(self.func))
        return f"{self.id}|mode={self.mode}|seed={self.seed}|conf={format_float(self.conf)!r}|func={func}"


def format_fasta(records) -> str:
    handle = StringIO()
    SeqIO.write(
        (SeqRecord(Seq(decode_sequence(record.sequence)), id=record.header(), description="") for record in records),
        handle,
        "fasta",
    )
    return handle.getvalue()


def write_fasta(records, path) -> None:
    """Write generated records as FASTA with id|mode=|seed=|conf=|func= headers, atomically."""
    records = list(records)
    atomic_write_text(path, format_fasta(records))
    logger.info(f"Wrote {len(records)} sequences to {path}")
