"""
Absorbing-state discrete diffusion.

A token is kept at step t with probability beta_t and otherwise jumps to the
mask token, where it stays. alpha_t, the cumulative product of beta, is the
probability that a clean token survives the first t steps.
"""

import logging
import math
from dataclasses import dataclass
from typing import Optional

import numpy as np

from .errors import AlreadyCorrupted, InvalidDistribution, InvalidSchedule, StepOutOfRange
from .seqcore import MASK_ID, VOCAB_SIZE, Sequence

logger = logging.getLogger(__name__)

SCHEDULE_KINDS = ("linear-alpha", "cosine-alpha")
TERMINAL_ALPHA = 1e-6
DISTRIBUTION_TOL = 1e-6


@dataclass(frozen=True, eq=False)
class NoiseSchedule:
    """
    Per-step keep probabilities and their running product.

    beta[t - 1] and alpha[t - 1] hold the values for step t.
    """

    T: int
    kind: str
    beta: np.ndarray
    alpha: np.ndarray

    def alpha_at(self, t: int) -> float:
        """Survival probability after t steps; alpha_at(0) is 1."""
        if not 0 <= t <= self.T:
            raise StepOutOfRange(t, self.T)
        return 1.0 if t == 0 else float(self.alpha[t - 1])

    def beta_at(self, t: int) -> float:
        check_step(self, t)
        return float(self.beta[t - 1])

    def alpha_grid(self) -> np.ndarray:
        """alpha for t = 0..T, length T + 1."""
        return np.concatenate([[1.0], self.alpha])


def _target_alpha(kind: str, T: int) -> np.ndarray:
    steps = np.arange(T + 1, dtype=np.float64)
    if kind == "linear-alpha":
        alpha = 1.0 - steps / T
    elif kind == "cosine-alpha":
        alpha = np.cos(0.5 * math.pi * steps / T)
    else:
        raise InvalidSchedule(f"unknown schedule kind {kind!r}; expected one of {list(SCHEDULE_KINDS)}")
    alpha[-1] = 0.0
    return alpha


def make_schedule(T: int, kind: str = "linear-alpha") -> NoiseSchedule:
    """
    Build a noise schedule.

    beta_t is recovered as the ratio of consecutive target alphas and alpha is
    then recomputed as the running product of beta, so alpha_t equals the
    product of beta_1..beta_t by construction.

    Args:
        T: Total steps, at least 1
        kind: "linear-alpha" (alpha_t = 1 - t/T) or "cosine-alpha" (alpha_t = cos(pi/2 * t/T))

    Returns:
        NoiseSchedule: Float64 beta and alpha arrays of length T

    Raises:
        InvalidSchedule: T < 1 or unknown kind
    """
    if T < 1:
        raise InvalidSchedule(f"T must be a positive integer, got {T}")
    target = _target_alpha(kind, T)
    beta = np.divide(target[1:], target[:-1], out=np.zeros(T), where=target[:-1] > 0)
    beta = np.clip(beta, 0.0, 1.0)
    alpha = np.cumprod(beta)
    if alpha[-1] > TERMINAL_ALPHA:
        raise InvalidSchedule(f"terminal alpha {alpha[-1]} is not effectively zero")
    beta.setflags(write=False)
    alpha.setflags(write=False)
    return NoiseSchedule(T=T, kind=kind, beta=beta, alpha=alpha)


def schedule_from_alphas(alphas: np.ndarray, kind: str = "resampled") -> NoiseSchedule:
    """
    Schedule whose alpha_t follows alphas[t] for t = 0..T (alphas[0] must be 1).

    Used to run the reverse chain on a sampling grid coarser or finer than the training schedule.
    """
    alphas = np.asarray(alphas, dtype=np.float64)
    if alphas.ndim != 1 or alphas.shape[0] < 2 or alphas[0] != 1.0:
        raise InvalidSchedule("alphas must start at 1.0 and hold at least two points")
    if np.any(np.diff(alphas) > 0):
        raise InvalidSchedule("alphas must be non-increasing")
    beta = np.divide(alphas[1:], alphas[:-1], out=np.zeros(alphas.shape[0] - 1), where=alphas[:-1] > 0)
    alpha = np.cumprod(beta)
    beta.setflags(write=False)
    alpha.setflags(write=False)
    return NoiseSchedule(T=alphas.shape[0] - 1, kind=kind, beta=beta, alpha=alpha)


def check_step(schedule: NoiseSchedule, t: int) -> None:
    if not 1 <= t <= schedule.T:
        raise StepOutOfRange(t, schedule.T)


def transition_matrix(schedule: NoiseSchedule, t: int, n_tokens: int = VOCAB_SIZE) -> np.ndarray:
    """
    One-step transition matrix Q_t = beta_t * I + (1 - beta_t) * (rows one-hot on mask).

    The mask token is the last index. Row i is the distribution of x_t given x_{t-1} = i.

    Returns:
        np.ndarray: [n_tokens, n_tokens] row-stochastic float64 matrix
    """
    check_step(schedule, t)
    beta = schedule.beta_at(t)
    q = beta * np.eye(n_tokens)
    q[:, n_tokens - 1] += 1.0 - beta
    return q


def cumulative_matrix(schedule: NoiseSchedule, t: int, n_tokens: int = VOCAB_SIZE) -> np.ndarray:
    """Closed form of Q_1 ... Q_t: alpha_t * I + (1 - alpha_t) * (rows one-hot on mask)."""
    alpha = schedule.alpha_at(t)
    q = alpha * np.eye(n_tokens)
    q[:, n_tokens - 1] += 1.0 - alpha
    return q


def _first_mask(ids: np.ndarray, mask_id: int) -> Optional[int]:
    hits = np.flatnonzero(ids == mask_id)
    return int(hits[0]) if hits.size else None


def corrupt(seq: Sequence, schedule: NoiseSchedule, t: int, rng: np.random.Generator) -> Sequence:
    """
    Sample x_t from a clean sequence in one draw.

    Each position is kept with probability alpha_t and masked otherwise.

    Raises:
        AlreadyCorrupted: seq holds a mask token
        StepOutOfRange: t outside [1, T]
    """
    check_step(schedule, t)
    ids = seq.to_array()
    position = _first_mask(ids, MASK_ID)
    if position is not None:
        raise AlreadyCorrupted(position)
    keep = rng.random(ids.shape[0]) < schedule.alpha_at(t)
    return Sequence.from_array(np.where(keep, ids, MASK_ID))


def corrupt_stepwise(seq: Sequence, schedule: NoiseSchedule, t: int, rng: np.random.Generator) -> Sequence:
    """Sample x_t by running the chain one step at a time with keep probability beta_s."""
    check_step(schedule, t)
    ids = seq.to_array()
    position = _first_mask(ids, MASK_ID)
    if position is not None:
        raise AlreadyCorrupted(position)
    for step in range(1, t + 1):
        keep = rng.random(ids.shape[0]) < schedule.beta_at(step)
        ids = np.where(keep, ids, MASK_ID)
    return Sequence.from_array(ids)


def corrupt_batch(ids: np.ndarray, t: np.ndarray, schedule: NoiseSchedule, rng: np.random.Generator,
                  valid: Optional[np.ndarray] = None) -> tuple:
    """
    Corrupt a padded batch with one step per row.

    Args:
        ids: [B, L] clean token ids
        t: [B] steps in [1, T]
        schedule: Noise schedule
        rng: Generator owned by the caller
        valid: [B, L] boolean, False on padding; padding is never masked

    Returns:
        tuple: (x_t [B, L], masked [B, L] boolean)
    """
    alpha = schedule.alpha_grid()[np.asarray(t)]
    draws = rng.random(ids.shape)
    masked = draws >= alpha[:, None]
    if valid is not None:
        masked &= valid
    return np.where(masked, MASK_ID, ids), masked


def reverse_posterior(x_t, x0_probs: np.ndarray, schedule: NoiseSchedule, t: int) -> np.ndarray:
    """
    Distribution of x_{t-1} given x_t and a predicted clean-token distribution.

    A masked position reveals token v with probability
    x0_probs[v] * (alpha_{t-1} - alpha_t) / (1 - alpha_t) and stays masked with
    probability (1 - alpha_{t-1}) / (1 - alpha_t). Unmasked positions are fixed.
    The mask token is the last column of x0_probs.

    Args:
        x_t: Sequence or [L] id array
        x0_probs: [L, K] rows summing to one with zero mass on the mask column
        schedule: Noise schedule
        t: Current step, at least 1

    Returns:
        np.ndarray: [L, K] float64 rows summing to one

    Raises:
        InvalidDistribution: x0_probs not normalized, negative, or weighting the mask
    """
    check_step(schedule, t)
    probs = np.asarray(x0_probs, dtype=np.float64)
    ids = x_t.to_array() if isinstance(x_t, Sequence) else np.asarray(x_t, dtype=np.int64)
    n_tokens = probs.shape[1]
    mask_id = n_tokens - 1

    if probs.shape[0] != ids.shape[0]:
        raise InvalidDistribution(f"x0_probs has {probs.shape[0]} rows for a length-{ids.shape[0]} sequence")
    if np.any(probs < 0) or np.any(np.abs(probs.sum(axis=1) - 1.0) > DISTRIBUTION_TOL):
        raise InvalidDistribution("x0_probs rows must be non-negative and sum to 1")
    if np.any(probs[:, mask_id] > 0):
        raise InvalidDistribution("x0_probs must assign zero probability to the mask token")

    alpha_prev = schedule.alpha_at(t - 1)
    alpha_t = schedule.alpha_at(t)
    posterior = np.zeros_like(probs)
    masked = ids == mask_id

    posterior[~masked, ids[~masked]] = 1.0
    if np.any(masked):
        denominator = 1.0 - alpha_t
        if denominator <= 0:
            posterior[masked] = probs[masked]
        else:
            posterior[masked] = probs[masked] * ((alpha_prev - alpha_t) / denominator)
            posterior[masked, mask_id] = (1.0 - alpha_prev) / denominator
    return posterior


def resample_schedule(schedule: NoiseSchedule, steps: int) -> np.ndarray:
    """
    alpha at steps + 1 evenly spaced schedule points, from t = 0 to t = T.

    Points between integer steps are linearly interpolated.

    Returns:
        np.ndarray: [steps + 1] non-increasing alphas, first 1.0, last alpha_T
    """
    if steps < 1:
        raise InvalidSchedule(f"sampling steps must be at least 1, got {steps}")
    if steps > schedule.T:
        logger.warning(f"Sampling with {steps} steps on a {schedule.T}-step schedule; interpolating alpha")
    points = np.linspace(0.0, float(schedule.T), steps + 1)
    return np.interp(points, np.arange(schedule.T + 1, dtype=np.float64), schedule.alpha_grid())
