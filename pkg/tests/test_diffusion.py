import numpy as np
import pytest
from scipy.stats import chi2_contingency

from fungen.diffusion import (
    corrupt,
    corrupt_batch,
    corrupt_stepwise,
    cumulative_matrix,
    make_schedule,
    resample_schedule,
    reverse_posterior,
    schedule_from_alphas,
    transition_matrix,
)
from fungen.errors import AlreadyCorrupted, InvalidDistribution, InvalidSchedule, StepOutOfRange
from fungen.seqcore import MASK_ID, Sequence, encode_sequence

from .conftest import random_sequence


def test_linear_schedule_endpoints():
    schedule = make_schedule(100)
    assert schedule.alpha_at(100) == 0.0
    assert schedule.alpha_at(0) == 1.0


def test_linear_schedule_telescopes():
    schedule = make_schedule(4)
    np.testing.assert_allclose(schedule.alpha, [0.75, 0.5, 0.25, 0.0], atol=1e-12)
    for t in range(1, 5):
        assert abs(np.prod(schedule.beta[:t]) - schedule.alpha_at(t)) <= 1e-12


def test_cosine_schedule_monotone():
    schedule = make_schedule(50, "cosine-alpha")
    assert np.all(np.diff(schedule.alpha) <= 0)
    assert schedule.alpha[-1] <= 1e-6


def test_invalid_schedules():
    with pytest.raises(InvalidSchedule):
        make_schedule(0)
    with pytest.raises(InvalidSchedule):
        make_schedule(10, "sqrt")


def test_schedule_arrays_are_read_only():
    schedule = make_schedule(5)
    with pytest.raises(ValueError):
        schedule.alpha[0] = 0.3


def test_transition_matrix_limits():
    schedule = schedule_from_alphas([1.0, 1.0, 0.0])
    np.testing.assert_array_equal(transition_matrix(schedule, 1), np.eye(21))
    absorbed = transition_matrix(schedule, 2)
    assert np.all(absorbed[:, MASK_ID] == 1.0)
    assert absorbed.sum() == 21


def test_transition_matrix_rows_and_mask_row():
    schedule = make_schedule(10, "cosine-alpha")
    for t in range(1, 11):
        q = transition_matrix(schedule, t)
        np.testing.assert_allclose(q.sum(axis=1), 1.0, atol=1e-12)
        assert q[MASK_ID, MASK_ID] == 1.0


def test_transition_product_matches_closed_form():
    schedule = make_schedule(12, "cosine-alpha")
    product = np.eye(21)
    for t in range(1, 13):
        product = product @ transition_matrix(schedule, t)
        assert np.max(np.abs(product - cumulative_matrix(schedule, t))) <= 1e-10


def test_transition_step_out_of_range():
    schedule = make_schedule(5)
    with pytest.raises(StepOutOfRange):
        transition_matrix(schedule, 0)
    with pytest.raises(StepOutOfRange):
        transition_matrix(schedule, 6)


def test_corrupt_limits(rng):
    seq = random_sequence(rng, 50)
    schedule = schedule_from_alphas([1.0, 1.0, 0.0])
    assert corrupt(seq, schedule, 1, rng) == seq
    assert corrupt(seq, schedule, 2, rng) == Sequence.all_mask(50)


def test_corrupt_mask_fraction(rng):
    schedule = make_schedule(4)
    seq = random_sequence(rng, 10000)
    out = corrupt(seq, schedule, 2, rng)
    fraction = np.mean(out.to_array() == MASK_ID)
    assert abs(fraction - 0.5) <= 0.02
    kept = out.to_array() != MASK_ID
    assert np.array_equal(out.to_array()[kept], seq.to_array()[kept])


def test_corrupt_per_token_marginal(rng):
    schedule = make_schedule(10)
    seq = encode_sequence("ACDEFGHIKL")
    draws = np.stack([corrupt(seq, schedule, 3, rng).to_array() for _ in range(10000)])
    kept = (draws != MASK_ID).mean(axis=0)
    np.testing.assert_allclose(kept, schedule.alpha_at(3), atol=0.015)


def test_corrupt_deterministic():
    schedule = make_schedule(10)
    seq = encode_sequence("MKVLAAGHHT")
    a = corrupt(seq, schedule, 5, np.random.default_rng(9))
    b = corrupt(seq, schedule, 5, np.random.default_rng(9))
    assert a == b


def test_corrupt_rejects_masked_input(rng):
    seq = Sequence((0, MASK_ID, 2))
    with pytest.raises(AlreadyCorrupted) as info:
        corrupt(seq, make_schedule(5), 1, rng)
    assert info.value.position == 1
    with pytest.raises(AlreadyCorrupted):
        corrupt_stepwise(seq, make_schedule(5), 1, rng)


def test_stepwise_matches_closed_form(rng):
    schedule = make_schedule(8, "cosine-alpha")
    seq = encode_sequence("W")
    closed = sum(corrupt(seq, schedule, 5, rng).ids[0] == MASK_ID for _ in range(10000))
    stepwise = sum(corrupt_stepwise(seq, schedule, 5, rng).ids[0] == MASK_ID for _ in range(10000))
    _, p_value, _, _ = chi2_contingency([[closed, 10000 - closed], [stepwise, 10000 - stepwise]])
    assert p_value > 0.01


def test_absorption_under_stepwise_chain(rng):
    schedule = make_schedule(6)
    ids = random_sequence(rng, 200).to_array()
    previous = np.zeros_like(ids, dtype=bool)
    for step in range(1, 7):
        keep = rng.random(ids.shape[0]) < schedule.beta_at(step)
        ids = np.where(keep, ids, MASK_ID)
        masked = ids == MASK_ID
        assert np.all(masked[previous])
        previous = masked


def test_corrupt_batch_never_masks_padding(rng):
    schedule = make_schedule(4)
    ids = np.zeros((3, 6), dtype=np.int64)
    valid = np.ones((3, 6), dtype=bool)
    valid[0, 4:] = False
    x_t, masked = corrupt_batch(ids, np.array([4, 4, 1]), schedule, rng, valid)
    assert not masked[0, 4:].any()
    assert masked[1].all()
    np.testing.assert_array_equal(x_t[masked], MASK_ID)


def test_posterior_fixed_positions():
    schedule = make_schedule(10)
    x_t = encode_sequence("AC")
    probs = np.zeros((2, 21))
    probs[:, :20] = 1.0 / 20
    posterior = reverse_posterior(x_t, probs, schedule, 4)
    assert posterior[0, 0] == 1.0
    assert posterior[1, 1] == 1.0


def test_posterior_final_step_reveals():
    schedule = make_schedule(10)
    rng = np.random.default_rng(0)
    probs = np.zeros((3, 21))
    probs[:, :20] = rng.dirichlet(np.ones(20), size=3)
    posterior = reverse_posterior(Sequence.all_mask(3), probs, schedule, 1)
    np.testing.assert_allclose(posterior, probs, atol=1e-15)


def test_posterior_rows_stochastic():
    schedule = make_schedule(30, "cosine-alpha")
    rng = np.random.default_rng(5)
    probs = np.zeros((6, 21))
    probs[:, :20] = rng.dirichlet(np.ones(20), size=6)
    x_t = Sequence((MASK_ID, 3, MASK_ID, 7, MASK_ID, MASK_ID))
    for t in range(1, 31):
        np.testing.assert_allclose(reverse_posterior(x_t, probs, schedule, t).sum(axis=1), 1.0, atol=1e-12)


def _bayes_posterior(schedule, p, x_t, t):
    """Exhaustive q(x_{t-1} | x_t, x0) averaged over x0 ~ p for a 3-token chain."""
    q_t = transition_matrix(schedule, t, n_tokens=3)
    bar_prev = cumulative_matrix(schedule, t - 1, n_tokens=3)
    bar_t = cumulative_matrix(schedule, t, n_tokens=3)
    out = np.zeros(3)
    for x0 in range(2):
        if bar_t[x0, x_t] == 0:
            continue
        for previous in range(3):
            out[previous] += p[x0] * q_t[previous, x_t] * bar_prev[x0, previous] / bar_t[x0, x_t]
    return out


def test_posterior_matches_bayes_enumeration():
    schedule = make_schedule(2)
    for p0 in (0.0, 0.3, 0.8, 1.0):
        p = np.array([[p0, 1.0 - p0, 0.0]])
        for t in (1, 2):
            expected = _bayes_posterior(schedule, p[0], 2, t)
            got = reverse_posterior(np.array([2]), p, schedule, t)[0]
            assert np.max(np.abs(got - expected)) <= 1e-12
            fixed = reverse_posterior(np.array([1]), p, schedule, t)[0]
            np.testing.assert_array_equal(fixed, [0.0, 1.0, 0.0])


def test_posterior_rejects_bad_distributions():
    schedule = make_schedule(5)
    probs = np.zeros((1, 21))
    probs[0, 0] = 0.5
    with pytest.raises(InvalidDistribution):
        reverse_posterior(Sequence.all_mask(1), probs, schedule, 2)
    probs[0, 0], probs[0, MASK_ID] = 0.5, 0.5
    with pytest.raises(InvalidDistribution):
        reverse_posterior(Sequence.all_mask(1), probs, schedule, 2)


def test_resample_schedule():
    schedule = make_schedule(500)
    alphas = resample_schedule(schedule, 100)
    assert alphas.shape == (101,)
    assert alphas[0] == 1.0 and alphas[-1] == 0.0
    np.testing.assert_allclose(alphas[50], 0.5)
    with pytest.raises(InvalidSchedule):
        resample_schedule(schedule, 0)
