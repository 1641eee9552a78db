import numpy as np
import pytest

from rldif import autodiff as ad
from rldif.core import NUM_TOKENS, CategoricalDist, Sequence
from rldif.d3pm import (
    InvalidBeta,
    StepOutOfRange,
    ZeroSupportPosterior,
    cosine_betas,
    forward_marginal,
    forward_sample,
    hybrid_loss,
    make_uniform_schedule,
    posterior,
    reverse_step,
    schedule_from_spec,
)

from gradcheck import check_gradients


def _random_seq(n, rng):
    return Sequence(rng.integers(0, NUM_TOKENS, n))


def test_single_step_full_mixing():
    s = make_uniform_schedule(1, np.array([1.0]))
    assert np.allclose(s.Q[0], 0.05)
    assert np.allclose(s.Qbar[1], 0.05)


def test_zero_beta_is_identity():
    s = make_uniform_schedule(5, np.zeros(5))
    for t in range(5):
        assert np.array_equal(s.Q[t], np.eye(20))
    for t in range(6):
        assert np.array_equal(s.Qbar[t], np.eye(20))
    seq = _random_seq(7, np.random.default_rng(0))
    marg = forward_marginal(seq, 3, s)
    assert np.array_equal(marg.p.argmax(axis=1), seq.indices)
    assert np.array_equal(marg.p.max(axis=1), np.ones(7))
    # sampling through an identity kernel returns the input
    out = forward_sample(seq, 5, s, np.random.default_rng(1))
    assert np.array_equal(out.s_t.indices, seq.indices)


def test_two_token_kernel_hand_value():
    s = make_uniform_schedule(1, np.array([0.5]), num_classes=2)
    assert np.allclose(s.Q[0], [[0.75, 0.25], [0.25, 0.75]])


def test_invalid_beta():
    with pytest.raises(InvalidBeta):
        make_uniform_schedule(2, np.array([0.5, 1.5]))
    with pytest.raises(InvalidBeta):
        make_uniform_schedule(2, np.array([-0.1, 0.5]))
    with pytest.raises(InvalidBeta):
        make_uniform_schedule(3, np.array([0.5]))


def test_schedule_row_stochastic():
    s = make_uniform_schedule(150)
    assert np.max(np.abs(s.Q.sum(axis=2) - 1)) < 1e-12
    assert np.max(np.abs(s.Qbar.sum(axis=2) - 1)) < 1e-12
    assert np.all(s.Q >= 0)
    assert np.all(s.Qbar >= 0)


def test_default_schedule_reaches_stationary():
    s = make_uniform_schedule(150)
    assert np.max(np.abs(s.Qbar[150] - 0.05)) < 1e-3


def test_cosine_betas_monotone_retention():
    betas = cosine_betas(150)
    assert np.all(betas >= 0) and np.all(betas <= 1)
    retention = np.cumprod(1 - betas)
    assert np.all(np.diff(retention) <= 0)


def test_chapman_kolmogorov():
    s = make_uniform_schedule(16)
    rng = np.random.default_rng(3)
    seq = _random_seq(9, rng)
    for t in range(2, 17):
        marg_prev = forward_marginal(seq, t - 1, s).p
        marg_t = forward_marginal(seq, t, s).p
        assert np.max(np.abs(marg_prev @ s.Q[t - 1] - marg_t)) < 1e-12


def test_forward_marginal_rows_sum_to_one():
    s = make_uniform_schedule(32)
    rng = np.random.default_rng(4)
    for t in (1, 7, 32):
        marg = forward_marginal(_random_seq(25, rng), t, s)
        assert np.max(np.abs(marg.p.sum(axis=1) - 1)) < 1e-12


def test_step_out_of_range():
    s = make_uniform_schedule(8)
    seq = _random_seq(3, np.random.default_rng(5))
    for t in (0, 9, -1):
        with pytest.raises(StepOutOfRange):
            forward_marginal(seq, t, s)


def test_terminal_sample_frequencies_match_stationary():
    # Monte Carlo against the uniform stationary distribution
    s = make_uniform_schedule(150)
    rng = np.random.default_rng(6)
    seq = Sequence(np.zeros(1, dtype=np.int64))
    n = 100_000
    marg = forward_marginal(seq, 150, s).p[0]
    draws = rng.choice(NUM_TOKENS, size=n, p=marg)
    freqs = np.bincount(draws, minlength=20) / n
    se = np.sqrt(0.05 * 0.95 / n)
    assert np.max(np.abs(freqs - 0.05)) < 4 * se


def test_posterior_t1_is_point_mass_on_s0():
    s = make_uniform_schedule(8)
    rng = np.random.default_rng(7)
    s0 = _random_seq(11, rng)
    st = _random_seq(11, rng)
    post = posterior(st, s0, 1, s)
    assert np.array_equal(post.p.argmax(axis=1), s0.indices)
    assert np.allclose(post.p.max(axis=1), 1.0)


def test_posterior_rows_normalized():
    s = make_uniform_schedule(12)
    rng = np.random.default_rng(8)
    for t in (1, 5, 12):
        post = posterior(_random_seq(30, rng), _random_seq(30, rng), t, s)
        assert np.max(np.abs(post.p.sum(axis=1) - 1)) < 1e-12


def _posterior_bayes_oracle(st_i, s0_i, t, schedule):
    """Enumerate q(S_t | s) q(s | S_0) over all 20 values of s = S_{t-1}."""
    weights = np.empty(NUM_TOKENS)
    for s in range(NUM_TOKENS):
        weights[s] = schedule.Q[t - 1][s, st_i] * schedule.Qbar[t - 1][s0_i, s]
    return weights / weights.sum()


def test_posterior_matches_bayes_enumeration():
    s = make_uniform_schedule(10)
    rng = np.random.default_rng(9)
    s0 = _random_seq(15, rng)
    st = _random_seq(15, rng)
    for t in (1, 4, 10):
        post = posterior(st, s0, t, s).p
        for i in range(15):
            oracle = _posterior_bayes_oracle(st.indices[i], s0.indices[i], t, s)
            assert np.max(np.abs(post[i] - oracle)) < 1e-12


def test_posterior_zero_support():
    s = make_uniform_schedule(3, np.zeros(3))  # identity kernels
    s0 = Sequence(np.array([0]))
    st = Sequence(np.array([1]))  # impossible under identity dynamics
    with pytest.raises(ZeroSupportPosterior):
        posterior(st, s0, 2, s)


def test_reverse_step_point_mass_equals_posterior():
    s = make_uniform_schedule(9)
    rng = np.random.default_rng(10)
    s0 = _random_seq(13, rng)
    st = _random_seq(13, rng)
    for t in (1, 5, 9):
        p0 = s0.one_hot()
        out = reverse_step(p0, st, t, s).p
        expect = posterior(st, s0, t, s).p
        assert np.max(np.abs(out - expect)) < 1e-12


def test_reverse_step_rows_normalized():
    s = make_uniform_schedule(7)
    rng = np.random.default_rng(11)
    st = _random_seq(21, rng)
    p0 = rng.dirichlet(np.ones(NUM_TOKENS), size=21)
    for t in (1, 3, 7):
        out = reverse_step(p0, st, t, s)
        assert np.max(np.abs(out.p.sum(axis=1) - 1)) < 1e-12


def test_reverse_step_matches_explicit_sum_oracle():
    s = make_uniform_schedule(6)
    rng = np.random.default_rng(12)
    n = 10
    st = _random_seq(n, rng)
    p0 = rng.dirichlet(np.ones(NUM_TOKENS), size=n)
    for t in (2, 6):
        out = reverse_step(p0, st, t, s).p
        # independent 20-term explicit summation
        expect = np.zeros((n, NUM_TOKENS))
        for v in range(NUM_TOKENS):
            vs = Sequence(np.full(n, v, dtype=np.int64))
            expect += p0[:, v : v + 1] * posterior(st, vs, t, s).p
        expect /= expect.sum(axis=1, keepdims=True)
        assert np.max(np.abs(out - expect)) < 1e-12


def test_reverse_step_with_exact_posterior_recovers_marginal_kernel():
    # feeding the true q(S_0 | S_t) reproduces q(S_{t-1} | S_t) exactly
    s = make_uniform_schedule(5)
    rng = np.random.default_rng(13)
    s0_dist = rng.dirichlet(np.ones(NUM_TOKENS))  # synthetic prior over S_0
    t = 4
    st = _random_seq(6, rng)
    # q(v | S_t) by Bayes over the synthetic prior
    lik = s.Qbar[t][:, st.indices].T  # [n, v]
    post_v = lik * s0_dist
    post_v /= post_v.sum(axis=1, keepdims=True)
    out = reverse_step(post_v, st, t, s).p
    # oracle: q(S_{t-1} | S_t) = sum_v q(S_{t-1} | S_t, v) q(v | S_t)
    joint_prev = (s0_dist[:, None] * s.Qbar[t - 1]).sum(axis=0)  # marginal at t-1
    num = s.Q[t - 1].T[st.indices] * joint_prev  # [n, w]
    expect = num / num.sum(axis=1, keepdims=True)
    assert np.max(np.abs(out - expect)) < 1e-12


# ---------------------------------------------------------------------------
# hybrid loss


def test_hybrid_loss_zero_for_perfect_prediction():
    s = make_uniform_schedule(8)
    rng = np.random.default_rng(14)
    s0 = _random_seq(9, rng)
    st = forward_sample(s0, 5, s, rng).s_t
    loss = hybrid_loss(s0.one_hot(), s0, st, 5, s, lam=0.3)
    assert abs(loss) < 1e-12


def test_hybrid_loss_lambda_zero_is_pure_kl():
    s = make_uniform_schedule(8)
    rng = np.random.default_rng(15)
    s0 = _random_seq(9, rng)
    st = _random_seq(9, rng)
    p0 = rng.dirichlet(np.ones(NUM_TOKENS), size=9)
    loss = hybrid_loss(p0, s0, st, 4, s, lam=0.0)
    # direct KL enumeration oracle
    post = posterior(st, s0, 4, s).p
    q = reverse_step(p0, st, 4, s).p
    kl = np.where(post > 0, post * (np.log(post) - np.log(q)), 0.0).sum(axis=1)
    assert abs(loss - kl.mean()) < 1e-10


def test_hybrid_loss_kl_term_matches_enumeration_with_ce():
    s = make_uniform_schedule(8)
    rng = np.random.default_rng(16)
    s0 = _random_seq(9, rng)
    st = _random_seq(9, rng)
    p0 = rng.dirichlet(np.ones(NUM_TOKENS), size=9)
    lam = 0.37
    loss = hybrid_loss(p0, s0, st, 6, s, lam=lam)
    post = posterior(st, s0, 6, s).p
    q = reverse_step(p0, st, 6, s).p
    kl = np.where(post > 0, post * (np.log(post) - np.log(q)), 0.0).sum(axis=1)
    ce = -np.log(p0[np.arange(9), s0.indices])
    assert abs(loss - (kl + lam * ce).mean()) < 1e-10


def test_hybrid_loss_t1_is_nll_of_clean_tokens():
    s = make_uniform_schedule(8)
    rng = np.random.default_rng(17)
    s0 = _random_seq(9, rng)
    st = _random_seq(9, rng)
    p0 = rng.dirichlet(np.ones(NUM_TOKENS), size=9)
    loss = hybrid_loss(p0, s0, st, 1, s, lam=0.0)
    # at t=1 the reverse mixes through identity coefficients: q = p0
    expect = -np.log(p0[np.arange(9), s0.indices]).mean()
    assert abs(loss - expect) < 1e-12


def test_hybrid_loss_tape_matches_numeric():
    s = make_uniform_schedule(8)
    rng = np.random.default_rng(18)
    s0 = _random_seq(7, rng)
    st = _random_seq(7, rng)
    logits = rng.normal(size=(7, NUM_TOKENS))
    for t in (1, 5):
        tape = ad.Tape()
        p0 = ad.softmax(tape.param("logits", logits))
        loss_t = hybrid_loss(p0, s0, st, t, s, lam=0.01)
        numeric = hybrid_loss(p0.data, s0, st, t, s, lam=0.01)
        assert abs(float(loss_t.data[0, 0]) - numeric) < 1e-12


def test_hybrid_loss_gradcheck():
    s = make_uniform_schedule(6)
    rng = np.random.default_rng(19)
    s0 = _random_seq(5, rng)
    st = _random_seq(5, rng)
    logits = rng.normal(size=(5, NUM_TOKENS)) * 0.5

    for t in (1, 4):
        def build(p, t=t):
            return hybrid_loss(ad.softmax(p["logits"]), s0, st, t, s, lam=0.05)

        check_gradients(build, {"logits": logits.copy()}, tol=1e-5)


def test_schedule_spec_round_trip():
    s1 = make_uniform_schedule(12, s=0.01)
    s2 = schedule_from_spec(s1.spec)
    assert np.array_equal(s1.Qbar, s2.Qbar)
    s3 = make_uniform_schedule(4, np.array([0.1, 0.2, 0.3, 0.4]))
    s4 = schedule_from_spec(s3.spec)
    assert np.array_equal(s3.Q, s4.Q)


def test_sampling_determinism():
    s = make_uniform_schedule(16)
    seq = _random_seq(20, np.random.default_rng(20))
    a = forward_sample(seq, 9, s, np.random.default_rng(42)).s_t
    b = forward_sample(seq, 9, s, np.random.default_rng(42)).s_t
    assert np.array_equal(a.indices, b.indices)
