"""Discrete denoising diffusion over the amino-acid vocabulary.

Uniform transition kernels: Q_t = (1 - beta_t) I + (beta_t / K) 11^T, with
cumulative products Qbar_t and a uniform stationary distribution. The
reverse step marginalizes a model's distribution over the clean sequence
against the exact per-state posteriors.

All probability algebra runs in float64. Uniform kernels keep every
matrix entry bounded below by beta/K, so underflow guards only trigger on
degenerate (zero-mixing) schedules.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .core import NUM_TOKENS, CategoricalDist, Sequence
from . import autodiff as ad


class InvalidBeta(ValueError):
    """A per-step rate outside [0, 1]."""


class StepOutOfRange(ValueError):
    """Timestep outside [1, T]."""


class ZeroSupportPosterior(ValueError):
    """Posterior normalizer underflowed: the (S_t, S_0) pair is impossible."""


def cosine_betas(T: int, s: float = 0.008) -> np.ndarray:
    """Per-step rates whose cumulative retention follows the squared-cosine curve.

    retention(t) = cos^2(((t/T + s) / (1 + s)) * pi/2), normalized to 1 at
    t = 0; beta_t = 1 - retention(t)/retention(t-1).
    """
    steps = np.arange(T + 1, dtype=np.float64) / T
    f = np.cos((steps + s) / (1.0 + s) * np.pi / 2.0) ** 2
    return 1.0 - f[1:] / f[:-1]


@dataclass(frozen=True)
class TransitionSchedule:
    """Forward-process kernels Q_1..Q_T with cumulative products.

    Q has shape [T, K, K] (Q[t-1] is the step-t kernel); Qbar has shape
    [T+1, K, K] with Qbar[0] = I. `spec` records how the schedule was
    built so checkpoints can reproduce it exactly.
    """

    T: int
    betas: np.ndarray
    Q: np.ndarray
    Qbar: np.ndarray
    stationary: np.ndarray  # [K], uniform
    num_classes: int = NUM_TOKENS
    spec: dict = field(default_factory=dict)
    _reverse_cache: dict = field(default_factory=dict, repr=False, compare=False)

    def __post_init__(self):
        for name, mats in (("Q", self.Q), ("Qbar", self.Qbar)):
            if np.any(mats < -1e-15):
                raise ValueError(f"{name} has negative entries")
            rowsum = mats.sum(axis=2)
            if np.max(np.abs(rowsum - 1.0)) > 1e-12:
                raise ValueError(f"{name} rows must sum to 1 within 1e-12")

    def check_step(self, t: int):
        if not 1 <= t <= self.T:
            raise StepOutOfRange(f"t={t} outside [1, {self.T}]")

    def reverse_coeffs(self, t: int) -> np.ndarray:
        """Posterior rows for every (S_t, S_0) pair at step t.

        Returns P with shape [K, K, K]: P[st, v, :] is the distribution of
        S_{t-1} given S_t = st and S_0 = v. Rows with zero-support
        (st, v) pairs are all-zero.
        """
        self.check_step(t)
        if t not in self._reverse_cache:
            qt = self.Q[t - 1]
            qbar_prev = self.Qbar[t - 1]
            qbar_t = self.Qbar[t]
            with np.errstate(divide="ignore", invalid="ignore"):
                p = qt.T[:, None, :] * qbar_prev[None, :, :] / qbar_t.T[:, :, None]
            self._reverse_cache[t] = np.nan_to_num(p, nan=0.0, posinf=0.0)
        return self._reverse_cache[t]


@dataclass(frozen=True)
class NoisySample:
    """A corrupted sequence at a forward step."""

    s_t: Sequence
    t: int

    def __post_init__(self):
        if self.t < 1:
            raise StepOutOfRange(f"t={self.t} must be >= 1")


def make_uniform_schedule(
    T: int,
    betas="cosine",
    s: float = 0.008,
    num_classes: int = NUM_TOKENS,
) -> TransitionSchedule:
    """Build a uniform-kernel schedule.

    `betas` is either the name "cosine" (default, cumulative-retention
    cosine curve with offset `s`) or an explicit array of T rates in [0, 1].
    """
    if T < 1:
        raise ValueError(f"T must be >= 1, got {T}")
    if isinstance(betas, str):
        if betas != "cosine":
            raise ValueError(f"unknown beta schedule {betas!r}")
        beta = cosine_betas(T, s)
        spec = {"name": "cosine", "T": T, "s": s, "num_classes": num_classes}
    else:
        beta = np.asarray(betas, dtype=np.float64)
        if beta.shape != (T,):
            raise InvalidBeta(f"need {T} rates, got shape {beta.shape}")
        spec = {"name": "explicit", "T": T, "betas": beta.tolist(), "num_classes": num_classes}
    if np.any(beta < 0) or np.any(beta > 1):
        raise InvalidBeta("rates must lie in [0, 1]")

    k = num_classes
    eye = np.eye(k)
    ones = np.full((k, k), 1.0 / k)
    Q = (1.0 - beta)[:, None, None] * eye + beta[:, None, None] * ones
    Qbar = np.empty((T + 1, k, k))
    Qbar[0] = eye
    for t in range(1, T + 1):
        Qbar[t] = Qbar[t - 1] @ Q[t - 1]
    return TransitionSchedule(
        T=T, betas=beta, Q=Q, Qbar=Qbar,
        stationary=np.full(k, 1.0 / k), num_classes=k, spec=spec,
    )


def schedule_from_spec(spec: dict) -> TransitionSchedule:
    """Rebuild a schedule from its serialized spec (exact resumability)."""
    if spec["name"] == "cosine":
        return make_uniform_schedule(spec["T"], "cosine", s=spec["s"],
                                     num_classes=spec.get("num_classes", NUM_TOKENS))
    return make_uniform_schedule(spec["T"], np.asarray(spec["betas"]),
                                 num_classes=spec.get("num_classes", NUM_TOKENS))


def forward_marginal(s0: Sequence, t: int, schedule: TransitionSchedule) -> CategoricalDist:
    """q(S_t | S_0): per-residue rows of Qbar_t selected by the clean tokens."""
    schedule.check_step(t)
    return CategoricalDist(schedule.Qbar[t][s0.indices])


def sample_categorical_rows(p: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """Draw one index per row of a row-stochastic matrix."""
    cum = np.cumsum(p, axis=1)
    u = rng.random(p.shape[0])
    idx = (u[:, None] > cum).sum(axis=1)
    return np.minimum(idx, p.shape[1] - 1).astype(np.int64)


def forward_sample(
    s0: Sequence, t: int, schedule: TransitionSchedule, rng: np.random.Generator
) -> NoisySample:
    """Draw S_t ~ q(S_t | S_0), independently per residue."""
    marginal = forward_marginal(s0, t, schedule)
    return NoisySample(Sequence(sample_categorical_rows(marginal.p, rng)), t)


def posterior(
    s_t: Sequence, s0: Sequence, t: int, schedule: TransitionSchedule
) -> CategoricalDist:
    """Exact forward posterior q(S_{t-1} | S_t, S_0), per residue."""
    schedule.check_step(t)
    st_idx, s0_idx = s_t.indices, s0.indices
    if st_idx.shape != s0_idx.shape:
        raise ValueError(f"length mismatch {st_idx.shape} vs {s0_idx.shape}")
    qt = schedule.Q[t - 1]
    num = qt.T[st_idx] * schedule.Qbar[t - 1][s0_idx]  # [N, K]
    denom = schedule.Qbar[t][s0_idx, st_idx]  # [N]
    if np.any(denom < 1e-300):
        raise ZeroSupportPosterior(f"impossible (S_t, S_0) pair at t={t}")
    return CategoricalDist(num / denom[:, None])


def reverse_step(
    p0_hat, s_t: Sequence, t: int, schedule: TransitionSchedule
) -> CategoricalDist:
    """Model-marginalized reverse kernel p(S_{t-1} | S_t).

    Mixes the exact per-state posteriors over the vocabulary with the
    model's clean-sequence distribution and renormalizes each row.
    """
    p = p0_hat.p if isinstance(p0_hat, CategoricalDist) else np.asarray(p0_hat, dtype=np.float64)
    coeffs = schedule.reverse_coeffs(t)[s_t.indices]  # [N, K(v), K(w)]
    out = np.einsum("nv,nvw->nw", p, coeffs)
    norms = out.sum(axis=1, keepdims=True)
    if np.any(norms < 1e-300):
        raise ZeroSupportPosterior(f"reverse step has zero support at t={t}")
    return CategoricalDist(out / norms)


def _rowsum(t: "ad.Tensor") -> "ad.Tensor":
    ones = np.ones((t.data.shape[1], 1))
    return ad.matmul(t, t.tape.const(ones))


def _xlogx_rowsum(w: np.ndarray) -> np.ndarray:
    """Row sums of w * log w with 0 log 0 = 0."""
    with np.errstate(divide="ignore", invalid="ignore"):
        term = np.where(w > 0, w * np.log(np.where(w > 0, w, 1.0)), 0.0)
    return term.sum(axis=1)


def hybrid_loss_targets(
    s0_idx: np.ndarray, st_idx: np.ndarray, t_rows: np.ndarray, schedule: TransitionSchedule
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Per-residue constants for the hybrid loss.

    Returns (W, c, P): target weight rows W [N, K], entropy offsets c [N]
    and mixing coefficients P [N, K, K] such that the divergence part of
    the loss at each residue is  c - sum_w W[w] * log(q[w])  with
    q = p0_hat row-mixed through P. For t = 1 rows, W is the one-hot clean
    token and c = 0, which turns the term into -log p(S_0 | S_1).
    """
    n = s0_idx.shape[0]
    k = schedule.num_classes
    W = np.empty((n, k))
    c = np.zeros(n)
    P = np.empty((n, k, k))
    for t in np.unique(t_rows):
        rows = np.flatnonzero(t_rows == t)
        P[rows] = schedule.reverse_coeffs(int(t))[st_idx[rows]]
        if t == 1:
            W[rows] = 0.0
            W[rows, s0_idx[rows]] = 1.0
        else:
            post = posterior(
                Sequence(st_idx[rows]), Sequence(s0_idx[rows]), int(t), schedule
            ).p
            W[rows] = post
            c[rows] = _xlogx_rowsum(post)
    return W, c, P


def hybrid_loss_rows(
    p0_hat: "ad.Tensor",
    s0_idx: np.ndarray,
    st_idx: np.ndarray,
    t_rows: np.ndarray,
    schedule: TransitionSchedule,
    lam: float,
) -> "ad.Tensor":
    """Per-residue hybrid-loss column [N, 1] on the tape.

    p0_hat must be strictly positive (a softmax output); the divergence
    term is KL(posterior || reverse) except at t = 1 rows where it is the
    negative log-likelihood of the clean token.
    """
    W, c, P = hybrid_loss_targets(s0_idx, st_idx, t_rows, schedule)
    tape = p0_hat.tape
    q = ad.rows_matmul(p0_hat, P)
    div_col = ad.add(
        ad.scale(_rowsum(ad.multiply(ad.log(q), tape.const(W))), -1.0),
        tape.const(c[:, None]),
    )
    onehot = np.zeros_like(W)
    onehot[np.arange(len(s0_idx)), s0_idx] = 1.0
    ce_col = ad.scale(_rowsum(ad.multiply(ad.log(p0_hat), tape.const(onehot))), -1.0)
    return ad.add(div_col, ad.scale(ce_col, lam))


def hybrid_loss(p0_hat, s0: Sequence, s_t: Sequence, t: int, schedule: TransitionSchedule,
                lam: float = 0.01):
    """Mean-over-residues hybrid diffusion loss for one structure.

    KL(q(S_{t-1}|S_t,S_0) || p(S_{t-1}|S_t)) + lam * CE(p0_hat, S_0), with
    the KL replaced by -log p(S_0|S_1) at t = 1. Given a tape Tensor this
    returns a gradient-ready scalar Tensor; given probabilities (array or
    CategoricalDist) it returns a float.
    """
    if lam < 0:
        raise ValueError(f"lam must be >= 0, got {lam}")
    schedule.check_step(t)
    t_rows = np.full(len(s0), t, dtype=np.int64)
    if isinstance(p0_hat, ad.Tensor):
        if p0_hat.data.min() <= 0:
            raise ValueError("tape-mode hybrid loss needs strictly positive p0_hat")
        col = hybrid_loss_rows(p0_hat, s0.indices, s_t.indices, t_rows, schedule, lam)
        return ad.mean(col)

    p = p0_hat.p if isinstance(p0_hat, CategoricalDist) else np.asarray(p0_hat, dtype=np.float64)
    W, c, P = hybrid_loss_targets(s0.indices, s_t.indices, t_rows, schedule)
    q = np.einsum("nv,nvw->nw", p, P)
    with np.errstate(divide="ignore", invalid="ignore"):
        logq = np.where(W > 0, np.log(q), 0.0)
    div = c - (W * logq).sum(axis=1)
    chosen = p[np.arange(len(s0)), s0.indices]
    with np.errstate(divide="ignore"):
        ce = -np.log(chosen)
    return float(np.mean(div + lam * ce))
