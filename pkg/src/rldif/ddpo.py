"""Policy-gradient fine-tuning of a pretrained denoiser.

The reverse denoising chain is treated as a T-step decision process: roll
out designs under frozen parameters, score each design's structural
self-consistency, standardize rewards within the samples of one
structure, and ascend a clipped importance-weighted surrogate of the
expected reward. Per-residue importance ratios are clipped to
[1 - eps, 1 + eps]; with one inner epoch the ratios are exactly 1 and the
update reduces to REINFORCE on standardized advantages.

Timestep subsampling (`timestep_subsample`) bounds update memory by
drawing a uniform subset of the T transitions and rescaling by
T / |subset|, which keeps the gradient unbiased.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import AdamState, Tape, adam_step, backward
from .core import Sequence
from .d3pm import TransitionSchedule
from .denoiser import Denoiser, EmptyDataset, encode_graph, reverse_diffusion, trunk_logits
from .featurize import ResidueGraph, build_features, merge_graphs
from .folding import FoldError
from .metrics import sc_tm


class GroupTooSmall(ValueError):
    """Reward standardization needs at least two samples per structure."""


@dataclass
class DDPOConfig:
    """Fine-tuning hyperparameters (paper-scale defaults)."""

    structures_per_step: int = 32
    samples_per_structure: int = 4
    clip_eps: float = 0.2
    learning_rate: float = 1e-5
    total_steps: int = 1000
    inner_epochs: int = 1
    timestep_subsample: int = 0  # 0 = use all T transitions
    seed: int = 0
    minibatch_size: int = 32  # trajectories per gradient step
    update_chunk: int = 4  # timesteps per gradient-accumulation chunk
    fold_error_budget: float = 0.5  # abort a step beyond this failure fraction
    ratio_guard_nats: float = 50.0
    fold_workers: int = 1

    def __post_init__(self):
        if not 0.0 < self.clip_eps < 1.0:
            raise ValueError(f"clip_eps must be in (0, 1), got {self.clip_eps}")
        if min(self.structures_per_step, self.samples_per_structure,
               self.total_steps, self.inner_epochs, self.minibatch_size,
               self.update_chunk, self.fold_workers) < 1:
            raise ValueError("counts must be positive")
        if self.samples_per_structure < 2:
            raise ValueError("need >= 2 samples per structure to standardize rewards")


@dataclass
class Trajectory:
    """One reverse-diffusion rollout with frozen-policy log-probabilities.

    states[0] is S_T and states[-1] is the design S_0; logps[i] holds the
    per-residue log-probability of the transition states[i] -> states[i+1]
    at timestep timesteps[i] under the sampling policy.
    """

    structure_id: str
    states: list[np.ndarray]
    logps: list[np.ndarray]
    timesteps: list[int]

    @property
    def design(self) -> Sequence:
        return Sequence(self.states[-1])


@dataclass(frozen=True)
class RewardBatch:
    """Per-structure reward groups and their standardized advantages."""

    structure_ids: tuple
    raw: np.ndarray  # [groups, samples]
    advantages: np.ndarray  # same shape


@dataclass
class StepStats:
    step: int
    mean_reward: float
    std_reward: float
    clip_fraction: float
    skipped_trajectories: int
    step_skipped: bool = False


@dataclass
class RLResult:
    model: Denoiser
    history: list[StepStats] = field(default_factory=list)

    @property
    def mean_rewards(self) -> list[float]:
        return [row.mean_reward for row in self.history]


def rollout(
    model: Denoiser,
    entries: list,
    graphs: dict[str, ResidueGraph],
    schedule: TransitionSchedule,
    rng: np.random.Generator,
    samples_per_structure: int,
) -> list[Trajectory]:
    """Sample reverse-diffusion trajectories under frozen parameters.

    All structures and samples advance through the chain together as one
    disjoint-union graph; every per-step chosen-token log-probability is
    recorded so the update can form importance ratios later.
    """
    replicas = [graphs[e.id] for e in entries for _ in range(samples_per_structure)]
    ids = [e.id for e in entries for _ in range(samples_per_structure)]
    merged, member = merge_graphs(replicas)
    _, states, logps, timesteps = reverse_diffusion(model, merged, schedule, rng, record=True)
    bounds = np.cumsum([0] + [g.n_nodes for g in replicas])
    out = []
    for r, sid in enumerate(ids):
        lo, hi = bounds[r], bounds[r + 1]
        out.append(
            Trajectory(
                structure_id=sid,
                states=[s[lo:hi] for s in states],
                logps=[lp[lo:hi] for lp in logps],
                timesteps=list(timesteps),
            )
        )
    return out


def replay_logps(
    model: Denoiser, graph: ResidueGraph, traj: Trajectory, schedule: TransitionSchedule
) -> list[np.ndarray]:
    """Recompute the chosen-token log-probs of a stored trajectory.

    Runs the same kernels as the rollout, so under the sampling parameters
    the replay reproduces the stored values bitwise.
    """
    from .d3pm import reverse_step

    tape = Tape(grad=False)
    tp = tape.lift(model.params)
    hv, he = encode_graph(tape, tp, graph)
    n = graph.n_nodes
    out = []
    for i, t in enumerate(traj.timesteps):
        st = traj.states[i]
        t_rows = np.full(n, t, dtype=np.int64)
        logits = trunk_logits(tape, tp, model.config, graph, hv, he, st, t_rows)
        z = logits.data - logits.data.max(axis=1, keepdims=True)
        e = np.exp(z)
        p0 = e / e.sum(axis=1, keepdims=True)
        q = reverse_step(p0, Sequence(st), t, schedule).p
        out.append(np.log(q[np.arange(n), traj.states[i + 1]]))
    return out


def standardize_rewards(raw, eps: float = 1e-8) -> np.ndarray:
    """(r - mean) / (population std + eps); all-equal groups map to zeros."""
    r = np.asarray(raw, dtype=np.float64)
    if r.size < 2:
        raise GroupTooSmall(f"need >= 2 rewards, got {r.size}")
    return (r - r.mean()) / (r.std() + eps)


def _chosen_coeffs(schedule: TransitionSchedule, t: int, st: np.ndarray, chosen: np.ndarray):
    """Rows C with C[n, v] = P_t[st[n], v, chosen[n]] (constants w.r.t. theta)."""
    return schedule.reverse_coeffs(t)[st, :, chosen]


def _surrogate_rows(
    tp: dict,
    model_config,
    graph: ResidueGraph,
    st: np.ndarray,
    t_rows: np.ndarray,
    coeffs: np.ndarray,
    logp_old: np.ndarray,
    adv: np.ndarray,
    eps: float,
):
    """Per-residue clipped surrogate column and the ratio tensor."""
    tape = next(iter(tp.values())).tape
    hv, he = encode_graph(tape, tp, graph)
    logits = trunk_logits(tape, tp, model_config, graph, hv, he, st, t_rows)
    p0 = ad.softmax(logits)
    chosen_p = ad.matmul(
        ad.multiply(p0, tape.const(coeffs)), tape.const(np.ones((coeffs.shape[1], 1)))
    )
    logp = ad.log(chosen_p)
    ratio = ad.exp(ad.add(logp, tape.const(-logp_old[:, None])))
    adv_col = tape.const(adv[:, None])
    surr = ad.minimum(
        ad.multiply(ratio, adv_col),
        ad.multiply(ad.clip(ratio, 1.0 - eps, 1.0 + eps), adv_col),
    )
    return surr, ratio


def _replica_arrays(
    trajs: list[Trajectory],
    graphs: dict[str, ResidueGraph],
    advantages: dict[int, float],
    subset: list[int],
    schedule: TransitionSchedule,
):
    """Stack (trajectory x timestep) replicas into one disjoint-union batch.

    Returns the merged graph plus per-row state, timestep, posterior
    coefficient, stored log-prob, and advantage arrays, and a per-row
    trajectory index for bookkeeping.
    """
    replicas, st, t_rows, coeffs, old, adv, traj_rows = [], [], [], [], [], [], []
    for k, traj in enumerate(trajs):
        graph = graphs[traj.structure_id]
        n = graph.n_nodes
        index_of = {t: i for i, t in enumerate(traj.timesteps)}
        for t in subset:
            i = index_of[t]
            replicas.append(graph)
            st.append(traj.states[i])
            t_rows.append(np.full(n, t, dtype=np.int64))
            coeffs.append(_chosen_coeffs(schedule, t, traj.states[i], traj.states[i + 1]))
            old.append(traj.logps[i])
            adv.append(np.full(n, advantages[k]))
            traj_rows.append(np.full(n, k, dtype=np.int64))
    merged, _ = merge_graphs(replicas)
    return (
        merged,
        np.concatenate(st),
        np.concatenate(t_rows),
        np.concatenate(coeffs),
        np.concatenate(old),
        np.concatenate(adv),
        np.concatenate(traj_rows),
    )


def clipped_pg_loss(
    model: Denoiser,
    graph: ResidueGraph,
    traj: Trajectory,
    advantage: float,
    schedule: TransitionSchedule,
    eps: float,
    timestep_subset: list[int] | None = None,
) -> "ad.Tensor":
    """Clipped policy-gradient loss for one trajectory (gradient-ready).

    -sum over the chosen timesteps and residues of
    min(r * A, clip(r, 1-eps, 1+eps) * A) with per-residue ratios
    r = exp(logp_theta - logp_old), rescaled by T / |subset| when
    subsampling.
    """
    T = len(traj.timesteps)
    subset = sorted(set(timestep_subset or traj.timesteps), reverse=True)
    gap = max(np.max(np.abs(lp)) for lp in traj.logps if lp.size)
    if not np.isfinite(gap):
        raise ValueError("trajectory carries non-finite log-probs")
    tape = Tape()
    tp = tape.lift(model.params)
    merged, st, t_rows, coeffs, old, adv, _ = _replica_arrays(
        [traj], {traj.structure_id: graph}, {0: advantage}, subset, schedule
    )
    surr, _ = _surrogate_rows(tp, model.config, merged, st, t_rows, coeffs, old, adv, eps)
    return ad.scale(ad.tsum(surr), -(T / len(subset)))


def _update_minibatch(
    model: Denoiser,
    trajs: list[Trajectory],
    graphs: dict[str, ResidueGraph],
    advantages: dict[int, float],
    subset: list[int],
    schedule: TransitionSchedule,
    config: DDPOConfig,
    state: AdamState,
) -> tuple[float, int]:
    """One Adam update over a trajectory minibatch.

    Timesteps are processed in chunks with gradient accumulation so update
    memory stays bounded. Trajectories whose recomputed log-probs drift
    more than ratio_guard_nats from the stored ones are dropped (from the
    chunk where the drift is detected onward) and counted.

    Returns (clip fraction, number of skipped trajectories).
    """
    T = len(trajs[0].timesteps)
    scale_factor = (T / len(subset)) / len(trajs)
    grad_total: dict[str, np.ndarray] = {}
    clipped = 0
    rows = 0
    skipped: set[int] = set()
    for start in range(0, len(subset), config.update_chunk):
        chunk = subset[start : start + config.update_chunk]
        keep = [k for k in range(len(trajs)) if k not in skipped]
        if not keep:
            break
        while True:
            batch_trajs = [trajs[k] for k in keep]
            batch_adv = {i: advantages[k] for i, k in enumerate(keep)}
            tape = Tape()
            tp = tape.lift(model.params)
            merged, st, t_rows, coeffs, old, adv, traj_rows = _replica_arrays(
                batch_trajs, graphs, batch_adv, chunk, schedule
            )
            surr, ratio = _surrogate_rows(
                tp, model.config, merged, st, t_rows, coeffs, old, adv, config.clip_eps
            )
            drift = np.abs(np.log(np.maximum(ratio.data[:, 0], 1e-300)))
            bad_rows = drift > config.ratio_guard_nats
            if not np.any(bad_rows):
                break
            for i in np.unique(traj_rows[bad_rows]):
                skipped.add(keep[int(i)])
            keep = [k for k in range(len(trajs)) if k not in skipped]
            if not keep:
                surr = None
                break
        if surr is None:
            break
        loss = ad.scale(ad.tsum(surr), -scale_factor)
        grads = backward(loss)
        for name, g in grads.items():
            if name in grad_total:
                grad_total[name] += g
            else:
                grad_total[name] = g
        clipped += int(np.sum(np.abs(ratio.data - 1.0) > config.clip_eps))
        rows += ratio.data.shape[0]
    if grad_total:
        adam_step(model.params, grad_total, state, lr=config.learning_rate)
    clip_fraction = clipped / rows if rows else 0.0
    return clip_fraction, len(skipped)


def _score_designs(trajs, entries_by_id, oracle, workers: int):
    """sc-TM rewards for each trajectory's design; NaN marks fold failures."""

    def score(traj):
        try:
            return sc_tm(traj.design, entries_by_id[traj.structure_id].sequence, oracle)
        except FoldError:
            return float("nan")

    if workers > 1:
        from concurrent.futures import ThreadPoolExecutor

        with ThreadPoolExecutor(max_workers=workers) as pool:
            return np.array(list(pool.map(score, trajs)))
    return np.array([score(t) for t in trajs])


def rl_train(
    model: Denoiser,
    dataset: list,
    config: DDPOConfig,
    oracle,
    schedule: TransitionSchedule,
    checkpoint_dir=None,
    checkpoint_interval: int = 0,
    log_every: int = 0,
) -> RLResult:
    """DDPO fine-tuning loop.

    Per outer step: draw structures, roll out samples_per_structure
    designs each under the current (frozen) policy, fold and score them,
    standardize rewards within each structure's group, then run
    inner-epoch minibatch updates of the clipped surrogate. A step whose
    fold-failure fraction exceeds the budget is skipped, not fatal.
    """
    train = [e for e in dataset if e.split == "train"]
    if not train:
        raise EmptyDataset("no training entries")
    entries_by_id = {e.id: e for e in train}
    graphs = {e.id: build_features(e.backbone, model.config.k) for e in train}
    rng = np.random.default_rng(config.seed)
    model = model.copy()
    state = AdamState()
    result = RLResult(model=model)
    m = config.samples_per_structure

    for step in range(config.total_steps):
        n_pick = min(config.structures_per_step, len(train))
        batch = [train[i] for i in rng.choice(len(train), size=n_pick, replace=False)]
        trajs = rollout(model, batch, graphs, schedule, rng, m)
        rewards = _score_designs(trajs, entries_by_id, oracle, config.fold_workers)

        fail_fraction = float(np.mean(~np.isfinite(rewards)))
        if fail_fraction > config.fold_error_budget:
            result.history.append(
                StepStats(step, float("nan"), float("nan"), 0.0, len(trajs), True)
            )
            continue

        groups = rewards.reshape(n_pick, m)
        advantages: dict[int, float] = {}
        usable: list[int] = []
        for g in range(n_pick):
            valid = np.isfinite(groups[g])
            if valid.sum() < 2:
                continue
            adv = np.zeros(m)
            adv[valid] = standardize_rewards(groups[g][valid])
            for j in np.flatnonzero(valid):
                k = g * m + j
                advantages[k] = float(adv[j])
                usable.append(k)

        T = schedule.T
        if config.timestep_subsample and config.timestep_subsample < T:
            subset = sorted(
                rng.choice(np.arange(1, T + 1), size=config.timestep_subsample, replace=False),
                reverse=True,
            )
            subset = [int(t) for t in subset]
        else:
            subset = list(range(T, 0, -1))

        clip_fracs: list[float] = []
        skipped = 0
        for _ in range(config.inner_epochs):
            order = rng.permutation(len(usable))
            for lo in range(0, len(usable), config.minibatch_size):
                chosen = [usable[i] for i in order[lo : lo + config.minibatch_size]]
                if not chosen:
                    continue
                cf, sk = _update_minibatch(
                    model,
                    [trajs[k] for k in chosen],
                    graphs,
                    {i: advantages[k] for i, k in enumerate(chosen)},
                    subset,
                    schedule,
                    config,
                    state,
                )
                clip_fracs.append(cf)
                skipped += sk

        valid_r = rewards[np.isfinite(rewards)]
        result.history.append(
            StepStats(
                step=step,
                mean_reward=float(valid_r.mean()),
                std_reward=float(valid_r.std()),
                clip_fraction=float(np.mean(clip_fracs)) if clip_fracs else 0.0,
                skipped_trajectories=skipped,
            )
        )
        if log_every and (step + 1) % log_every == 0:
            print(f"rl step {step}: mean reward {result.history[-1].mean_reward:.4f}")
        if checkpoint_dir and checkpoint_interval and (step + 1) % checkpoint_interval == 0:
            model.save(Path(checkpoint_dir) / f"rl_step{step + 1:05d}.ckpt", schedule)
    if checkpoint_dir:
        model.save(Path(checkpoint_dir) / "rl_final.ckpt", schedule)
    return result


def write_history_csv(path, history: list[StepStats]):
    """Reward/loss history with the declared column schema."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(
            ["step", "mean_reward", "std_reward", "clip_fraction", "skipped_trajectories"]
        )
        for row in history:
            writer.writerow(
                [row.step, row.mean_reward, row.std_reward,
                 row.clip_fraction, row.skipped_trajectories]
            )
