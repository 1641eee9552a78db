"""Structure-conditioned denoising network and its pretraining loop.

Dataflow per forward pass: node/edge features go through encoder MLPs, the
noised sequence and timestep embed through a third MLP, the concatenated
node state runs through L message-passing layers (message MLP over
[h_i, h_j, e_ij], residual+LayerNorm node update on the mean incoming
message, residual+LayerNorm edge update conditioned on the updated node
states), and a final MLP over [h_out, h_in] yields per-residue logits over
the 20 tokens.

Width convention: the sequence/time embedding and the node-feature
encoding each get hidden//2 channels so their concatenation runs the
message-passing trunk at exactly `hidden` channels.

The output head is zero-initialized, so an untrained model predicts the
uniform distribution exactly; remaining weights are truncated-normal
(std 0.02, clipped at two sigma).
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, asdict
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import AdamState, Tape, adam_step, backward, load_checkpoint, save_checkpoint
from .core import NUM_TOKENS, CategoricalDist, DatasetEntry, Sequence
from .d3pm import (
    TransitionSchedule,
    forward_sample,
    hybrid_loss_rows,
    make_uniform_schedule,
    reverse_step,
    sample_categorical_rows,
    schedule_from_spec,
)
from .featurize import EDGE_FEATURE_DIM, NODE_FEATURE_DIM, ResidueGraph, build_features, merge_graphs

T_EMBED_DIM = 17  # 8 sin/cos pairs of t/T plus the raw scalar


class EmptyDataset(ValueError):
    pass


@dataclass
class DenoiserConfig:
    """Network and pretraining hyperparameters (desk-scale defaults)."""

    layers: int = 3
    hidden: int = 64
    k: int = 30
    T: int = 150
    lam: float = 0.01
    learning_rate: float = 1e-3
    batch_size: int = 16
    epochs: int = 30
    seed: int = 0

    def __post_init__(self):
        if self.hidden % 2:
            raise ValueError("hidden width must be even")
        if min(self.layers, self.hidden, self.k, self.T, self.batch_size, self.epochs) < 1:
            raise ValueError("all extents must be positive")

    @classmethod
    def paper_scale(cls, **overrides) -> "DenoiserConfig":
        """Full-scale settings: 10 layers, hidden 128, 150 steps, 200 epochs."""
        base = dict(layers=10, hidden=128, k=30, T=150, lam=0.01,
                    learning_rate=1e-3, batch_size=64, epochs=200)
        base.update(overrides)
        return cls(**base)


def _trunc_normal(rng, shape, std=0.02):
    return np.clip(rng.normal(0.0, std, shape), -2 * std, 2 * std)


def init_params(config: DenoiserConfig, rng: np.random.Generator) -> dict[str, np.ndarray]:
    """Parameter dict; all arrays 2-D (biases as [1, D] rows)."""
    h = config.hidden
    enc = h // 2
    p: dict[str, np.ndarray] = {}

    def mlp(prefix, d_in, d_hidden, d_out, zero_out=False):
        p[f"{prefix}.w1"] = _trunc_normal(rng, (d_in, d_hidden))
        p[f"{prefix}.b1"] = np.zeros((1, d_hidden))
        if zero_out:
            p[f"{prefix}.w2"] = np.zeros((d_hidden, d_out))
        else:
            p[f"{prefix}.w2"] = _trunc_normal(rng, (d_hidden, d_out))
        p[f"{prefix}.b2"] = np.zeros((1, d_out))

    def ln(prefix, d):
        p[f"{prefix}.g"] = np.ones((1, d))
        p[f"{prefix}.b"] = np.zeros((1, d))

    # encoder outputs are LayerNorm-ed so the geometry, sequence, and edge
    # streams enter the trunk at comparable scale
    mlp("node_enc", NODE_FEATURE_DIM, enc, enc)
    ln("node_enc_ln", enc)
    mlp("seq_enc", NUM_TOKENS + T_EMBED_DIM, enc, enc)
    ln("seq_enc_ln", enc)
    mlp("edge_enc", EDGE_FEATURE_DIM, h, h)
    ln("edge_enc_ln", h)
    for i in range(config.layers):
        mlp(f"layers.{i}.msg", 3 * h, h, h)
        mlp(f"layers.{i}.node", h, h, h)
        ln(f"layers.{i}.node_ln", h)
        mlp(f"layers.{i}.edge", 3 * h, h, h)
        ln(f"layers.{i}.edge_ln", h)
    mlp("head", 2 * h, h, NUM_TOKENS, zero_out=True)
    return p


@dataclass
class Denoiser:
    """Parameters plus the configuration they were built with."""

    config: DenoiserConfig
    params: dict[str, np.ndarray]

    @classmethod
    def initialize(cls, config: DenoiserConfig) -> "Denoiser":
        rng = np.random.default_rng(config.seed)
        return cls(config=config, params=init_params(config, rng))

    def copy(self) -> "Denoiser":
        return Denoiser(self.config, {k: v.copy() for k, v in self.params.items()})

    def save(self, path, schedule: TransitionSchedule | None = None, extra: dict | None = None):
        """Binary checkpoint plus a JSON sidecar with config and schedule spec."""
        meta = {"config": asdict(self.config)}
        if schedule is not None:
            meta["schedule"] = schedule.spec
        if extra:
            meta["extra"] = extra
        save_checkpoint(path, self.params, meta)
        Path(path).with_suffix(".json").write_text(json.dumps(meta, indent=2))

    @classmethod
    def load(cls, path) -> tuple["Denoiser", TransitionSchedule | None]:
        params, meta = load_checkpoint(path)
        config = DenoiserConfig(**meta["config"])
        schedule = schedule_from_spec(meta["schedule"]) if "schedule" in meta else None
        return cls(config=config, params=params), schedule


def time_embedding(t_rows: np.ndarray, T: int) -> np.ndarray:
    """Sinusoidal embedding of t/T (8 frequency pairs) plus the raw fraction."""
    x = (np.asarray(t_rows, dtype=np.float64) / T)[:, None]
    freqs = np.pi * 2.0 ** np.arange(8)
    ang = x * freqs
    return np.concatenate([np.sin(ang), np.cos(ang), x], axis=1)


def _mlp(tape_params, prefix, x):
    h = ad.gelu(ad.add(ad.matmul(x, tape_params[f"{prefix}.w1"]), tape_params[f"{prefix}.b1"]))
    return ad.add(ad.matmul(h, tape_params[f"{prefix}.w2"]), tape_params[f"{prefix}.b2"])


def _pair_mlp(tp, prefix, h, he, src, dst):
    """MLP over [h_src, h_dst, e] without materializing the concat.

    The packed [3H, H] first-layer weight is sliced per stream and the node
    projections run on the node array before gathering (matmul and gather
    commute), which avoids the [E, 3H] temporaries.
    """
    w1 = tp[f"{prefix}.w1"]
    width = he.data.shape[1]
    pre = ad.add(
        ad.add(
            ad.gather(ad.matmul(h, ad.slice_rows(w1, 0, width)), src),
            ad.gather(ad.matmul(h, ad.slice_rows(w1, width, 2 * width)), dst),
        ),
        ad.matmul(he, ad.slice_rows(w1, 2 * width, 3 * width)),
    )
    mid = ad.gelu(ad.add(pre, tp[f"{prefix}.b1"]))
    return ad.add(ad.matmul(mid, tp[f"{prefix}.w2"]), tp[f"{prefix}.b2"])


def _ln(tp, prefix, x):
    return ad.layer_norm(x, tp[f"{prefix}.g"], tp[f"{prefix}.b"])


def encode_graph(tape: Tape, tp: dict, graph: ResidueGraph):
    """Sequence-independent encodings (reusable across rollout timesteps)."""
    hv = _ln(tp, "node_enc_ln", _mlp(tp, "node_enc", tape.const(graph.node_feats)))
    he = _ln(tp, "edge_enc_ln", _mlp(tp, "edge_enc", tape.const(graph.edge_feats)))
    return hv, he


def trunk_logits(
    tape: Tape,
    tp: dict,
    config: DenoiserConfig,
    graph: ResidueGraph,
    hv: "ad.Tensor",
    he: "ad.Tensor",
    st_idx: np.ndarray,
    t_rows: np.ndarray,
) -> "ad.Tensor":
    """Message-passing trunk from encoded features to per-residue logits."""
    n = graph.n_nodes
    onehot = np.zeros((n, NUM_TOKENS))
    onehot[np.arange(n), st_idx] = 1.0
    seq_in = np.concatenate([onehot, time_embedding(t_rows, config.T)], axis=1)
    ho = _ln(tp, "seq_enc_ln", _mlp(tp, "seq_enc", tape.const(seq_in)))
    hvs = ad.concat([hv, ho], axis=1)

    src = graph.edge_index[:, 0]
    dst = graph.edge_index[:, 1]
    h = hvs
    for i in range(config.layers):
        msg = _pair_mlp(tp, f"layers.{i}.msg", h, he, src, dst)
        agg = ad.segment_mean(msg, src, n)
        h = ad.layer_norm(
            ad.add(h, _mlp(tp, f"layers.{i}.node", agg)),
            tp[f"layers.{i}.node_ln.g"], tp[f"layers.{i}.node_ln.b"],
        )
        upd = _pair_mlp(tp, f"layers.{i}.edge", h, he, src, dst)
        he = ad.layer_norm(
            ad.add(he, upd),
            tp[f"layers.{i}.edge_ln.g"], tp[f"layers.{i}.edge_ln.b"],
        )
    return _mlp(tp, "head", ad.concat([h, hvs], axis=1))


def forward_logits(
    tape: Tape, model: Denoiser, graph: ResidueGraph, st_idx: np.ndarray, t_rows: np.ndarray
) -> "ad.Tensor":
    tp = tape.lift(model.params)
    hv, he = encode_graph(tape, tp, graph)
    return trunk_logits(tape, tp, model.config, graph, hv, he, st_idx, t_rows)


def denoise_forward(
    model: Denoiser, graph: ResidueGraph, s_t: Sequence, t: int
) -> CategoricalDist:
    """Per-residue distribution over the clean sequence, given S_t and t."""
    if len(s_t) != graph.n_nodes:
        raise ad.ShapeMismatch(f"sequence length {len(s_t)} vs graph {graph.n_nodes}")
    if not 1 <= t <= model.config.T:
        raise ValueError(f"t={t} outside [1, {model.config.T}]")
    tape = Tape(grad=False)
    t_rows = np.full(graph.n_nodes, t, dtype=np.int64)
    logits = forward_logits(tape, model, graph, s_t.indices, t_rows)
    z = logits.data - logits.data.max(axis=1, keepdims=True)
    e = np.exp(z)
    return CategoricalDist(e / e.sum(axis=1, keepdims=True))


# ---------------------------------------------------------------------------
# reverse-diffusion sampling


def reverse_diffusion(
    model: Denoiser,
    graph: ResidueGraph,
    schedule: TransitionSchedule,
    rng: np.random.Generator,
    record: bool = False,
):
    """Run S_T -> S_0 over a (possibly merged) graph.

    Draws S_T from the uniform stationary distribution and samples each
    reverse kernel as-is (no temperature reshaping). With record=True also
    returns the per-step states and chosen-token log-probabilities under
    this (frozen) model.
    """
    tape = Tape(grad=False)
    tp = tape.lift(model.params)
    hv, he = encode_graph(tape, tp, graph)
    n = graph.n_nodes
    st = rng.integers(0, schedule.num_classes, n).astype(np.int64)
    states = [st.copy()]
    logps = []
    timesteps = list(range(schedule.T, 0, -1))
    for t in timesteps:
        t_rows = np.full(n, t, dtype=np.int64)
        logits = trunk_logits(tape, tp, model.config, graph, hv, he, st, t_rows)
        z = logits.data - logits.data.max(axis=1, keepdims=True)
        e = np.exp(z)
        p0 = e / e.sum(axis=1, keepdims=True)
        q = reverse_step(p0, Sequence(st), t, schedule).p
        nxt = sample_categorical_rows(q, rng)
        if record:
            logps.append(np.log(q[np.arange(n), nxt]))
            states.append(nxt.copy())
        st = nxt
    if record:
        return st, states, logps, timesteps
    return st, None, None, timesteps


def sample_sequences(
    model: Denoiser,
    backbone,
    m: int,
    schedule: TransitionSchedule,
    rng: np.random.Generator,
) -> list[Sequence]:
    """Draw M designs for one backbone by reverse diffusion."""
    if m < 1:
        raise ValueError(f"m must be >= 1, got {m}")
    graph = build_features(backbone, model.config.k)
    merged, _ = merge_graphs([graph] * m)
    final, _, _, _ = reverse_diffusion(model, merged, schedule, rng)
    n = graph.n_nodes
    return [Sequence(final[i * n : (i + 1) * n]) for i in range(m)]


# ---------------------------------------------------------------------------
# pretraining


@dataclass
class PretrainResult:
    model: Denoiser
    schedule: TransitionSchedule
    train_losses: list[float] = field(default_factory=list)  # one per step
    val_losses: list[float] = field(default_factory=list)  # initial + one per epoch


def batch_loss_from_lifted(
    tp: dict,
    config: DenoiserConfig,
    merged: ResidueGraph,
    member: np.ndarray,
    n_structs: int,
    s0: np.ndarray,
    st: np.ndarray,
    t_rows: np.ndarray,
    schedule: TransitionSchedule,
) -> "ad.Tensor":
    """Mean over structures of the per-structure mean-residue hybrid loss."""
    tape = next(iter(tp.values())).tape
    hv, he = encode_graph(tape, tp, merged)
    logits = trunk_logits(tape, tp, config, merged, hv, he, st, t_rows)
    p0 = ad.softmax(logits)
    col = hybrid_loss_rows(p0, s0, st, t_rows, schedule, config.lam)
    per_struct = ad.segment_mean(col, member, n_structs)
    return ad.mean(per_struct)


def _batch_loss(
    model: Denoiser,
    graphs: list[ResidueGraph],
    s0_list: list[np.ndarray],
    st_list: list[np.ndarray],
    ts: list[int],
    schedule: TransitionSchedule,
    grad: bool,
):
    merged, member = merge_graphs(graphs)
    s0 = np.concatenate(s0_list)
    st = np.concatenate(st_list)
    t_rows = np.concatenate(
        [np.full(g.n_nodes, t, dtype=np.int64) for g, t in zip(graphs, ts)]
    )
    tape = Tape(grad=grad)
    tp = tape.lift(model.params)
    loss = batch_loss_from_lifted(
        tp, model.config, merged, member, len(graphs), s0, st, t_rows, schedule
    )
    return loss, tape


def pretrain(
    config: DenoiserConfig,
    dataset: list[DatasetEntry],
    schedule: TransitionSchedule | None = None,
    checkpoint_dir=None,
    checkpoint_interval: int = 0,
    log_every: int = 0,
) -> PretrainResult:
    """Denoising pretraining with Adam.

    Per step: sample one timestep per structure uniformly in [1, T], noise
    the clean sequence through the forward process, and minimize the
    hybrid loss. Deterministic under a fixed config seed. Validation loss
    uses frozen noise draws so epochs are comparable.
    """
    train = [e for e in dataset if e.split == "train"]
    val = [e for e in dataset if e.split == "validation"]
    if not train:
        raise EmptyDataset("no training entries")
    schedule = schedule or make_uniform_schedule(config.T)
    if schedule.T != config.T:
        raise ValueError(f"schedule T={schedule.T} != config T={config.T}")

    model = Denoiser.initialize(config)
    rng = np.random.default_rng(config.seed)
    graphs = {e.id: build_features(e.backbone, config.k) for e in train + val}

    # frozen validation corruption
    val_rng = np.random.default_rng(config.seed + 1)
    val_ts = [int(val_rng.integers(1, config.T + 1)) for _ in val]
    val_st = [
        forward_sample(e.sequence, t, schedule, val_rng).s_t.indices
        for e, t in zip(val, val_ts)
    ]

    def val_loss() -> float:
        if not val:
            return float("nan")
        losses = []
        for start in range(0, len(val), config.batch_size):
            chunk = val[start : start + config.batch_size]
            loss, _ = _batch_loss(
                model,
                [graphs[e.id] for e in chunk],
                [e.sequence.indices for e in chunk],
                val_st[start : start + config.batch_size],
                val_ts[start : start + config.batch_size],
                schedule,
                grad=False,
            )
            losses.append(float(loss.data[0, 0]) * len(chunk))
        return sum(losses) / len(val)

    result = PretrainResult(model=model, schedule=schedule)
    result.val_losses.append(val_loss())
    state = AdamState()
    step = 0
    for epoch in range(config.epochs):
        order = rng.permutation(len(train))
        for start in range(0, len(train), config.batch_size):
            batch = [train[i] for i in order[start : start + config.batch_size]]
            ts = [int(rng.integers(1, config.T + 1)) for _ in batch]
            st = [
                forward_sample(e.sequence, t, schedule, rng).s_t.indices
                for e, t in zip(batch, ts)
            ]
            loss, tape = _batch_loss(
                model,
                [graphs[e.id] for e in batch],
                [e.sequence.indices for e in batch],
                st,
                ts,
                schedule,
                grad=True,
            )
            grads = backward(loss)
            adam_step(model.params, grads, state, lr=config.learning_rate)
            result.train_losses.append(float(loss.data[0, 0]))
            step += 1
            if log_every and step % log_every == 0:
                print(f"pretrain step {step}: loss {result.train_losses[-1]:.4f}")
        result.val_losses.append(val_loss())
        if checkpoint_dir and checkpoint_interval and (epoch + 1) % checkpoint_interval == 0:
            model.save(Path(checkpoint_dir) / f"pretrain_epoch{epoch + 1:04d}.ckpt", schedule)
    if checkpoint_dir:
        model.save(Path(checkpoint_dir) / "pretrain_final.ckpt", schedule)
    return result
