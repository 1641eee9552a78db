"""Design evaluation metrics.

Sequence recovery is the fraction of positions agreeing with the
reference. Diversity averages the length-normalized Hamming distance over
all design pairs. Foldable diversity keeps only pairs whose structural
self-consistency (sc-TM) both exceed a threshold, while normalizing by the
full pair count, so it cannot be inflated with unfoldable noise.

sc-TM compares the folded design against the folded reference sequence
(never the input backbone) so folding-model bias cancels.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .core import LengthMismatch, Sequence
from . import kernels

TM_MIN_DEFAULT = 0.7


class SingletonSet(ValueError):
    """Pairwise metrics need at least two designs."""


class DegeneratePointSet(ValueError):
    """Point cloud of rank < 2: superposition is not well defined."""


class TooShort(ValueError):
    """TM-score needs at least 3 residues."""


@dataclass(frozen=True)
class FDConfig:
    """Foldable-diversity threshold (strict inequality)."""

    tm_min: float = TM_MIN_DEFAULT

    def __post_init__(self):
        if not 0.0 <= self.tm_min <= 1.0:
            raise ValueError(f"tm_min must be in [0, 1], got {self.tm_min}")


@dataclass(frozen=True)
class DesignSet:
    """Designs for one target plus their per-design sc-TM values."""

    target_id: str
    reference: Sequence
    designs: tuple
    sc_tms: np.ndarray

    def __post_init__(self):
        if len(self.designs) < 1:
            raise ValueError("need at least one design")
        n = len(self.reference)
        for d in self.designs:
            if len(d) != n:
                raise LengthMismatch(f"design length {len(d)} != reference {n}")
        tms = np.asarray(self.sc_tms, dtype=np.float64)
        if tms.shape != (len(self.designs),):
            raise ValueError("one sc-TM per design required")
        if np.any(tms < 0) or np.any(tms > 1):
            raise ValueError("sc-TM values must lie in [0, 1]")
        object.__setattr__(self, "designs", tuple(self.designs))
        object.__setattr__(self, "sc_tms", tms)


def sequence_recovery(design: Sequence, reference: Sequence) -> float:
    """Fraction of positions where the design matches the reference."""
    if len(design) != len(reference):
        raise LengthMismatch(f"{len(design)} vs {len(reference)}")
    return float(np.mean(design.indices == reference.indices))


def hamming_fraction(a: Sequence, b: Sequence) -> float:
    """Length-normalized Hamming distance in [0, 1]."""
    if len(a) != len(b):
        raise LengthMismatch(f"{len(a)} vs {len(b)}")
    return float(np.mean(a.indices != b.indices))


def sequence_diversity(designs: list[Sequence]) -> float:
    """Mean pairwise normalized Hamming distance over all design pairs."""
    m = len(designs)
    if m < 2:
        raise SingletonSet(f"need >= 2 designs, got {m}")
    total = 0.0
    for j in range(m):
        for k in range(j):
            total += hamming_fraction(designs[j], designs[k])
    return total * 2.0 / (m * (m - 1))


def foldable_diversity(
    designs: list[Sequence], sc_tms, tm_min: float = TM_MIN_DEFAULT
) -> float:
    """Pairwise diversity restricted to structurally consistent pairs.

    A pair counts only when min(sc-TM_j, sc-TM_k) strictly exceeds tm_min;
    the normalizer stays M(M-1)/2 regardless of how many pairs pass.
    """
    m = len(designs)
    if m < 2:
        raise SingletonSet(f"need >= 2 designs, got {m}")
    tms = np.asarray(sc_tms, dtype=np.float64)
    if tms.shape != (m,):
        raise ValueError(f"need {m} sc-TM values, got shape {tms.shape}")
    total = 0.0
    for j in range(m):
        for k in range(j):
            if min(tms[j], tms[k]) > tm_min:
                total += hamming_fraction(designs[j], designs[k])
    return total * 2.0 / (m * (m - 1))


def design_set_metrics(ds: DesignSet, config: FDConfig = FDConfig()) -> dict:
    """Recovery/diversity/foldable-diversity summary for one design set."""
    out = {
        "mean_recovery": float(
            np.mean([sequence_recovery(d, ds.reference) for d in ds.designs])
        ),
        "mean_sctm": float(np.mean(ds.sc_tms)),
    }
    if len(ds.designs) >= 2:
        out["diversity"] = sequence_diversity(list(ds.designs))
        out["foldable_diversity"] = foldable_diversity(
            list(ds.designs), ds.sc_tms, config.tm_min
        )
    else:
        out["diversity"] = 0.0
        out["foldable_diversity"] = 0.0
    return out


# ---------------------------------------------------------------------------
# superposition


def kabsch(p: np.ndarray, q: np.ndarray) -> tuple[np.ndarray, np.ndarray, float]:
    """Least-squares rigid superposition of p onto q.

    Returns (rotation, translation, rmsd) with the optimal map
    x -> x @ rotation + translation, reflection-corrected via the
    determinant sign of the SVD factors.
    """
    p = np.asarray(p, dtype=np.float64)
    q = np.asarray(q, dtype=np.float64)
    if p.shape != q.shape or p.ndim != 2 or p.shape[1] != 3:
        raise LengthMismatch(f"paired [N, 3] clouds required, got {p.shape} vs {q.shape}")
    if p.shape[0] < 3:
        raise DegeneratePointSet(f"need >= 3 points, got {p.shape[0]}")
    pc = p.mean(axis=0)
    qc = q.mean(axis=0)
    cov = (p - pc).T @ (q - qc)
    u, s, vt = np.linalg.svd(cov)
    scale = max(s[0], 1.0)
    if s[1] / scale < 1e-10:
        raise DegeneratePointSet("point cloud rank < 2")
    if np.linalg.det(u) * np.linalg.det(vt) < 0:
        u[:, 2] = -u[:, 2]
    rot = u @ vt
    trans = qc - pc @ rot
    moved = p @ rot + trans
    rmsd = float(np.sqrt(np.mean(np.sum((moved - q) ** 2, axis=1))))
    return rot, trans, rmsd


def tm_d0(length: int) -> float:
    """Length-dependent distance scale, floored at 0.5 A for short chains."""
    raw = 1.24 * np.cbrt(length - 15.0) - 1.8
    return float(max(raw, 0.5))


def tm_score(a: np.ndarray, b: np.ndarray) -> float:
    """Template-modeling score of two equal-length CA traces, in (0, 1].

    Superposition seeds come from the full chain and contiguous fragments
    (lengths L, L/2, L/4, stride max(L//8, 1)), each refined by iterating
    on the residues within d0. The search runs in both directions and
    takes the best, which makes the score exactly symmetric.
    """
    a = np.ascontiguousarray(a, dtype=np.float64)
    b = np.ascontiguousarray(b, dtype=np.float64)
    if a.ndim != 2 or a.shape[1] != 3 or b.shape[1] != 3:
        raise ValueError(f"CA traces must be [N, 3], got {a.shape} / {b.shape}")
    if a.shape[0] != b.shape[0]:
        raise LengthMismatch(f"{a.shape[0]} vs {b.shape[0]}")
    length = a.shape[0]
    if length < 3:
        raise TooShort(f"need >= 3 residues, got {length}")
    d0 = tm_d0(length)
    forward = kernels.tm_search(a, b, d0, d0, 30)
    reverse = kernels.tm_search(b, a, d0, d0, 30)
    return max(forward, reverse)


def sc_tm(design: Sequence, reference: Sequence, oracle) -> float:
    """Self-consistency TM score: TM(Fold(design), Fold(reference)).

    The reference is the *folded native sequence*, never the experimental
    backbone. `oracle` is anything with .fold(); pass a FoldCache so both
    folds hit the cache.
    """
    if len(design) != len(reference):
        raise LengthMismatch(f"{len(design)} vs {len(reference)}")
    folded_design = oracle.fold(design)
    folded_ref = oracle.fold(reference)
    return tm_score(folded_design.ca_coords, folded_ref.ca_coords)
