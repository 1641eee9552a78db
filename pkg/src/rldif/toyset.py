"""Synthetic training data: random sequences folded with the toy oracle.

The toy folder emits CA traces only, but featurization needs all four
backbone atoms, so N/C/O are decorated onto each CA from purely local
frame geometry. The placement constants are idealized; what matters is
that the construction is deterministic, rigid-motion equivariant, and
never degenerate for toy-folder traces (interior turn angles stay well
away from 180 degrees).
"""

from __future__ import annotations

import numpy as np

from .core import NUM_TOKENS, Backbone, DatasetEntry, Sequence
from .folding import ToyFolder

_BOND_N = 1.458
_BOND_C = 1.525
_BOND_O = 1.231


def _unit(v: np.ndarray) -> np.ndarray:
    return v / np.linalg.norm(v)


def backbone_from_ca(ca: np.ndarray) -> Backbone:
    """Decorate a CA trace with pseudo N/C/O atoms from local frames."""
    ca = np.asarray(ca, dtype=np.float64)
    n_res = ca.shape[0]
    if n_res < 3:
        raise ValueError(f"need >= 3 residues to orient frames, got {n_res}")
    coords = np.empty((n_res, 4, 3))
    coords[:, 1] = ca
    for i in range(n_res):
        if i == 0:
            e1 = _unit(ca[1] - ca[0])
            bend = ca[2] - ca[0]
        elif i == n_res - 1:
            e1 = _unit(ca[-1] - ca[-2])
            bend = ca[-3] - ca[-1]
        else:
            e1 = _unit(ca[i + 1] - ca[i - 1])
            bend = (ca[i + 1] + ca[i - 1]) - 2.0 * ca[i]
        bend = bend - np.dot(bend, e1) * e1
        norm = np.linalg.norm(bend)
        if norm < 1e-8:
            raise ValueError(f"locally straight trace at residue {i}")
        e2 = bend / norm
        e3 = np.cross(e1, e2)
        coords[i, 0] = ca[i] + _BOND_N * _unit(-0.9 * e1 + 0.5 * e2 + 0.3 * e3)
        coords[i, 2] = ca[i] + _BOND_C * _unit(0.9 * e1 + 0.5 * e2 - 0.3 * e3)
        coords[i, 3] = coords[i, 2] + _BOND_O * _unit(0.2 * e1 - 0.8 * e2 + 0.6 * e3)
    return Backbone(coords)


def random_sequence(length: int, rng: np.random.Generator) -> Sequence:
    return Sequence(rng.integers(0, NUM_TOKENS, length))


def make_toy_dataset(
    n: int,
    length_range: tuple[int, int] = (30, 60),
    seed: int = 0,
    fractions: tuple[float, float] = (0.8, 0.9),
) -> list[DatasetEntry]:
    """Toy-fold `n` random sequences into train/validation/test entries.

    Split boundaries fall at the given cumulative fractions (default
    80/10/10 by index).
    """
    rng = np.random.default_rng(seed)
    folder = ToyFolder()
    entries = []
    for i in range(n):
        length = int(rng.integers(length_range[0], length_range[1] + 1))
        seq = random_sequence(length, rng)
        backbone = backbone_from_ca(folder.fold(seq).ca_coords)
        if i < int(n * fractions[0]):
            split = "train"
        elif i < int(n * fractions[1]):
            split = "validation"
        else:
            split = "test"
        entries.append(
            DatasetEntry(id=f"toy{i:04d}", sequence=seq, backbone=backbone, split=split)
        )
    return entries
