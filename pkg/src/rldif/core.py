"""Core domain types: alphabet, sequences, backbones, datasets.

All types are immutable value objects (frozen dataclasses over read-only
numpy arrays); they can be shared freely across threads.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

# Canonical 20-letter amino-acid alphabet, alphabetical by one-letter code.
# Index <-> symbol mapping is fixed so serialized artifacts are reproducible.
AA_LETTERS = "ACDEFGHIKLMNPQRSTVWY"
NUM_TOKENS = 20

BACKBONE_ATOMS = ("N", "CA", "C", "O")


class InvalidResidue(ValueError):
    """A character outside the 20-letter amino-acid alphabet."""


class LengthMismatch(ValueError):
    """Paired objects disagree on residue count."""


@dataclass(frozen=True)
class Alphabet:
    """The fixed 20-symbol vocabulary of canonical amino acids."""

    symbols: str = AA_LETTERS

    def __post_init__(self):
        if len(self.symbols) != NUM_TOKENS or len(set(self.symbols)) != NUM_TOKENS:
            raise ValueError(f"alphabet must have 20 distinct symbols, got {self.symbols!r}")

    def index(self, ch: str) -> int:
        i = self.symbols.find(ch)
        if i < 0:
            raise InvalidResidue(f"residue {ch!r} is not one of {self.symbols}")
        return i

    def symbol(self, i: int) -> str:
        return self.symbols[i]


ALPHABET = Alphabet()

_CHAR_TO_INDEX = {c: i for i, c in enumerate(AA_LETTERS)}


def _readonly(a: np.ndarray) -> np.ndarray:
    a = np.ascontiguousarray(a)
    a.setflags(write=False)
    return a


@dataclass(frozen=True)
class Sequence:
    """An amino-acid sequence stored as alphabet indices."""

    indices: np.ndarray  # int64 [N], each in [0, 20)

    def __post_init__(self):
        idx = np.asarray(self.indices, dtype=np.int64)
        if idx.ndim != 1 or idx.size < 1:
            raise ValueError(f"sequence must be a nonempty 1-d index array, got shape {idx.shape}")
        if idx.min() < 0 or idx.max() >= NUM_TOKENS:
            raise InvalidResidue(f"indices out of range [0, {NUM_TOKENS})")
        object.__setattr__(self, "indices", _readonly(idx))

    def __len__(self) -> int:
        return int(self.indices.size)

    @property
    def text(self) -> str:
        return decode_sequence(self)

    def one_hot(self, dtype=np.float64) -> np.ndarray:
        """One-hot view, shape [N, 20]; exactly one 1 per row."""
        out = np.zeros((len(self), NUM_TOKENS), dtype=dtype)
        out[np.arange(len(self)), self.indices] = 1
        return out

    def __eq__(self, other) -> bool:
        return isinstance(other, Sequence) and np.array_equal(self.indices, other.indices)

    def __hash__(self):
        return hash(self.indices.tobytes())


def encode_sequence(text: str) -> Sequence:
    """Map a one-letter amino-acid string to a Sequence.

    Raises InvalidResidue for any character outside the canonical 20
    (including ambiguity/nonstandard codes such as X, B, Z, U, O).
    """
    if not text:
        raise ValueError("empty sequence")
    try:
        idx = np.fromiter((_CHAR_TO_INDEX[c] for c in text), dtype=np.int64, count=len(text))
    except KeyError as e:
        raise InvalidResidue(f"residue {e.args[0]!r} is not one of {AA_LETTERS}") from None
    return Sequence(idx)


def decode_sequence(seq: Sequence) -> str:
    return "".join(AA_LETTERS[i] for i in seq.indices)


@dataclass(frozen=True)
class Backbone:
    """Per-residue N/CA/C/O coordinates in Angstrom.

    coords has shape [N, 4, 3] with the atom axis ordered N, CA, C, O.
    """

    coords: np.ndarray
    chain_id: str = "A"
    residue_numbers: np.ndarray | None = None

    def __post_init__(self):
        c = np.asarray(self.coords, dtype=np.float64)
        if c.ndim != 3 or c.shape[1] != 4 or c.shape[2] != 3:
            raise ValueError(f"backbone coords must be [N, 4, 3], got {c.shape}")
        if not np.all(np.isfinite(c)):
            raise ValueError("backbone coordinates must be finite")
        object.__setattr__(self, "coords", _readonly(c))
        if self.residue_numbers is None:
            nums = np.arange(1, c.shape[0] + 1, dtype=np.int64)
        else:
            nums = np.asarray(self.residue_numbers, dtype=np.int64)
            if nums.shape != (c.shape[0],):
                raise ValueError("residue_numbers length must match residue count")
        object.__setattr__(self, "residue_numbers", _readonly(nums))

    def __len__(self) -> int:
        return int(self.coords.shape[0])

    @property
    def n(self) -> np.ndarray:
        return self.coords[:, 0]

    @property
    def ca(self) -> np.ndarray:
        return self.coords[:, 1]

    @property
    def c(self) -> np.ndarray:
        return self.coords[:, 2]

    @property
    def o(self) -> np.ndarray:
        return self.coords[:, 3]

    def transformed(self, rotation: np.ndarray, translation: np.ndarray) -> "Backbone":
        """Rigidly moved copy: x -> x @ rotation + translation."""
        moved = self.coords.reshape(-1, 3) @ np.asarray(rotation) + np.asarray(translation)
        return Backbone(moved.reshape(self.coords.shape), self.chain_id, self.residue_numbers)


@dataclass(frozen=True)
class CategoricalDist:
    """Per-residue categorical distribution over the 20 tokens."""

    p: np.ndarray  # [N, 20]

    def __post_init__(self):
        p = np.asarray(self.p, dtype=np.float64)
        if p.ndim != 2 or p.shape[1] != NUM_TOKENS:
            raise ValueError(f"distribution must be [N, {NUM_TOKENS}], got {p.shape}")
        if np.any(p < 0):
            raise ValueError("probabilities must be nonnegative")
        rowsum = p.sum(axis=1)
        if np.max(np.abs(rowsum - 1.0)) > 1e-9:
            raise ValueError("rows must sum to 1 within 1e-9")
        object.__setattr__(self, "p", _readonly(p))

    def __len__(self) -> int:
        return int(self.p.shape[0])


@dataclass(frozen=True)
class DatasetEntry:
    """A named structure/sequence pair with a split tag."""

    id: str
    sequence: Sequence
    backbone: Backbone
    split: str = "train"

    def __post_init__(self):
        if len(self.sequence) != len(self.backbone):
            raise LengthMismatch(
                f"{self.id}: sequence length {len(self.sequence)} != "
                f"backbone length {len(self.backbone)}"
            )
        if self.split not in ("train", "validation", "test"):
            raise ValueError(f"split must be train/validation/test, got {self.split!r}")
