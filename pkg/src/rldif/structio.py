"""Structure file IO: fixed-column PDB parsing and the chain-set JSONL dataset.

The chain-set format is one JSON object per line:

    {"name": "1abc.A", "seq": "MKT...",
     "coords": {"N": [[x,y,z], ...], "CA": ..., "C": ..., "O": ...}}

paired with a splits file, a JSON object mapping split names to chain name
lists: {"train": [...], "validation": [...], "test": [...]}.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .core import (
    AA_LETTERS,
    BACKBONE_ATOMS,
    Backbone,
    DatasetEntry,
    Sequence,
    encode_sequence,
)

THREE_TO_ONE = {
    "ALA": "A", "CYS": "C", "ASP": "D", "GLU": "E", "PHE": "F",
    "GLY": "G", "HIS": "H", "ILE": "I", "LYS": "K", "LEU": "L",
    "MET": "M", "ASN": "N", "PRO": "P", "GLN": "Q", "ARG": "R",
    "SER": "S", "THR": "T", "VAL": "V", "TRP": "W", "TYR": "Y",
}


class MissingBackboneAtom(ValueError):
    """A residue lacks one of the N/CA/C/O backbone atoms."""


class UnknownResidue(ValueError):
    """A 3-letter residue code with no canonical 1-letter equivalent."""


class EmptyChain(ValueError):
    """No usable ATOM records for the requested chain."""


class MalformedLine(ValueError):
    """A chain-set JSONL line that cannot be parsed; carries the line number."""

    def __init__(self, line_no: int, reason: str):
        super().__init__(f"line {line_no}: {reason}")
        self.line_no = line_no


class SplitNameNotFound(KeyError):
    """A split references a chain name absent from the JSONL file."""


@dataclass(frozen=True)
class ChainRecord:
    """One chain-set record; coordinate lists may contain NaN for missing atoms."""

    name: str
    seq: str
    coords: dict  # atom name -> [N, 3] float array


def parse_pdb(content: bytes | str, chain: str | None = None) -> tuple[Backbone, Sequence]:
    """Parse ATOM records of a fixed-column PDB file into one chain.

    Only N/CA/C/O atoms are kept; HETATM records and altlocs other than
    ' '/'A' are ignored. Residues are ordered by (residue number,
    insertion code). When `chain` is None the first chain encountered is
    used.
    """
    if isinstance(content, bytes):
        content = content.decode("ascii", errors="replace")

    residues: dict[tuple, dict] = {}  # (resnum, icode) -> {atom: xyz, "resname": str}
    picked_chain = chain
    for line in content.splitlines():
        if not line.startswith("ATOM"):
            continue
        line = line.ljust(54)
        atom = line[12:16].strip()
        if atom not in BACKBONE_ATOMS:
            continue
        altloc = line[16]
        if altloc not in (" ", "A"):
            continue
        chain_id = line[21]
        if picked_chain is None:
            picked_chain = chain_id
        if chain_id != picked_chain:
            continue
        resname = line[17:20].strip()
        key = (int(line[22:26]), line[26])
        xyz = (float(line[30:38]), float(line[38:46]), float(line[46:54]))
        entry = residues.setdefault(key, {"resname": resname})
        entry.setdefault(atom, xyz)  # first occurrence wins

    if not residues:
        raise EmptyChain(f"no backbone ATOM records for chain {picked_chain!r}")

    keys = sorted(residues)
    seq_chars = []
    coords = np.empty((len(keys), 4, 3), dtype=np.float64)
    for i, key in enumerate(keys):
        entry = residues[key]
        resname = entry["resname"]
        if resname not in THREE_TO_ONE:
            raise UnknownResidue(f"residue {resname!r} at {key[0]}{key[1].strip()}")
        seq_chars.append(THREE_TO_ONE[resname])
        for j, atom in enumerate(BACKBONE_ATOMS):
            if atom not in entry:
                raise MissingBackboneAtom(f"residue {key[0]}{key[1].strip()} lacks {atom}")
            coords[i, j] = entry[atom]

    numbers = np.array([k[0] for k in keys], dtype=np.int64)
    backbone = Backbone(coords, chain_id=picked_chain or "A", residue_numbers=numbers)
    return backbone, encode_sequence("".join(seq_chars))


@dataclass
class ChainSetResult:
    """Entries loaded from a chain set plus the skip log."""

    entries: list[DatasetEntry]
    skipped: list[tuple[str, str]] = field(default_factory=list)  # (name, reason)

    @property
    def n_skipped(self) -> int:
        return len(self.skipped)


def _parse_chain_record(obj: dict, line_no: int) -> ChainRecord:
    try:
        name, seq, coords = obj["name"], obj["seq"], obj["coords"]
    except (KeyError, TypeError) as e:
        raise MalformedLine(line_no, f"missing field {e}") from None
    if not isinstance(seq, str) or not seq:
        raise MalformedLine(line_no, "seq must be a nonempty string")
    arrays = {}
    for atom in BACKBONE_ATOMS:
        if atom not in coords:
            raise MalformedLine(line_no, f"coords missing atom {atom}")
        arr = np.asarray(coords[atom], dtype=np.float64)
        if arr.shape != (len(seq), 3):
            raise MalformedLine(
                line_no, f"{atom} coords shape {arr.shape} != ({len(seq)}, 3)"
            )
        arrays[atom] = arr
    return ChainRecord(name=name, seq=seq, coords=arrays)


def load_chain_set(jsonl_path, splits_path) -> ChainSetResult:
    """Load a chain-set JSONL plus named splits into DatasetEntry objects.

    Chains with residues outside the 20-letter alphabet or with any
    non-finite backbone coordinate are skipped and counted (dihedral
    featurization is undefined on gaps, so imputation is not attempted).
    """
    records: dict[str, ChainRecord] = {}
    with open(jsonl_path) as fh:
        for line_no, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as e:
                raise MalformedLine(line_no, f"invalid JSON: {e}") from None
            rec = _parse_chain_record(obj, line_no)
            records[rec.name] = rec

    with open(splits_path) as fh:
        splits = json.load(fh)

    result = ChainSetResult(entries=[])
    for split in ("train", "validation", "test"):
        for name in splits.get(split, []):
            if name not in records:
                raise SplitNameNotFound(name)
            rec = records[name]
            if any(c not in AA_LETTERS for c in rec.seq):
                result.skipped.append((name, "nonstandard residue"))
                continue
            coords = np.stack([rec.coords[a] for a in BACKBONE_ATOMS], axis=1)
            if not np.all(np.isfinite(coords)):
                result.skipped.append((name, "non-finite coordinates"))
                continue
            result.entries.append(
                DatasetEntry(
                    id=name,
                    sequence=encode_sequence(rec.seq),
                    backbone=Backbone(coords, chain_id=name.split(".")[-1] if "." in name else "A"),
                    split=split,
                )
            )
    return result


def read_fasta(path) -> list[tuple[str, str]]:
    """Read a FASTA file into (header, sequence) pairs."""
    out = []
    header = None
    chunks: list[str] = []
    with open(path) as fh:
        for line in fh:
            line = line.strip()
            if not line:
                continue
            if line.startswith(">"):
                if header is not None:
                    out.append((header, "".join(chunks)))
                header = line[1:].strip()
                chunks = []
            else:
                chunks.append(line)
    if header is not None:
        out.append((header, "".join(chunks)))
    return out


def write_fasta(path, entries: list[tuple[str, str]]):
    """Write (header, sequence) pairs as FASTA."""
    with open(path, "w") as fh:
        for header, seq in entries:
            fh.write(f">{header}\n{seq}\n")
