"""Residue kNN graph construction and geometric featurization.

Feature layout (all rigid-motion invariant):

node features, 15 per residue
    [0:6]   sin/cos of the backbone dihedrals phi, psi, omega
            (undefined terminal angles encode as sin = cos = 0, which no
            real angle can produce since sin^2 + cos^2 = 1)
    [6:15]  unit vectors N-CA, C-CA, O-CA expressed in the residue's
            local frame

edge features, 260 per directed edge i -> j
    [0:256]   Gaussian RBF expansion (16 centers, 0..20 A, width = center
              spacing) of the 16 ordered atom-pair distances between the
              N/CA/C/O atoms of i and j (source-atom major order)
    [256:259] unit CA_i -> CA_j direction in i's local frame
    [259]     sequence separation j - i clipped to [-32, 32], scaled to [-1, 1]

The local frame orthonormalizes (CA->C, CA->N) by Gram-Schmidt with the
third axis from the cross product.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .core import Backbone

NODE_FEATURE_DIM = 15

RBF_CENTERS = 16
RBF_MIN = 0.0
RBF_MAX = 20.0
SEQ_SEP_CLIP = 32

EDGE_FEATURE_DIM = 16 * RBF_CENTERS + 3 + 1  # 260


class TooFewResidues(ValueError):
    """Graph construction needs at least 2 residues."""


class DegenerateGeometry(ValueError):
    """Dihedral geometry with a vanishing plane normal."""


@dataclass(frozen=True)
class ResidueGraph:
    """Directed residue kNN graph with node and edge feature matrices."""

    n_nodes: int
    k: int
    edge_index: np.ndarray  # [E, 2] int64, (source, target)
    node_feats: np.ndarray  # [N, 15]
    edge_feats: np.ndarray  # [E, 260]

    @property
    def n_edges(self) -> int:
        return int(self.edge_index.shape[0])


def knn_graph(backbone: Backbone, k: int = 30) -> np.ndarray:
    """Directed edges (i -> j) for the k nearest residues of i by CA distance.

    k clamps to N-1. Edges are sorted by (source, distance), ties broken
    by ascending target index, so output is deterministic.
    """
    ca = backbone.ca
    n = ca.shape[0]
    if n < 2:
        raise TooFewResidues(f"need at least 2 residues, got {n}")
    k_eff = min(k, n - 1)

    diff = ca[:, None, :] - ca[None, :, :]
    dist = np.sqrt((diff * diff).sum(axis=2))
    np.fill_diagonal(dist, np.inf)

    edges = np.empty((n * k_eff, 2), dtype=np.int64)
    for i in range(n):
        # lexsort: primary key distance, secondary key target index
        order = np.lexsort((np.arange(n), dist[i]))[:k_eff]
        edges[i * k_eff : (i + 1) * k_eff, 0] = i
        edges[i * k_eff : (i + 1) * k_eff, 1] = order
    return edges


def dihedral(p1, p2, p3, p4) -> float:
    """Signed torsion angle about the p2-p3 axis, in (-pi, pi]."""
    p1, p2, p3, p4 = (np.asarray(p, dtype=np.float64) for p in (p1, p2, p3, p4))
    b1 = p2 - p1
    b2 = p3 - p2
    b3 = p4 - p3
    n1 = np.cross(b1, b2)
    n2 = np.cross(b2, b3)
    m1 = np.linalg.norm(n1)
    m2 = np.linalg.norm(n2)
    if m1 < 1e-8 or m2 < 1e-8:
        raise DegenerateGeometry(f"plane normal magnitudes {m1:.2e}, {m2:.2e}")
    b2n = b2 / np.linalg.norm(b2)
    x = float(np.dot(n1, n2))
    y = float(np.dot(np.cross(n1, n2), b2n))
    angle = float(np.arctan2(y, x))
    return np.pi if angle == -np.pi else angle


def _dihedral_rows(p1, p2, p3, p4) -> np.ndarray:
    """Vectorized dihedral over rows of [M, 3] arrays."""
    b1 = p2 - p1
    b2 = p3 - p2
    b3 = p4 - p3
    n1 = np.cross(b1, b2)
    n2 = np.cross(b2, b3)
    m1 = np.linalg.norm(n1, axis=1)
    m2 = np.linalg.norm(n2, axis=1)
    if np.any(m1 < 1e-8) or np.any(m2 < 1e-8):
        raise DegenerateGeometry("vanishing plane normal in dihedral batch")
    b2n = b2 / np.linalg.norm(b2, axis=1, keepdims=True)
    x = (n1 * n2).sum(axis=1)
    y = (np.cross(n1, n2) * b2n).sum(axis=1)
    return np.arctan2(y, x)


def local_frames(backbone: Backbone) -> np.ndarray:
    """Per-residue orthonormal frames [N, 3, 3]; rows are the basis vectors."""
    ca, c, n = backbone.ca, backbone.c, backbone.n
    b1 = c - ca
    b1 = b1 / np.linalg.norm(b1, axis=1, keepdims=True)
    v = n - ca
    v = v - (v * b1).sum(axis=1, keepdims=True) * b1
    norms = np.linalg.norm(v, axis=1, keepdims=True)
    if np.any(norms < 1e-8):
        raise DegenerateGeometry("collinear N-CA-C triple")
    b2 = v / norms
    b3 = np.cross(b1, b2)
    return np.stack([b1, b2, b3], axis=1)


def backbone_dihedrals(backbone: Backbone) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """(phi, psi, omega) arrays of length N; undefined boundary angles are NaN.

    phi_i   = dihedral(C_{i-1}, N_i, CA_i, C_i)
    psi_i   = dihedral(N_i, CA_i, C_i, N_{i+1})
    omega_i = dihedral(CA_{i-1}, C_{i-1}, N_i, CA_i)
    """
    n_res = len(backbone)
    N, CA, C = backbone.n, backbone.ca, backbone.c
    phi = np.full(n_res, np.nan)
    psi = np.full(n_res, np.nan)
    omega = np.full(n_res, np.nan)
    if n_res >= 2:
        phi[1:] = _dihedral_rows(C[:-1], N[1:], CA[1:], C[1:])
        psi[:-1] = _dihedral_rows(N[:-1], CA[:-1], C[:-1], N[1:])
        omega[1:] = _dihedral_rows(CA[:-1], C[:-1], N[1:], CA[1:])
    return phi, psi, omega


def _sincos(angles: np.ndarray) -> np.ndarray:
    """[N, 2] sin/cos with NaN (undefined angle) encoded as (0, 0)."""
    out = np.stack([np.sin(angles), np.cos(angles)], axis=1)
    out[~np.isfinite(angles)] = 0.0
    return out


def rbf_expand(dist: np.ndarray, n_centers: int = RBF_CENTERS,
               d_min: float = RBF_MIN, d_max: float = RBF_MAX) -> np.ndarray:
    """Gaussian radial basis expansion of distances; peak 1.0 at each center."""
    centers = np.linspace(d_min, d_max, n_centers)
    width = centers[1] - centers[0]
    z = (np.asarray(dist)[..., None] - centers) / width
    return np.exp(-z * z)


def node_features(backbone: Backbone) -> np.ndarray:
    phi, psi, omega = backbone_dihedrals(backbone)
    frames = local_frames(backbone)
    ca = backbone.ca
    vecs = np.stack([backbone.n - ca, backbone.c - ca, backbone.o - ca], axis=1)  # [N,3,3]
    vecs = vecs / np.linalg.norm(vecs, axis=2, keepdims=True)
    local = np.einsum("nij,nkj->nki", frames, vecs)  # project into frame
    return np.concatenate(
        [_sincos(phi), _sincos(psi), _sincos(omega), local.reshape(len(backbone), 9)],
        axis=1,
    )


def edge_features(backbone: Backbone, edge_index: np.ndarray) -> np.ndarray:
    src, dst = edge_index[:, 0], edge_index[:, 1]
    coords = backbone.coords  # [N, 4, 3]
    # 16 ordered atom pairs, source-atom major: (N,N), (N,CA), ... (O,O)
    diff = coords[src][:, :, None, :] - coords[dst][:, None, :, :]  # [E,4,4,3]
    dists = np.sqrt((diff * diff).sum(axis=3)).reshape(len(src), 16)
    rbf = rbf_expand(dists).reshape(len(src), 16 * RBF_CENTERS)

    frames = local_frames(backbone)
    ca = backbone.ca
    direction = ca[dst] - ca[src]
    direction = direction / np.linalg.norm(direction, axis=1, keepdims=True)
    direction_local = np.einsum("eij,ej->ei", frames[src], direction)

    sep = np.clip(dst - src, -SEQ_SEP_CLIP, SEQ_SEP_CLIP) / SEQ_SEP_CLIP
    return np.concatenate([rbf, direction_local, sep[:, None]], axis=1)


def build_features(backbone: Backbone, k: int = 30) -> ResidueGraph:
    """Full featurization: kNN graph plus node/edge feature matrices."""
    edge_index = knn_graph(backbone, k)
    h_v = node_features(backbone)
    h_e = edge_features(backbone, edge_index)
    if not np.all(np.isfinite(h_v)) or not np.all(np.isfinite(h_e)):
        raise DegenerateGeometry("non-finite feature values")
    return ResidueGraph(
        n_nodes=len(backbone),
        k=min(k, len(backbone) - 1),
        edge_index=edge_index,
        node_feats=h_v,
        edge_feats=h_e,
    )


def merge_graphs(graphs: list[ResidueGraph]) -> tuple[ResidueGraph, np.ndarray]:
    """Disjoint union of graphs for batched processing.

    Returns the merged graph and an int64 [total_nodes] array mapping each
    node to its source-graph position in `graphs`. Edge indices are offset
    so edges stay sorted by source node globally.
    """
    offsets = np.cumsum([0] + [g.n_nodes for g in graphs[:-1]])
    edge_index = np.concatenate(
        [g.edge_index + off for g, off in zip(graphs, offsets)], axis=0
    )
    node_feats = np.concatenate([g.node_feats for g in graphs], axis=0)
    edge_feats = np.concatenate([g.edge_feats for g in graphs], axis=0)
    member = np.concatenate(
        [np.full(g.n_nodes, i, dtype=np.int64) for i, g in enumerate(graphs)]
    )
    merged = ResidueGraph(
        n_nodes=int(node_feats.shape[0]),
        k=max(g.k for g in graphs),
        edge_index=edge_index,
        node_feats=node_feats,
        edge_feats=edge_feats,
    )
    return merged, member
