"""Shared test utilities: NeRF-style coordinate building and rigid motions.

The torsion-driven backbone builder lives here (tests only) so geometry
tests can construct chains with known dihedrals and check that the
production featurizer recovers them.
"""

import numpy as np

from rldif.core import Backbone

# idealized backbone geometry (Angstrom / degrees)
BOND_N_CA = 1.458
BOND_CA_C = 1.525
BOND_C_N = 1.329
BOND_C_O = 1.231
ANGLE_N_CA_C = 111.2
ANGLE_CA_C_N = 116.2
ANGLE_C_N_CA = 121.7
ANGLE_CA_C_O = 120.8


def place_atom(a, b, c, bond, angle_deg, torsion_deg):
    """Place atom d with |cd| = bond, angle(b,c,d) and dihedral(a,b,c,d) given."""
    a, b, c = (np.asarray(p, dtype=np.float64) for p in (a, b, c))
    angle = np.deg2rad(angle_deg)
    torsion = np.deg2rad(torsion_deg)
    bc = c - b
    bc = bc / np.linalg.norm(bc)
    n = np.cross(b - a, bc)
    n = n / np.linalg.norm(n)
    m = np.cross(n, bc)
    d = bond * np.array(
        [-np.cos(angle), np.sin(angle) * np.cos(torsion), np.sin(angle) * np.sin(torsion)]
    )
    return c + d[0] * bc + d[1] * m + d[2] * n


def backbone_from_torsions(phi, psi, omega):
    """Build an n-residue backbone from torsion lists (degrees).

    phi[0] and omega[0] are ignored (undefined at the N terminus); psi of
    the final residue is only used to orient its carbonyl oxygen.
    """
    n_res = len(phi)
    coords = np.zeros((n_res, 4, 3))
    coords[0, 0] = (0.0, 0.0, 0.0)
    coords[0, 1] = (BOND_N_CA, 0.0, 0.0)
    ang = np.deg2rad(ANGLE_N_CA_C)
    coords[0, 2] = coords[0, 1] + BOND_CA_C * np.array([-np.cos(ang), np.sin(ang), 0.0])
    for i in range(1, n_res):
        coords[i, 0] = place_atom(
            coords[i - 1, 0], coords[i - 1, 1], coords[i - 1, 2],
            BOND_C_N, ANGLE_CA_C_N, psi[i - 1],
        )
        coords[i, 1] = place_atom(
            coords[i - 1, 1], coords[i - 1, 2], coords[i, 0],
            BOND_N_CA, ANGLE_C_N_CA, omega[i],
        )
        coords[i, 2] = place_atom(
            coords[i - 1, 2], coords[i, 0], coords[i, 1],
            BOND_CA_C, ANGLE_N_CA_C, phi[i],
        )
    for i in range(n_res):
        coords[i, 3] = place_atom(
            coords[i, 0], coords[i, 1], coords[i, 2],
            BOND_C_O, ANGLE_CA_C_O, psi[i] + 180.0,
        )
    return Backbone(coords)


def helix_backbone(n_res=12):
    """Ideal alpha helix: phi = -57, psi = -47, omega = 180."""
    return backbone_from_torsions([-57.0] * n_res, [-47.0] * n_res, [180.0] * n_res)


def coil_backbone(n_res, rng):
    """Generic non-degenerate chain from randomized torsions."""
    phi = rng.uniform(-150, -50, n_res)
    psi = rng.uniform(-60, 150, n_res)
    omega = rng.uniform(170, 190, n_res)
    return backbone_from_torsions(phi, psi, omega)


def random_rotation(rng):
    q, _ = np.linalg.qr(rng.normal(size=(3, 3)))
    if np.linalg.det(q) < 0:
        q[:, 0] = -q[:, 0]
    return q


def random_rigid_motion(rng, scale=10.0):
    return random_rotation(rng), rng.normal(scale=scale, size=3)
