"""
Backbone featurizer.

Turns N/CA/C/O coordinates into per-residue vectors that do not change under
rigid motion of the whole chain: CA-CA distances to sequence neighbours,
backbone dihedrals on the unit circle, and neighbour/carbonyl directions
expressed in each residue's own N-CA-C frame.
"""

import logging
import math
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn.functional as F

from .errors import StructureTooShort
from .seqcore import BackboneStructure

logger = logging.getLogger(__name__)

NEIGHBOR_OFFSETS = tuple(range(-8, 0)) + tuple(range(1, 9))
DISTANCE_SCALE = 10.0
N_DIHEDRAL_FEATURES = 6
N_ORIENTATION_FEATURES = 9
FEATURE_DIM = len(NEIGHBOR_OFFSETS) + N_DIHEDRAL_FEATURES + N_ORIENTATION_FEATURES

# Ideal backbone geometry (Angstrom, degrees).
BOND_N_CA = 1.458
BOND_CA_C = 1.525
BOND_C_N = 1.329
BOND_C_O = 1.231
ANGLE_N_CA_C = 111.2
ANGLE_CA_C_N = 116.2
ANGLE_C_N_CA = 121.7
ANGLE_CA_C_O = 120.5
HELIX_PHI = -57.0
HELIX_PSI = -47.0
HELIX_OMEGA = 180.0


@dataclass(frozen=True, eq=False)
class StructureFeatures:
    """Per-residue invariant features, shape [L, FEATURE_DIM]."""

    values: np.ndarray

    def __len__(self) -> int:
        return self.values.shape[0]

    def tensor(self, dtype: torch.dtype = torch.float32) -> torch.Tensor:
        return torch.as_tensor(self.values, dtype=dtype)


def _normalize(tensor: torch.Tensor, dim: int = -1) -> torch.Tensor:
    return torch.nan_to_num(torch.div(tensor, torch.norm(tensor, dim=dim, keepdim=True)))


def _neighbor_distances(ca: torch.Tensor) -> torch.Tensor:
    n_res = ca.shape[0]
    columns = []
    for offset in NEIGHBOR_OFFSETS:
        column = torch.zeros(n_res, dtype=ca.dtype)
        if abs(offset) < n_res:
            if offset > 0:
                column[:-offset] = torch.norm(ca[offset:] - ca[:-offset], dim=-1)
            else:
                column[-offset:] = torch.norm(ca[:offset] - ca[-offset:], dim=-1)
        columns.append(column / DISTANCE_SCALE)
    return torch.stack(columns, dim=-1)


def _dihedrals(X: torch.Tensor, eps: float = 1e-7) -> torch.Tensor:
    # Atoms N, CA, C of every residue as one chain; phi[0], psi[-1] and omega[-1] are undefined.
    X = torch.reshape(X[:, :3], [3 * X.shape[0], 3])
    dX = X[1:] - X[:-1]
    U = _normalize(dX, dim=-1)
    u_2 = U[:-2]
    u_1 = U[1:-1]
    u_0 = U[2:]

    n_2 = _normalize(torch.cross(u_2, u_1, dim=-1), dim=-1)
    n_1 = _normalize(torch.cross(u_1, u_0, dim=-1), dim=-1)

    cosD = torch.sum(n_2 * n_1, -1)
    cosD = torch.clamp(cosD, -1 + eps, 1 - eps)
    D = torch.sign(torch.sum(u_2 * n_1, -1)) * torch.acos(cosD)

    D = F.pad(D, [1, 2])
    D = torch.reshape(D, [-1, 3])
    return torch.cat([torch.cos(D), torch.sin(D)], 1)


def _local_frames(X: torch.Tensor) -> torch.Tensor:
    """Rows are the orthonormal axes of each residue's N-CA-C frame, [L, 3, 3]."""
    n, ca, c = X[:, 0], X[:, 1], X[:, 2]
    b1 = _normalize(c - ca)
    normal = _normalize(torch.cross(b1, n - ca, dim=-1))
    b2 = torch.cross(normal, b1, dim=-1)
    return torch.stack([b1, b2, normal], dim=-2)


def _orientations(X: torch.Tensor) -> torch.Tensor:
    ca = X[:, 1]
    forward = F.pad(_normalize(ca[1:] - ca[:-1]), [0, 0, 0, 1])
    backward = F.pad(_normalize(ca[:-1] - ca[1:]), [0, 0, 1, 0])
    carbonyl = _normalize(X[:, 3] - X[:, 2])
    vectors = torch.stack([forward, backward, carbonyl], dim=-2)
    local = torch.einsum("lij,lvj->lvi", _local_frames(X), vectors)
    return local.reshape(X.shape[0], N_ORIENTATION_FEATURES)


def featurize_structure(structure: BackboneStructure) -> StructureFeatures:
    """
    Compute rigid-motion invariant per-residue features.

    Args:
        structure: Backbone coordinates [L, 4, 3]

    Returns:
        StructureFeatures: [L, 31] float64 array; 16 scaled CA-CA neighbour
        distances, 6 dihedral cos/sin values, 9 local-frame direction components

    Raises:
        StructureTooShort: Fewer than 3 residues
    """
    if len(structure) < 3:
        raise StructureTooShort(len(structure))
    X = torch.as_tensor(np.asarray(structure.coords), dtype=torch.float64)
    features = torch.cat([_neighbor_distances(X[:, 1]), _dihedrals(X), _orientations(X)], dim=-1)
    return StructureFeatures(features.numpy())


def place_atom(a: np.ndarray, b: np.ndarray, c: np.ndarray, bond: float, angle: float, torsion: float) -> np.ndarray:
    """
    Position atom d from three preceding atoms.

    Args:
        a, b, c: Preceding atom positions
        bond: |cd| in Angstrom
        angle: Bond angle b-c-d in degrees
        torsion: Dihedral a-b-c-d in degrees
    """
    angle, torsion = math.radians(angle), math.radians(torsion)
    bc = c - b
    bc /= np.linalg.norm(bc)
    n = np.cross(b - a, bc)
    n /= np.linalg.norm(n)
    m = np.cross(n, bc)
    d2 = np.array([
        -bond * math.cos(angle),
        bond * math.sin(angle) * math.cos(torsion),
        bond * math.sin(angle) * math.sin(torsion),
    ])
    return c + d2[0] * bc + d2[1] * m + d2[2] * n


def ideal_helix(length: int, phi: float = HELIX_PHI, psi: float = HELIX_PSI,
                omega: float = HELIX_OMEGA) -> np.ndarray:
    """
    Backbone of a regular chain with constant dihedrals, [length, 4, 3].

    Defaults give a right-handed alpha helix.
    """
    angle = math.radians(ANGLE_N_CA_C)
    n_atom = np.zeros(3)
    ca_atom = np.array([BOND_N_CA, 0.0, 0.0])
    c_atom = ca_atom + BOND_CA_C * np.array([-math.cos(angle), math.sin(angle), 0.0])

    coords = np.zeros((length, 4, 3))
    for index in range(length):
        coords[index, 0], coords[index, 1], coords[index, 2] = n_atom, ca_atom, c_atom
        coords[index, 3] = place_atom(n_atom, ca_atom, c_atom, BOND_C_O, ANGLE_CA_C_O, psi + 180.0)
        next_n = place_atom(n_atom, ca_atom, c_atom, BOND_C_N, ANGLE_CA_C_N, psi)
        next_ca = place_atom(ca_atom, c_atom, next_n, BOND_N_CA, ANGLE_C_N_CA, omega)
        next_c = place_atom(c_atom, next_n, next_ca, BOND_CA_C, ANGLE_N_CA_C, phi)
        n_atom, ca_atom, c_atom = next_n, next_ca, next_c
    return coords
