"""
Molecular geometry for EquiQuant
Cutoff graphs, rigid rotations, Haar-uniform SO(3) sampling and radial edge features
"""

import logging
from dataclasses import dataclass, field, replace
from typing import List, Optional, Sequence, Union

import numpy as np


logger = logging.getLogger('EquiQuant.Geometry')

DEFAULT_CUTOFF = 5.0
DEFAULT_N_RBF = 16
DUPLICATE_TOLERANCE = 1e-8
ROTATION_TOLERANCE = 1e-6
CUTOFF_RTOL = 1e-6


class GeometryError(ValueError):
    """Raised on degenerate geometry, invalid rotations or invalid distances"""


@dataclass
class MolGraph:
    """One molecule: species, positions (Å), cutoff neighbor lists and optional references"""
    species: np.ndarray
    positions: np.ndarray
    neighbors: List[np.ndarray]
    cutoff: float
    ref_energy: Optional[float] = None
    ref_forces: Optional[np.ndarray] = None

    @property
    def n_atoms(self) -> int:
        return len(self.species)

    @property
    def n_edges(self) -> int:
        return int(np.sum([len(n) for n in self.neighbors]))

    def has_references(self) -> bool:
        return self.ref_energy is not None and self.ref_forces is not None

    def edges(self):
        """Directed edges (senders, receivers); message j -> i for every j in N(i)"""
        receivers = np.concatenate([np.full(len(n), i, dtype=np.int64)
                                    for i, n in enumerate(self.neighbors)] or [np.zeros(0, np.int64)])
        senders = np.concatenate(list(self.neighbors) or [np.zeros(0, np.int64)]).astype(np.int64)
        return senders, receivers


@dataclass(frozen=True)
class Rotation:
    """Proper rotation matrix"""
    matrix: np.ndarray

    def __post_init__(self):
        m = np.asarray(self.matrix, dtype=np.float64)
        if m.shape != (3, 3):
            raise GeometryError(f"Rotation must be 3x3, got {m.shape}")
        if not np.allclose(m.T @ m, np.eye(3), atol=ROTATION_TOLERANCE):
            raise GeometryError("Rotation matrix is not orthogonal")
        if abs(np.linalg.det(m) - 1.0) > ROTATION_TOLERANCE:
            raise GeometryError("Rotation matrix has det != +1")
        object.__setattr__(self, 'matrix', m)

    @classmethod
    def identity(cls) -> 'Rotation':
        return cls(np.eye(3))

    @classmethod
    def about_axis(cls, axis: Sequence[float], angle: float) -> 'Rotation':
        """Rotation by angle (radians) about axis"""
        axis = np.asarray(axis, dtype=np.float64)
        axis = axis / np.linalg.norm(axis)
        half = angle / 2
        return cls(quaternion_to_matrix(np.concatenate([[np.cos(half)], np.sin(half) * axis])))

    def inverse(self) -> 'Rotation':
        return Rotation(self.matrix.T)

    def apply(self, vectors: np.ndarray) -> np.ndarray:
        """Left-multiply each row vector by the matrix"""
        vectors = np.asarray(vectors)
        return vectors @ self.matrix.T.astype(vectors.dtype)


def quaternion_to_matrix(q: np.ndarray) -> np.ndarray:
    w, x, y, z = q / np.linalg.norm(q)
    return np.array([
        [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
        [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
        [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
    ])


def random_rotation(seed: Union[int, np.random.Generator, None] = None) -> Rotation:
    """
    Haar-uniform rotation from a normalized 4-component Gaussian quaternion

    Args:
        seed: Integer seed or an existing generator to draw from
    """
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    q = rng.normal(size=4)
    while np.linalg.norm(q) < 1e-12:
        q = rng.normal(size=4)
    return Rotation(quaternion_to_matrix(q))


def build_graph(species: Sequence[int], positions, cutoff: float = DEFAULT_CUTOFF,
                ref_energy: Optional[float] = None, ref_forces=None) -> MolGraph:
    """
    Build the cutoff graph of one molecule (pairs at exactly the cutoff are included)

    Args:
        species: Atomic numbers
        positions: [n, 3] coordinates in Å
        cutoff: Neighbor cutoff radius in Å
        ref_energy: Optional reference energy (eV)
        ref_forces: Optional [n, 3] reference forces (eV/Å)

    Returns:
        MolGraph with symmetric neighbor lists
    """
    species = np.asarray(species, dtype=np.int64)
    positions = np.asarray(positions, dtype=np.float64)
    n = len(species)
    if n < 1:
        raise GeometryError("A graph needs at least one atom")
    if positions.shape != (n, 3):
        raise GeometryError(f"Positions shape {positions.shape} does not match {n} atoms")
    if cutoff <= 0:
        raise GeometryError(f"Cutoff must be positive, got {cutoff}")
    if not np.all(np.isfinite(positions)):
        raise GeometryError("Positions must be finite")

    dist = np.linalg.norm(positions[:, None, :] - positions[None, :, :], axis=-1)
    off_diagonal = ~np.eye(n, dtype=bool)
    if np.any(dist[off_diagonal] < DUPLICATE_TOLERANCE):
        i, j = np.argwhere((dist < DUPLICATE_TOLERANCE) & off_diagonal)[0]
        raise GeometryError(f"Atoms {i} and {j} share a position (degenerate geometry)")

    adjacency = (dist <= cutoff) & off_diagonal
    neighbors = [np.flatnonzero(adjacency[i]) for i in range(n)]
    if ref_forces is not None:
        ref_forces = np.asarray(ref_forces, dtype=np.float64)
    return MolGraph(species=species, positions=positions, neighbors=neighbors, cutoff=cutoff,
                    ref_energy=None if ref_energy is None else float(ref_energy),
                    ref_forces=ref_forces)


def rotate_graph(g: MolGraph, rotation: Rotation) -> MolGraph:
    """Rotate positions and reference forces; topology and energy are unchanged"""
    forces = None if g.ref_forces is None else rotation.apply(g.ref_forces)
    return replace(g, positions=rotation.apply(g.positions), ref_forces=forces,
                   neighbors=[n.copy() for n in g.neighbors])


def translate_graph(g: MolGraph, offset: Sequence[float]) -> MolGraph:
    return replace(g, positions=g.positions + np.asarray(offset, dtype=np.float64),
                   neighbors=[n.copy() for n in g.neighbors])


def permute_graph(g: MolGraph, perm: Sequence[int]) -> MolGraph:
    """Relabel atoms so that new atom k is old atom perm[k]"""
    perm = np.asarray(perm, dtype=np.int64)
    if sorted(perm.tolist()) != list(range(g.n_atoms)):
        raise GeometryError("perm is not a permutation of the atom indices")
    inverse = np.argsort(perm)
    neighbors = [np.sort(inverse[g.neighbors[old]]) for old in perm]
    forces = None if g.ref_forces is None else g.ref_forces[perm]
    return replace(g, species=g.species[perm], positions=g.positions[perm],
                   neighbors=neighbors, ref_forces=forces)


def cosine_envelope(distance, cutoff: float) -> np.ndarray:
    return 0.5 * (np.cos(np.pi * np.asarray(distance) / cutoff) + 1.0)


def rbf_expand(distance, n_basis: int = DEFAULT_N_RBF, cutoff: float = DEFAULT_CUTOFF) -> np.ndarray:
    """
    Gaussian radial basis with a cosine cutoff envelope

    Centers are evenly spaced on (0, cutoff] and share width equal to the spacing.

    Args:
        distance: Scalar or array of pair distances in Å
        n_basis: Number of basis functions
        cutoff: Cutoff radius in Å

    Returns:
        Array of shape distance.shape + (n_basis,)
    """
    d = np.asarray(distance, dtype=np.float64)
    if np.any(d <= 0):
        raise GeometryError("rbf_expand: distance must be positive")
    if np.any(d > cutoff):
        raise GeometryError(f"rbf_expand: distance beyond cutoff {cutoff}")
    width = cutoff / n_basis
    centers = width * np.arange(1, n_basis + 1)
    gauss = np.exp(-0.5 * ((d[..., None] - centers) / width) ** 2)
    return gauss * cosine_envelope(d, cutoff)[..., None]


@dataclass
class GraphBatch:
    """Disjoint union of molecules with flat directed edge arrays"""
    species: np.ndarray
    positions: np.ndarray
    senders: np.ndarray
    receivers: np.ndarray
    graph_index: np.ndarray
    n_graphs: int
    unit_vectors: np.ndarray
    distances: np.ndarray
    rbf: np.ndarray
    atom_counts: np.ndarray
    ref_energy: Optional[np.ndarray] = None
    ref_forces: Optional[np.ndarray] = None
    graphs: List[MolGraph] = field(default_factory=list, repr=False)

    @property
    def n_atoms(self) -> int:
        return len(self.species)

    @classmethod
    def from_graphs(cls, graphs: Sequence[MolGraph], n_rbf: int = DEFAULT_N_RBF,
                    cutoff: Optional[float] = None) -> 'GraphBatch':
        if not graphs:
            raise GeometryError("Cannot batch an empty list of graphs")
        cutoff = graphs[0].cutoff if cutoff is None else cutoff
        offset = 0
        senders, receivers, graph_index = [], [], []
        for k, g in enumerate(graphs):
            if g.cutoff > cutoff:
                raise GeometryError(f"Graph {k} built with cutoff {g.cutoff} > model cutoff {cutoff}")
            s, r = g.edges()
            senders.append(s + offset)
            receivers.append(r + offset)
            graph_index.append(np.full(g.n_atoms, k, dtype=np.int64))
            offset += g.n_atoms

        positions = np.concatenate([g.positions for g in graphs])
        senders = np.concatenate(senders)
        receivers = np.concatenate(receivers)
        displacement = positions[senders] - positions[receivers]
        distances = np.linalg.norm(displacement, axis=-1)
        if len(distances):
            unit = displacement / distances[:, None]
            # Listed pairs were within the cutoff; rotation round-off may push them an ulp past it
            if np.any(distances > cutoff * (1.0 + CUTOFF_RTOL)):
                raise GeometryError(f"Neighbor pair beyond cutoff {cutoff}; rebuild the graph after moving atoms")
            rbf = rbf_expand(np.minimum(distances, cutoff), n_rbf, cutoff)
        else:
            unit = np.zeros((0, 3))
            rbf = np.zeros((0, n_rbf))

        with_refs = all(g.has_references() for g in graphs)
        return cls(
            species=np.concatenate([g.species for g in graphs]),
            positions=positions,
            senders=senders,
            receivers=receivers,
            graph_index=np.concatenate(graph_index),
            n_graphs=len(graphs),
            unit_vectors=unit,
            distances=distances,
            rbf=rbf,
            atom_counts=np.array([g.n_atoms for g in graphs], dtype=np.int64),
            ref_energy=np.array([g.ref_energy for g in graphs]) if with_refs else None,
            ref_forces=np.concatenate([g.ref_forces for g in graphs]) if with_refs else None,
            graphs=list(graphs),
        )
