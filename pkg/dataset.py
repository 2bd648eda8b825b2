"""
Datasets for EquiQuant
Lennard-Jones reference oracle, synthetic cluster generation, extended-XYZ I/O and splits
"""

import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, Iterator, List, Optional, Sequence, Tuple

import numpy as np

from geometry import DEFAULT_CUTOFF, MolGraph, build_graph


logger = logging.getLogger('EquiQuant.Dataset')

MAX_PLACEMENT_ATTEMPTS = 10_000
MIN_DISTANCE_FACTOR = 0.8
PROPERTIES = 'Properties=species:S:1:pos:R:3:forces:R:3'

ELEMENTS = [
    'H', 'He', 'Li', 'Be', 'B', 'C', 'N', 'O', 'F', 'Ne', 'Na', 'Mg', 'Al', 'Si', 'P', 'S', 'Cl',
    'Ar', 'K', 'Ca', 'Sc', 'Ti', 'V', 'Cr', 'Mn', 'Fe', 'Co', 'Ni', 'Cu', 'Zn', 'Ga', 'Ge', 'As',
    'Se', 'Br', 'Kr',
]
SYMBOL_TO_Z = {symbol: z for z, symbol in enumerate(ELEMENTS, start=1)}

# Per-species Lennard-Jones parameters: sigma (Å), epsilon (eV)
LJ_SPECIES = {
    6: (2.0, 0.10),
    8: (1.8, 0.15),
}


class DatasetError(ValueError):
    """Raised on generation failures and invalid splits"""


class XyzParseError(ValueError):
    """Raised on malformed extended-XYZ input; line and column are 1-based"""

    def __init__(self, message: str, line: int, column: int = 1):
        super().__init__(f"line {line}, column {column}: {message}")
        self.line = line
        self.column = column


@dataclass
class Dataset:
    """Molecules with reference energies (eV) and forces (eV/Å)"""
    graphs: List[MolGraph]
    metadata: Dict[str, Any] = field(default_factory=dict)

    def __len__(self) -> int:
        return len(self.graphs)

    def __iter__(self) -> Iterator[MolGraph]:
        return iter(self.graphs)

    def subset(self, indices: Sequence[int], role: Optional[str] = None) -> 'Dataset':
        metadata = dict(self.metadata)
        if role:
            metadata['split'] = role
        return Dataset([self.graphs[i] for i in indices], metadata)


def lj_pair_params(za: int, zb: int) -> Tuple[float, float]:
    """Lorentz-Berthelot mixed (sigma, epsilon) for a species pair"""
    try:
        sa, ea = LJ_SPECIES[int(za)]
        sb, eb = LJ_SPECIES[int(zb)]
    except KeyError as e:
        raise DatasetError(f"No Lennard-Jones parameters for species {e.args[0]}")
    return 0.5 * (sa + sb), math.sqrt(ea * eb)


def lj_energy_forces(species: Sequence[int], positions: np.ndarray) -> Tuple[float, np.ndarray]:
    """
    Lennard-Jones energy and its negative gradient over all atom pairs

    Args:
        species: Atomic numbers
        positions: [n, 3] coordinates in Å

    Returns:
        (energy in eV, forces [n, 3] in eV/Å)
    """
    positions = np.asarray(positions, dtype=np.float64)
    n = len(species)
    sigma = np.zeros((n, n))
    eps = np.zeros((n, n))
    for i in range(n):
        for j in range(n):
            sigma[i, j], eps[i, j] = lj_pair_params(species[i], species[j])

    diff = positions[:, None, :] - positions[None, :, :]
    r = np.linalg.norm(diff, axis=-1)
    upper = np.triu(np.ones((n, n), dtype=bool), k=1)
    np.fill_diagonal(r, 1.0)
    s6 = (sigma / r) ** 6
    s12 = s6 * s6
    energy = float(np.sum((4 * eps * (s12 - s6))[upper]))

    # dV/dr divided by r, zero on the diagonal
    coeff = 4 * eps * (-12 * s12 + 6 * s6) / (r * r)
    np.fill_diagonal(coeff, 0.0)
    forces = -np.sum(coeff[:, :, None] * diff, axis=1)
    return energy, forces


def cluster_radius(n_atoms: int, cutoff: float) -> float:
    return min(0.9 * cutoff, 1.5 * n_atoms ** (1.0 / 3.0))


def _place_atoms(species: np.ndarray, radius: float, rng: np.random.Generator, seed: int) -> np.ndarray:
    positions = np.zeros((0, 3))
    attempts = 0
    for z in species:
        while True:
            attempts += 1
            if attempts > MAX_PLACEMENT_ATTEMPTS:
                raise DatasetError(f"Rejection sampling failed after {MAX_PLACEMENT_ATTEMPTS} "
                                   f"attempts (seed {seed}, {len(species)} atoms)")
            direction = rng.normal(size=3)
            direction /= np.linalg.norm(direction)
            candidate = direction * radius * rng.uniform() ** (1.0 / 3.0)
            ok = all(np.linalg.norm(candidate - p) >= MIN_DISTANCE_FACTOR * lj_pair_params(z, zp)[0]
                     for p, zp in zip(positions, species))
            if ok:
                positions = np.vstack([positions, candidate])
                break
    return positions


def gen_synthetic(n_molecules: int, n_atoms: Tuple[int, int] = (8, 16), seed: int = 0,
                  cutoff: float = DEFAULT_CUTOFF) -> Dataset:
    """
    Generate random two-species clusters labelled by the Lennard-Jones oracle

    Args:
        n_molecules: Number of molecules
        n_atoms: Inclusive (low, high) atom-count range, within [2, 32]
        seed: Generator seed
        cutoff: Graph cutoff in Å (clusters fit inside 0.9 * cutoff)

    Returns:
        Dataset with reference energies and forces
    """
    lo, hi = n_atoms
    if not 2 <= lo <= hi <= 32:
        raise DatasetError(f"Atom-count range must lie within [2, 32], got {lo}..{hi}")
    rng = np.random.default_rng(seed)
    species_choices = np.array(sorted(LJ_SPECIES))
    graphs = []
    for _ in range(n_molecules):
        n = int(rng.integers(lo, hi + 1))
        species = rng.choice(species_choices, size=n)
        positions = _place_atoms(species, cluster_radius(n, cutoff), rng, seed)
        energy, forces = lj_energy_forces(species, positions)
        graphs.append(build_graph(species, positions, cutoff, ref_energy=energy, ref_forces=forces))

    logger.info(f"Generated {n_molecules} molecules ({lo}..{hi} atoms) with seed {seed}")
    return Dataset(graphs, {
        'generator': 'lennard-jones',
        'n_molecules': n_molecules,
        'n_atoms': [lo, hi],
        'seed': seed,
        'cutoff': cutoff,
    })


def write_xyz(dataset: Dataset) -> str:
    """Serialize a dataset as extended-XYZ with shortest round-trip floats"""
    lines = []
    for g in dataset:
        if not g.has_references():
            raise DatasetError("write_xyz needs reference energy and forces on every molecule")
        lines.append(str(g.n_atoms))
        lines.append(f"{PROPERTIES} energy={float(g.ref_energy)!r}")
        for z, pos, force in zip(g.species, g.positions, g.ref_forces):
            if not 1 <= z <= len(ELEMENTS):
                raise DatasetError(f"No element symbol for atomic number {z}")
            values = ' '.join(repr(float(v)) for v in (*pos, *force))
            lines.append(f"{ELEMENTS[z - 1]} {values}")
    return '\n'.join(lines) + ('\n' if lines else '')


def _fields(text: str) -> List[Tuple[str, int]]:
    """Whitespace-separated tokens with their 1-based column"""
    tokens = []
    column = 0
    for token in text.split():
        column = text.index(token, column)
        tokens.append((token, column + 1))
        column += len(token)
    return tokens


def _parse_float(token: str, line: int, column: int) -> float:
    try:
        value = float(token)
    except ValueError:
        raise XyzParseError(f"non-numeric field '{token}'", line, column)
    if not math.isfinite(value):
        raise XyzParseError(f"non-finite field '{token}'", line, column)
    return value


def parse_xyz(text: str, cutoff: float = DEFAULT_CUTOFF) -> Dataset:
    """
    Parse extended-XYZ frames (count line, properties line with energy=, atom lines)

    Args:
        text: File contents
        cutoff: Graph cutoff in Å

    Returns:
        Dataset of parsed molecules
    """
    lines = text.splitlines()
    graphs = []
    index = 0
    while index < len(lines):
        if not lines[index].strip():
            index += 1
            continue
        count_no = index + 1
        tokens = _fields(lines[index])
        try:
            n = int(tokens[0][0])
        except ValueError:
            raise XyzParseError(f"bad atom count '{tokens[0][0]}'", count_no, tokens[0][1])
        if n < 1 or len(tokens) != 1:
            raise XyzParseError(f"bad atom count line '{lines[index].strip()}'", count_no, tokens[0][1])

        props_no = count_no + 1
        if props_no > len(lines):
            raise XyzParseError("missing properties line", props_no)
        energy = None
        for token, column in _fields(lines[props_no - 1]):
            if token.startswith('energy='):
                energy = _parse_float(token[len('energy='):], props_no, column + len('energy='))
        if energy is None:
            raise XyzParseError("properties line has no energy=<float>", props_no)

        species, positions, forces = [], [], []
        for line_no in range(props_no + 1, props_no + 1 + n):
            if line_no > len(lines) or not lines[line_no - 1].strip():
                raise XyzParseError(f"expected {n} atom lines, found {line_no - props_no - 1}", line_no)
            tokens = _fields(lines[line_no - 1])
            symbol, column = tokens[0]
            if symbol not in SYMBOL_TO_Z:
                raise XyzParseError(f"unknown element symbol '{symbol}'", line_no, column)
            if len(tokens) != 7:
                column = tokens[-1][1] + len(tokens[-1][0]) if len(tokens) < 7 else tokens[7][1]
                raise XyzParseError(f"expected 7 fields, found {len(tokens)}", line_no, column)
            values = [_parse_float(token, line_no, col) for token, col in tokens[1:]]
            species.append(SYMBOL_TO_Z[symbol])
            positions.append(values[:3])
            forces.append(values[3:])

        graphs.append(build_graph(species, positions, cutoff, ref_energy=energy, ref_forces=forces))
        index = props_no + n

    logger.debug(f"Parsed {len(graphs)} frames")
    return Dataset(graphs, {'cutoff': cutoff})


def read_xyz(path: str, cutoff: float = DEFAULT_CUTOFF) -> Dataset:
    dataset = parse_xyz(Path(path).read_text(), cutoff)
    dataset.metadata['source'] = str(path)
    return dataset


def save_xyz(dataset: Dataset, path: str):
    Path(path).write_text(write_xyz(dataset))
    logger.info(f"Wrote {len(dataset)} frames to {path}")


def split(dataset: Dataset, fractions: Sequence[float] = (0.8, 0.1, 0.1),
          seed: int = 0) -> Tuple[Dataset, Dataset, Dataset]:
    """
    Deterministic shuffled train/val/test partition

    Train and val sizes are floored; test takes the remainder.

    Args:
        dataset: Dataset to split
        fractions: (train, val, test) fractions summing to 1
        seed: Shuffle seed

    Returns:
        (train, val, test)
    """
    if len(fractions) != 3 or any(f < 0 for f in fractions):
        raise DatasetError(f"Need three non-negative fractions, got {list(fractions)}")
    if abs(sum(fractions) - 1.0) > 1e-9:
        raise DatasetError(f"Split fractions must sum to 1, got {sum(fractions)}")
    n = len(dataset)
    order = np.random.default_rng(seed).permutation(n)
    n_train = int(math.floor(fractions[0] * n + 1e-9))
    n_val = int(math.floor(fractions[1] * n + 1e-9))
    sizes = (n_train, n_val, n - n_train - n_val)
    for role, size, fraction in zip(('train', 'val', 'test'), sizes, fractions):
        if fraction > 0 and size == 0:
            raise DatasetError(f"Split '{role}' is empty: {n} molecules are too few for fraction {fraction}")
    bounds = np.cumsum(sizes)[:-1]
    parts = np.split(order, bounds)
    return tuple(dataset.subset(part.tolist(), role) for part, role in zip(parts, ('train', 'val', 'test')))
