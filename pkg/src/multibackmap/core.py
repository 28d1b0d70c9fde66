"""Domain types shared across the package: elements, topologies, frames, ensembles."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from functools import lru_cache
from importlib import resources
from typing import Iterable, Sequence

import numpy as np

BEAD = "BD"


@dataclass(frozen=True)
class Element:
    symbol: str
    covalent_radius: float
    mass: float

    def __post_init__(self):
        # beads carry a zero radius so bond inference never links them
        if self.covalent_radius < 0 or (self.covalent_radius == 0 and self.symbol != BEAD):
            raise ValueError(f"element {self.symbol}: covalent radius must be positive")
        if self.mass <= 0:
            raise ValueError(f"element {self.symbol}: mass must be positive")

    @property
    def is_hydrogen(self) -> bool:
        return self.symbol == "H"


@lru_cache(maxsize=None)
def element_table() -> dict[str, Element]:
    raw = json.loads(resources.files("multibackmap.data").joinpath("elements.json").read_text())
    return {sym: Element(sym, v["covalent_radius"], v["mass"]) for sym, v in raw["elements"].items()}


def element(symbol: str) -> Element:
    table = element_table()
    key = symbol.strip().upper()
    if key not in table:
        raise KeyError(f"unsupported element {symbol!r}")
    return table[key]


@dataclass(frozen=True)
class Atom:
    element: str
    name: str
    residue_index: int
    residue_name: str = "UNK"


@dataclass(frozen=True)
class Topology:
    """Static molecular identity.

    ``bonds`` is stored as a sorted tuple of ``(i, j)`` pairs with ``i < j``.
    Residue indices are 0-based ordinals, contiguous along the atom list.
    """

    atoms: tuple[Atom, ...]
    bonds: tuple[tuple[int, int], ...] = ()
    n_residues: int = field(init=False)

    def __post_init__(self):
        atoms = tuple(self.atoms)
        n = len(atoms)
        if n == 0:
            raise ValueError("topology has no atoms")
        for a in atoms:
            element(a.element)
        canon = set()
        for i, j in self.bonds:
            i, j = int(i), int(j)
            if i == j:
                raise ValueError(f"self-loop bond on atom {i}")
            if not (0 <= i < n and 0 <= j < n):
                raise ValueError(f"bond ({i}, {j}) out of range for {n} atoms")
            pair = (min(i, j), max(i, j))
            if pair in canon:
                raise ValueError(f"duplicate bond {pair}")
            canon.add(pair)
        res = [a.residue_index for a in atoms]
        if res[0] != 0 or any(b - a not in (0, 1) for a, b in zip(res, res[1:])):
            raise ValueError("residue indices must start at 0 and increase contiguously")
        object.__setattr__(self, "atoms", atoms)
        object.__setattr__(self, "bonds", tuple(sorted(canon)))
        object.__setattr__(self, "n_residues", res[-1] + 1)

    @property
    def n_atoms(self) -> int:
        return len(self.atoms)

    @property
    def elements(self) -> list[str]:
        return [a.element for a in self.atoms]

    @property
    def names(self) -> list[str]:
        return [a.name for a in self.atoms]

    @property
    def residue_indices(self) -> np.ndarray:
        return np.array([a.residue_index for a in self.atoms], dtype=np.int64)

    def bond_array(self) -> np.ndarray:
        if not self.bonds:
            return np.zeros((0, 2), dtype=np.int64)
        return np.array(self.bonds, dtype=np.int64)

    def masses(self) -> np.ndarray:
        return np.array([element(a.element).mass for a in self.atoms])

    def residue_atoms(self, residue: int) -> list[int]:
        return [i for i, a in enumerate(self.atoms) if a.residue_index == residue]


@dataclass(frozen=True, eq=False)
class Conformation:
    """One frame of coordinates in Angstrom at resolution ``level`` (0 = fine)."""

    coords: np.ndarray
    level: int = 0

    def __post_init__(self):
        xyz = np.array(self.coords, dtype=np.float64)
        if xyz.ndim != 2 or xyz.shape[1] != 3 or xyz.shape[0] == 0:
            raise ValueError(f"coordinates must be a non-empty n x 3 array, got shape {xyz.shape}")
        if not np.all(np.isfinite(xyz)):
            raise ValueError("coordinates must be finite")
        xyz.setflags(write=False)
        object.__setattr__(self, "coords", xyz)

    @property
    def n(self) -> int:
        return self.coords.shape[0]

    def transformed(self, rotation: np.ndarray, translation: np.ndarray) -> "Conformation":
        return Conformation(self.coords @ np.asarray(rotation).T + np.asarray(translation), self.level)


@dataclass(frozen=True, eq=False)
class Ensemble:
    topology: Topology
    frames: tuple[Conformation, ...]

    def __post_init__(self):
        frames = tuple(self.frames)
        if frames:
            n, level = frames[0].n, frames[0].level
            for k, f in enumerate(frames):
                if f.n != n or f.level != level:
                    raise ValueError(f"frame {k} does not match the ensemble's particle count/level")
            if n != self.topology.n_atoms:
                raise ValueError(f"frames have {n} particles but topology has {self.topology.n_atoms}")
        object.__setattr__(self, "frames", frames)

    def __len__(self) -> int:
        return len(self.frames)

    @property
    def level(self) -> int:
        return self.frames[0].level if self.frames else 0

    def coords(self) -> np.ndarray:
        """Stacked ``(n_frames, n, 3)`` array."""
        return np.stack([f.coords for f in self.frames])

    @classmethod
    def from_array(cls, topology: Topology, xyz: np.ndarray, level: int = 0) -> "Ensemble":
        return cls(topology, tuple(Conformation(x, level) for x in np.asarray(xyz)))

    def subset(self, indices: Iterable[int]) -> "Ensemble":
        return Ensemble(self.topology, tuple(self.frames[i] for i in indices))


def heavy_atom_mask(topology: Topology) -> np.ndarray:
    return np.array([not element(a.element).is_hydrogen for a in topology.atoms], dtype=bool)


def center_of(conf: Conformation | np.ndarray, indices: Sequence[int], weights: Sequence[float] | None = None) -> np.ndarray:
    """Weighted mean position of the selected rows (uniform weights by default)."""
    xyz = conf.coords if isinstance(conf, Conformation) else np.asarray(conf, dtype=np.float64)
    idx = np.asarray(indices, dtype=np.int64)
    if idx.size == 0:
        raise ValueError("empty selection")
    if idx.min() < 0 or idx.max() >= xyz.shape[0]:
        raise IndexError("selection index out of range")
    if weights is None:
        return xyz[idx].mean(axis=0)
    w = np.asarray(weights, dtype=np.float64)
    if w.shape != idx.shape or np.any(w < 0) or w.sum() <= 0:
        raise ValueError("weights must be nonnegative, one per index, with positive sum")
    return (w[:, None] * xyz[idx]).sum(axis=0) / w.sum()


def load_residue_template(name: str) -> Topology:
    """Bundled single-residue template (e.g. ``"glycine"``) as a Topology."""
    raw = json.loads(resources.files("multibackmap.data").joinpath(f"{name}.json").read_text())
    names = [a["name"] for a in raw["atoms"]]
    atoms = tuple(Atom(a["element"], a["name"], 0, raw["residue"]) for a in raw["atoms"])
    bonds = tuple((names.index(a), names.index(b)) for a, b in raw["bonds"])
    return Topology(atoms, bonds)


def random_rotation(rng: np.random.Generator) -> np.ndarray:
    """Uniform random proper rotation matrix."""
    q = rng.normal(size=4)
    q /= np.linalg.norm(q)
    w, x, y, z = q
    return np.array(
        [
            [1 - 2 * (y * y + z * z), 2 * (x * y - z * w), 2 * (x * z + y * w)],
            [2 * (x * y + z * w), 1 - 2 * (x * x + z * z), 2 * (y * z - x * w)],
            [2 * (x * z - y * w), 2 * (y * z + x * w), 1 - 2 * (x * x + y * y)],
        ]
    )
