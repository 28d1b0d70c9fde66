"""Seeded synthetic peptide ensembles used as desk-scale training data.

Each residue carries four heavy atoms (N, CA, C, CB) and every covalent bond
is 1.5 A long. Frames share one reference backbone (a seeded mix of helix,
strand and polyproline-like segments) and differ by Gaussian noise on the
phi/psi dihedrals; the noise width is the flexibility knob. Frames where any
two non-bonded atoms come closer than ``min_nonbonded`` are redrawn.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .core import Atom, Ensemble, Topology

BOND = 1.5
ANGLE_N_CA_C = np.deg2rad(111.0)
ANGLE_CA_C_N = np.deg2rad(116.0)
ANGLE_C_N_CA = np.deg2rad(122.0)
OMEGA = np.pi
# (phi, psi) basins in degrees
BASINS = {"helix": (-63.0, -43.0), "strand": (-120.0, 130.0), "ppii": (-75.0, 145.0)}


@dataclass(frozen=True)
class SyntheticSpec:
    n_residues: int
    n_frames: int
    seed: int = 0
    flexibility: float = 10.0  # dihedral noise, degrees
    min_nonbonded: float = 2.0
    max_tries: int = 200

    def __post_init__(self):
        if self.n_residues < 3:
            raise ValueError("n_residues must be >= 3")
        if self.n_frames < 1:
            raise ValueError("n_frames must be >= 1")
        if self.flexibility < 0:
            raise ValueError("flexibility must be >= 0")
        if self.min_nonbonded <= BOND:
            raise ValueError("min_nonbonded must exceed the bond length")


def peptide_topology(n_residues: int) -> Topology:
    atoms, bonds = [], []
    for r in range(n_residues):
        base = 4 * r
        atoms += [Atom("N", "N", r, "ALA"), Atom("C", "CA", r, "ALA"), Atom("C", "C", r, "ALA"), Atom("C", "CB", r, "ALA")]
        bonds += [(base, base + 1), (base + 1, base + 2), (base + 1, base + 3)]
        if r > 0:
            bonds.append((base - 2, base))
    return Topology(tuple(atoms), tuple(bonds))


def _place(a: np.ndarray, b: np.ndarray, c: np.ndarray, angle: float, torsion: float, length: float = BOND) -> np.ndarray:
    """Position of d with |cd| = length, angle bcd and dihedral abcd."""
    bc = c - b
    bc /= np.linalg.norm(bc)
    n = np.cross(b - a, bc)
    n /= np.linalg.norm(n)
    m = np.cross(n, bc)
    return c + length * (-np.cos(angle) * bc + np.sin(angle) * np.cos(torsion) * m + np.sin(angle) * np.sin(torsion) * n)


def _cb(n: np.ndarray, ca: np.ndarray, c: np.ndarray) -> np.ndarray:
    b, cc = ca - n, c - ca
    a = np.cross(b, cc)
    v = -0.58273431 * a + 0.56802827 * b - 0.54067466 * cc
    return ca + BOND * v / np.linalg.norm(v)


def build_backbone(phi: np.ndarray, psi: np.ndarray) -> np.ndarray:
    """Coordinates ``(4 * n_res, 3)`` in N, CA, C, CB order from dihedrals in radians."""
    n_res = len(phi)
    xyz = np.zeros((n_res, 4, 3))
    n0 = np.zeros(3)
    ca0 = np.array([BOND, 0.0, 0.0])
    c0 = ca0 + BOND * np.array([-np.cos(ANGLE_N_CA_C), np.sin(ANGLE_N_CA_C), 0.0])
    xyz[0, :3] = n0, ca0, c0
    for r in range(1, n_res):
        n_prev, ca_prev, c_prev = xyz[r - 1, :3]
        nr = _place(n_prev, ca_prev, c_prev, ANGLE_CA_C_N, psi[r - 1])
        car = _place(ca_prev, c_prev, nr, ANGLE_C_N_CA, OMEGA)
        cr = _place(c_prev, nr, car, ANGLE_N_CA_C, phi[r])
        xyz[r, :3] = nr, car, cr
    for r in range(n_res):
        xyz[r, 3] = _cb(*xyz[r, :3])
    return xyz.reshape(-1, 3)


def _bonded_mask(top: Topology) -> np.ndarray:
    n = top.n_atoms
    mask = np.eye(n, dtype=bool)
    b = top.bond_array()
    mask[b[:, 0], b[:, 1]] = True
    mask[b[:, 1], b[:, 0]] = True
    return mask


def min_nonbonded_distance(xyz: np.ndarray, top: Topology) -> float:
    d = np.sqrt(((xyz[:, None] - xyz[None]) ** 2).sum(-1))
    d[_bonded_mask(top)] = np.inf
    return float(d.min())


def reference_dihedrals(n_residues: int, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    """Segment-wise basin assignment: runs of 3-8 residues share a basin."""
    kinds = list(BASINS)
    phi, psi = np.zeros(n_residues), np.zeros(n_residues)
    r = 0
    while r < n_residues:
        run = int(rng.integers(3, 9))
        kind = kinds[int(rng.integers(len(kinds)))]
        p, s = BASINS[kind]
        phi[r : r + run] = p + rng.normal(0, 8.0, size=min(run, n_residues - r))
        psi[r : r + run] = s + rng.normal(0, 8.0, size=min(run, n_residues - r))
        r += run
    return np.deg2rad(phi), np.deg2rad(psi)


def generate_synthetic_ensemble(
    n_residues: int,
    n_frames: int,
    seed: int = 0,
    flexibility: float = 10.0,
    min_nonbonded: float = 2.0,
) -> Ensemble:
    spec = SyntheticSpec(n_residues, n_frames, seed, flexibility, min_nonbonded)
    return generate(spec)


def generate(spec: SyntheticSpec) -> Ensemble:
    rng = np.random.default_rng(spec.seed)
    top = peptide_topology(spec.n_residues)
    for _ in range(spec.max_tries):
        phi0, psi0 = reference_dihedrals(spec.n_residues, rng)
        if min_nonbonded_distance(build_backbone(phi0, psi0), top) >= spec.min_nonbonded:
            break
    else:
        raise RuntimeError("could not build a self-avoiding reference chain")
    sigma = np.deg2rad(spec.flexibility)
    frames = []
    while len(frames) < spec.n_frames:
        for _ in range(spec.max_tries):
            phi = phi0 + rng.normal(0.0, sigma, spec.n_residues)
            psi = psi0 + rng.normal(0.0, sigma, spec.n_residues)
            xyz = build_backbone(phi, psi)
            if min_nonbonded_distance(xyz, top) >= spec.min_nonbonded:
                frames.append(xyz)
                break
        else:
            raise RuntimeError(f"frame {len(frames)}: no self-avoiding conformer in {spec.max_tries} draws")
    xyz = np.stack(frames)
    # center each frame at the origin
    xyz -= xyz.mean(axis=1, keepdims=True)
    return Ensemble.from_array(top, xyz)
