"""Coarsening operators: bead assignments, their application and composition.

A mapping sends a level-``i`` frame with ``n_fine`` particles to a level
``i + 1`` frame with ``n_coarse`` beads; each bead sits at the weighted
center of its members.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .core import BEAD, Atom, Conformation, Ensemble, Topology

log = logging.getLogger(__name__)


@dataclass(frozen=True, eq=False)
class CGMapping:
    assignment: np.ndarray
    weights: np.ndarray
    n_coarse: int
    from_level: int = 0
    to_level: int = 1

    def __post_init__(self):
        a = np.array(self.assignment, dtype=np.int64)
        w = np.array(self.weights, dtype=np.float64)
        if a.ndim != 1 or w.shape != a.shape:
            raise ValueError("assignment and weights must be equal-length vectors")
        n_coarse = int(self.n_coarse)
        if a.size <= n_coarse:
            raise ValueError(f"mapping must coarsen: n_fine={a.size} <= n_coarse={n_coarse}")
        if a.min() < 0 or a.max() >= n_coarse:
            raise ValueError("bead index out of range")
        if np.any(w < 0) or not np.all(np.isfinite(w)):
            raise ValueError("weights must be finite and nonnegative")
        counts = np.bincount(a, minlength=n_coarse)
        if np.any(counts == 0):
            raise ValueError(f"beads {np.flatnonzero(counts == 0).tolist()} receive no particles")
        wsum = np.bincount(a, weights=w, minlength=n_coarse)
        if np.any(wsum <= 0):
            raise ValueError(f"beads {np.flatnonzero(wsum <= 0).tolist()} have zero total weight")
        if self.to_level != self.from_level + 1:
            raise ValueError("a mapping connects adjacent levels")
        a.setflags(write=False)
        w.setflags(write=False)
        object.__setattr__(self, "assignment", a)
        object.__setattr__(self, "weights", w)
        object.__setattr__(self, "n_coarse", n_coarse)

    @property
    def n_fine(self) -> int:
        return self.assignment.size

    def members(self, bead: int) -> np.ndarray:
        return np.flatnonzero(self.assignment == bead)

    def counts(self) -> np.ndarray:
        return np.bincount(self.assignment, minlength=self.n_coarse)

    def matrix(self) -> np.ndarray:
        """Dense ``(n_coarse, n_fine)`` operator with rows normalized to sum 1."""
        m = np.zeros((self.n_coarse, self.n_fine))
        m[self.assignment, np.arange(self.n_fine)] = self.weights
        return m / m.sum(axis=1, keepdims=True)

    def is_contiguous(self) -> bool:
        return all(np.all(np.diff(self.members(b)) == 1) for b in range(self.n_coarse))


def apply_mapping_array(xyz: np.ndarray, mapping: CGMapping) -> np.ndarray:
    """Apply ``mapping`` to an ``(..., n_fine, 3)`` array."""
    xyz = np.asarray(xyz, dtype=np.float64)
    if xyz.shape[-2] != mapping.n_fine:
        raise ValueError(f"level mismatch: {xyz.shape[-2]} particles, mapping expects {mapping.n_fine}")
    return mapping.matrix() @ xyz


def apply_mapping(conf: Conformation, mapping: CGMapping) -> Conformation:
    if conf.n != mapping.n_fine or conf.level != mapping.from_level:
        raise ValueError(
            f"level mismatch: frame has {conf.n} particles at level {conf.level}, "
            f"mapping expects {mapping.n_fine} at level {mapping.from_level}"
        )
    return Conformation(apply_mapping_array(conf.coords, mapping), mapping.to_level)


def apply_to_ensemble(ens: Ensemble, mapping: CGMapping, topology: Topology | None = None) -> Ensemble:
    top = topology if topology is not None else coarse_topology(ens.topology, mapping)
    return Ensemble.from_array(top, apply_mapping_array(ens.coords(), mapping), level=mapping.to_level)


def calpha_mapping(topology: Topology, from_level: int = 0) -> CGMapping:
    """One bead per residue, placed exactly on that residue's CA atom."""
    names = np.array(topology.names)
    res = topology.residue_indices
    weights = (names == "CA").astype(np.float64)
    for r in range(topology.n_residues):
        n_ca = int(weights[res == r].sum())
        if n_ca == 0:
            raise ValueError(f"residue {r} has no CA")
        if n_ca > 1:
            raise ValueError(f"residue {r} has {n_ca} CA atoms")
    return CGMapping(res, weights, topology.n_residues, from_level, from_level + 1)


def _frame_features(ensemble: Ensemble) -> np.ndarray:
    xyz = ensemble.coords()
    xyz = xyz - xyz.mean(axis=1, keepdims=True)
    # (n, 3T): each particle is one point in the concatenated-frame space
    return np.transpose(xyz, (1, 0, 2)).reshape(xyz.shape[1], -1)


def clustering_objective(ensemble_or_features, assignment: np.ndarray) -> float:
    """Frame-averaged sum of squared distances of particles to their bead centers."""
    if isinstance(ensemble_or_features, Ensemble):
        feats, n_frames = _frame_features(ensemble_or_features), len(ensemble_or_features)
    else:
        feats, n_frames = ensemble_or_features
    assignment = np.asarray(assignment)
    total = 0.0
    for b in np.unique(assignment):
        pts = feats[assignment == b]
        total += float(((pts - pts.mean(axis=0)) ** 2).sum())
    return total / n_frames


def _kmeanspp(feats: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    n = feats.shape[0]
    centers = [feats[rng.integers(n)]]
    d2 = ((feats - centers[0]) ** 2).sum(axis=1)
    for _ in range(1, k):
        total = d2.sum()
        idx = rng.choice(n, p=d2 / total) if total > 0 else rng.integers(n)
        centers.append(feats[idx])
        d2 = np.minimum(d2, ((feats - feats[idx]) ** 2).sum(axis=1))
    return np.array(centers)


def _centers(feats, assignment, k):
    counts = np.bincount(assignment, minlength=k)
    sums = np.zeros((k, feats.shape[1]))
    np.add.at(sums, assignment, feats)
    return sums / np.maximum(counts, 1)[:, None], counts


def _refill_empty(feats, assignment, k):
    """Give each empty bead the worst-fit particle of a multi-member bead."""
    centers, counts = _centers(feats, assignment, k)
    for b in np.flatnonzero(counts == 0):
        cost = ((feats - centers[assignment]) ** 2).sum(axis=1)
        cost[counts[assignment] <= 1] = -1.0
        p = int(np.argmax(cost))
        assignment[p] = b
        centers, counts = _centers(feats, assignment, k)
    return assignment


def lloyd_kmeans(feats: np.ndarray, k: int, n_frames: int, rng: np.random.Generator, max_iters: int = 100):
    """Seeded Lloyd iterations; returns ``(assignment, objective history)``."""
    centers = _kmeanspp(feats, k, rng)
    d = ((feats[:, None, :] - centers[None]) ** 2).sum(axis=2)
    assignment = _refill_empty(feats, np.argmin(d, axis=1), k)  # ties go to the lowest bead index
    history = [clustering_objective((feats, n_frames), assignment)]
    for _ in range(max_iters):
        centers, _ = _centers(feats, assignment, k)
        d = ((feats[:, None, :] - centers[None]) ** 2).sum(axis=2)
        new = _refill_empty(feats, np.argmin(d, axis=1), k)
        if np.array_equal(new, assignment):
            break
        assignment = new
        history.append(clustering_objective((feats, n_frames), assignment))
    return assignment, history


def contiguous_segments(feats: np.ndarray, k: int) -> np.ndarray:
    """Exact minimum-cost split of the particle sequence into ``k`` contiguous runs."""
    n = feats.shape[0]
    csum = np.vstack([np.zeros(feats.shape[1]), np.cumsum(feats, axis=0)])
    csq = np.concatenate([[0.0], np.cumsum((feats**2).sum(axis=1))])

    def seg_cost(i, j):  # particles [i, j), vectorized over i
        length = j - i
        s = csum[j] - csum[i]
        return (csq[j] - csq[i]) - (s**2).sum(axis=-1) / length

    inf = np.inf
    best = np.full((k + 1, n + 1), inf)
    back = np.zeros((k + 1, n + 1), dtype=np.int64)
    best[0, 0] = 0.0
    for m in range(1, k + 1):
        for j in range(m, n - (k - m) + 1):
            starts = np.arange(m - 1, j)
            cand = best[m - 1, starts] + seg_cost(starts, j)
            arg = int(np.argmin(cand))
            best[m, j] = cand[arg]
            back[m, j] = starts[arg]
    assignment = np.empty(n, dtype=np.int64)
    j = n
    for m in range(k, 0, -1):
        i = back[m, j]
        assignment[i:j] = m - 1
        j = i
    return assignment


def learn_mapping(
    ensemble: Ensemble,
    n_coarse: int,
    max_iters: int = 100,
    seed: int = 0,
    contiguity: bool = False,
    n_init: int = 4,
) -> CGMapping:
    """Geometry-conserving bead assignment with uniform weights.

    Minimizes the ensemble-averaged within-bead squared distance to the bead
    center. With ``contiguity`` every bead is a contiguous run of sequence
    indices and the optimum is found exactly by dynamic programming; without
    it, the best of ``n_init`` seeded Lloyd runs is returned.
    """
    if len(ensemble) == 0:
        raise ValueError("empty ensemble")
    n_fine = ensemble.topology.n_atoms
    if not 1 <= n_coarse < n_fine:
        raise ValueError(f"n_coarse={n_coarse} must be in [1, n_fine={n_fine})")
    feats = _frame_features(ensemble)
    if contiguity:
        assignment = contiguous_segments(feats, n_coarse)
    else:
        rng = np.random.default_rng(seed)
        runs = [lloyd_kmeans(feats, n_coarse, len(ensemble), rng, max_iters) for _ in range(n_init)]
        assignment = min(runs, key=lambda r: r[1][-1])[0]
        # relabel beads by first member so bead order follows the sequence
        _, first = np.unique(assignment, return_index=True)
        assignment = np.argsort(np.argsort(first))[assignment]
    lvl = ensemble.level
    return CGMapping(assignment, np.ones(n_fine), n_coarse, lvl, lvl + 1)


def bead_size_rho(topology: Topology, chain: Sequence[CGMapping] | CGMapping) -> float:
    """Average bead size: residues per bead at the end of ``chain``."""
    mappings = [chain] if isinstance(chain, CGMapping) else list(chain)
    if not mappings:
        return 1.0 * topology.n_residues / topology.n_atoms
    if mappings[0].n_fine != topology.n_atoms:
        raise ValueError("mapping chain does not start at this topology")
    return topology.n_residues / mappings[-1].n_coarse


def compose_chain(mappings: Sequence[CGMapping]) -> CGMapping:
    """Collapse ``[m0, m1, ...]`` into one mapping equivalent to applying them in order."""
    mappings = list(mappings)
    if not mappings:
        raise ValueError("empty mapping chain")
    out = mappings[0]
    for nxt in mappings[1:]:
        if nxt.from_level != out.to_level or nxt.n_fine != out.n_coarse:
            raise ValueError(
                f"level mismatch: {out.from_level}->{out.to_level} then {nxt.from_level}->{nxt.to_level}"
            )
        inner_total = np.bincount(out.assignment, weights=out.weights, minlength=out.n_coarse)
        mid = out.assignment
        weights = out.weights * nxt.weights[mid] / inner_total[mid]
        out = _ComposedMapping(nxt.assignment[mid], weights, nxt.n_coarse, out.from_level, nxt.to_level)
    return out


@dataclass(frozen=True, eq=False)
class _ComposedMapping(CGMapping):
    """Mapping spanning several levels (``to_level - from_level >= 1``)."""

    def __post_init__(self):
        lvl_from, lvl_to = self.from_level, self.to_level
        object.__setattr__(self, "to_level", lvl_from + 1)
        super().__post_init__()
        object.__setattr__(self, "to_level", lvl_to)


def level_bonds(bonds: np.ndarray, mapping: CGMapping) -> np.ndarray:
    """Contract a bond graph through ``mapping``: beads are bonded if any members are."""
    bonds = np.asarray(bonds, dtype=np.int64).reshape(-1, 2)
    a = mapping.assignment[bonds]
    a = a[a[:, 0] != a[:, 1]]
    a = np.sort(a, axis=1)
    if a.size == 0:
        return np.zeros((0, 2), dtype=np.int64)
    return np.unique(a, axis=0)


def coarse_topology(topology: Topology, mapping: CGMapping) -> Topology:
    """Topology of the coarse level.

    Beads whose weight sits on a single atom (e.g. CA selection) inherit that
    atom's identity; other beads get the synthetic bead element, one pseudo
    residue per bead.
    """
    atoms = []
    single = True
    for b in range(mapping.n_coarse):
        m = mapping.members(b)
        nz = m[mapping.weights[m] > 0]
        if len(nz) != 1:
            single = False
            break
    if single:
        for b in range(mapping.n_coarse):
            m = mapping.members(b)
            src = topology.atoms[int(m[mapping.weights[m] > 0][0])]
            atoms.append(src)
        # residue ordinals must stay contiguous at the coarse level
        res = [a.residue_index for a in atoms]
        if res[0] != 0 or any(q - p not in (0, 1) for p, q in zip(res, res[1:])):
            single = False
    if not single:
        atoms = [Atom(BEAD, "B", b, "BEA") for b in range(mapping.n_coarse)]
    bonds = tuple(map(tuple, level_bonds(topology.bond_array(), mapping).tolist()))
    return Topology(tuple(atoms), bonds)


def write_mapping(mapping: CGMapping, path: str | Path) -> None:
    lines = [
        "# multibackmap mapping v1",
        f"# from_level {mapping.from_level}",
        f"# to_level {mapping.to_level}",
        f"# n_fine {mapping.n_fine}",
        f"# n_coarse {mapping.n_coarse}",
    ]
    lines += [f"{i} {b} {w!r}" for i, (b, w) in enumerate(zip(mapping.assignment.tolist(), mapping.weights.tolist()))]
    from .io import atomic_write_text

    atomic_write_text(path, "\n".join(lines) + "\n")


def read_mapping(path: str | Path) -> CGMapping:
    header: dict[str, int] = {}
    rows = []
    for lineno, line in enumerate(Path(path).read_text().splitlines(), 1):
        line = line.strip()
        if not line:
            continue
        if line.startswith("#"):
            parts = line[1:].split()
            if len(parts) == 2 and parts[0] in {"from_level", "to_level", "n_fine", "n_coarse"}:
                header[parts[0]] = int(parts[1])
            continue
        parts = line.split()
        if len(parts) != 3:
            raise ValueError(f"{path}:{lineno}: expected 'fine_index bead_index weight'")
        rows.append((int(parts[0]), int(parts[1]), float(parts[2])))
    missing = {"from_level", "to_level", "n_fine", "n_coarse"} - header.keys()
    if missing:
        raise ValueError(f"{path}: missing header fields {sorted(missing)}")
    rows.sort()
    if [r[0] for r in rows] != list(range(header["n_fine"])):
        raise ValueError(f"{path}: fine indices must cover 0..{header['n_fine'] - 1} exactly once")
    a = np.array([r[1] for r in rows])
    w = np.array([r[2] for r in rows])
    if header["to_level"] - header["from_level"] == 1:
        return CGMapping(a, w, header["n_coarse"], header["from_level"], header["to_level"])
    return _ComposedMapping(a, w, header["n_coarse"], header["from_level"], header["to_level"])
