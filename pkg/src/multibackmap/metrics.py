"""Evaluation metrics for backmapped structures.

Heavy-atom RMSD (no superposition), normalized graph edit distance between
bond graphs, steric clash percentage, backbone dihedrals and radius of
gyration, plus the multi-seed aggregation used to report a scheme.
"""

from __future__ import annotations

import logging
from dataclasses import asdict, dataclass
from typing import Callable, Iterable, Sequence

import numpy as np

from .core import Conformation, Ensemble, Topology, element, heavy_atom_mask

log = logging.getLogger(__name__)

BOND_TOLERANCE = 1.2
CLASH_THRESHOLD = 1.2
BACKBONE = ("N", "CA", "C", "O", "OXT")


def _xyz(x) -> np.ndarray:
    return x.coords if isinstance(x, Conformation) else np.asarray(x, dtype=np.float64)


def rmsd(x, x_hat, mask: np.ndarray | None = None) -> float:
    """sqrt of the mean squared per-atom displacement over ``mask`` (all atoms if None)."""
    a, b = _xyz(x), _xyz(x_hat)
    if a.shape != b.shape:
        raise ValueError(f"particle count mismatch: {a.shape[0]} vs {b.shape[0]}")
    if mask is not None:
        a, b = a[mask], b[mask]
    return float(np.sqrt(((a - b) ** 2).sum(axis=1).mean()))


def infer_bonds(conf, elements: Sequence[str], tolerance: float = BOND_TOLERANCE) -> set[tuple[int, int]]:
    """Pairs closer than ``tolerance`` times the sum of covalent radii."""
    xyz = _xyz(conf)
    radii = np.array([element(e).covalent_radius for e in elements])
    d = np.sqrt(((xyz[:, None] - xyz[None]) ** 2).sum(-1))
    limit = tolerance * (radii[:, None] + radii[None, :])
    i, j = np.nonzero(np.triu(d < limit, k=1))
    return set(zip(i.tolist(), j.tolist()))


def _edge_set(g) -> set[tuple[int, int]]:
    return {(min(int(i), int(j)), max(int(i), int(j))) for i, j in g}


def ged_normalized(G, G_hat, n_edges: int | None = None, n_vertices: int | None = None, n_vertices_hat: int | None = None) -> float:
    """Edit distance between two bond graphs on the same labeled vertices, over |E|.

    With identical vertex sets and unit edge insertion/deletion costs the edit
    distance is the size of the edge symmetric difference.
    """
    if n_vertices is not None and n_vertices_hat is not None and n_vertices != n_vertices_hat:
        raise ValueError(f"vertex set mismatch: {n_vertices} vs {n_vertices_hat}")
    e, e_hat = _edge_set(G), _edge_set(G_hat)
    n_edges = len(e) if n_edges is None else n_edges
    if n_edges <= 0:
        raise ValueError("the reference graph has no edges")
    return len(e ^ e_hat) / n_edges


def sidechain_mask(topology: Topology) -> np.ndarray:
    return heavy_atom_mask(topology) & np.array([a.name not in BACKBONE for a in topology.atoms])


def steric_clash_score(conf, topology: Topology, threshold: float = CLASH_THRESHOLD) -> float:
    """Percent of residues with a sidechain heavy atom within ``threshold`` of a
    sidechain heavy atom of another residue."""
    xyz = _xyz(conf)
    sel = np.flatnonzero(sidechain_mask(topology))
    res = topology.residue_indices[sel]
    if sel.size < 2:
        return 0.0
    p = xyz[sel]
    d = np.sqrt(((p[:, None] - p[None]) ** 2).sum(-1))
    close = (d < threshold) & (res[:, None] != res[None, :])
    clashing = np.unique(res[close.any(axis=1)])
    return 100.0 * clashing.size / topology.n_residues


def dihedral(p0, p1, p2, p3) -> float:
    """Dihedral angle in degrees, range (-180, 180]."""
    b0, b1, b2 = p0 - p1, p2 - p1, p3 - p2
    b1n = b1 / np.linalg.norm(b1)
    v = b0 - np.dot(b0, b1n) * b1n
    w = b2 - np.dot(b2, b1n) * b1n
    x = np.dot(v, w)
    y = np.dot(np.cross(b1n, v), w)
    ang = float(np.degrees(np.arctan2(y, x)))
    return 180.0 if ang == -180.0 else ang


def phi_psi(conf, topology: Topology) -> tuple[list[tuple[float, float]], int]:
    """Backbone (phi, psi) pairs for interior residues.

    Returns the pairs and the number of residues skipped for missing backbone atoms.
    """
    xyz = _xyz(conf)
    index: dict[tuple[int, str], int] = {}
    for i, a in enumerate(topology.atoms):
        index.setdefault((a.residue_index, a.name), i)
    out, skipped = [], 0
    for r in range(1, topology.n_residues - 1):
        keys = [(r - 1, "C"), (r, "N"), (r, "CA"), (r, "C"), (r + 1, "N")]
        if any(k not in index for k in keys):
            skipped += 1
            continue
        c0, n1, ca1, c1, n2 = (xyz[index[k]] for k in keys)
        out.append((dihedral(c0, n1, ca1, c1), dihedral(n1, ca1, c1, n2)))
    if skipped:
        log.warning("phi_psi: skipped %d residues with missing backbone atoms", skipped)
    return out, skipped


def ramachandran_histogram(pairs: Iterable[tuple[float, float]], bin_width: float = 5.0) -> np.ndarray:
    """Normalized 2D density over (phi, psi) on ``bin_width``-degree bins."""
    pairs = np.asarray(list(pairs), dtype=np.float64).reshape(-1, 2)
    edges = np.arange(-180.0, 180.0 + bin_width, bin_width)
    hist, _, _ = np.histogram2d(pairs[:, 0], pairs[:, 1], bins=[edges, edges])
    total = hist.sum()
    return hist / total if total > 0 else hist


def radius_of_gyration(conf, masses: Sequence[float] | None = None) -> float:
    """Mass-weighted radius of gyration in nanometers (input in Angstrom)."""
    xyz = _xyz(conf)
    m = np.ones(len(xyz)) if masses is None else np.asarray(masses, dtype=np.float64)
    com = (m[:, None] * xyz).sum(0) / m.sum()
    rg = np.sqrt((m * ((xyz - com) ** 2).sum(1)).sum() / m.sum())
    return float(rg) / 10.0


@dataclass
class MetricsReport:
    rmsd_mean: float
    rmsd_std: float
    ged_norm_mean: float
    ged_norm_std: float
    clash_mean: float
    clash_std: float
    n_samples: int

    def __post_init__(self):
        vals = [self.rmsd_mean, self.rmsd_std, self.ged_norm_mean, self.ged_norm_std, self.clash_mean, self.clash_std]
        if any(v < 0 for v in vals) or not 0 <= self.clash_mean <= 100:
            raise ValueError(f"invalid metrics report {vals}")

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class Evaluation:
    report: MetricsReport
    per_seed: list[dict]
    rama_true: np.ndarray
    rama_generated: np.ndarray


def evaluate_frames(
    generate: Callable[[int, int], np.ndarray],
    truth: Ensemble,
    seeds: Sequence[int],
) -> Evaluation:
    """Score ``generate(frame_index, seed) -> fine coordinates`` against ``truth``.

    Metrics are averaged over frames per seed; the report gives mean and
    standard deviation of those per-seed averages.
    """
    seeds = list(seeds)
    if not seeds:
        raise ValueError("need at least one seed")
    if len(truth) == 0:
        raise ValueError("empty test set")
    top = truth.topology
    mask = heavy_atom_mask(top)
    heavy_idx = np.flatnonzero(mask)
    elements = [top.elements[i] for i in heavy_idx]
    remap = {int(i): k for k, i in enumerate(heavy_idx)}
    true_graph = {(remap[i], remap[j]) for i, j in top.bonds if i in remap and j in remap}
    per_seed, gen_pairs, true_pairs = [], [], []
    for k, frame in enumerate(truth.frames):
        true_pairs += phi_psi(frame, top)[0]
    for seed in seeds:
        rows = []
        for k, frame in enumerate(truth.frames):
            x_hat = np.asarray(generate(k, seed))
            g_hat = infer_bonds(x_hat[mask], elements)
            rows.append(
                (
                    rmsd(frame, x_hat, mask),
                    ged_normalized(true_graph, g_hat, len(true_graph)),
                    steric_clash_score(x_hat, top),
                )
            )
            gen_pairs += phi_psi(x_hat, top)[0]
        arr = np.array(rows)
        per_seed.append({"seed": seed, "rmsd": arr[:, 0].mean(), "ged_norm": arr[:, 1].mean(), "clash": arr[:, 2].mean()})
    r = np.array([[s["rmsd"], s["ged_norm"], s["clash"]] for s in per_seed])
    report = MetricsReport(
        float(r[:, 0].mean()), float(r[:, 0].std()),
        float(r[:, 1].mean()), float(r[:, 1].std()),
        float(r[:, 2].mean()), float(r[:, 2].std()),
        len(seeds) * len(truth),
    )
    return Evaluation(report, per_seed, ramachandran_histogram(true_pairs), ramachandran_histogram(gen_pairs))


def evaluate_scheme(chain, truth: Ensemble, seeds: Sequence[int] = (0, 1, 2), coarse: np.ndarray | None = None) -> Evaluation:
    """Backmap every frame of ``truth`` once per seed and score the results.

    ``chain`` is a trained chain (inputs are the true frames mapped to its
    coarsest level unless ``coarse`` is given) or a callable
    ``(frame_index, seed) -> fine coordinates``.
    """
    if callable(chain):
        return evaluate_frames(chain, truth, seeds)
    from .pipeline import backmap_frames

    xk = chain.coarsen(truth.coords()) if coarse is None else np.asarray(coarse)
    cache: dict[int, np.ndarray] = {}

    def generate(k: int, seed: int) -> np.ndarray:
        if seed not in cache:
            cache.clear()
            cache[seed] = backmap_frames(xk, chain, seed)[0]
        return cache[seed][k]

    return evaluate_frames(generate, truth, seeds)


def write_report(report: MetricsReport, json_path=None, csv_path=None) -> None:
    import json

    from .io import atomic_write_text

    d = {k: (int(v) if k == "n_samples" else float(v)) for k, v in report.to_dict().items()}
    if json_path is not None:
        atomic_write_text(json_path, json.dumps(d, indent=2, sort_keys=True) + "\n")
    if csv_path is not None:
        atomic_write_text(csv_path, ",".join(d) + "\n" + ",".join(repr(v) for v in d.values()) + "\n")


def write_rama_csv(hist: np.ndarray, path, bin_width: float = 5.0) -> None:
    """Long-format density table: lower bin edges of phi and psi, then the density."""
    from .io import atomic_write_text

    edges = np.arange(-180.0, 180.0, bin_width)
    rows = ["phi_deg,psi_deg,density"]
    for i, phi in enumerate(edges):
        for j, psi in enumerate(edges):
            rows.append(f"{phi:g},{psi:g},{float(hist[i, j])!r}")
    atomic_write_text(path, "\n".join(rows) + "\n")
