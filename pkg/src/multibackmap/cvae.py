"""Conditional VAE for one resolution step (fine level i from coarse level i+1).

Encoder q(z | x_i, x_{i+1}), prior p(z | x_{i+1}) and decoder p(x_i | x_{i+1}, z)
all run message passing on distance-derived features, so the latent
Gaussians are invariant to rigid motion. The decoder places every fine
particle at its bead plus a displacement built from unit inter-bead
directions (and their cross products with the bead's mean direction) with
invariant coefficients, then refines the placement with coordinate updates
along fine-level pair vectors. Both stages are exactly equivariant to
rotations and translations.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field, fields
from functools import cached_property
from pathlib import Path
from typing import Sequence

import numpy as np

from . import tensor as T
from .coarsen import CGMapping, _ComposedMapping, level_bonds
from .core import Conformation, Topology
from .gnncore import (
    EdgeList,
    ParamStore,
    edge_weight_tensor,
    add_filter_params,
    build_edges,
    edge_distances,
    edge_vectors,
    linear,
    load_checkpoint,
    message_passing_layer,
    multihop_pairs,
    rbf_expand,
    save_checkpoint,
    segment_mean,
)
from .tensor import DiffTensor

LOGVAR_MIN, LOGVAR_MAX = -20.0, 10.0
DIST_EPS = 1e-12
# atoms of single-atom beads sit exactly on their bead center; smoothing the
# own-bead distance over 0.1 A keeps the encoder differentiable there
OWN_SMOOTH = 0.1

# hyperparameter labels as printed in the published tables -> field names
APPENDIX_LABELS = {
    "Edge feature dimension K": "n_rbf",
    "Graph loss weight γ": "gamma",
    "Graph loss weight gamma": "gamma",
    "Encoder Convolution Depth": "enc_depth",
    "Prior Convolution Depth": "prior_depth",
    "Decoder Convolution Depth": "dec_depth",
    "FG cutoff d_cut": "fg_cutoff",
    "CG cutoff D_cut": "cg_cutoff",
    "Node embedding dimension F": "n_features",
    "Batch size": "batch_size",
    "Learning rate": "learning_rate",
    "Activation functions": "activation",
    "Training epochs": "epochs",
    "Order for multi-hop graph": "hop_order",
    "Regularization strength β": "beta",
    "Regularization strength beta": "beta",
    "Factor": "factor",
    "Latent dimension m": "latent_dim",
}


@dataclass(frozen=True)
class StepHyperparams:
    n_rbf: int = 6
    gamma: float = 1.0
    enc_depth: int = 1
    prior_depth: int = 1
    dec_depth: int = 2
    fg_cutoff: float = 4.0
    cg_cutoff: float = 20.0
    n_features: int = 32
    batch_size: int = 2
    learning_rate: float = 1e-3
    activation: str = "swish"
    epochs: int = 100
    hop_order: int = 2
    beta: float = 0.01
    factor: float = 0.5
    latent_dim: int = 36

    def __post_init__(self):
        checks = [
            (self.n_rbf >= 1, "n_rbf must be >= 1"),
            (self.gamma >= 0, "gamma must be >= 0"),
            (min(self.enc_depth, self.prior_depth, self.dec_depth) >= 0, "depths must be >= 0"),
            (self.fg_cutoff > 0 and self.cg_cutoff > 0, "cutoffs must be positive"),
            (self.n_features >= 1, "n_features must be >= 1"),
            (self.batch_size >= 1, "batch_size must be >= 1"),
            (self.learning_rate > 0, "learning_rate must be positive"),
            (self.activation == "swish", "only the swish activation is supported"),
            (self.epochs >= 1, "epochs must be >= 1"),
            (self.hop_order >= 0, "hop_order must be >= 0"),
            (self.beta >= 0, "beta must be >= 0"),
            (0 < self.factor < 1, "factor must lie in (0, 1)"),
            (self.latent_dim >= 1, "latent_dim must be >= 1"),
        ]
        for ok, msg in checks:
            if not ok:
                raise ValueError(msg)

    @classmethod
    def from_dict(cls, raw: dict) -> "StepHyperparams":
        names = {f.name for f in fields(cls)}
        kw = {}
        for key, value in raw.items():
            name = APPENDIX_LABELS.get(key, key)
            if name not in names:
                raise ValueError(f"unknown hyperparameter {key!r}")
            kw[name] = value
        return cls(**kw)

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class LatentGaussian:
    """Diagonal Gaussian per bead: ``mean`` and ``log_var`` are ``(n_beads, m)``."""

    mean: DiffTensor
    log_var: DiffTensor

    def __post_init__(self):
        self.mean = T.as_tensor(self.mean)
        self.log_var = T.as_tensor(self.log_var)
        if self.mean.shape != self.log_var.shape:
            raise ValueError("mean and log_var shapes differ")
        if not (np.all(np.isfinite(self.mean.values)) and np.all(np.isfinite(self.log_var.values))):
            raise ValueError("latent parameters must be finite")

    @property
    def shape(self) -> tuple[int, ...]:
        return self.mean.shape


def particle_descriptors(topology: Topology, mapping: CGMapping) -> tuple[np.ndarray, np.ndarray]:
    """Fixed feature vectors for fine particles and beads.

    Fine: one-hot atom name, one-hot residue ordinal, rank within the bead.
    Beads: mean of member descriptors plus relative bead size.
    """
    names = sorted(set(topology.names))
    n = topology.n_atoms
    name_oh = np.zeros((n, len(names)))
    name_oh[np.arange(n), [names.index(a) for a in topology.names]] = 1.0
    res_oh = np.zeros((n, topology.n_residues))
    res_oh[np.arange(n), topology.residue_indices] = 1.0
    rank = np.zeros((n, 1))
    for b in range(mapping.n_coarse):
        m = mapping.members(b)
        rank[m, 0] = np.arange(len(m)) / max(len(m) - 1, 1)
    fine = np.hstack([name_oh, res_oh, rank])
    counts = mapping.counts()
    bead = np.zeros((mapping.n_coarse, fine.shape[1]))
    np.add.at(bead, mapping.assignment, fine)
    bead /= counts[:, None]
    bead = np.hstack([bead, (counts / counts.max())[:, None]])
    return fine, bead


@dataclass(eq=False)
class CvaeModel:
    """Encoder, prior and decoder parameters for one step plus its static graph data."""

    hp: StepHyperparams
    mapping: CGMapping
    fine_bonds: np.ndarray
    fine_desc: np.ndarray
    bead_desc: np.ndarray
    params: ParamStore = field(repr=False)
    seed: int = 0

    @classmethod
    def create(cls, fine_topology: Topology, mapping: CGMapping, hp: StepHyperparams | None = None, seed: int = 0) -> "CvaeModel":
        hp = hp or StepHyperparams()
        if fine_topology.n_atoms != mapping.n_fine:
            raise ValueError("level mismatch: topology and mapping disagree on the fine particle count")
        fine_desc, bead_desc = particle_descriptors(fine_topology, mapping)
        model = cls(hp, mapping, fine_topology.bond_array(), fine_desc, bead_desc, ParamStore(seed), seed)
        model._init_params()
        return model

    def _init_params(self) -> None:
        p, hp = self.params, self.hp
        F, K, m = hp.n_features, hp.n_rbf, hp.latent_dim
        df, db = self.fine_desc.shape[1], self.bead_desc.shape[1]
        # encoder
        p.linear("enc.embed", df, F)
        p.linear("enc.own", K, F)
        p.linear("enc.pair_rbf", K, F)
        p.linear("enc.pair_bead", db, F)
        for i in range(hp.enc_depth):
            add_filter_params(p, f"enc.fine{i}", K, F)
        p.linear("enc.bead", db, F)
        for i in range(hp.enc_depth):
            add_filter_params(p, f"enc.cg{i}", K, F)
        p.linear("enc.mean", F, m)
        p.linear("enc.logvar", F, m)
        # prior
        p.linear("prior.bead", db, F)
        for i in range(hp.prior_depth):
            add_filter_params(p, f"prior.cg{i}", K, F)
        p.linear("prior.mean", F, m)
        p.linear("prior.logvar", F, m)
        # decoder
        p.linear("dec.z", m, F)
        p.linear("dec.bead", db, F)
        for i in range(hp.dec_depth):
            add_filter_params(p, f"dec.cg{i}", K, F)
        p.linear("dec.atom", df, F)
        p.linear("dec.self", F, F)
        p.linear("dec.nbr", F, F)
        p.linear("dec.edge", K, F)
        p.linear("dec.hidden", F, F)
        p.linear("dec.coef", F, 2, zero=True)
        p.linear("dec.fatom", df, F)
        p.linear("dec.fbead", F, F)
        for i in range(hp.dec_depth):
            p.linear(f"dec.ref{i}.src", F, F)
            p.linear(f"dec.ref{i}.dst", F, F)
            p.linear(f"dec.ref{i}.edge", K, F)
            p.linear(f"dec.ref{i}.hidden", F, F)
            p.linear(f"dec.ref{i}.x", F, 1, zero=True)

    @property
    def n_fine(self) -> int:
        return self.mapping.n_fine

    @property
    def n_coarse(self) -> int:
        return self.mapping.n_coarse

    @cached_property
    def coarse_bonds(self) -> np.ndarray:
        return level_bonds(self.fine_bonds, self.mapping)

    @cached_property
    def fine_hops(self) -> np.ndarray:
        return multihop_pairs(self.fine_bonds, self.n_fine, self.hp.hop_order)

    @cached_property
    def coarse_hops(self) -> np.ndarray:
        return multihop_pairs(self.coarse_bonds, self.n_coarse, self.hp.hop_order)

    def with_params(self, arrays) -> "CvaeModel":
        clone = CvaeModel.create_like(self)
        clone.params.load_arrays(arrays)
        return clone

    @classmethod
    def create_like(cls, other: "CvaeModel") -> "CvaeModel":
        model = cls(other.hp, other.mapping, other.fine_bonds, other.fine_desc, other.bead_desc, ParamStore(other.seed), other.seed)
        model._init_params()
        return model

    def save(self, path: str | Path) -> None:
        arrays = {f"param/{k}": v for k, v in self.params.arrays().items()}
        arrays.update(
            {
                "static/assignment": self.mapping.assignment.astype(np.float64),
                "static/weights": self.mapping.weights,
                "static/fine_bonds": self.fine_bonds.astype(np.float64).reshape(-1, 2),
                "static/fine_desc": self.fine_desc,
                "static/bead_desc": self.bead_desc,
            }
        )
        header = {
            "kind": "cvae-step",
            "hyperparameters": self.hp.to_dict(),
            "seed": self.seed,
            "n_coarse": self.mapping.n_coarse,
            "from_level": self.mapping.from_level,
            "to_level": self.mapping.to_level,
        }
        save_checkpoint(path, arrays, header)

    @classmethod
    def load(cls, path: str | Path) -> "CvaeModel":
        arrays, header = load_checkpoint(path)
        if header.get("kind") != "cvae-step":
            raise ValueError(f"{path} is not a step-model checkpoint")
        hp = StepHyperparams(**header["hyperparameters"])
        a, w = arrays["static/assignment"].astype(np.int64), arrays["static/weights"]
        lvl = (header["from_level"], header["to_level"])
        mcls = CGMapping if lvl[1] - lvl[0] == 1 else _ComposedMapping
        mapping = mcls(a, w, header["n_coarse"], *lvl)
        model = cls(
            hp,
            mapping,
            arrays["static/fine_bonds"].astype(np.int64),
            arrays["static/fine_desc"],
            arrays["static/bead_desc"],
            ParamStore(header["seed"]),
            header["seed"],
        )
        model._init_params()
        model.params.load_arrays({k[len("param/"):]: v for k, v in arrays.items() if k.startswith("param/")})
        return model


# ---------------------------------------------------------------- batch graphs


def _ranges(starts: np.ndarray, counts: np.ndarray) -> np.ndarray:
    """Concatenate ``arange(s, s + c)`` for each (s, c)."""
    total = int(counts.sum())
    if total == 0:
        return np.zeros(0, dtype=np.int64)
    offsets = np.repeat(np.cumsum(counts) - counts, counts)
    return np.repeat(starts, counts) + np.arange(total) - offsets


def _concat_edges(per_frame: Sequence[EdgeList], size: int, cutoff: float) -> EdgeList:
    src = np.concatenate([e.src + k * size for k, e in enumerate(per_frame)]) if per_frame else np.zeros(0, np.int64)
    dst = np.concatenate([e.dst + k * size for k, e in enumerate(per_frame)]) if per_frame else np.zeros(0, np.int64)
    w = np.concatenate([e.edge_weights for e in per_frame]) if per_frame else np.zeros(0)
    f = np.concatenate([e.forced_mask for e in per_frame]) if per_frame else np.zeros(0, bool)
    return EdgeList(src.astype(np.int64), dst.astype(np.int64), cutoff, w, f)


@dataclass
class BatchGraph:
    """Index structure for ``n_frames`` stacked frames of one step model."""

    n_frames: int
    n_fine: int
    n_coarse: int
    atom_bead: np.ndarray
    cg_edges: EdgeList
    pair_atom: np.ndarray
    pair_edge: np.ndarray
    fine_edges: EdgeList | None = None
    cache: dict = field(default_factory=dict)

    @classmethod
    def build(cls, model: CvaeModel, xc: np.ndarray, xf: np.ndarray | None = None) -> "BatchGraph":
        xc = np.asarray(xc, dtype=np.float64).reshape(-1, model.n_coarse, 3)
        B, N, n = xc.shape[0], model.n_coarse, model.n_fine
        hp = model.hp
        cg = _concat_edges([build_edges(x, hp.cg_cutoff, model.coarse_hops) for x in xc], N, hp.cg_cutoff)
        atom_bead = (np.arange(B)[:, None] * N + model.mapping.assignment[None, :]).reshape(-1)
        # edges are sorted by dst within each frame and frames are stacked in order
        counts = np.bincount(cg.dst, minlength=B * N)
        starts = np.concatenate([[0], np.cumsum(counts)[:-1]])
        deg = counts[atom_bead]
        pair_atom = np.repeat(np.arange(B * n), deg)
        pair_edge = _ranges(starts[atom_bead], deg)
        fine = None
        if xf is not None:
            xf = np.asarray(xf, dtype=np.float64).reshape(B, n, 3)
            fine = _concat_edges([build_edges(x, hp.fg_cutoff, model.fine_hops) for x in xf], n, hp.fg_cutoff)
        return cls(B, n, N, atom_bead, cg, pair_atom, pair_edge, fine)

    def cg_features(self, model: CvaeModel, xc: DiffTensor) -> tuple[DiffTensor, DiffTensor]:
        """Radial features and differentiable weights of the coarse edges (cached per graph)."""
        if "cg" not in self.cache:
            d = edge_distances(xc, self.cg_edges)
            rbf = rbf_expand(d, model.hp.n_rbf, model.hp.cg_cutoff)
            self.cache["cg"] = (rbf, T.reshape(edge_weight_tensor(d, self.cg_edges), (-1, 1)))
        return self.cache["cg"]


def _tile(desc: np.ndarray, n_frames: int) -> np.ndarray:
    return np.tile(desc, (n_frames, 1))


def _heads(h: DiffTensor, params, prefix: str) -> LatentGaussian:
    mean = linear(h, params, f"{prefix}.mean")
    log_var = T.clip(linear(h, params, f"{prefix}.logvar"), LOGVAR_MIN, LOGVAR_MAX)
    return LatentGaussian(mean, log_var)


def _encode(model: CvaeModel, xf: DiffTensor, xc: DiffTensor, g: BatchGraph) -> LatentGaussian:
    p, hp = model.params, model.hp
    K = hp.n_rbf
    h = linear(_tile(model.fine_desc, g.n_frames), p, "enc.embed")
    # distance to the own bead and to each neighbor bead of the own bead
    own = T.norm(xf - T.take(xc, g.atom_bead), eps=OWN_SMOOTH**2)
    h = h + linear(rbf_expand(own, K, hp.cg_cutoff), p, "enc.own")
    if len(g.pair_atom):
        _, w = g.cg_features(model, xc)
        nbr = g.cg_edges.src[g.pair_edge]
        d = T.norm(T.take(xf, g.pair_atom) - T.take(xc, nbr), eps=DIST_EPS)
        msg = T.swish(
            linear(rbf_expand(d, K, 2.0 * hp.cg_cutoff), p, "enc.pair_rbf")
            + T.take(linear(_tile(model.bead_desc, g.n_frames), p, "enc.pair_bead"), nbr)
        )
        msg = msg * T.take(w, g.pair_edge)
        h = h + T.segment_sum(msg, g.pair_atom, g.n_frames * g.n_fine)
    if hp.enc_depth:
        if len(g.fine_edges):
            d = edge_distances(xf, g.fine_edges)
            fine_rbf = rbf_expand(d, K, hp.fg_cutoff)
            fine_w = edge_weight_tensor(d, g.fine_edges)
            for i in range(hp.enc_depth):
                h = message_passing_layer(h, g.fine_edges, fine_rbf, p, f"enc.fine{i}", fine_w)
    H = segment_mean(h, g.atom_bead, g.n_frames * g.n_coarse)
    H = H + linear(_tile(model.bead_desc, g.n_frames), p, "enc.bead")
    if len(g.cg_edges):
        rbf, w = g.cg_features(model, xc)
        for i in range(hp.enc_depth):
            H = message_passing_layer(H, g.cg_edges, rbf, p, f"enc.cg{i}", w)
    return _heads(H, p, "enc")


def _prior(model: CvaeModel, xc: DiffTensor, g: BatchGraph) -> LatentGaussian:
    p = model.params
    H = linear(_tile(model.bead_desc, g.n_frames), p, "prior.bead")
    if len(g.cg_edges):
        rbf, w = g.cg_features(model, xc)
        for i in range(model.hp.prior_depth):
            H = message_passing_layer(H, g.cg_edges, rbf, p, f"prior.cg{i}", w)
    return _heads(H, p, "prior")


def _decode(model: CvaeModel, xc: DiffTensor, z, g: BatchGraph) -> DiffTensor:
    p, hp = model.params, model.hp
    H = linear(z, p, "dec.z") + linear(_tile(model.bead_desc, g.n_frames), p, "dec.bead")
    base = T.take(xc, g.atom_bead)
    if not len(g.cg_edges):
        return base
    rbf, w = g.cg_features(model, xc)
    for i in range(hp.dec_depth):
        H = message_passing_layer(H, g.cg_edges, rbf, p, f"dec.cg{i}", w)
    # initial placement: bead center plus invariant weights on unit inter-bead
    # directions and on their cross products with the bead's mean direction
    e = g.pair_edge
    bead, nbr = g.cg_edges.dst[e], g.cg_edges.src[e]
    u = (
        T.take(linear(_tile(model.fine_desc, g.n_frames), p, "dec.atom"), g.pair_atom)
        + T.take(linear(H, p, "dec.self"), bead)
        + T.take(linear(H, p, "dec.nbr"), nbr)
        + T.take(linear(rbf, p, "dec.edge"), e)
    )
    u = T.swish(linear(T.swish(u), p, "dec.hidden"))
    coef = linear(u, p, "dec.coef")
    r = edge_vectors(xc, g.cg_edges)
    unit = T.div(r, T.reshape(edge_distances(xc, g.cg_edges), (-1, 1)))
    ref = T.segment_sum(unit * w, g.cg_edges.dst, g.n_frames * g.n_coarse)
    side = T.cross(unit, T.take(ref, g.cg_edges.dst))
    disp = T.take(unit * w, e) * _column(coef, 0) + T.take(side * w, e) * _column(coef, 1)
    x = base + T.segment_sum(disp, g.pair_atom, g.n_frames * g.n_fine)
    return _refine(model, x, H, g)


def _refine(model: CvaeModel, x: DiffTensor, H: DiffTensor, g: BatchGraph) -> DiffTensor:
    """Equivariant corrections on the fine graph (multi-hop bonded pairs plus
    particles within the fine cutoff of the initial placement)."""
    p, hp = model.params, model.hp
    if hp.dec_depth == 0:
        return x
    frames = x.values.reshape(g.n_frames, g.n_fine, 3)
    edges = _concat_edges([build_edges(f, hp.fg_cutoff, model.fine_hops) for f in frames], g.n_fine, hp.fg_cutoff)
    if not len(edges):
        return x
    h = linear(_tile(model.fine_desc, g.n_frames), p, "dec.fatom") + T.take(linear(H, p, "dec.fbead"), g.atom_bead)
    for i in range(hp.dec_depth):
        rel = edge_vectors(x, edges)  # src minus dst
        d = T.norm(rel, eps=DIST_EPS)
        wgt = T.reshape(edge_weight_tensor(d, edges), (-1, 1))
        m = (
            T.take(linear(h, p, f"dec.ref{i}.src"), edges.src)
            + T.take(linear(h, p, f"dec.ref{i}.dst"), edges.dst)
            + linear(rbf_expand(d, hp.n_rbf, hp.fg_cutoff), p, f"dec.ref{i}.edge")
        )
        m = T.swish(linear(T.swish(m), p, f"dec.ref{i}.hidden"))
        step = linear(m, p, f"dec.ref{i}.x") * wgt
        scale = T.div(step, T.reshape(d, (-1, 1)) + 1.0)
        x = x - T.segment_sum(rel * scale, edges.dst, g.n_frames * g.n_fine)
        h = h + T.segment_sum(m * wgt, edges.dst, g.n_frames * g.n_fine)
    return x


def _column(x: DiffTensor, j: int) -> DiffTensor:
    sel = np.zeros((x.shape[1], 1))
    sel[j, 0] = 1.0
    return T.matmul(x, sel)


# ------------------------------------------------------------------ public ops


def _coords(x) -> DiffTensor:
    if isinstance(x, Conformation):
        return DiffTensor(x.coords)
    return T.as_tensor(x)


def _check_levels(model: CvaeModel, mapping: CGMapping | None, n_fine: int | None, n_coarse: int) -> None:
    if mapping is not None and (mapping.n_fine != model.n_fine or mapping.n_coarse != model.n_coarse):
        raise ValueError(f"level mismatch: mapping {mapping.n_fine}->{mapping.n_coarse}, model {model.n_fine}->{model.n_coarse}")
    if n_fine is not None and n_fine != model.n_fine:
        raise ValueError(f"level mismatch: fine frame has {n_fine} particles, model expects {model.n_fine}")
    if n_coarse != model.n_coarse:
        raise ValueError(f"level mismatch: coarse frame has {n_coarse} beads, model expects {model.n_coarse}")


def encode(x_fine, x_coarse, mapping: CGMapping, model: CvaeModel) -> LatentGaussian:
    xf, xc = _coords(x_fine), _coords(x_coarse)
    _check_levels(model, mapping, xf.shape[0], xc.shape[0])
    g = BatchGraph.build(model, xc.values, xf.values)
    return _encode(model, xf, xc, g)


def prior(x_coarse, model: CvaeModel) -> LatentGaussian:
    xc = _coords(x_coarse)
    _check_levels(model, None, None, xc.shape[0])
    return _prior(model, xc, BatchGraph.build(model, xc.values))


def latent_noise(seed: int, key: int, shape: tuple[int, ...]) -> np.ndarray:
    """Standard normal draws from the stream owned by (seed, key)."""
    return np.random.default_rng([int(seed) & 0xFFFFFFFF, int(key) & 0xFFFFFFFF]).standard_normal(shape)


def reparameterize(dist: LatentGaussian, seed: int, key: int = 0, noise: np.ndarray | None = None) -> DiffTensor:
    """``mean + exp(log_var / 2) * eps`` with eps from the seeded stream."""
    eps = latent_noise(seed, key, dist.shape) if noise is None else noise
    return dist.mean + T.exp(T.clip(dist.log_var, LOGVAR_MIN, LOGVAR_MAX) * 0.5) * eps


def decode(x_coarse, z, mapping: CGMapping, model: CvaeModel) -> Conformation:
    out = decode_tensor(x_coarse, z, mapping, model)
    return Conformation(out.values, mapping.from_level)


def decode_tensor(x_coarse, z, mapping: CGMapping, model: CvaeModel) -> DiffTensor:
    xc, zt = _coords(x_coarse), T.as_tensor(z)
    _check_levels(model, mapping, None, xc.shape[0])
    if zt.shape != (model.n_coarse, model.hp.latent_dim):
        raise ValueError(f"latent shape {zt.shape} != ({model.n_coarse}, {model.hp.latent_dim})")
    return _decode(model, xc, zt, BatchGraph.build(model, xc.values))


def kl_divergence(q: LatentGaussian, p: LatentGaussian) -> DiffTensor:
    """Closed-form KL(q || p) between diagonal Gaussians, summed over all entries."""
    if q.shape != p.shape:
        raise ValueError(f"shape mismatch: {q.shape} vs {p.shape}")
    inv_var_p = T.exp(-p.log_var)
    terms = T.exp(q.log_var - p.log_var) + T.square(q.mean - p.mean) * inv_var_p - 1.0 + p.log_var - q.log_var
    return T.tsum(terms) * 0.5


def _recon_terms(x_true, x_hat: DiffTensor, bonds: np.ndarray, n_frames: int):
    """Per-frame-averaged MSD and squared bond-length error for stacked frames."""
    x_true = T.as_tensor(x_true)
    diff = x_hat - x_true
    msd = T.tsum(T.square(diff)) * (1.0 / x_true.shape[0])
    bonds = np.asarray(bonds, dtype=np.int64).reshape(-1, 2)
    if len(bonds) == 0:
        return msd, DiffTensor(0.0)
    n = x_true.shape[0] // n_frames
    gb = (bonds[None, :, :] + (np.arange(n_frames) * n)[:, None, None]).reshape(-1, 2)
    d_true = T.norm(T.take(x_true, gb[:, 0]) - T.take(x_true, gb[:, 1]), eps=DIST_EPS)
    d_hat = T.norm(T.take(x_hat, gb[:, 0]) - T.take(x_hat, gb[:, 1]), eps=DIST_EPS)
    bond = T.tsum(T.square(d_hat - d_true)) * (1.0 / len(gb))
    return msd, bond


def reconstruction_loss(x_true, x_hat, bonds, gamma: float) -> DiffTensor:
    """Mean squared deviation per particle plus ``gamma`` times the mean squared
    bond-length error over ``bonds``."""
    xt, xh = _coords(x_true), _coords(x_hat)
    if xt.shape != xh.shape:
        raise ValueError(f"particle count mismatch: {xt.shape[0]} vs {xh.shape[0]}")
    msd, bond = _recon_terms(xt, xh, bonds, 1)
    return msd + bond * gamma


@dataclass
class LossParts:
    loss: DiffTensor
    recon: float
    msd: float
    bond: float
    kl: float

    def components(self) -> dict[str, float]:
        return {"loss": float(self.loss.values), "recon": self.recon, "msd": self.msd, "bond": self.bond, "kl": self.kl}


def batch_loss(
    model: CvaeModel,
    xf,
    xc,
    keys: Sequence[int],
    seed: int,
    beta: float | None = None,
    gamma: float | None = None,
) -> LossParts:
    """Mean step loss over stacked frames ``xf (B, n, 3)`` / ``xc (B, N, 3)``.

    Each frame draws its reparameterization noise from the stream (seed, key).
    ``xf`` may be a DiffTensor of shape ``(B * n, 3)``; ``xc`` may be omitted
    (None) to derive it from ``xf`` through the model's mapping.
    """
    beta = model.hp.beta if beta is None else beta
    gamma = model.hp.gamma if gamma is None else gamma
    B = len(keys)
    n, N, m = model.n_fine, model.n_coarse, model.hp.latent_dim
    xf_t = T.reshape(T.as_tensor(xf), (B * n, 3))
    if xc is None:
        xc_t = T.reshape(T.matmul(model.mapping.matrix(), T.reshape(xf_t, (B, n, 3))), (B * N, 3))
    else:
        xc_t = T.reshape(T.as_tensor(xc), (B * N, 3))
    g = BatchGraph.build(model, xc_t.values, xf_t.values)
    q = _encode(model, xf_t, xc_t, g)
    p = _prior(model, xc_t, g)
    noise = np.concatenate([latent_noise(seed, k, (N, m)) for k in keys])
    z = reparameterize(q, seed, noise=noise)
    x_hat = _decode(model, xc_t, z, g)
    msd, bond = _recon_terms(xf_t, x_hat, model.fine_bonds, B)
    kl = kl_divergence(q, p) * (1.0 / B)
    recon = msd + bond * gamma
    loss = recon + kl * beta
    return LossParts(loss, float(recon.values), float(msd.values), float(bond.values), float(kl.values))


def step_elbo_loss(x_fine, x_coarse, mapping: CGMapping, model: CvaeModel, beta: float, gamma: float, seed: int, key: int = 0):
    """Negative beta-weighted ELBO for one frame: recon + beta * KL(q || p).

    Returns ``(loss, components)`` where ``loss`` is a scalar DiffTensor.
    Pass ``x_coarse=None`` to derive the coarse frame from ``x_fine``.
    """
    xf = _coords(x_fine)
    xc = None if x_coarse is None else _coords(x_coarse)
    _check_levels(model, mapping, xf.shape[0], model.n_coarse if xc is None else xc.shape[0])
    parts = batch_loss(model, xf, xc, [key], seed, beta, gamma)
    return parts.loss, parts.components()


def sample_fine(model: CvaeModel, xc: np.ndarray, keys: Sequence[int], seed: int) -> np.ndarray:
    """Inference for stacked coarse frames: z ~ prior(x_coarse), then decode."""
    xc = np.asarray(xc, dtype=np.float64).reshape(len(keys), model.n_coarse, 3)
    N, m = model.n_coarse, model.hp.latent_dim
    xc_t = DiffTensor(xc.reshape(-1, 3))
    g = BatchGraph.build(model, xc_t.values)
    p = _prior(model, xc_t, g)
    noise = np.concatenate([latent_noise(seed, k, (N, m)) for k in keys])
    z = reparameterize(p, seed, noise=noise)
    out = _decode(model, xc_t, z, g)
    return out.values.reshape(len(keys), model.n_fine, 3)
