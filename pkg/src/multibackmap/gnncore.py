"""Graph layers on top of the autodiff engine.

Radial basis expansion with a cosine envelope, SchNet-style continuous-filter
message passing, FG->CG mean pooling, edge construction and parameter
storage.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Iterator, Mapping

import numpy as np
from scipy.sparse import coo_matrix
from scipy.sparse.csgraph import shortest_path

from . import tensor as T
from .tensor import DiffTensor

CHECKPOINT_VERSION = 1


class ParamStore(Mapping[str, DiffTensor]):
    """Named trainable arrays with deterministic, seeded initialization."""

    def __init__(self, seed: int = 0):
        self._params: dict[str, DiffTensor] = {}
        self._rng = np.random.default_rng(seed)

    def __getitem__(self, name: str) -> DiffTensor:
        return self._params[name]

    def __iter__(self) -> Iterator[str]:
        return iter(self._params)

    def __len__(self) -> int:
        return len(self._params)

    def add(self, name: str, values: np.ndarray) -> DiffTensor:
        if name in self._params:
            raise KeyError(f"parameter {name!r} already defined")
        t = DiffTensor(np.array(values, dtype=np.float64), requires_grad=True, name=name)
        self._params[name] = t
        return t

    def uniform(self, name: str, shape: tuple[int, ...], fan_in: int) -> DiffTensor:
        bound = 1.0 / np.sqrt(fan_in)
        return self.add(name, self._rng.uniform(-bound, bound, size=shape))

    def zeros(self, name: str, shape: tuple[int, ...]) -> DiffTensor:
        return self.add(name, np.zeros(shape))

    def linear(self, name: str, n_in: int, n_out: int, zero: bool = False) -> None:
        if zero:
            self.zeros(f"{name}.w", (n_in, n_out))
            self.zeros(f"{name}.b", (n_out,))
        else:
            self.uniform(f"{name}.w", (n_in, n_out), n_in)
            self.uniform(f"{name}.b", (n_out,), n_in)

    def zero_grad(self) -> None:
        for p in self._params.values():
            p.grad = None

    def arrays(self) -> dict[str, np.ndarray]:
        return {k: v.values.copy() for k, v in self._params.items()}

    def load_arrays(self, arrays: Mapping[str, np.ndarray]) -> None:
        missing = set(self._params) - set(arrays)
        if missing:
            raise KeyError(f"checkpoint lacks parameters {sorted(missing)}")
        for k, p in self._params.items():
            a = np.asarray(arrays[k], dtype=np.float64)
            if a.shape != p.shape:
                raise ValueError(f"parameter {k}: shape {a.shape} != expected {p.shape}")
            p.values = a.copy()

    def checksum(self, prefix: str = "") -> str:
        import hashlib

        h = hashlib.sha256()
        for k in sorted(self._params):
            if k.startswith(prefix):
                h.update(k.encode())
                h.update(np.ascontiguousarray(self._params[k].values).tobytes())
        return h.hexdigest()


def linear(x, params: Mapping[str, DiffTensor], name: str) -> DiffTensor:
    return T.matmul(x, params[f"{name}.w"]) + params[f"{name}.b"]


def cosine_envelope(d: np.ndarray, cutoff: float) -> np.ndarray:
    return np.where(d < cutoff, 0.5 * (np.cos(np.pi * d / cutoff) + 1.0), 0.0)


def rbf_centers(n_basis: int, cutoff: float) -> tuple[np.ndarray, float]:
    if n_basis < 1:
        raise ValueError("need at least one basis function")
    if cutoff <= 0:
        raise ValueError(f"cutoff must be positive, got {cutoff}")
    if n_basis == 1:
        return np.zeros(1), float(cutoff)
    centers = np.linspace(0.0, cutoff, n_basis)
    return centers, float(centers[1] - centers[0])


def rbf_expand(distances, n_basis: int, cutoff: float) -> DiffTensor:
    """Gaussian basis on evenly spaced centers in ``[0, cutoff]``, width equal to the
    spacing, times a cosine envelope that vanishes at and beyond ``cutoff``."""
    centers, width = rbf_centers(n_basis, cutoff)
    d = T.as_tensor(distances)
    d = T.reshape(d, (-1, 1))
    inside = d.values < cutoff
    gauss = T.exp(T.square(d - centers) * (-0.5 / width**2))
    env = T.where(inside, (T.cos(d * (np.pi / cutoff)) + 1.0) * 0.5, 0.0)
    return gauss * env


@dataclass(frozen=True, eq=False)
class EdgeList:
    """Directed edges ``src -> dst``; built symmetric.

    ``weights`` scales each edge's message: the cosine envelope for
    distance-selected edges, 1 for edges forced in by the multi-hop graph.
    """

    src: np.ndarray
    dst: np.ndarray
    cutoff: float
    weights: np.ndarray | None = None
    forced: np.ndarray | None = None

    def __len__(self) -> int:
        return len(self.src)

    @property
    def edge_weights(self) -> np.ndarray:
        return np.ones(len(self.src)) if self.weights is None else self.weights

    @staticmethod
    def empty(cutoff: float) -> "EdgeList":
        z = np.zeros(0, dtype=np.int64)
        return EdgeList(z, z, cutoff, np.zeros(0), np.zeros(0, dtype=bool))

    @property
    def forced_mask(self) -> np.ndarray:
        return np.zeros(len(self.src), dtype=bool) if self.forced is None else self.forced


def multihop_pairs(bonds: np.ndarray, n: int, order: int) -> np.ndarray:
    """All unordered pairs within ``order`` hops on the bond graph, as ``(m, 2)`` with i < j."""
    bonds = np.asarray(bonds, dtype=np.int64).reshape(-1, 2)
    if order < 1 or len(bonds) == 0:
        return np.zeros((0, 2), dtype=np.int64)
    adj = coo_matrix((np.ones(len(bonds)), (bonds[:, 0], bonds[:, 1])), shape=(n, n))
    hops = shortest_path(adj, method="D", directed=False, unweighted=True)
    i, j = np.nonzero((hops <= order) & (hops > 0))
    keep = i < j
    return np.stack([i[keep], j[keep]], axis=1)


def build_edges(coords: np.ndarray, cutoff: float, forced_pairs: np.ndarray | None = None) -> EdgeList:
    """Edges between particles closer than ``cutoff`` plus ``forced_pairs``, in both directions.

    Ordered by (dst, src) for a deterministic reduction order.
    """
    xyz = np.asarray(coords, dtype=np.float64)
    n = xyz.shape[0]
    d = np.sqrt(((xyz[:, None, :] - xyz[None, :, :]) ** 2).sum(-1))
    close = d < cutoff
    np.fill_diagonal(close, False)
    forced = np.zeros((n, n), dtype=bool)
    if forced_pairs is not None and len(forced_pairs):
        fp = np.asarray(forced_pairs, dtype=np.int64)
        forced[fp[:, 0], fp[:, 1]] = True
        forced[fp[:, 1], fp[:, 0]] = True
    dst, src = np.nonzero(close | forced)
    f = forced[dst, src]
    w = np.where(f, 1.0, cosine_envelope(d[dst, src], cutoff))
    return EdgeList(src.astype(np.int64), dst.astype(np.int64), float(cutoff), w, f)


def edge_weight_tensor(distances, edges: EdgeList) -> DiffTensor:
    """Differentiable edge weights: cosine envelope of ``distances``, 1 on forced edges."""
    d = T.reshape(T.as_tensor(distances), (-1,))
    inside = d.values < edges.cutoff
    env = T.where(inside, (T.cos(d * (np.pi / edges.cutoff)) + 1.0) * 0.5, 0.0)
    return T.where(edges.forced_mask, 1.0, env)


def edge_vectors(x: DiffTensor, edges: EdgeList) -> DiffTensor:
    """``x[src] - x[dst]`` for every edge."""
    return T.take(x, edges.src) - T.take(x, edges.dst)


def edge_distances(x: DiffTensor, edges: EdgeList) -> DiffTensor:
    return T.norm(edge_vectors(x, edges), axis=-1)


def add_filter_params(params: ParamStore, name: str, n_basis: int, n_features: int) -> None:
    params.linear(f"{name}.filter1", n_basis, n_features)
    params.linear(f"{name}.filter2", n_features, n_features)
    params.linear(f"{name}.transform", n_features, n_features)


def message_passing_layer(
    node_feats, edges: EdgeList, edge_feats, params: Mapping[str, DiffTensor], name: str, weights=None
) -> DiffTensor:
    """Residual continuous-filter convolution.

    ``out_i = h_i + swish(sum_{j->i} w_ji * filter(e_ji) * transform(h_j))`` where the
    filter is a two-layer network lifting the K radial features to F channels.
    """
    h = T.as_tensor(node_feats)
    e = T.as_tensor(edge_feats)
    n, f = h.shape
    w_t = params[f"{name}.transform.w"]
    if w_t.shape != (f, f):
        raise ValueError(f"node feature dimension F={f} does not match layer {name} (F={w_t.shape[0]})")
    if e.shape[0] != len(edges):
        raise ValueError(f"edge feature rows {e.shape[0]} != number of edges {len(edges)}")
    k = params[f"{name}.filter1.w"].shape[0]
    if e.ndim != 2 or e.shape[1] != k:
        raise ValueError(f"edge feature dimension K={e.shape[1] if e.ndim == 2 else None} != {k} in layer {name}")
    if len(edges) == 0:
        return h
    filt = linear(T.swish(linear(e, params, f"{name}.filter1")), params, f"{name}.filter2")
    w = edges.edge_weights if weights is None else T.reshape(T.as_tensor(weights), (-1, 1))
    filt = filt * (w[:, None] if isinstance(w, np.ndarray) else w)
    source = T.take(linear(h, params, f"{name}.transform"), edges.src)
    agg = T.segment_sum(filt * source, edges.dst, n)
    return h + T.swish(agg)


def segment_mean(x, segment: np.ndarray, n_segments: int) -> DiffTensor:
    counts = np.bincount(segment, minlength=n_segments).astype(np.float64)
    return T.segment_sum(x, segment, n_segments) * (1.0 / np.maximum(counts, 1.0))[:, None]


def pool_fg_to_cg(node_feats, mapping) -> DiffTensor:
    """Mean of member-node features for each bead of ``mapping``."""
    h = T.as_tensor(node_feats)
    if h.shape[0] != mapping.n_fine:
        raise ValueError(f"level mismatch: {h.shape[0]} rows, mapping expects {mapping.n_fine}")
    return segment_mean(h, mapping.assignment, mapping.n_coarse)


def save_checkpoint(path: str | Path, arrays: Mapping[str, np.ndarray], header: dict) -> None:
    """npz container: named float arrays plus a JSON header stored as ``__header__``."""
    meta = dict(header)
    meta["format_version"] = CHECKPOINT_VERSION
    meta["shapes"] = {k: list(np.shape(v)) for k, v in arrays.items()}
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as fh:
        np.savez(fh, __header__=np.array(json.dumps(meta, sort_keys=True)), **arrays)
    tmp.replace(path)


def load_checkpoint(path: str | Path) -> tuple[dict[str, np.ndarray], dict]:
    with np.load(path, allow_pickle=False) as data:
        header = json.loads(str(data["__header__"]))
        if header.get("format_version") != CHECKPOINT_VERSION:
            raise ValueError(f"{path}: unsupported checkpoint version {header.get('format_version')}")
        arrays = {k: data[k] for k in data.files if k != "__header__"}
    for k, shape in header["shapes"].items():
        if list(arrays[k].shape) != shape:
            raise ValueError(f"{path}: array {k} has shape {arrays[k].shape}, header says {shape}")
    return arrays, header
