"""The k-step framework: resolution ladder, independent step training and
coarse-to-fine inference through the chain of step models."""

from __future__ import annotations

import hashlib
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .coarsen import (
    CGMapping,
    apply_mapping_array,
    apply_to_ensemble,
    calpha_mapping,
    coarse_topology,
    compose_chain,
    learn_mapping,
    read_mapping,
    write_mapping,
)
from .core import Conformation, Ensemble, Topology
from .cvae import CvaeModel, StepHyperparams, latent_noise, sample_fine
from .io import atomic_write_text, sha256_file, topology_from_dict, topology_to_dict
from .synth import generate_synthetic_ensemble
from .train import DivergenceError, History, TrainConfig, fit_step_model, split_indices

log = logging.getLogger(__name__)

MAX_STEPS = 4
CHAIN_FORMAT = "multibackmap-chain"
CHAIN_VERSION = 1

__all__ = [
    "LevelSpec",
    "Ladder",
    "StepConfig",
    "BackmapChain",
    "BackmapResult",
    "ChainTrainingError",
    "build_ladder",
    "train_chain",
    "one_step_chain",
    "backmap",
    "backmap_frames",
    "save_chain",
    "load_chain",
    "generate_synthetic_ensemble",
]


@dataclass(frozen=True)
class LevelSpec:
    """One rung of the ladder: ``calpha``, ``learned:N`` (k-means) or ``segments:N`` (contiguous)."""

    kind: str
    n_beads: int | None = None

    @classmethod
    def parse(cls, text: str) -> "LevelSpec":
        if not isinstance(text, str):
            raise TypeError(f"level spec must be a string, got {text!r}")
        t = text.strip().lower()
        if t in ("calpha", "ca"):
            return cls("calpha")
        kind, _, n = t.partition(":")
        if kind not in ("learned", "segments") or not n.isdigit() or int(n) < 1:
            raise ValueError(f"bad level spec {text!r}; expected calpha, learned:N or segments:N")
        return cls(kind, int(n))

    def __str__(self) -> str:
        return self.kind if self.kind == "calpha" else f"{self.kind}:{self.n_beads}"


@dataclass
class Ladder:
    """Ensembles x_0 ... x_k with the mappings between consecutive levels."""

    levels: list[Ensemble]
    mappings: list[CGMapping]

    def __len__(self) -> int:
        return len(self.levels)

    def __getitem__(self, i: int) -> Ensemble:
        return self.levels[i]

    @property
    def k(self) -> int:
        return len(self.mappings)

    @property
    def sizes(self) -> tuple[int, ...]:
        return tuple(e.topology.n_atoms for e in self.levels)

    def subset(self, indices) -> "Ladder":
        return Ladder([e.subset(indices) for e in self.levels], self.mappings)


def _ladder_key(fg: Ensemble, specs: Sequence[LevelSpec], seed: int) -> str:
    h = hashlib.sha256()
    h.update(np.ascontiguousarray(fg.coords()).tobytes())
    h.update(json.dumps(topology_to_dict(fg.topology)).encode())
    h.update(json.dumps([str(s) for s in specs] + [seed]).encode())
    return h.hexdigest()[:16]


def _make_mapping(spec: LevelSpec, ens: Ensemble, seed: int) -> CGMapping:
    if spec.kind == "calpha":
        return calpha_mapping(ens.topology, from_level=ens.level)
    return learn_mapping(ens, spec.n_beads, seed=seed, contiguity=spec.kind == "segments")


def build_ladder(
    fg: Ensemble,
    specs: Sequence[str | LevelSpec],
    seed: int = 0,
    cache_dir: str | Path | None = None,
    fit_frames: Sequence[int] | None = None,
) -> Ladder:
    """Apply the level specs in order, each mapping fitted on the previous level.

    ``fit_frames`` restricts which frames learned mappings see (e.g. training
    frames only); every frame is mapped. With ``cache_dir`` the mappings are
    stored under a key derived from the input and specs and reused.
    """
    specs = [s if isinstance(s, LevelSpec) else LevelSpec.parse(s) for s in specs]
    if not 1 <= len(specs) <= MAX_STEPS:
        raise ValueError(f"need 1..{MAX_STEPS} level specs, got {len(specs)}")
    cache = None
    if cache_dir is not None:
        cache = Path(cache_dir) / f"ladder-{_ladder_key(fg, specs, seed)}"
        cache.mkdir(parents=True, exist_ok=True)
    levels, mappings = [fg], []
    for i, spec in enumerate(specs):
        prev = levels[-1]
        n_prev = prev.topology.n_atoms
        if spec.n_beads is not None and spec.n_beads >= n_prev:
            raise ValueError(f"non-monotone ladder: level {i + 1} asks for {spec.n_beads} beads, level {i} has {n_prev}")
        cached = cache / f"mapping_{i}.txt" if cache else None
        if cached is not None and cached.exists():
            mapping = read_mapping(cached)
        else:
            fit_on = prev if fit_frames is None else prev.subset(fit_frames)
            mapping = _make_mapping(spec, fit_on, seed)
            if cached is not None:
                write_mapping(mapping, cached)
        if mapping.n_coarse >= n_prev:
            raise ValueError(f"non-monotone ladder: level {i + 1} has {mapping.n_coarse} beads, level {i} has {n_prev}")
        levels.append(apply_to_ensemble(prev, mapping, coarse_topology(prev.topology, mapping)))
        mappings.append(mapping)
    if cache is not None:
        for i, lvl in enumerate(levels):
            path = cache / f"level_{i}.npy"
            if not path.exists():
                np.save(path, lvl.coords())
    return Ladder(levels, mappings)


@dataclass(frozen=True)
class StepConfig:
    hp: StepHyperparams = field(default_factory=StepHyperparams)
    train: TrainConfig = field(default_factory=TrainConfig)
    seed: int = 0


class ChainTrainingError(RuntimeError):
    def __init__(self, step: int, cause: Exception):
        self.step = step
        super().__init__(f"step {step}: {cause}")


@dataclass
class BackmapChain:
    """Step models where ``models[i]`` reconstructs level i from level i+1."""

    mappings: list[CGMapping]
    models: list[CvaeModel]
    topologies: list[Topology]
    histories: list[History | None] = field(default_factory=list)

    def __post_init__(self):
        if not self.models:
            raise ValueError("a chain needs at least one step")
        if len(self.models) != len(self.mappings) or len(self.topologies) != len(self.models) + 1:
            raise ValueError("chain needs one model and one mapping per step and k + 1 topologies")
        for i, (mp, model) in enumerate(zip(self.mappings, self.models)):
            if model.n_fine != mp.n_fine or model.n_coarse != mp.n_coarse:
                raise ValueError(f"step {i}: model does not match its mapping")
            if self.topologies[i].n_atoms != mp.n_fine or self.topologies[i + 1].n_atoms != mp.n_coarse:
                raise ValueError(f"step {i}: topology sizes do not match the mapping")
            if i and self.mappings[i - 1].n_coarse != mp.n_fine:
                raise ValueError(f"level mismatch between steps {i - 1} and {i}")
        if not self.histories:
            self.histories = [None] * len(self.models)

    @property
    def k(self) -> int:
        return len(self.models)

    @property
    def sizes(self) -> tuple[int, ...]:
        return tuple(t.n_atoms for t in self.topologies)

    def coarsen(self, fine: np.ndarray) -> np.ndarray:
        """Map fine frames ``(B, n0, 3)`` or ``(n0, 3)`` all the way to the coarsest level."""
        x = np.asarray(fine, dtype=np.float64)
        single = x.ndim == 2
        x = x[None] if single else x
        for mp in self.mappings:
            x = np.stack([apply_mapping_array(f, mp) for f in x])
        return x[0] if single else x

    def checksums(self) -> list[str]:
        return [m.params.checksum() for m in self.models]


def _step_key(frame_key: int, step: int) -> int:
    return frame_key * (MAX_STEPS + 1) + step


def train_chain(
    ladder: Ladder,
    configs: Sequence[StepConfig],
    train_idx: Sequence[int] | None = None,
    val_idx: Sequence[int] | None = None,
    steps: Sequence[int] | None = None,
    previous: BackmapChain | None = None,
) -> BackmapChain:
    """Train one model per step on (x_i, x_{i+1}) pairs of the ladder.

    Steps are independent; ``steps`` limits training to a subset, taking the
    remaining models from ``previous``.
    """
    k = ladder.k
    if k < 1 or len(ladder) != k + 1:
        raise ValueError("ladder must have k + 1 levels with k >= 1")
    if len(configs) != k:
        raise ValueError(f"need {k} step configs, got {len(configs)}")
    if train_idx is None or val_idx is None:
        tr, va, _ = split_indices(len(ladder[0]), configs[0].train)
        train_idx = tr if train_idx is None else train_idx
        val_idx = va if val_idx is None else val_idx
    todo = set(range(k)) if steps is None else set(steps)
    models, histories = [], []
    for i in range(k):
        if i not in todo:
            if previous is None:
                raise ValueError(f"step {i} not trained and no previous chain given")
            models.append(previous.models[i])
            histories.append(previous.histories[i])
            continue
        cfg = configs[i]
        fine_level = ladder[i]
        model = CvaeModel.create(fine_level.topology, ladder.mappings[i], cfg.hp, seed=cfg.seed)
        log.info("training step %d: %d -> %d particles", i, model.n_coarse, model.n_fine)
        try:
            model, history = fit_step_model(
                fine_level.subset(train_idx), fine_level.subset(val_idx), ladder.mappings[i], model, cfg.train
            )
        except DivergenceError as exc:
            raise ChainTrainingError(i, exc) from exc
        models.append(model)
        histories.append(history)
    return BackmapChain(list(ladder.mappings), models, [e.topology for e in ladder.levels], histories)


def one_step_chain(ladder: Ladder, config: StepConfig, train_idx=None, val_idx=None) -> BackmapChain:
    """Single-step baseline: one model from the coarsest level straight to level 0."""
    composed = compose_chain(ladder.mappings)
    flat = Ladder([ladder[0], apply_to_ensemble(ladder[0], composed, ladder[-1].topology)], [composed])
    return train_chain(flat, [config], train_idx, val_idx)


@dataclass
class BackmapResult:
    """``levels[i]`` is the reconstruction at level i; ``levels[k]`` is the input."""

    levels: list[Conformation]

    @property
    def fine(self) -> Conformation:
        return self.levels[0]

    @property
    def intermediates(self) -> list[Conformation]:
        """x̂_{k-1} ... x̂_1 in inference order."""
        return self.levels[1:-1][::-1]


def backmap_frames(coarse: np.ndarray, chain: BackmapChain, seed: int, keys: Sequence[int] | None = None) -> list[np.ndarray]:
    """Batched inference for ``(B, N_k, 3)`` coarse frames.

    Returns arrays for every level, index i holding ``(B, n_i, 3)``. Frame b
    draws its noise at step i from the stream keyed by (seed, keys[b], i).
    """
    x = np.asarray(coarse, dtype=np.float64)
    if x.ndim != 3 or x.shape[1:] != (chain.sizes[-1], 3):
        raise ValueError(f"level mismatch: coarse frames {x.shape}, chain expects (B, {chain.sizes[-1]}, 3)")
    keys = list(range(len(x))) if keys is None else list(keys)
    out = [None] * (chain.k + 1)
    out[chain.k] = x
    for i in range(chain.k - 1, -1, -1):
        x = sample_fine(chain.models[i], x, [_step_key(kb, i) for kb in keys], seed)
        out[i] = x
    return out


def backmap(x_k: Conformation | np.ndarray, chain: BackmapChain, seed: int, key: int = 0) -> BackmapResult:
    """Coarse-to-fine inference: for each step sample z from the prior given the
    current reconstruction and decode the next finer level."""
    xyz = x_k.coords if isinstance(x_k, Conformation) else np.asarray(x_k, dtype=np.float64)
    levels = backmap_frames(xyz[None], chain, seed, [key])
    tags = [mp.from_level for mp in chain.mappings] + [chain.mappings[-1].to_level]
    return BackmapResult([Conformation(x[0], t) for x, t in zip(levels, tags)])


# -------------------------------------------------------------- persistence


def save_chain(chain: BackmapChain, directory: str | Path) -> Path:
    """Write mappings, checkpoints, topologies and a manifest listing them with hashes."""
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    steps = []
    for i, (mp, model) in enumerate(zip(chain.mappings, chain.models)):
        mpath, cpath = d / f"mapping_{i}.txt", d / f"step_{i}.npz"
        write_mapping(mp, mpath)
        model.save(cpath)
        steps.append(
            {
                "index": i,
                "mapping": mpath.name,
                "checkpoint": cpath.name,
                "mapping_sha256": sha256_file(mpath),
                "checkpoint_sha256": sha256_file(cpath),
            }
        )
    manifest = {
        "format": CHAIN_FORMAT,
        "version": CHAIN_VERSION,
        "k": chain.k,
        "steps": steps,
        "topologies": [topology_to_dict(t) for t in chain.topologies],
    }
    path = d / "chain.json"
    atomic_write_text(path, json.dumps(manifest, indent=1, sort_keys=True) + "\n")
    return path


def load_chain(path: str | Path) -> BackmapChain:
    path = Path(path)
    if path.is_dir():
        path = path / "chain.json"
    raw = json.loads(path.read_text())
    if raw.get("format") != CHAIN_FORMAT or raw.get("version") != CHAIN_VERSION:
        raise ValueError(f"{path}: not a version-{CHAIN_VERSION} chain manifest")
    steps = sorted(raw["steps"], key=lambda s: s["index"])
    if [s["index"] for s in steps] != list(range(raw["k"])):
        raise ValueError(f"{path}: step indices must be 0..{raw['k'] - 1}")
    mappings, models = [], []
    for s in steps:
        mpath, cpath = path.parent / s["mapping"], path.parent / s["checkpoint"]
        for p, key in ((mpath, "mapping_sha256"), (cpath, "checkpoint_sha256")):
            if not p.exists():
                raise ValueError(f"{path}: step {s['index']} file {p.name} is missing")
            if sha256_file(p) != s[key]:
                raise ValueError(f"{path}: step {s['index']} file {p.name} does not match its recorded hash")
        mappings.append(read_mapping(mpath))
        models.append(CvaeModel.load(cpath))
    topologies = [topology_from_dict(t) for t in raw["topologies"]]
    return BackmapChain(mappings, models, topologies)


def latent_stream(seed: int, frame_key: int, step: int, shape) -> np.ndarray:
    """The noise used by ``backmap`` for one frame and step (exposed for checks)."""
    return latent_noise(seed, _step_key(frame_key, step), shape)
