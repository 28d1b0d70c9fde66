"""File formats: multi-model PDB, run configuration, run manifests, atomic writes."""

from __future__ import annotations

import hashlib
import json
import os
import platform
import tempfile
from dataclasses import dataclass, field
from pathlib import Path
from typing import IO, Iterable, Mapping, Sequence

import numpy as np
import yaml

from .core import Atom, Conformation, Topology, element

CONFIG_SCHEMA_VERSION = 1
OUTPUT_ROOT_ENV = "MULTIBACKMAP_OUTPUT_ROOT"


def atomic_write_text(path: str | Path, text: str) -> None:
    """Write ``text`` to a temp file in the target directory, then rename over ``path``."""
    atomic_write_bytes(path, text.encode())


def atomic_write_bytes(path: str | Path, data: bytes) -> None:
    path = Path(path)
    if not path.parent.is_dir():
        raise FileNotFoundError(f"cannot write {path}: directory {path.parent} does not exist")
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def sha256_file(path: str | Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 16), b""):
            h.update(chunk)
    return h.hexdigest()


def output_root(default: str | Path = ".") -> Path:
    return Path(os.environ.get(OUTPUT_ROOT_ENV, default))


# ------------------------------------------------------------------------ PDB


def _format_name(name: str) -> str:
    return name if len(name) >= 4 else " " + name.ljust(3)


def format_atom_record(serial: int, atom: Atom, xyz: np.ndarray) -> str:
    x, y, z = xyz
    if max(abs(x), abs(y), abs(z)) >= 9999.9995:
        raise ValueError(f"atom {serial}: coordinates exceed the PDB column width")
    return (
        f"ATOM  {serial % 100000:5d} {_format_name(atom.name):4s} {atom.residue_name[:3]:>3s} A"
        f"{(atom.residue_index + 1) % 10000:4d}    {x:8.3f}{y:8.3f}{z:8.3f}{1.0:6.2f}{0.0:6.2f}"
        f"          {atom.element:>2s}"
    )


def write_pdb(topology: Topology, frames: Sequence[Conformation | np.ndarray], path: str | Path) -> None:
    """Multi-model PDB: one MODEL block per frame, CONECT records for every bond."""
    frames = list(frames)
    if not frames:
        raise ValueError("no frames")
    lines = []
    level = frames[0].level if isinstance(frames[0], Conformation) else 0
    lines.append(f"REMARK   1 MULTIBACKMAP LEVEL {level}")
    for k, f in enumerate(frames, 1):
        xyz = f.coords if isinstance(f, Conformation) else np.asarray(f, dtype=np.float64)
        if xyz.shape != (topology.n_atoms, 3):
            raise ValueError(f"frame {k}: {xyz.shape[0]} particles, topology has {topology.n_atoms}")
        lines.append(f"MODEL     {k:4d}")
        lines += [format_atom_record(i + 1, a, xyz[i]) for i, a in enumerate(topology.atoms)]
        lines.append("ENDMDL")
    lines += [f"CONECT{i + 1:5d}{j + 1:5d}" for i, j in topology.bonds]
    lines.append("END")
    atomic_write_text(path, "\n".join(lines) + "\n")


def _guess_element(name: str) -> str:
    letters = "".join(c for c in name if c.isalpha())
    if not letters:
        raise ValueError(f"cannot infer element from atom name {name!r}")
    return letters[0].upper()


@dataclass
class _Model:
    number: int
    atoms: list[Atom] = field(default_factory=list)
    coords: list[tuple[float, float, float]] = field(default_factory=list)
    serials: list[int] = field(default_factory=list)
    resids: list[tuple] = field(default_factory=list)


def parse_pdb(stream: IO[str] | str | Path) -> tuple[Topology, list[Conformation]]:
    """Read ATOM/HETATM, MODEL/ENDMDL and CONECT records.

    Residues are renumbered as 0-based ordinals in order of appearance. Bonds
    come only from CONECT records.
    """
    if isinstance(stream, (str, Path)):
        with open(stream) as fh:
            return parse_pdb(fh)
    models: list[_Model] = []
    current: _Model | None = None
    conect: list[tuple[int, int, int]] = []
    level = 0
    for lineno, raw in enumerate(stream, 1):
        line = raw.rstrip("\n")
        rec = line[:6]
        if rec.startswith("REMARK") and "MULTIBACKMAP LEVEL" in line:
            level = int(line.split()[-1])
        elif rec == "MODEL ":
            current = _Model(len(models) + 1)
            models.append(current)
        elif rec == "ENDMDL":
            current = None
        elif rec in ("ATOM  ", "HETATM"):
            if current is None:
                # records outside MODEL blocks form one implicit model
                current = _Model(len(models) + 1)
                models.append(current)
            try:
                serial = int(line[6:11])
                name = line[12:16].strip()
                resname = line[17:20].strip() or "UNK"
                resid = (line[21], int(line[22:26]), line[26:27])
                xyz = (float(line[30:38]), float(line[38:46]), float(line[46:54]))
                sym = line[76:78].strip() if len(line) >= 78 and line[76:78].strip() else _guess_element(name)
                element(sym)
            except (ValueError, KeyError) as exc:
                raise ValueError(f"line {lineno}: malformed {rec.strip()} record ({exc})") from None
            current.atoms.append(Atom(sym.upper(), name, 0, resname))
            current.coords.append(xyz)
            current.serials.append(serial)
            current.resids.append(resid)
        elif rec == "CONECT":
            try:
                nums = [int(line[k : k + 5]) for k in range(6, len(line), 5) if line[k : k + 5].strip()]
            except ValueError:
                raise ValueError(f"line {lineno}: malformed CONECT record") from None
            conect += [(lineno, nums[0], other) for other in nums[1:]]
    models = [m for m in models if m.atoms]
    if not models:
        raise ValueError("no atoms found")
    first = models[0]
    ordinals, prev, r = [], None, -1
    for resid in first.resids:
        if resid != prev:
            r += 1
            prev = resid
        ordinals.append(r)
    atoms = tuple(Atom(a.element, a.name, o, a.residue_name) for a, o in zip(first.atoms, ordinals))
    index = {s: i for i, s in enumerate(first.serials)}
    bonds = set()
    for lineno, a, b in conect:
        if a not in index or b not in index:
            raise ValueError(f"line {lineno}: CONECT references unknown atom serial")
        i, j = index[a], index[b]
        if i != j:
            bonds.add((min(i, j), max(i, j)))
    topology = Topology(atoms, tuple(sorted(bonds)))
    frames = []
    for k, m in enumerate(models, 1):
        if len(m.atoms) != len(first.atoms):
            raise ValueError(f"model {k}: expected {len(first.atoms)} atoms, found {len(m.atoms)}")
        frames.append(Conformation(np.array(m.coords, dtype=np.float64), level))
    return topology, frames


def topology_to_dict(top: Topology) -> dict:
    return {
        "atoms": [[a.element, a.name, a.residue_index, a.residue_name] for a in top.atoms],
        "bonds": [list(b) for b in top.bonds],
    }


def topology_from_dict(raw: Mapping) -> Topology:
    return Topology(tuple(Atom(e, n, int(r), rn) for e, n, r, rn in raw["atoms"]), tuple(tuple(b) for b in raw["bonds"]))


# --------------------------------------------------------------------- config


@dataclass
class RunConfig:
    """Validated run configuration."""

    schema_version: int
    ladder: list[str]
    steps: list  # StepHyperparams per step, step 0 (finest) first
    train: object  # TrainConfig
    one_step: object | None = None  # StepHyperparams for the single-step baseline
    synthetic: dict = field(default_factory=dict)
    paths: dict = field(default_factory=dict)
    metrics: dict = field(default_factory=lambda: {"clash_threshold": 1.2})
    seeds: list[int] = field(default_factory=lambda: [0, 1, 2])


def _field_error(name: str, exc: Exception) -> ValueError:
    return ValueError(f"config field {name}: {exc}")


def parse_config(raw: Mapping, base_dir: str | Path = ".") -> RunConfig:
    """Validate a config mapping completely or raise a field-level error."""
    from .cvae import StepHyperparams
    from .pipeline import LevelSpec
    from .train import TrainConfig

    if not isinstance(raw, Mapping):
        raise ValueError("config must be a mapping")
    allowed = {"schema_version", "ladder", "steps", "train", "one_step", "synthetic", "paths", "metrics", "seeds"}
    unknown = set(raw) - allowed
    if unknown:
        raise ValueError(f"config: unknown field(s) {sorted(unknown)}")
    if raw.get("schema_version") != CONFIG_SCHEMA_VERSION:
        raise ValueError(f"config field schema_version: expected {CONFIG_SCHEMA_VERSION}, got {raw.get('schema_version')!r}")
    ladder = raw.get("ladder", ["calpha", "segments:8"])
    try:
        for s in ladder:
            LevelSpec.parse(s)
    except (ValueError, TypeError) as exc:
        raise _field_error("ladder", exc) from None
    steps_raw = raw.get("steps", [{}] * len(ladder))
    if len(steps_raw) != len(ladder):
        raise ValueError(f"config field steps: {len(steps_raw)} entries for a {len(ladder)}-step ladder")
    steps = []
    for i, s in enumerate(steps_raw):
        try:
            steps.append(StepHyperparams.from_dict(s or {}))
        except (ValueError, TypeError) as exc:
            raise _field_error(f"steps[{i}]", exc) from None
    one_step = None
    if raw.get("one_step") is not None:
        try:
            one_step = StepHyperparams.from_dict(raw["one_step"])
        except (ValueError, TypeError) as exc:
            raise _field_error("one_step", exc) from None
    try:
        train = TrainConfig.from_dict(raw.get("train", {}) or {})
    except (ValueError, TypeError) as exc:
        raise _field_error("train", exc) from None
    paths = dict(raw.get("paths", {}) or {})
    for key in ("dataset", "chain"):
        if key in paths:
            p = Path(base_dir, paths[key])
            if not p.exists():
                raise ValueError(f"config field paths.{key}: {p} does not exist")
            paths[key] = str(p)
    seeds = list(raw.get("seeds", [0, 1, 2]))
    if not seeds or not all(isinstance(s, int) and s >= 0 for s in seeds):
        raise ValueError("config field seeds: need a non-empty list of non-negative integers")
    metrics = {"clash_threshold": 1.2, **(raw.get("metrics", {}) or {})}
    if not metrics["clash_threshold"] > 0:
        raise ValueError("config field metrics.clash_threshold: must be positive")
    synthetic = dict(raw.get("synthetic", {}) or {})
    bad = set(synthetic) - {"n_residues", "n_frames", "seed", "flexibility"}
    if bad:
        raise ValueError(f"config field synthetic: unknown key(s) {sorted(bad)}")
    return RunConfig(CONFIG_SCHEMA_VERSION, list(ladder), steps, train, one_step, synthetic, paths, metrics, seeds)


def load_config(path: str | Path) -> RunConfig:
    path = Path(path)
    try:
        raw = yaml.safe_load(path.read_text())
    except yaml.YAMLError as exc:
        raise ValueError(f"{path}: not valid YAML ({exc})") from None
    return parse_config(raw or {}, path.parent)


# ------------------------------------------------------------------- manifest


def versions() -> dict[str, str]:
    import scipy

    from . import __version__

    return {"multibackmap": __version__, "python": platform.python_version(), "numpy": np.__version__, "scipy": scipy.__version__}


def write_run_manifest(
    out_dir: str | Path,
    command: str,
    argv: Sequence[str],
    inputs: Iterable[str | Path] = (),
    outputs: Iterable[str | Path] = (),
    seed: int | None = None,
    threads: int | None = None,
    extra: Mapping | None = None,
) -> Path:
    """JSON record of a run: argv, input/output hashes, seed, thread count and versions.

    No timestamps, so identical runs produce identical manifests.
    """
    out_dir = Path(out_dir)
    record = {
        "command": command,
        "argv": list(argv),
        "seed": seed,
        "threads": threads,
        "inputs": {str(p): sha256_file(p) for p in inputs},
        "outputs": {Path(p).name: sha256_file(p) for p in sorted(map(str, outputs))},
        "versions": versions(),
    }
    if extra:
        record["extra"] = dict(extra)
    path = out_dir / "manifest.json"
    atomic_write_text(path, json.dumps(record, indent=2, sort_keys=True) + "\n")
    return path
