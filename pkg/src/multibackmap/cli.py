"""Command-line entry point.

Every subcommand writes its outputs plus ``manifest.json`` (argv, seed,
thread count, input/output hashes, versions) to ``--out``, which defaults to
``<output root>/<subcommand>``; the output root is the current directory
unless ``MULTIBACKMAP_OUTPUT_ROOT`` is set. Exit codes: 0 success, 1 usage
error, 2 runtime failure.
"""

from __future__ import annotations

import argparse
import contextlib
import json
import logging
import sys
from pathlib import Path
from typing import Sequence

import numpy as np

from .coarsen import bead_size_rho, write_mapping
from .core import Ensemble
from .io import atomic_write_text, load_config, output_root, parse_pdb, write_pdb, write_run_manifest
from .metrics import phi_psi, radius_of_gyration, ramachandran_histogram, write_rama_csv, write_report

log = logging.getLogger("multibackmap")

SUBCOMMANDS = ("coarsen", "synth", "train", "backmap", "evaluate", "rama", "rg")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: error: {message}")


def _global_flags(p: argparse.ArgumentParser, top: bool) -> None:
    # defaults live only on the top-level parser so a flag given before the
    # subcommand is not overwritten by the subparser's default
    d = {} if top else {"default": argparse.SUPPRESS}
    p.add_argument("--seed", type=int, help="random seed (default 0)", **({"default": 0} if top else d))
    p.add_argument("--config", type=Path, help="YAML run configuration", **({"default": None} if top else d))
    p.add_argument("--threads", type=int, help="BLAS/OpenMP thread limit", **({"default": None} if top else d))
    p.add_argument("--out", type=Path, help="output directory", **({"default": None} if top else d))


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="multibackmap", description="Multistep generative backmapping of coarse-grained proteins.")
    _global_flags(parser, top=True)
    sub = parser.add_subparsers(dest="command", metavar="{" + ",".join(SUBCOMMANDS) + "}", parser_class=_Parser)
    sub.required = True

    p = sub.add_parser("synth", help="generate a synthetic peptide ensemble")
    p.add_argument("--residues", type=int, default=48)
    p.add_argument("--frames", type=int, default=500)
    p.add_argument("--flexibility", type=float, default=10.0, help="dihedral noise in degrees")

    p = sub.add_parser("coarsen", help="build a coarsening ladder and report bead sizes")
    p.add_argument("--input", type=Path, required=True, help="fine-grained multi-model PDB")
    p.add_argument("--beads", type=int, help="bead count of the coarsest level (ladder calpha, segments:N)")
    p.add_argument("--ladder", nargs="+", help="explicit level specs, e.g. calpha learned:8")

    p = sub.add_parser("train", help="train a backmapping chain")
    p.add_argument("--input", type=Path, required=True, help="fine-grained multi-model PDB")
    p.add_argument("--beads", type=int)
    p.add_argument("--ladder", nargs="+")
    p.add_argument("--epochs", type=int, help="override the configured epoch budget")
    p.add_argument("--one-step", action="store_true", help="also train the single-step baseline")

    p = sub.add_parser("backmap", help="reconstruct fine-grained frames from coarse ones")
    p.add_argument("--chain", type=Path, required=True, help="chain directory or its chain.json")
    p.add_argument("--input", type=Path, required=True, help="coarse multi-model PDB")

    p = sub.add_parser("evaluate", help="score a chain against reference frames")
    p.add_argument("--chain", type=Path, required=True)
    p.add_argument("--input", type=Path, required=True, help="fine-grained reference PDB")
    p.add_argument("--seeds", type=int, default=3, help="number of sampling seeds")
    p.add_argument("--split", choices=("test", "all"), default="test", help="frames to score")

    p = sub.add_parser("rama", help="Ramachandran density CSV")
    p.add_argument("--input", type=Path, required=True)
    p.add_argument("--bin-width", type=float, default=5.0)

    p = sub.add_parser("rg", help="per-frame radius of gyration CSV")
    p.add_argument("--input", type=Path, required=True)

    for name, sp in sub.choices.items():
        _global_flags(sp, top=False)
    return parser


def _load_ensemble(path: Path) -> Ensemble:
    top, frames = parse_pdb(path)
    return Ensemble(top, tuple(frames))


def _config(args):
    if args.config is None:
        from .io import parse_config

        return parse_config({"schema_version": 1})
    return load_config(args.config)


def _ladder_specs(args, cfg) -> list[str]:
    if args.ladder and args.beads is not None:
        raise UsageError("give --ladder or --beads, not both")
    if args.ladder:
        return list(args.ladder)
    if args.beads is not None:
        return ["calpha", f"segments:{args.beads}"]
    return list(cfg.ladder)


def _cmd_synth(args, out: Path):
    from .synth import generate_synthetic_ensemble

    ens = generate_synthetic_ensemble(args.residues, args.frames, seed=args.seed, flexibility=args.flexibility)
    path = out / "ensemble.pdb"
    write_pdb(ens.topology, list(ens.frames), path)
    print(f"wrote {len(ens)} frames of {ens.topology.n_atoms} atoms to {path}")
    return [], [path], {}


def _cmd_coarsen(args, out: Path):
    from .pipeline import build_ladder
    from .train import split_indices

    cfg = _config(args)
    ens = _load_ensemble(args.input)
    specs = _ladder_specs(args, cfg)
    # learned mappings see training frames only; tiny inputs use every frame
    fit = split_indices(len(ens), cfg.train)[0] if len(ens) >= 10 else None
    ladder = build_ladder(ens, specs, seed=args.seed, fit_frames=fit)
    outputs, rhos = [], []
    for i, mp in enumerate(ladder.mappings):
        path = out / f"mapping_{i}.txt"
        write_mapping(mp, path)
        outputs.append(path)
        rhos.append(round(bead_size_rho(ens.topology, ladder.mappings[: i + 1]), 2))
    for i, lvl in enumerate(ladder.levels[1:], start=1):
        path = out / f"level_{i}.pdb"
        write_pdb(lvl.topology, list(lvl.frames), path)
        outputs.append(path)
    summary = {"ladder": specs, "sizes": list(ladder.sizes), "rho": rhos, "n_residues": ens.topology.n_residues}
    path = out / "summary.json"
    atomic_write_text(path, json.dumps(summary, indent=2) + "\n")
    outputs.append(path)
    for i, (n, rho) in enumerate(zip(ladder.sizes[1:], rhos), start=1):
        print(f"level {i}: {n} beads, rho = {rho:.2f}")
    return [args.input], outputs, {"rho": rhos}


def _cmd_train(args, out: Path):
    from .pipeline import StepConfig, build_ladder, one_step_chain, save_chain, train_chain
    from .train import split_indices, write_history

    cfg = _config(args)
    train_cfg = cfg.train.with_(seed=args.seed)
    if args.epochs is not None:
        train_cfg = train_cfg.with_(epochs=args.epochs)
    ens = _load_ensemble(args.input)
    specs = _ladder_specs(args, cfg)
    if len(specs) != len(cfg.steps) and args.config is not None:
        raise ValueError(f"config has {len(cfg.steps)} step(s) but the ladder has {len(specs)}")
    steps = cfg.steps if len(cfg.steps) == len(specs) else [cfg.steps[0]] * len(specs)
    tr, va, _ = split_indices(len(ens), train_cfg)
    ladder = build_ladder(ens, specs, seed=args.seed, fit_frames=tr)
    chain = train_chain(ladder, [StepConfig(hp, train_cfg, seed=args.seed) for hp in steps], tr, va)
    save_chain(chain, out / "chain")
    outputs = sorted((out / "chain").iterdir())
    for i, h in enumerate(chain.histories):
        path = out / f"history_step{i}.tsv"
        write_history(h, path)
        outputs.append(path)
        print(f"step {i}: val loss {h.initial_val:.4g} -> {h.best_val:.4g} (best epoch {h.best_epoch})")
    if args.one_step:
        hp1 = cfg.one_step if cfg.one_step is not None else steps[-1]
        base = one_step_chain(ladder, StepConfig(hp1, train_cfg, seed=args.seed), tr, va)
        save_chain(base, out / "one_step")
        outputs += sorted((out / "one_step").iterdir())
        path = out / "history_one_step.tsv"
        write_history(base.histories[0], path)
        outputs.append(path)
    return [args.input] + ([args.config] if args.config else []), outputs, {"ladder": specs}


def _cmd_backmap(args, out: Path):
    from .pipeline import backmap_frames, load_chain

    chain = load_chain(args.chain)
    top, frames = parse_pdb(args.input)
    xk = np.stack([f.coords for f in frames])
    levels = backmap_frames(xk, chain, args.seed)
    outputs = []
    for i in range(chain.k):
        name = "backmapped.pdb" if i == 0 else f"intermediate_level{i}.pdb"
        path = out / name
        write_pdb(chain.topologies[i], list(levels[i]), path)
        outputs.append(path)
    print(f"backmapped {len(frames)} frame(s) through {chain.k} step(s)")
    chain_json = args.chain / "chain.json" if args.chain.is_dir() else args.chain
    return [args.input, chain_json], outputs, {}


def _cmd_evaluate(args, out: Path):
    from .metrics import evaluate_scheme
    from .pipeline import load_chain
    from .train import split_indices

    if args.seeds < 1:
        raise UsageError("--seeds must be >= 1")
    cfg = _config(args)
    chain = load_chain(args.chain)
    ens = _load_ensemble(args.input)
    if args.split == "test":
        _, _, te = split_indices(len(ens), cfg.train)
        ens = ens.subset(te)
    seeds = [args.seed + s for s in range(args.seeds)]
    ev = evaluate_scheme(chain, ens, seeds)
    outputs = [out / "report.json", out / "report.csv", out / "rama_true.csv", out / "rama_generated.csv"]
    write_report(ev.report, *outputs[:2])
    write_rama_csv(ev.rama_true, outputs[2])
    write_rama_csv(ev.rama_generated, outputs[3])
    r = ev.report
    print(
        f"rmsd {r.rmsd_mean:.4f} +- {r.rmsd_std:.4f}  ged {r.ged_norm_mean:.4f} +- {r.ged_norm_std:.4f}  "
        f"clash {r.clash_mean:.3f} +- {r.clash_std:.3f}  n_samples {r.n_samples}"
    )
    chain_json = args.chain / "chain.json" if args.chain.is_dir() else args.chain
    return [args.input, chain_json], outputs, {"seeds": seeds}


def _cmd_rama(args, out: Path):
    ens = _load_ensemble(args.input)
    pairs = []
    for f in ens.frames:
        pairs += phi_psi(f, ens.topology)[0]
    path = out / "rama.csv"
    write_rama_csv(ramachandran_histogram(pairs, args.bin_width), path, args.bin_width)
    return [args.input], [path], {}


def _cmd_rg(args, out: Path):
    ens = _load_ensemble(args.input)
    masses = ens.topology.masses()
    rows = ["frame,rg_nm"] + [f"{i},{radius_of_gyration(f, masses)!r}" for i, f in enumerate(ens.frames)]
    path = out / "rg.csv"
    atomic_write_text(path, "\n".join(rows) + "\n")
    return [args.input], [path], {}


COMMANDS = {
    "synth": _cmd_synth,
    "coarsen": _cmd_coarsen,
    "train": _cmd_train,
    "backmap": _cmd_backmap,
    "evaluate": _cmd_evaluate,
    "rama": _cmd_rama,
    "rg": _cmd_rg,
}


def _thread_limit(n: int | None):
    if n is None:
        return contextlib.nullcontext()
    from threadpoolctl import threadpool_limits

    return threadpool_limits(limits=n)


def main(argv: Sequence[str] | None = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if args.threads is not None and args.threads < 1:
            raise UsageError("--threads must be >= 1")
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return 1
    except SystemExit as exc:  # --help
        return 0 if exc.code in (0, None) else 1
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(message)s", stream=sys.stderr)
    out = args.out if args.out is not None else output_root() / args.command
    try:
        out.mkdir(parents=True, exist_ok=True)
        with _thread_limit(args.threads):
            inputs, outputs, extra = COMMANDS[args.command](args, out)
        write_run_manifest(out, args.command, argv, inputs, outputs, args.seed, args.threads, extra)
    except UsageError as exc:
        parser.print_usage(sys.stderr)
        print(f"multibackmap: error: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:  # noqa: BLE001 - reported as a runtime failure
        log.debug("failure", exc_info=True)
        print(f"multibackmap {args.command}: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
