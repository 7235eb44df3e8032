"""Command-line interface.

Subcommands: train, eval, ablate, graph-dump, synth.  Exit codes: 0 on
success, 1 on usage errors (bad flags, missing config file), 2 on runtime
failures.
"""

from __future__ import annotations

import argparse
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import data as dt
from . import graphspec as gs
from . import tsembed as te
from .config import ConfigFileError, load_config
from .harness import AblationPlan, run_ablation, run_training, evaluate_checkpoint

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_RUNTIME = 2


class _Parser(argparse.ArgumentParser):
    def error(self, message):  # argparse defaults to exit code 2; we use 1
        self.print_usage(sys.stderr)
        print(f"error: {message}", file=sys.stderr)
        raise SystemExit(EXIT_USAGE)


def build_parser() -> _Parser:
    parser = _Parser(prog="ctxalign", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    train = sub.add_parser("train", help="train a model from a config file")
    train.add_argument("--config", required=True, help="INI config path")
    train.add_argument("--seed", type=int, default=None, help="override [train] seed")
    train.add_argument("--out", default="runs/train", help="output directory")
    train.add_argument("--resume", default=None, help="checkpoint to resume from")

    ev = sub.add_parser("eval", help="evaluate a checkpoint (cross-dataset capable)")
    ev.add_argument("--config", required=True, help="INI config path (model + data to test on)")
    ev.add_argument("--checkpoint", required=True, help="checkpoint produced by train")
    ev.add_argument("--seed", type=int, default=None)
    ev.add_argument("--out", default="runs/eval")

    ab = sub.add_parser("ablate", help="run ablation variants over seeds")
    ab.add_argument("--config", required=True)
    ab.add_argument(
        "--variants",
        default="full,no_coarse,random_adjacency",
        help="comma list; names or groups (layer_sweep, insertion_sweep, parts_sweep)",
    )
    ab.add_argument("--seeds", default="0,1,2", help="comma list of seeds")
    ab.add_argument("--out", default="runs/ablate")

    gd = sub.add_parser("graph-dump", help="print graph structure and weights")
    gd.add_argument("--mode", choices=("vca", "fsca", "fsca-class"), required=True)
    gd.add_argument("--patches", type=int, default=None, help="patch count (vca / fsca-class)")
    gd.add_argument("--parts", default=None, help="comma list of part lengths (fsca)")
    gd.add_argument("--prompt-len", type=int, required=True)
    gd.add_argument("--examples", type=int, default=2, help="demonstration examples (fsca-class)")
    gd.add_argument("--pruned", action="store_true")
    gd.add_argument("--width", type=int, default=8, help="embedding width for the weights")
    gd.add_argument("--seed", type=int, default=0, help="seed for the node embeddings")
    gd.add_argument("--out", default=None, help="write to file instead of stdout")

    sy = sub.add_parser("synth", help="generate a synthetic series CSV")
    sy.add_argument("--kind", choices=dt.SYNTH_KINDS, default="sine_mix")
    sy.add_argument("--length", type=int, default=2000)
    sy.add_argument("--seed", type=int, default=0)
    sy.add_argument("--channels", type=int, default=1)
    sy.add_argument("--noise", type=float, default=0.1)
    sy.add_argument("--out", required=True)
    return parser


def _dump_layout(args) -> te.SequenceLayout:
    prompt_ids = tuple(range(65, 65 + args.prompt_len))
    if args.mode == "vca":
        if args.patches is None:
            raise ConfigFileError("--patches is required for --mode vca")
        return te.layout_vca(args.patches, prompt_ids)
    if args.mode == "fsca":
        if args.parts is None:
            raise ConfigFileError("--parts is required for --mode fsca")
        lengths = tuple(int(x) for x in args.parts.split(","))
        return te.SequenceLayout(
            mode="fsca_forecast",
            roles=te._roles_fsca_forecast(lengths, args.prompt_len),
            part_lengths=lengths,
            prompt_len=args.prompt_len,
            prompt_ids=prompt_ids,
        )
    if args.patches is None:
        raise ConfigFileError("--patches is required for --mode fsca-class")
    return te.layout_fsca_class(args.patches, args.examples, prompt_ids)


def _matrix_lines(name: str, mat: np.ndarray) -> list[str]:
    lines = [name, f"{mat.shape[0]} {mat.shape[1]}"]
    lines.extend(" ".join(repr(float(v)) for v in row) for row in mat)
    return lines


def cmd_graph_dump(args) -> int:
    layout = _dump_layout(args)
    spec = gs.build_spec(layout, pruned=args.pruned)
    rng = np.random.default_rng(args.seed)
    embeddings = rng.normal(size=(layout.total_len, args.width))
    weights = gs.group_weights(spec, embeddings)
    fine_adj, coarse_adj = gs.compute_edge_weights(spec, embeddings, weights=weights)

    lines = [f"fine_edges {len(spec.fine_edges)}"]
    lines.extend(
        f"{e.src} {e.tgt} {w!r} {e.group}" for e, w in zip(spec.fine_edges, weights)
    )
    lines.append(f"coarse_edges {len(spec.coarse_edges)}")
    lines.extend(f"{e.src} {e.tgt} 1.0 -1" for e in spec.coarse_edges)
    lines.extend(_matrix_lines("gamma", spec.gamma))
    lines.extend(_matrix_lines("fine_adjacency", fine_adj))
    lines.extend(_matrix_lines("fine_normalized", gs.normalize_adjacency(fine_adj)))
    lines.extend(_matrix_lines("coarse_adjacency", coarse_adj))
    lines.extend(_matrix_lines("coarse_normalized", gs.normalize_adjacency(coarse_adj)))
    text = "\n".join(lines) + "\n"
    if args.out:
        Path(args.out).write_text(text)
    else:
        sys.stdout.write(text)
    return EXIT_OK


def cmd_synth(args) -> int:
    series = dt.synth_generate(
        args.kind,
        args.length,
        seed=args.seed,
        params={"channels": args.channels, "noise": args.noise},
    )
    dt.save_csv(args.out, series)
    print(f"wrote {series.length} x {series.channels} series to {args.out}")
    return EXIT_OK


def cmd_train(args) -> int:
    mcfg, dcfg, tcfg = load_config(args.config)
    if args.seed is not None:
        tcfg = replace(tcfg, seed=args.seed)
    result = run_training(mcfg, dcfg, tcfg, out_dir=args.out, resume=args.resume)
    primary = "accuracy" if mcfg.task == "classify" else "mse"
    print(
        f"trained {result.epochs_run} epochs (best epoch {result.best_epoch}); "
        f"test {primary} = {result.report.values[primary]:.6f}; outputs in {result.out_dir}"
    )
    return EXIT_OK


def cmd_eval(args) -> int:
    mcfg, dcfg, tcfg = load_config(args.config)
    if args.seed is not None:
        tcfg = replace(tcfg, seed=args.seed)
    result = evaluate_checkpoint(mcfg, dcfg, tcfg, args.checkpoint, out_dir=args.out)
    primary = "accuracy" if mcfg.task == "classify" else "mse"
    print(f"test {primary} = {result.report.values[primary]:.6f}; outputs in {result.out_dir}")
    return EXIT_OK


def cmd_ablate(args) -> int:
    mcfg, dcfg, tcfg = load_config(args.config)
    plan = AblationPlan(
        variants=tuple(v.strip() for v in args.variants.split(",") if v.strip()),
        seeds=tuple(int(s) for s in args.seeds.split(",") if s.strip()),
    )
    summary = run_ablation(plan, mcfg, dcfg, tcfg, out_dir=args.out)
    for variant, entry in summary["variants"].items():
        mean = entry.get("mean")
        shown = f"{mean:.6f}" if mean is not None else "failed"
        print(f"{variant}: mean test {summary['metric']} = {shown}")
    for flag in summary["ordering_flags"]:
        print(f"flag: {flag}")
    print(f"outputs in {args.out}")
    return EXIT_OK


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        if args.command == "train":
            return cmd_train(args)
        if args.command == "eval":
            return cmd_eval(args)
        if args.command == "ablate":
            return cmd_ablate(args)
        if args.command == "graph-dump":
            return cmd_graph_dump(args)
        if args.command == "synth":
            return cmd_synth(args)
        parser.error(f"unknown command {args.command!r}")
    except ConfigFileError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except SystemExit as exc:
        return int(exc.code or 0)
    except Exception as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
