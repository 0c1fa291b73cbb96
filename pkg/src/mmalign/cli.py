"""Command-line entry point.

Subcommands: ``synth`` (generate a synthetic aligned pair), ``train``,
``eval``, ``predict`` and ``plot-data``.  Exit codes: 0 on success, 1 on
usage/validation errors, 2 on I/O errors.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from .dataset import load_dataset, save_dataset
from .errors import (CheckpointError, ConfigError, FormatError, NonFiniteLossError,
                     ParseError, ValidationError)
from .evaluation import PLOT_QUANTITIES, emit_plot_data, evaluate_alignment, export_alignments, similarity_matrix
from .kg import MMKGPair, split_seeds
from .pseudo import PseudoLabelStore
from .synth import generate_synthetic_pair
from .training import (TrainConfig, evaluate_epoch, load_checkpoint, prepare_training_data,
                       read_checkpoint_config, read_checkpoint_manifest, run_training)


class _UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise _UsageError(f"{self.prog}: error: {message}")


def _build_parser() -> _Parser:
    parser = _Parser(prog="mmalign", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic aligned graph pair")
    p.add_argument("--entities", type=int, required=True)
    p.add_argument("--relations", type=int, default=20)
    p.add_argument("--attributes", type=int, default=10)
    p.add_argument("--feature-dim", type=int, default=64)
    p.add_argument("--noise", type=float, default=0.0)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True, help="output dataset directory")

    p = sub.add_parser("train", help="train on a dataset directory")
    p.add_argument("--data", required=True, help="dataset directory")
    p.add_argument("--out", required=True, help="run output directory")
    p.add_argument("--config", default=None, help="YAML config file (defaults otherwise)")
    p.add_argument("--resume", default=None, help="checkpoint to resume from")

    p = sub.add_parser("eval", help="evaluate a checkpoint on the held-out split")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--direction", choices=("src_to_tgt", "tgt_to_src", "mean"), default=None)
    p.add_argument("--candidates", choices=("test", "all"), default=None)
    p.add_argument("--json", dest="json_out", default=None, help="also write the report as JSON")

    p = sub.add_parser("predict", help="write top-1 alignments for unlabeled entities")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True, help="output TSV file")

    p = sub.add_parser("plot-data", help="extract a quantity from a training history")
    p.add_argument("--history", required=True, help="history.jsonl produced by train")
    p.add_argument("--quantity", choices=PLOT_QUANTITIES, required=True)
    p.add_argument("--out", required=True, help="output CSV file")
    return parser


def _load_split_dataset(data_dir: str, config: TrainConfig):
    """Load a dataset directory and reproduce the train/test seed split."""
    pair, bundles = load_dataset(
        data_dir,
        bow_rel_size=config.bow_rel_size,
        bow_attr_size=config.bow_attr_size,
        text_dim=config.text_dim,
        visual_dim=config.visual_dim,
        stub_seed=config.rng_seed,
    )
    train, test = split_seeds(pair.train_seeds, config.train_fraction, config.rng_seed)
    return MMKGPair(pair.source, pair.target, train, test), bundles


def _cmd_synth(args) -> int:
    pair, bundles = generate_synthetic_pair(
        n_entities=args.entities,
        n_relations=args.relations,
        n_attributes=args.attributes,
        feature_dim=args.feature_dim,
        structure_noise=args.noise,
        rng_seed=args.seed,
    )
    save_dataset(args.out, pair, bundles)
    print(f"wrote synthetic pair with {args.entities} entities per side to {args.out}")
    return 0


def _cmd_train(args) -> int:
    config = TrainConfig.load(args.config) if args.config else TrainConfig()
    pair, bundles = _load_split_dataset(args.data, config)
    state = run_training(pair, bundles, config, args.out, resume_from=args.resume)
    print(f"trained {state.epoch} epochs; checkpoint at {Path(args.out) / 'checkpoint_final.npz'}")
    if pair.test_seeds.pairs:
        data = prepare_training_data(pair, bundles)
        print(evaluate_epoch(state, data, config).format_table())
    return 0


def _cmd_eval(args) -> int:
    config = read_checkpoint_config(args.checkpoint)
    pair, bundles = _load_split_dataset(args.data, config)
    state, _ = load_checkpoint(args.checkpoint, bundles)
    data = prepare_training_data(pair, bundles)
    if not data.test_pairs:
        raise ValidationError("dataset has no held-out pairs to evaluate")
    import torch
    with torch.no_grad():
        embs_src = state.online(data.inputs_src)
        embs_tgt = state.online(data.inputs_tgt)
    report = evaluate_alignment(
        embs_src.joint.numpy(), embs_tgt.joint.numpy(), data.test_pairs,
        candidates=args.candidates or config.eval_candidates,
        direction=args.direction or config.eval_direction,
    )
    print(report.format_table())
    if args.json_out:
        Path(args.json_out).write_text(json.dumps(report.to_json_dict(), indent=2, sort_keys=True),
                                       encoding="utf-8")
    return 0


def _cmd_predict(args) -> int:
    config = read_checkpoint_config(args.checkpoint)
    manifest = read_checkpoint_manifest(args.checkpoint)
    pair, bundles = _load_split_dataset(args.data, config)
    state, _ = load_checkpoint(args.checkpoint, bundles)
    data = prepare_training_data(pair, bundles)
    import torch
    with torch.no_grad():
        embs_src = state.online(data.inputs_src)
        embs_tgt = state.online(data.inputs_tgt)
    pseudo = PseudoLabelStore.from_json_dict(manifest["pseudo"])
    known_src = {s for s, _ in data.train_pairs} | set(pseudo.promoted)
    known_tgt = {t for _, t in data.train_pairs} | pseudo.promoted_targets()
    rows = [s for s in range(data.n_source) if s not in known_src]
    cols = [t for t in range(data.n_target) if t not in known_tgt]
    if not rows or not cols:
        raise ValidationError("no unlabeled entities left to predict")
    sim = similarity_matrix(embs_src.joint.numpy(), embs_tgt.joint.numpy(), rows, cols)
    export_alignments(sim, args.out)
    print(f"wrote {len(rows)} predictions to {args.out}")
    return 0


def _cmd_plot_data(args) -> int:
    n = emit_plot_data(args.history, args.quantity, args.out)
    print(f"wrote {n} rows to {args.out}")
    return 0


_COMMANDS = {
    "synth": _cmd_synth,
    "train": _cmd_train,
    "eval": _cmd_eval,
    "predict": _cmd_predict,
    "plot-data": _cmd_plot_data,
}


def main(argv: list[str] | None = None) -> int:
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
        return _COMMANDS[args.command](args)
    except _UsageError as exc:
        print(str(exc), file=sys.stderr)
        return 1
    except (ParseError, ValidationError, FormatError, ConfigError, CheckpointError,
            NonFiniteLossError) as exc:
        print(f"mmalign: error: {exc}", file=sys.stderr)
        return 1
    except OSError as exc:
        print(f"mmalign: i/o error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
