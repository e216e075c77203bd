"""Command-line entry points: generate, train, eval, baseline, compare."""
from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from .baselines import fit_spine_hmm
from .dataset import Corpus, CorpusFormatError, ScanRecord, load_corpus, save_corpus
from .evaluate import evaluate_gnn, evaluate_hmm, evaluate_hungarian
from .gnn import (GnnModel, LossWeights, TrainConfig, load_checkpoint,
                  parse_architecture, save_checkpoint, train)
from .metrics import EvalReport, compare_reports
from .spine import (AUGMENTATION_LEVELS, AugmentationConfig, SPINE_VARIANTS,
                    SyntheticSpineConfig, augment, generate_synthetic_spine)


def _seed_int(*parts: int) -> int:
    return int(np.random.SeedSequence(list(parts)).generate_state(1, np.uint64)[0])


def cmd_generate(args) -> int:
    config = AugmentationConfig.preset(args.aug)
    variants = list(SPINE_VARIANTS)
    records = []
    for i in range(args.n):
        base = generate_synthetic_spine(SyntheticSpineConfig(variant=variants[i % len(variants)]))
        keypoints = augment(base, config, _seed_int(args.seed, i))
        records.append(ScanRecord(scan_id=f"scan{i:04d}", keypoints=keypoints,
                                  provenance="synthetic", split=args.split))
    save_corpus(Corpus(records=records), args.out)
    print(f"wrote {args.n} scans to {args.out}")
    return 0


def _load_corpus_checked(path: str) -> Corpus:
    corpus = load_corpus(path)
    for diag in corpus.diagnostics:
        print(f"warning: {diag}", file=sys.stderr)
    if not corpus.records:
        raise CorpusFormatError(f"{path}: no usable scans")
    return corpus


def cmd_train(args) -> int:
    parse_architecture(args.arch)  # fail fast on malformed notation
    corpus = _load_corpus_checked(args.corpus)
    model = GnnModel(hidden=args.hidden, backbone=args.arch, edge_branch=args.edge_arch,
                     node_branch=args.node_arch, seed=args.seed)
    weights = LossWeights(alpha=args.alpha, beta=args.beta, gamma=args.gamma,
                          legitimacy_enabled=args.legitimacy)
    config = TrainConfig(k=args.k, epochs=args.epochs, batch_size=args.batch,
                         reaugment_every=args.reaugment_every,
                         augmentation=AugmentationConfig.preset(args.aug),
                         weights=weights, optimizer=args.optimizer, lr=args.lr,
                         momentum=args.momentum, seed=args.seed,
                         include_model_spines=not args.no_model_spines)
    result = train(model, [r.keypoints for r in corpus.records], config)

    meta = {"k": args.k, "edge_threshold": 0.5, "legitimacy_enabled": args.legitimacy,
            "alpha": args.alpha, "beta": args.beta, "gamma": args.gamma,
            "aug": args.aug, "seed": args.seed, "epochs": args.epochs,
            "n_reaugmentations": result.n_reaugmentations}
    save_checkpoint(model, args.out, meta=meta)
    if args.history:
        cols = ["epoch", "loss", "edge_loss", "node_loss", "legit_loss",
                "node_accuracy", "edge_f1"]
        lines = [",".join(cols)]
        lines += [",".join(str(row[c]) for c in cols) for row in result.history]
        Path(args.history).write_text("\n".join(lines) + "\n")
    final = result.history[-1]
    print(f"trained {args.epochs} epochs; final loss {final['loss']:.6f}, "
          f"node accuracy {final['node_accuracy']:.4f}, edge F1 {final['edge_f1']:.4f}")
    return 0


def cmd_eval(args) -> int:
    model, meta = load_checkpoint(args.model)
    corpus = _load_corpus_checked(args.corpus)
    k = args.k if args.k is not None else int(meta.get("k", 14))
    legitimacy = args.legitimacy or bool(meta.get("legitimacy_enabled", False))
    report = evaluate_gnn(model, corpus, k=k, edge_threshold=args.edge_threshold,
                          legitimacy_enabled=legitimacy)
    report.save(args.out)
    if args.csv:
        Path(args.csv).write_text(report.to_csv())
    print(json.dumps(report.aggregate(), indent=2))
    return 0


def cmd_baseline(args) -> int:
    corpus = _load_corpus_checked(args.corpus)
    if args.method == "hungarian":
        report = evaluate_hungarian(corpus, max_distance=args.max_distance)
    else:
        train_path = args.train_corpus or args.corpus
        train_corpus = _load_corpus_checked(train_path)
        hmm = fit_spine_hmm([r.keypoints for r in train_corpus.records],
                            max_iters=args.hmm_iters)
        if args.hmm_out:
            hmm.save(args.hmm_out)
        report = evaluate_hmm(hmm, corpus)
    report.save(args.out)
    if args.csv:
        Path(args.csv).write_text(report.to_csv())
    print(json.dumps(report.aggregate(), indent=2))
    return 0


def cmd_compare(args) -> int:
    report_a = EvalReport.load(args.a)
    report_b = EvalReport.load(args.b)
    result = compare_reports(report_a, report_b)
    Path(args.out).write_text(json.dumps(result, indent=2))
    print(json.dumps({"p_values": result["p_values"],
                      "hard_subset_size": len(result["hard_subset"]["scan_ids"])}, indent=2))
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="spinegnn",
                                     description="Vertebra keypoint graph learning pipeline")
    sub = parser.add_subparsers(dest="command", required=True)

    gen = sub.add_parser("generate", help="write a synthetic corpus")
    gen.add_argument("--n", type=int, required=True, help="number of scans")
    gen.add_argument("--aug", choices=AUGMENTATION_LEVELS, default="none")
    gen.add_argument("--seed", type=int, default=0)
    gen.add_argument("--split", choices=("train", "val", "test"), default="train")
    gen.add_argument("--out", required=True)
    gen.set_defaults(func=cmd_generate)

    tr = sub.add_parser("train", help="train the GNN on a corpus of base spines")
    tr.add_argument("--corpus", required=True)
    tr.add_argument("--out", required=True, help="checkpoint path")
    tr.add_argument("--history", default=None, help="per-epoch CSV path")
    tr.add_argument("--k", type=int, default=14)
    tr.add_argument("--arch", default="(13x1)", help='backbone, e.g. "(13x1)" or "(1,11,1)"')
    tr.add_argument("--edge-arch", default="", help="edge head branch (multi-head)")
    tr.add_argument("--node-arch", default="", help="node head branch (multi-head)")
    tr.add_argument("--hidden", type=int, default=64)
    tr.add_argument("--alpha", type=float, default=1.0, help="edge loss weight")
    tr.add_argument("--beta", type=float, default=1.0, help="level loss weight")
    tr.add_argument("--gamma", type=float, default=1.0, help="legitimacy loss weight")
    tr.add_argument("--legitimacy", action="store_true", help="enable the legitimacy head")
    tr.add_argument("--aug", choices=AUGMENTATION_LEVELS, default="default")
    tr.add_argument("--batch", type=int, default=25)
    tr.add_argument("--epochs", type=int, default=100)
    tr.add_argument("--reaugment-every", type=int, default=25)
    tr.add_argument("--optimizer", choices=("madgrad", "adam"), default="madgrad")
    tr.add_argument("--lr", type=float, default=1e-3)
    tr.add_argument("--momentum", type=float, default=0.1)
    tr.add_argument("--seed", type=int, default=0)
    tr.add_argument("--no-model-spines", action="store_true",
                    help="do not append the three model spines to the training pool")
    tr.set_defaults(func=cmd_train)

    ev = sub.add_parser("eval", help="evaluate a checkpoint on a corpus")
    ev.add_argument("--model", required=True)
    ev.add_argument("--corpus", required=True)
    ev.add_argument("--out", required=True, help="report JSON path")
    ev.add_argument("--csv", default=None, help="per-scan CSV path")
    ev.add_argument("--k", type=int, default=None, help="override the checkpoint's k")
    ev.add_argument("--edge-threshold", type=float, default=0.5)
    ev.add_argument("--legitimacy", action="store_true")
    ev.set_defaults(func=cmd_eval)

    bl = sub.add_parser("baseline", help="run a baseline method over a corpus")
    bl.add_argument("--method", choices=("hungarian", "hmm"), required=True)
    bl.add_argument("--corpus", required=True)
    bl.add_argument("--out", required=True)
    bl.add_argument("--csv", default=None)
    bl.add_argument("--max-distance", type=float, default=40.0,
                    help="matching cutoff in mm (hungarian)")
    bl.add_argument("--train-corpus", default=None,
                    help="corpus to fit the HMM on (defaults to --corpus)")
    bl.add_argument("--hmm-iters", type=int, default=50)
    bl.add_argument("--hmm-out", default=None, help="write the fitted HMM as JSON")
    bl.set_defaults(func=cmd_baseline)

    cp = sub.add_parser("compare", help="compare two reports over the same scans")
    cp.add_argument("--a", required=True)
    cp.add_argument("--b", required=True)
    cp.add_argument("--out", required=True)
    cp.set_defaults(func=cmd_compare)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
