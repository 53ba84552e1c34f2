"""Data-scarcity experiment: retrain every tuning stage on sampled fractions
of the training conversations and plot how Recall@10 degrades.

Expects a checkpoint directory holding a pretrained frozen backbone
(backbone.npz, vocab.json, meta.json), e.g. from run_toy_pipeline.py.

Usage:
    python3 scripts/run_scarcity_sweep.py --ckpt runs/toy/ckpt --data runs/toy/data
"""

import argparse
import json
from pathlib import Path

from promptcrs.data import EntityLinker, load_corpus, load_kg, split_corpus
from promptcrs.evaluation import scarcity_sweep


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--ckpt", type=Path, required=True)
    ap.add_argument("--data", type=Path, required=True)
    ap.add_argument("--work", type=Path, default=Path("runs/sweep"))
    ap.add_argument("--proportions", type=float, nargs="+",
                    default=[0.2, 0.4, 0.6, 0.8, 1.0])
    ap.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2])
    ap.add_argument("--split-seed", type=int, default=13)
    ap.add_argument("--steps", type=int, nargs=3, default=[300, 150, 200],
                    metavar=("FUSE", "GEN", "REC"))
    args = ap.parse_args()

    kg, names = load_kg(args.data / "kg.tsv", args.data / "entities.tsv")
    linker = EntityLinker.from_names(names)
    corpus = load_corpus(args.data / "corpus.jsonl", linker, kg)
    splits = split_corpus(corpus, seed=args.split_seed)

    rows = scarcity_sweep(
        args.ckpt, splits["train"], splits["test"],
        proportions=args.proportions, seeds=args.seeds,
        work_dir=args.work, data_dir=args.data,
        stage_steps=dict(zip(("fuse_pretrain", "generation", "recommendation"),
                             args.steps)),
    )

    by_prop: dict[float, list[float]] = {}
    for row in rows:
        if row.skipped:
            print(f"p={row.proportion:.2f} seed={row.seed}: skipped (no instances)")
            continue
        r10 = row.report.recall[10]
        by_prop.setdefault(row.proportion, []).append(r10)
        print(f"p={row.proportion:.2f} seed={row.seed}: "
              f"{json.dumps(row.report.to_dict())}")

    print("\nmean recall@10 by training proportion:")
    for prop in sorted(by_prop):
        vals = by_prop[prop]
        print(f"  {prop:4.0%}: {sum(vals) / len(vals):.3f} (n={len(vals)})")


if __name__ == "__main__":
    main()
