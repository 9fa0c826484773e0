"""sap-train: fit the pretext classifier and export its backbone."""

from __future__ import annotations

import argparse
import json
import sys

from .train import TrainConfig, export_weights, train


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="sap-train", description=__doc__)
    parser.add_argument("--data", required=True, help="dataset directory with manifest.json")
    parser.add_argument("--out", required=True, help="output weights file")
    parser.add_argument("--epochs", type=int, default=20)
    parser.add_argument("--batch-size", type=int, default=16)
    parser.add_argument("--lr", type=float, default=3e-4)
    parser.add_argument("--seed", type=int, default=0)
    parser.add_argument("--feature-dim", type=int, default=64)
    parser.add_argument("--target-val-acc", type=float, default=None)
    parser.add_argument("--report", default=None, help="optional JSON training report path")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    cfg = TrainConfig(
        epochs=args.epochs,
        batch_size=args.batch_size,
        learning_rate=args.lr,
        seed=args.seed,
        feature_dim=args.feature_dim,
        target_val_accuracy=args.target_val_acc,
    )
    try:
        model, report = train(args.data, cfg)
    except (FileNotFoundError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    export_weights(model, args.out)
    summary = {
        "epochs_run": report.epochs_run,
        "final_train_loss": report.final_train_loss,
        "val_accuracy": report.val_accuracy,
        "weights": str(args.out),
    }
    if args.report:
        with open(args.report, "w", encoding="utf-8") as fh:
            json.dump({**summary, "history": report.history}, fh, indent=1, sort_keys=True)
    print(json.dumps(summary))
    return 0


if __name__ == "__main__":
    sys.exit(main())
