#!/usr/bin/env python3
"""Synthetic end-to-end benchmark: generate, split, train, pick a threshold on
validation, report test rates next to the published TriNet numbers.

    python3 scripts/run_benchmark.py --seeds 0 1 2 --out bench.json
"""

from __future__ import annotations

import argparse
import json
import time

from trinet import network as nn
from trinet.data import stratified_split
from trinet.metrics import (
    NoFeasibleThreshold, benchmark, confusion, rates, roc_auc, select_threshold_max_ppv,
)
from trinet.synth import GeneratorConfig, generate
from trinet.training import TrainConfig, predict_batch, train


def run_one(condition, seed, n, epochs, lr, min_tpr, null=False):
    gcfg = GeneratorConfig(n=n, condition=condition, seed=seed)
    if null:
        gcfg = gcfg.null_signal()
    tr, va, te = stratified_split(generate(gcfg), seed=seed)
    t0 = time.monotonic()
    params, curve, spec, mcfg = train(tr, va, nn.ModelConfig(), TrainConfig.desk(seed=seed, epochs=epochs, lr=lr))
    val_p, test_p = predict_batch(va, params, spec, mcfg), predict_batch(te, params, spec, mcfg)
    row = {
        "condition": condition, "seed": seed, "null_signal": null,
        "train_seconds": round(time.monotonic() - t0, 1),
        "final_train_loss": curve.train_loss[-1],
        "test_auc": roc_auc(test_p, te.labels).auc,
    }
    try:
        choice = select_threshold_max_ppv(val_p, va.labels, min_tpr=min_tpr)
    except NoFeasibleThreshold as exc:
        row["error"] = str(exc)
        return row
    rt = rates(confusion(test_p, te.labels, choice.threshold))
    row.update(threshold=choice.threshold, test_ppv=rt.ppv, test_tpr=rt.tpr, test_tnr=rt.tnr)
    return row


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--conditions", nargs="+", default=["pneumonia", "uti"])
    ap.add_argument("--seeds", nargs="+", type=int, default=[0])
    ap.add_argument("--n", type=int, default=20000)
    desk = TrainConfig.desk()
    ap.add_argument("--epochs", type=int, default=desk.epochs)
    ap.add_argument("--lr", type=float, default=desk.lr)
    ap.add_argument("--min-tpr", type=float, default=0.15)
    ap.add_argument("--null", action="store_true", help="also run the null-signal variant")
    ap.add_argument("--out", help="write all rows as JSON")
    args = ap.parse_args(argv)

    rows = []
    for cond in args.conditions:
        ref = benchmark(cond, "trinet")
        print(f"{cond}: published PPV {ref.ppv:.2f} TPR {ref.tpr:.2f}")
        for null in (False, True) if args.null else (False,):
            for seed in args.seeds:
                row = run_one(cond, seed, args.n, args.epochs, args.lr, args.min_tpr, null)
                rows.append(row)
                tag = "null " if null else ""
                if "error" in row:
                    print(f"  {tag}seed {seed}: AUC {row['test_auc']:.3f}, {row['error']}")
                else:
                    print(f"  {tag}seed {seed}: AUC {row['test_auc']:.3f} PPV {row['test_ppv']:.3f} "
                          f"TPR {row['test_tpr']:.3f} TNR {row['test_tnr']:.3f} ({row['train_seconds']}s)")
    if args.out:
        with open(args.out, "w") as fh:
            json.dump(rows, fh, indent=2)


if __name__ == "__main__":
    main()
