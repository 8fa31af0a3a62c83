"""Small end-to-end run: synthetic cohort, graph pretraining, three fine-tunes.

Takes a couple of minutes on one core.  The acceptance test repeats this at
10 000 subjects.

    python demos/small_cohort.py --n 2000 --epochs 4
"""
import argparse
import time

import numpy as np

from vesselclip import contrastive as C
from vesselclip import synthdata, tasks


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--n", type=int, default=2000)
    ap.add_argument("--seed", type=int, default=7)
    ap.add_argument("--epochs", type=int, default=4, help="pretraining epochs")
    ap.add_argument("--max-labels", type=int, default=200)
    args = ap.parse_args()

    t0 = time.perf_counter()
    cohort = synthdata.gen_cohort(args.n, seed=args.seed, graphs=True)
    data = cohort.to_data()
    print(f"cohort: {args.n} subjects, prevalence {cohort.labels.mean():.3f} "
          f"({time.perf_counter() - t0:.0f} s)")

    x, feats = data.tabular(), data.graph_features()
    fit = data.fit_rows
    paired = C.PairedData(x[fit], "graph", graphs=[feats[i] for i in fit])
    trainer = C.pretrain(paired, C.Architecture("graph", x.shape[1]),
                         C.ContrastiveConfig(epochs=args.epochs, seed=0))
    for row in trainer.history:
        print(f"  pretrain epoch {row['epoch']}: loss {row['mean_loss']:.2f}")
    ck = "/tmp/small_cohort_graph.bin"
    trainer.save(ck)

    reports = []
    for method, kw, checkpoint in (("tabular-nn", {}, None),
                                   ("cl-graph", {"from_scratch": True}, None),
                                   ("cl-graph", {}, ck)):
        cfg = tasks.FinetuneConfig(seed=0, max_labels=args.max_labels, **kw)
        rep = tasks.finetune(data, method, cfg, checkpoint=checkpoint).report
        tag = method + (" (no pretraining)" if kw else "")
        print(f"{tag:28s} test AUROC {rep.auroc:.4f}")
        if not kw:
            reports.append(rep)
    print(tasks.format_report(reports)[0])
    print(f"total {time.perf_counter() - t0:.0f} s")


if __name__ == "__main__":
    main()
