#!/usr/bin/env python3
"""Render the gradient-norm and accuracy curves of a metrics CSV.

Usage:
    python3 scripts/plot_metrics.py metrics.csv --out metrics.png

The x axis is model time (cost-model units), so runs with different
communication patterns are directly comparable.
"""

import argparse
import csv
import math
import sys

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt


def read_rows(path):
    with open(path, newline="") as handle:
        reader = csv.DictReader(handle)
        expected = [
            "k",
            "grad_norm",
            "consensus_err",
            "train_acc",
            "test_acc",
            "model_time",
            "epsilon",
            "regime",
        ]
        if reader.fieldnames != expected:
            sys.exit(f"unexpected CSV header: {reader.fieldnames}")
        rows = [
            {key: (row[key] if key == "regime" else float(row[key])) for key in expected}
            for row in reader
        ]
    if not rows:
        sys.exit("metrics file has no rows")
    return rows


def main():
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("metrics", help="CSV written by `ltadmm run`")
    parser.add_argument("--out", default="metrics.png", help="output image path")
    args = parser.parse_args()

    rows = read_rows(args.metrics)
    time = [r["model_time"] for r in rows]

    fig, (ax_grad, ax_acc) = plt.subplots(1, 2, figsize=(11, 4.2))

    ax_grad.plot(time, [r["grad_norm"] for r in rows], color="tab:blue", label="gradient norm")
    ax_grad.plot(
        time,
        [r["consensus_err"] for r in rows],
        color="tab:orange",
        alpha=0.8,
        label="consensus error",
    )
    ax_grad.set_yscale("log")
    ax_grad.set_xlabel("model time")
    ax_grad.set_ylabel("norm at the mean iterate")
    ax_grad.legend()
    ax_grad.grid(True, which="both", alpha=0.3)

    ax_acc.plot(time, [r["train_acc"] for r in rows], color="tab:green", label="train accuracy")
    test = [r["test_acc"] for r in rows]
    if not all(math.isnan(v) for v in test):
        ax_acc.plot(time, test, color="tab:red", alpha=0.8, label="test accuracy")
    ax_acc.set_xlabel("model time")
    ax_acc.set_ylabel("accuracy")
    ax_acc.set_ylim(0.0, 1.02)
    ax_acc.legend()
    ax_acc.grid(True, alpha=0.3)

    final_eps = rows[-1]["epsilon"]
    eps_text = "no privacy budget spent" if math.isinf(final_eps) else f"final epsilon = {final_eps:.4g}"
    fig.suptitle(f"{len(rows)} rounds, {eps_text}")
    fig.tight_layout()
    fig.savefig(args.out, dpi=150)
    print(f"wrote {args.out}")


if __name__ == "__main__":
    main()
