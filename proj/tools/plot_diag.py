#!/usr/bin/env python3
"""Plot per-layer kurtosis, logit bounds and sink mass from `deskpt diag` reports.

Each report is one run; pass several (e.g. QK-norm on and off) to overlay them.

    python tools/plot_diag.py on.jsonl off.jsonl --labels qk_norm no_qk_norm --out kurtosis.png
"""
import argparse
import json
from collections import defaultdict

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt


def load(path):
    header, per_layer, sink = None, defaultdict(dict), defaultdict(list)
    with open(path) as f:
        for line in f:
            r = json.loads(line)
            if r.get("record") == "header":
                header = r
                continue
            if r["layer"] is None:
                continue
            if r["statistic"] == "sink_mass":
                sink[r["layer"]].append(r["value"])
            else:
                per_layer[r["statistic"]][r["layer"]] = r["value"]
    return header, per_layer, sink


def series(table):
    layers = sorted(table)
    return layers, [table[l] if table[l] is not None else float("nan") for l in layers]


def main():
    ap = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    ap.add_argument("reports", nargs="+")
    ap.add_argument("--labels", nargs="*")
    ap.add_argument("--out", default="diag.png")
    args = ap.parse_args()
    labels = args.labels or args.reports
    if len(labels) != len(args.reports):
        ap.error("--labels must match the number of reports")

    panels = [
        ("kurtosis_attention_logits", "attention-logit kurtosis"),
        ("kurtosis_residual_stream", "residual-stream kurtosis"),
        ("max_abs_attention_logit", "max |attention logit|"),
        ("sink_mass", "mean sink mass (over heads)"),
    ]
    fig, axes = plt.subplots(1, len(panels), figsize=(4 * len(panels), 3.2))
    for path, label in zip(args.reports, labels):
        _, per_layer, sink = load(path)
        for ax, (stat, _) in zip(axes, panels):
            if stat == "sink_mass":
                table = {l: sum(v) / len(v) for l, v in sink.items()}
            else:
                table = per_layer.get(stat, {})
            xs, ys = series(table)
            ax.plot(xs, ys, marker="o", label=label)
    for ax, (_, title) in zip(axes, panels):
        ax.set_title(title, fontsize=10)
        ax.set_xlabel("layer")
    axes[0].axhline(3.0, color="grey", lw=0.8, ls="--")
    axes[0].legend(fontsize=8)
    fig.tight_layout()
    fig.savefig(args.out, dpi=120)
    print(f"wrote {args.out}")


if __name__ == "__main__":
    main()
