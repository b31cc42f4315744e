#!/usr/bin/env python3
"""Scatter plot of model samples against truth for one run directory.

usage: plot_scatter.py RUN_DIR [--out FILE]

Reads scatter_model.csv and scatter_truth.csv written by `mldmae evaluate`.
2D clouds are drawn directly; 3D clouds get a 3D axis.
"""
import argparse
import pathlib

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt
import numpy as np


def load(path):
    return np.loadtxt(path, delimiter=",", comments="#", ndmin=2)


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("run_dir", type=pathlib.Path)
    ap.add_argument("--out", type=pathlib.Path)
    args = ap.parse_args()

    model = load(args.run_dir / "scatter_model.csv")
    truth = load(args.run_dir / "scatter_truth.csv")
    out = args.out or args.run_dir / "scatter.png"

    fig = plt.figure(figsize=(10, 5))
    three_d = model.shape[1] == 3
    for i, (cloud, title) in enumerate([(truth, "truth"), (model, "model")]):
        if three_d:
            ax = fig.add_subplot(1, 2, i + 1, projection="3d")
            ax.scatter(cloud[:, 0], cloud[:, 1], cloud[:, 2], s=2)
        else:
            ax = fig.add_subplot(1, 2, i + 1)
            ax.scatter(cloud[:, 0], cloud[:, 1], s=2)
            ax.set_aspect("equal")
        ax.set_title(f"{title} ({len(cloud)} points)")
    fig.tight_layout()
    fig.savefig(out, dpi=120)
    print(out)


if __name__ == "__main__":
    main()
