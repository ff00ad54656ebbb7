"""Plot landscape CSVs (gamma, mean, std, ...) written by `xrl landscape` or the desk script.

    python scripts/plot_curves.py results/desk/landscape_explanation_*.csv --out expl.png [--normalize]

Needs matplotlib (pip install -e .[plot]).
"""
import argparse
import csv
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402


def read_curve(path):
    with open(path, newline="") as f:
        rows = list(csv.DictReader(f))
    g = [float(r["gamma"]) for r in rows]
    m = [float(r["mean"]) for r in rows]
    s = [float(r["std"]) for r in rows]
    return g, m, s, rows[0]["kind"] if rows else ""


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("csvs", nargs="+")
    ap.add_argument("--out", default="curves.png")
    ap.add_argument("--normalize", action="store_true", help="divide each curve by its gamma=0 value")
    args = ap.parse_args()

    fig, ax = plt.subplots(figsize=(5, 3.5))
    kind = ""
    for path in args.csvs:
        g, m, s, kind = read_curve(path)
        if args.normalize:
            base = m[g.index(0.0)]
            m = [v / base for v in m]
            s = [v / base for v in s]
        ax.plot(g, m, marker="o", ms=3, label=Path(path).stem)
        ax.fill_between(g, [a - b for a, b in zip(m, s)], [a + b for a, b in zip(m, s)], alpha=0.15)
    ax.set_xlabel("gamma")
    ax.set_ylabel(f"{kind} loss" + (" / loss at 0" if args.normalize else ""))
    ax.legend(fontsize=7)
    fig.tight_layout()
    fig.savefig(args.out, dpi=150)


if __name__ == "__main__":
    main()
