#!/usr/bin/env python3
"""Render the three experiment figures from results CSV files.

Reads the harness CSV schema verbatim and only aggregates (mean and 95%
Student-t interval over the raw repeat rows) before drawing; no model
results are ever recomputed here.

Usage:
    plot.py --kind sweep --in rows.csv --out fig.svg
    plot.py --kind module-sweep --in rows.csv --out fig.svg
    plot.py --kind fat-comparison --in rows.csv --out fig.png
"""

from __future__ import annotations

import argparse
import csv
import sys
from pathlib import Path

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np
from scipy import stats

COLUMNS = [
    "experiment",
    "model",
    "protected_sites",
    "site_filter",
    "n_faults",
    "fault_rate",
    "repeat",
    "seed",
    "n_samples",
    "accuracy",
]

KINDS = ("sweep", "module-sweep", "fat-comparison")


def read_rows(path: str | Path) -> list[dict]:
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        missing = [c for c in COLUMNS if c not in (reader.fieldnames or [])]
        if missing:
            raise ValueError(f"{path}: missing columns: {', '.join(missing)}")
        rows = []
        for raw in reader:
            rows.append(
                {
                    **raw,
                    "n_faults": int(raw["n_faults"]),
                    "fault_rate": float(raw["fault_rate"]),
                    "repeat": int(raw["repeat"]),
                    "accuracy": float(raw["accuracy"]),
                }
            )
    if not rows:
        raise ValueError(f"{path}: no data rows")
    return rows


def ci95(values: list[float]) -> tuple[float, float]:
    """Mean and 95% half-width (Student t, n-1 dof) of repeat accuracies."""
    n = len(values)
    if n < 2:
        raise ValueError(f"need at least 2 repeats per cell, got {n}")
    arr = np.asarray(values, dtype=np.float64)
    t = float(stats.t.ppf(0.975, n - 1))
    return float(arr.mean()), t * float(arr.std(ddof=1)) / float(np.sqrt(n))


def aggregate(rows: list[dict], series_key) -> dict:
    """series label -> sorted arrays (n_faults, fault_rate, mean, half)."""
    cells: dict[tuple, list[dict]] = {}
    for row in rows:
        cells.setdefault((series_key(row), row["n_faults"], row["fault_rate"]), []).append(row)
    series: dict[str, list[tuple]] = {}
    for (label, n, rate), cell in sorted(cells.items()):
        mean, half = ci95([r["accuracy"] for r in cell])
        series.setdefault(label, []).append((n, rate, mean, half))
    return {
        label: tuple(np.array(col) for col in zip(*points))
        for label, points in series.items()
    }


def check_kind(rows: list[dict], kind: str) -> None:
    experiments = {r["experiment"] for r in rows}
    ok = {
        "sweep": lambda e: e == "sweep",
        "module-sweep": lambda e: e == "module-sweep",
        "fat-comparison": lambda e: e.startswith("fat-comparison:"),
    }[kind]
    bad = sorted(e for e in experiments if not ok(e))
    if bad:
        raise ValueError(f"CSV holds experiment ids {bad}, which do not match kind {kind!r}")


def _fault_rate_axis(ax, ns, rates):
    """Secondary x-axis labelled in fault rate (rate = n / population)."""
    nonzero = [(n, r) for n, r in zip(ns, rates) if n > 0 and r > 0]
    if not nonzero:
        return
    population = nonzero[0][0] / nonzero[0][1]
    sec = ax.secondary_xaxis(
        "top", functions=(lambda n: n / population, lambda r: r * population)
    )
    sec.set_xlabel("fault rate")


def plot_sweep(rows: list[dict], out: str | Path) -> None:
    check_kind(rows, "sweep")
    series = aggregate(rows, lambda r: r["model"])
    fig, ax = plt.subplots(figsize=(6, 4))
    for label, (ns, rates, means, halves) in series.items():
        ax.plot(ns, means, marker="o", label=label)
        ax.fill_between(ns, means - halves, means + halves, alpha=0.25)
        _fault_rate_axis(ax, ns, rates)
    ax.set_xscale("symlog", linthresh=1)
    ax.set_xlabel("faults per inference")
    ax.set_ylabel("accuracy")
    ax.legend()
    ax.grid(alpha=0.3)
    fig.tight_layout()
    fig.savefig(out)
    plt.close(fig)


def plot_module_sweep(rows: list[dict], out: str | Path) -> None:
    check_kind(rows, "module-sweep")
    series = aggregate(rows, lambda r: r["site_filter"] or "all")
    fig, ax = plt.subplots(figsize=(6, 4))
    positive = [r["fault_rate"] for r in rows if r["fault_rate"] > 0]
    linthresh = min(positive) if positive else 1e-6
    for label, (ns, rates, means, halves) in sorted(series.items()):
        ax.errorbar(rates, means, yerr=halves, marker="o", capsize=3, label=label)
    ax.set_xscale("symlog", linthresh=linthresh)
    ax.set_xlabel("fault rate (per-site population)")
    ax.set_ylabel("accuracy")
    ax.legend(title="site")
    ax.grid(alpha=0.3)
    fig.tight_layout()
    fig.savefig(out)
    plt.close(fig)


def plot_fat_comparison(rows: list[dict], out: str | Path) -> None:
    check_kind(rows, "fat-comparison")
    series = aggregate(rows, lambda r: r["experiment"].split(":", 1)[1])
    if set(series) != {"fat", "reference"}:
        raise ValueError(f"expected fat and reference arms, got {sorted(series)}")
    fig, ax = plt.subplots(figsize=(6, 4))
    for label in ("reference", "fat"):
        ns, rates, means, halves = series[label]
        ax.plot(ns, means, marker="o", label=label)
        ax.fill_between(ns, means - halves, means + halves, alpha=0.25)
        _fault_rate_axis(ax, ns, rates)
    ax.set_xscale("symlog", linthresh=1)
    ax.set_xlabel("faults per inference")
    ax.set_ylabel("accuracy")
    ax.legend()
    ax.grid(alpha=0.3)
    fig.tight_layout()
    fig.savefig(out)
    plt.close(fig)


PLOTTERS = {
    "sweep": plot_sweep,
    "module-sweep": plot_module_sweep,
    "fat-comparison": plot_fat_comparison,
}


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--kind", choices=KINDS, required=True)
    parser.add_argument("--in", dest="input", required=True, help="results CSV")
    parser.add_argument("--out", required=True, help="output image (.svg default, .png works)")
    args = parser.parse_args(argv)
    try:
        rows = read_rows(args.input)
        PLOTTERS[args.kind](rows, args.out)
    except (ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    print(f"wrote {args.out}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
