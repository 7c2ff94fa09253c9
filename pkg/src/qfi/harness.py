"""Experiment orchestration: fault-count sweeps, per-site sweeps, and the
fault-aware-training comparison, with repeats, 95% confidence intervals,
and CSV persistence.

Each measurement is one ResultRow. The fault rate of a row is always
n_faults divided by the bit population the row was drawn from (the full
budget minus protected sites, restricted to one site in module-sweep
mode); the protected_sites and site_filter columns record which
denominator applied. Rows are sorted canonically before writing so files
reproduce byte-identically.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
from scipy import stats

from .data import LabeledDataset
from .faults import FaultSite, count_vulnerable_bits
from .layers import ModelGraph
from .train import evaluate

CSV_HEADER = (
    "experiment,model,protected_sites,site_filter,n_faults,fault_rate,"
    "repeat,seed,n_samples,accuracy"
)


def _fmt(x: float) -> str:
    return format(float(x), ".9g")


def sites_token(sites: frozenset[FaultSite]) -> str:
    return "+".join(sorted(s.value for s in sites))


def parse_sites_token(token: str) -> frozenset[FaultSite]:
    token = token.strip()
    if not token:
        return frozenset()
    return frozenset(FaultSite.parse(part) for part in token.split("+"))


DEFAULT_FAULT_GRID = (
    0, 1, 2, 4, 8, 16, 32, 64, 128, 256, 512, 1024, 2048, 4096, 8192, 16384, 32768,
)


@dataclass(frozen=True)
class SweepConfig:
    fault_counts: tuple[int, ...] = DEFAULT_FAULT_GRID
    repeats: int = 3
    master_seed: int = 0
    protected_sites: frozenset[FaultSite] = field(default_factory=frozenset)
    site_filter: FaultSite | None = None
    rates: tuple[float, ...] | None = None  # module-sweep mode input
    n_samples: int | None = None  # None = full test set
    threads: int = 1

    def __post_init__(self):
        if self.repeats < 1:
            raise ValueError(f"repeats must be >= 1, got {self.repeats}")
        counts = tuple(int(n) for n in self.fault_counts)
        if counts and any(b < a for a, b in zip(counts, counts[1:])):
            raise ValueError("fault_counts must be nondecreasing")
        object.__setattr__(self, "fault_counts", counts)


@dataclass(frozen=True)
class ResultRow:
    experiment: str
    model: str
    protected_sites: str
    site_filter: str
    n_faults: int
    fault_rate: float
    repeat: int
    seed: int
    n_samples: int
    accuracy: float

    def __post_init__(self):
        if not 0.0 <= self.accuracy <= 1.0:
            raise ValueError(f"accuracy {self.accuracy} outside [0, 1]")

    def sort_key(self):
        return (
            self.experiment,
            self.model,
            self.protected_sites,
            self.site_filter,
            self.n_faults,
            self.repeat,
        )

    def to_line(self) -> str:
        return ",".join(
            [
                self.experiment,
                self.model,
                self.protected_sites,
                self.site_filter,
                str(self.n_faults),
                _fmt(self.fault_rate),
                str(self.repeat),
                str(self.seed),
                str(self.n_samples),
                _fmt(self.accuracy),
            ]
        )


@dataclass(frozen=True)
class CIStat:
    mean: float
    half_width: float
    n: int


def ci95(values: list[float]) -> CIStat:
    """Two-sided Student-t 95% interval: mean +/- t_{.975,n-1} * s / sqrt(n)."""
    n = len(values)
    if n < 2:
        raise ValueError(f"ci95 needs at least 2 values, got {n}")
    arr = np.asarray(values, dtype=np.float64)
    mean = float(arr.mean())
    sd = float(arr.std(ddof=1))
    t = float(stats.t.ppf(0.975, n - 1))
    return CIStat(mean=mean, half_width=t * sd / np.sqrt(n), n=n)


def _run_cells(
    experiment: str,
    model: ModelGraph,
    dataset: LabeledDataset,
    cfg: SweepConfig,
    fault_counts: tuple[int, ...],
) -> list[ResultRow]:
    budget = count_vulnerable_bits(model, model.input_shape).restricted(
        cfg.protected_sites, cfg.site_filter
    )
    if budget.total <= 0:
        raise ValueError("no vulnerable bits left after protection/filtering")
    n_samples = len(dataset) if cfg.n_samples is None else min(cfg.n_samples, len(dataset))
    rows = []
    for n in fault_counts:
        if n > budget.total:
            raise ValueError(
                f"fault count {n} exceeds the applicable budget of {budget.total} bits"
            )
        for r in range(cfg.repeats):
            acc = evaluate(
                model,
                dataset,
                n_faults=n,
                protected_sites=cfg.protected_sites,
                master_seed=cfg.master_seed,
                repeat=r,
                site_filter=cfg.site_filter,
                threads=cfg.threads,
                limit=cfg.n_samples,
            )
            rows.append(
                ResultRow(
                    experiment=experiment,
                    model=model.name,
                    protected_sites=sites_token(cfg.protected_sites),
                    site_filter=cfg.site_filter.value if cfg.site_filter else "",
                    n_faults=n,
                    fault_rate=n / budget.total,
                    repeat=r,
                    seed=cfg.master_seed,
                    n_samples=n_samples,
                    accuracy=acc,
                )
            )
    return sorted(rows, key=ResultRow.sort_key)


def run_fault_sweep(model: ModelGraph, dataset: LabeledDataset, cfg: SweepConfig) -> list[ResultRow]:
    """Accuracy vs fault count over the whole unprotected population."""
    if cfg.site_filter is not None:
        raise ValueError("run_fault_sweep takes no site filter; use run_module_sweep")
    return _run_cells("sweep", model, dataset, cfg, cfg.fault_counts)


def rate_to_count(rate: float, population: int) -> int:
    """Nearest fault count for a target rate; ties round up."""
    if rate < 0:
        raise ValueError(f"fault rate must be nonnegative, got {rate}")
    return int(np.floor(rate * population + 0.5))


def run_module_sweep(model: ModelGraph, dataset: LabeledDataset, cfg: SweepConfig) -> list[ResultRow]:
    """Faults restricted to one site; rates are converted against that
    site's own bit population (counts are not comparable across sites)."""
    if cfg.site_filter is None:
        raise ValueError("run_module_sweep needs cfg.site_filter")
    if cfg.rates is None:
        raise ValueError("run_module_sweep needs cfg.rates (target fault rates)")
    budget = count_vulnerable_bits(model, model.input_shape).restricted(
        cfg.protected_sites, cfg.site_filter
    )
    counts = {rate_to_count(r, budget.total) for r in cfg.rates}
    cell_cfg = replace(cfg, fault_counts=tuple(sorted(counts)))
    return _run_cells("module-sweep", model, dataset, cell_cfg, cell_cfg.fault_counts)


def run_fat_comparison(
    reference_model: ModelGraph,
    fat_models: dict[int, ModelGraph],
    dataset: LabeledDataset,
    cfg: SweepConfig,
) -> list[ResultRow]:
    """Evaluate the reference and the per-count FAT models over the same
    fault grid with identical seeds; the arm label goes in the experiment id.

    Reference-arm rows are bit-identical to run_fault_sweep rows for the
    same checkpoint and config because evaluation streams do not depend on
    the experiment label.
    """
    missing = [n for n in cfg.fault_counts if n not in fat_models]
    if missing:
        raise ValueError(f"missing FAT checkpoints for fault counts {missing}")
    rows = []
    for row in _run_cells("sweep", reference_model, dataset, cfg, cfg.fault_counts):
        rows.append(replace(row, experiment="fat-comparison:reference"))
    for n in cfg.fault_counts:
        arm = _run_cells("sweep", fat_models[n], dataset, cfg, (n,))
        rows.extend(replace(row, experiment="fat-comparison:fat") for row in arm)
    return sorted(rows, key=ResultRow.sort_key)


def write_csv(rows: list[ResultRow], path: str | Path) -> None:
    lines = [CSV_HEADER]
    lines.extend(row.to_line() for row in sorted(rows, key=ResultRow.sort_key))
    Path(path).write_text("\n".join(lines) + "\n")


def read_csv(path: str | Path) -> list[ResultRow]:
    text = Path(path).read_text()
    lines = text.splitlines()
    if not lines or lines[0] != CSV_HEADER:
        raise ValueError(f"{path}: missing or wrong header line")
    rows = []
    for lineno, line in enumerate(lines[1:], start=2):
        if not line.strip():
            continue
        parts = line.split(",")
        if len(parts) != 10:
            raise ValueError(f"{path}:{lineno}: expected 10 fields, got {len(parts)}")
        try:
            rows.append(
                ResultRow(
                    experiment=parts[0],
                    model=parts[1],
                    protected_sites=parts[2],
                    site_filter=parts[3],
                    n_faults=int(parts[4]),
                    fault_rate=float(parts[5]),
                    repeat=int(parts[6]),
                    seed=int(parts[7]),
                    n_samples=int(parts[8]),
                    accuracy=float(parts[9]),
                )
            )
        except ValueError as exc:
            raise ValueError(f"{path}:{lineno}: malformed row: {exc}") from None
    return rows


def group_cells(rows: list[ResultRow]) -> dict[tuple, list[ResultRow]]:
    cells: dict[tuple, list[ResultRow]] = {}
    for row in rows:
        key = (row.experiment, row.model, row.protected_sites, row.site_filter, row.n_faults)
        cells.setdefault(key, []).append(row)
    return cells


def summary_markdown(rows: list[ResultRow]) -> str:
    """Per-cell mean +/- 95% half-width as a markdown table."""
    out = [
        "| experiment | model | protected | site | n_faults | fault_rate | mean acc | ci95 half | repeats |",
        "|---|---|---|---|---:|---:|---:|---:|---:|",
    ]
    cells = group_cells(rows)
    for key in sorted(cells):
        cell = cells[key]
        exp, model, protected, site, n = key
        accs = [r.accuracy for r in sorted(cell, key=lambda r: r.repeat)]
        rate = cell[0].fault_rate
        if len(accs) >= 2:
            stat = ci95(accs)
            mean, half = _fmt(stat.mean), _fmt(stat.half_width)
        else:
            mean, half = _fmt(accs[0]), "n/a"
        out.append(
            f"| {exp} | {model} | {protected or '-'} | {site or '-'} | {n} "
            f"| {_fmt(rate)} | {mean} | {half} | {len(accs)} |"
        )
    return "\n".join(out) + "\n"
