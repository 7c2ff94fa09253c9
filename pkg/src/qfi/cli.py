"""Command-line entry point: train / fat-train / eval / sweep /
module-sweep / count-bits / report.

Exit codes: 0 success, 1 usage error, 2 data error (dataset, checkpoint,
CSV), 3 runtime failure.
"""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

from .checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from .data import DataFormatError, load_dataset
from .faults import FaultSite, count_vulnerable_bits
from .harness import (
    SweepConfig,
    read_csv,
    run_fault_sweep,
    run_module_sweep,
    sites_token,
    summary_markdown,
    write_csv,
)
from .layers import build_ccdf
from .train import TrainConfig, evaluate, train

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_DATA = 2
EXIT_RUNTIME = 3


class _Parser(argparse.ArgumentParser):
    def error(self, message: str):
        self.print_usage(sys.stderr)
        print(f"error: {message}", file=sys.stderr)
        raise SystemExit(EXIT_USAGE)


def _parse_protect(text: str) -> frozenset[FaultSite]:
    text = text.strip()
    if not text:
        return frozenset()
    return frozenset(FaultSite.parse(part) for part in text.split(","))


def _parse_counts(text: str) -> tuple[int, ...]:
    return tuple(int(part) for part in text.split(","))


def _parse_rates(text: str) -> tuple[float, ...]:
    return tuple(float(part) for part in text.split(","))


def _add_common_eval_args(p: argparse.ArgumentParser):
    p.add_argument("--ckpt", required=True, help="checkpoint file")
    p.add_argument("--data-dir", required=True, help="directory with the MNIST IDX files")
    p.add_argument("--seed", type=int, default=0, help="master seed for fault streams")
    p.add_argument("--repeats", type=int, default=3)
    p.add_argument("--protect", type=_parse_protect, default=frozenset(), metavar="SITES",
                   help="comma-separated protected sites, e.g. b32,o32")
    p.add_argument("--threads", type=int, default=1, help="evaluation parallelism")
    p.add_argument("--samples", type=int, default=None, help="limit the test subset size")


def build_parser() -> _Parser:
    parser = _Parser(prog="qfi", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    def add_train_args(p: argparse.ArgumentParser):
        p.add_argument("--data-dir", required=True)
        p.add_argument("--out", required=True, help="checkpoint output path")
        p.add_argument("--epochs", type=int, default=5)
        p.add_argument("--batch", type=int, default=64)
        p.add_argument("--lr", type=float, default=0.05)
        p.add_argument("--momentum", type=float, default=0.9)
        p.add_argument("--seed", type=int, default=1)
        p.add_argument("--log-every", type=int, default=100)

    p_train = sub.add_parser("train", help="conventional training")
    add_train_args(p_train)

    p_fat = sub.add_parser("fat-train", help="fault-aware training")
    add_train_args(p_fat)
    p_fat.add_argument("--faults", type=int, required=True,
                       help="faults injected per inference during the faulted epochs")
    p_fat.add_argument("--protect", type=_parse_protect,
                       default=frozenset({FaultSite.B32, FaultSite.O32}), metavar="SITES")
    p_fat.add_argument("--fat-lr-scale", type=float, default=0.2,
                       help="learning-rate factor for the faulted epochs")

    p_eval = sub.add_parser("eval", help="evaluate a checkpoint under faults")
    _add_common_eval_args(p_eval)
    p_eval.add_argument("--faults", type=int, default=0)

    p_sweep = sub.add_parser("sweep", help="accuracy vs fault count")
    _add_common_eval_args(p_sweep)
    p_sweep.add_argument("--faults", type=_parse_counts, required=True, metavar="N0,N1,...")
    p_sweep.add_argument("--out", required=True, help="CSV output path")

    p_mod = sub.add_parser("module-sweep", help="single-site sweep over fault rates")
    _add_common_eval_args(p_mod)
    p_mod.add_argument("--site", type=FaultSite.parse, required=True)
    p_mod.add_argument("--rates", type=_parse_rates, required=True, metavar="R0,R1,...")
    p_mod.add_argument("--out", required=True)

    p_bits = sub.add_parser("count-bits", help="print the vulnerable-bit budget")
    p_bits.add_argument("--ckpt", required=True)

    p_rep = sub.add_parser("report", help="summarize a results CSV as markdown")
    p_rep.add_argument("--in", dest="input", required=True)
    p_rep.add_argument("--out", required=True)

    return parser


def _cmd_train(args, faults: int = 0, protected: frozenset[FaultSite] = frozenset()) -> int:
    cfg = TrainConfig(
        epochs=args.epochs,
        batch_size=args.batch,
        learning_rate=args.lr,
        momentum=args.momentum,
        seed=args.seed,
        faults_per_forward=faults,
        protected_sites=protected,
        fat_lr_scale=getattr(args, "fat_lr_scale", 0.2),
    )
    train_set = load_dataset(args.data_dir, "train")
    test_set = load_dataset(args.data_dir, "test")
    model = build_ccdf()
    ckpt = train(model, train_set, cfg, test_dataset=test_set, log_every=args.log_every)
    save_checkpoint(ckpt, args.out)
    print(f"test_accuracy,{ckpt.metadata['final_test_acc']:.6f}")
    print(f"checkpoint,{args.out}")
    return EXIT_OK


def _cmd_eval(args) -> int:
    ckpt = load_checkpoint(args.ckpt)
    test_set = load_dataset(args.data_dir, "test")
    accs = []
    for r in range(args.repeats):
        acc = evaluate(
            ckpt.model,
            test_set,
            n_faults=args.faults,
            protected_sites=args.protect,
            master_seed=args.seed,
            repeat=r,
            threads=args.threads,
            limit=args.samples,
        )
        accs.append(acc)
        print(f"repeat,{r},{acc:.9g}")
    print(f"mean,{sum(accs) / len(accs):.9g}")
    return EXIT_OK


def _cmd_sweep(args) -> int:
    ckpt = load_checkpoint(args.ckpt)
    test_set = load_dataset(args.data_dir, "test")
    cfg = SweepConfig(
        fault_counts=tuple(sorted(args.faults)),
        repeats=args.repeats,
        master_seed=args.seed,
        protected_sites=args.protect,
        n_samples=args.samples,
        threads=args.threads,
    )
    rows = run_fault_sweep(ckpt.model, test_set, cfg)
    write_csv(rows, args.out)
    print(f"rows,{len(rows)}")
    print(f"csv,{args.out}")
    return EXIT_OK


def _cmd_module_sweep(args) -> int:
    ckpt = load_checkpoint(args.ckpt)
    test_set = load_dataset(args.data_dir, "test")
    cfg = SweepConfig(
        repeats=args.repeats,
        master_seed=args.seed,
        protected_sites=args.protect,
        site_filter=args.site,
        rates=args.rates,
        n_samples=args.samples,
        threads=args.threads,
    )
    rows = run_module_sweep(ckpt.model, test_set, cfg)
    write_csv(rows, args.out)
    print(f"rows,{len(rows)}")
    print(f"csv,{args.out}")
    return EXIT_OK


def _cmd_count_bits(args) -> int:
    ckpt = load_checkpoint(args.ckpt)
    model = ckpt.model
    budget = count_vulnerable_bits(model, model.input_shape)
    print("layer,site,elements,bits")
    for entry in budget.entries:
        print(f"{entry.layer_index},{entry.site.value},{entry.element_count},{entry.bit_count}")
    print(f"total,,,{budget.total}")
    return EXIT_OK


def _cmd_report(args) -> int:
    rows = read_csv(args.input)
    Path(args.out).write_text(summary_markdown(rows))
    print(f"report,{args.out}")
    return EXIT_OK


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        if args.command == "train":
            return _cmd_train(args)
        if args.command == "fat-train":
            return _cmd_train(args, faults=args.faults, protected=args.protect)
        if args.command == "eval":
            return _cmd_eval(args)
        if args.command == "sweep":
            return _cmd_sweep(args)
        if args.command == "module-sweep":
            return _cmd_module_sweep(args)
        if args.command == "count-bits":
            return _cmd_count_bits(args)
        if args.command == "report":
            return _cmd_report(args)
        parser.error(f"unknown command {args.command!r}")
    except (DataFormatError, CheckpointError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except ValueError as exc:
        if "malformed row" in str(exc) or "header" in str(exc):
            print(f"data error: {exc}", file=sys.stderr)
            return EXIT_DATA
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    except RuntimeError as exc:
        print(f"runtime failure: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
