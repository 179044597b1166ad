"""
mixdcnn command line.

Exit codes: 0 success, 1 usage/config error, 2 runtime/numeric failure,
3 corrupted input file.
"""

from __future__ import annotations

import argparse
import os
import sys
from collections import defaultdict
from concurrent.futures import ProcessPoolExecutor

import numpy as np

from .checkpoint import Checkpoint, CheckpointCorruptError, load_checkpoint, save_checkpoint
from .config import ConfigError, load_config
from .data import DatasetFormatError, generate_synthetic, load_dataset, save_dataset
from .gradcheck import TOLERANCE, run_gradcheck
from .numerics import NonFiniteError
from .partition import load_partition, partition_dataset, save_partition
from .trainer import ARCHITECTURES, evaluate, model_from_networks, parse_report_csv, pretrain_base, run

EXIT_OK, EXIT_USAGE, EXIT_RUNTIME, EXIT_CORRUPT = 0, 1, 2, 3


class UsageError(Exception):
    pass


def _err(msg: str) -> None:
    print(f"mixdcnn: {msg}", file=sys.stderr)


def cmd_synth(args) -> int:
    cfg = load_config(args.config)
    spec = cfg.synth_spec()
    train, test = generate_synthetic(spec)
    os.makedirs(args.out, exist_ok=True)
    for ds in (train, test):
        path = os.path.join(args.out, f"{ds.split}.mxds")
        save_dataset(path, ds)
        print(f"wrote {path} ({len(ds)} samples, {ds.num_classes} classes)")
    return EXIT_OK


def _datasets(cfg):
    cfg.require("train_data")
    train = load_dataset(cfg["train_data"])
    test = load_dataset(cfg["test_data"]) if cfg.get("test_data") else None
    return train, test


def cmd_pretrain(args) -> int:
    cfg = load_config(args.config)
    cfg.require("train_data", "seed")
    spec = cfg.train_spec("single")
    train, _ = _datasets(cfg)
    base, stats = pretrain_base(train, spec)
    save_checkpoint(args.out, Checkpoint("single", 1, {"model": base}))
    if stats:
        print(f"pretrained {len(stats)} epochs, final train loss {stats[-1].loss:.6f} acc {stats[-1].accuracy:.4f}")
    print(f"wrote {args.out}")
    return EXIT_OK


def _base_network(path):
    ckpt = load_checkpoint(path)
    if "model" not in ckpt.networks:
        raise UsageError(f"{path} is a {ckpt.architecture} checkpoint, expected a single-network base")
    return ckpt.networks["model"]


def cmd_partition(args) -> int:
    cfg = load_config(args.config)
    cfg.require("train_data", "K", "seed")
    spec = cfg.train_spec()
    train, _ = _datasets(cfg)
    part = partition_dataset(_base_network(args.ckpt), train, spec.K, spec.lda_dim, spec.seed)
    save_partition(args.out, part)
    if args.verify:
        check = load_partition(args.out)
        check.verify(len(train))
        if sorted(check.sample_ids.tolist()) != train.ids.tolist():
            raise UsageError("partition does not cover the training set")
        print("verified: subsets are disjoint and cover the training set")
    print("subset sizes: " + " ".join(map(str, part.sizes())))
    return EXIT_OK


def _train_one(arch, config_path, seed, base_path, auto_partition):
    cfg = load_config(config_path)
    cfg.require(*("train_data", "test_data", "seed"))
    spec = cfg.train_spec(arch)
    if seed is not None:
        spec.seed = seed
    train, test = _datasets(cfg)
    partition = None
    if arch in ("mix", "gated") and spec.K > 1 and not auto_partition:
        if not cfg.get("partition"):
            raise UsageError(f"--arch {arch} needs a 'partition' file in the config or --auto-partition")
        partition = load_partition(cfg["partition"])
        partition.verify(len(train))
    base = _base_network(base_path) if base_path else None
    name = cfg.get("dataset_name") or os.path.splitext(os.path.basename(cfg["train_data"]))[0]
    return run(arch, train, test, spec, partition=partition, base=base, dataset_name=name)


def _with_suffix(path: str, seed: int) -> str:
    root, ext = os.path.splitext(path)
    return f"{root}.seed{seed}{ext}"


def _write_outputs(model, report, ckpt_path, report_path):
    nets = model.networks()
    save_checkpoint(ckpt_path, Checkpoint(report.architecture, report.K, nets))
    with open(report_path, "w") as f:
        f.write(report.to_csv())
    with open(os.path.splitext(report_path)[0] + ".txt", "w") as f:
        f.write(report.to_text())
    print(f"{report.architecture} seed {report.seed}: test accuracy {report.test_accuracy:.4f}")


def _replicate(job):
    arch, config, seed, base, auto, out, report = job
    model, rep = _train_one(arch, config, seed, base, auto)
    _write_outputs(model, rep, out, report)
    return rep.test_accuracy


def cmd_train(args) -> int:
    if not args.seeds:
        model, report = _train_one(args.arch, args.config, None, args.base, args.auto_partition)
        _write_outputs(model, report, args.out, args.report)
        return EXIT_OK
    jobs = [(args.arch, args.config, s, args.base, args.auto_partition,
             _with_suffix(args.out, s), _with_suffix(args.report, s)) for s in args.seeds]
    if args.jobs > 1:
        with ProcessPoolExecutor(args.jobs) as pool:
            accs = list(pool.map(_replicate, jobs))
    else:
        accs = [_replicate(j) for j in jobs]
    print(f"mean test accuracy over {len(accs)} seeds: {np.mean(accs):.4f}")
    return EXIT_OK


def cmd_eval(args) -> int:
    ckpt = load_checkpoint(args.ckpt)
    model = model_from_networks(ckpt.architecture, ckpt.networks)
    acc, per_class = evaluate(model, load_dataset(args.data))
    print(f"accuracy {acc!r}")
    if args.per_class:
        for n, a in enumerate(per_class):
            print(f"class {n}\t{a!r}")
    return EXIT_OK


def compare_table(reports: list[dict]) -> str:
    """Architecture x dataset matrix of mean test accuracy; '*' marks the best per dataset."""
    acc = defaultdict(list)
    for rep in reports:
        value = next(v for e, s, m, v in rep["rows"] if e == "final" and s == "test" and m == "accuracy")
        acc[(rep["meta"].get("architecture", "?"), rep["meta"].get("dataset", "?"))].append(value)
    archs = [a for a in ARCHITECTURES if any(k[0] == a for k in acc)]
    archs += sorted({k[0] for k in acc} - set(archs))
    datasets = sorted({k[1] for k in acc})
    means = {k: float(np.mean(v)) for k, v in acc.items()}
    best = {d: max(means[(a, d)] for a in archs if (a, d) in means) for d in datasets}
    width = max([12, *(len(d) + 2 for d in datasets)])
    lines = ["architecture".ljust(12) + "".join(d.rjust(width) for d in datasets)]
    for a in archs:
        cells = []
        for d in datasets:
            if (a, d) not in means:
                cells.append("-".rjust(width))
                continue
            mark = "*" if means[(a, d)] == best[d] else " "
            cells.append(f"{100 * means[(a, d)]:.1f}%{mark}".rjust(width))
        lines.append(a.ljust(12) + "".join(cells))
    return "\n".join(lines) + "\n"


def cmd_compare(args) -> int:
    reports = []
    for path in args.reports:
        with open(path) as f:
            reports.append(parse_report_csv(f.read()))
    sys.stdout.write(compare_table(reports))
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    seed, triples, max_k, max_n = 0, 200, 4, 6
    if args.config:
        cfg = load_config(args.config)
        seed = cfg.get("seed", seed)
        triples = cfg.get("gradcheck_triples", triples)
        max_k = cfg.get("gradcheck_max_experts", max_k)
        max_n = cfg.get("gradcheck_max_classes", max_n)
    res = run_gradcheck(seed, triples, args.mode, max_k, max_n, corrupt=args.corrupt_gradient)
    print(f"mode {res.mode}: {res.triples} triples, {res.resampled} resampled for ties, "
          f"max relative error {res.max_relative_error:.3e} (tolerance {TOLERANCE:g})")
    if not res.passed:
        _err("gradient check FAILED")
        return EXIT_RUNTIME
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="mixdcnn", description="Mixture of expert networks with confidence-based mixing.")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("synth", help="generate synthetic train/test MXDS files")
    s.add_argument("--config", required=True)
    s.add_argument("--out", required=True, help="output directory")
    s.set_defaults(func=cmd_synth)

    s = sub.add_parser("pretrain", help="train the base network on the full training set")
    s.add_argument("--config", required=True)
    s.add_argument("--out", required=True, help="checkpoint path")
    s.set_defaults(func=cmd_pretrain)

    s = sub.add_parser("partition", help="split the training set into K subsets")
    s.add_argument("--config", required=True)
    s.add_argument("--ckpt", required=True, help="pretrained base checkpoint")
    s.add_argument("--out", required=True)
    s.add_argument("--verify", action="store_true")
    s.set_defaults(func=cmd_partition)

    s = sub.add_parser("train", help="run the full stage schedule for one architecture")
    s.add_argument("--arch", required=True, choices=ARCHITECTURES)
    s.add_argument("--config", required=True)
    s.add_argument("--out", required=True, help="checkpoint path")
    s.add_argument("--report", required=True, help="report CSV path (a .txt summary is written beside it)")
    s.add_argument("--auto-partition", action="store_true")
    s.add_argument("--base", help="reuse a pretrained base checkpoint instead of pretraining")
    s.add_argument("--seeds", type=int, nargs="+", help="independent seed replicates")
    s.add_argument("--jobs", type=int, default=1)
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("eval", help="accuracy of a checkpoint on a dataset")
    s.add_argument("--ckpt", required=True)
    s.add_argument("--data", required=True)
    s.add_argument("--per-class", action="store_true")
    s.set_defaults(func=cmd_eval)

    s = sub.add_parser("compare", help="accuracy table over report CSVs")
    s.add_argument("--reports", required=True, nargs="+")
    s.set_defaults(func=cmd_compare)

    s = sub.add_parser("gradcheck", help="finite-difference check of the mixture gradient")
    s.add_argument("--config")
    s.add_argument("--mode", choices=("full", "stopped"), default="full")
    s.add_argument("--corrupt-gradient", action="store_true", help=argparse.SUPPRESS)
    s.set_defaults(func=cmd_gradcheck)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return EXIT_OK if e.code == 0 else EXIT_USAGE
    try:
        return args.func(args)
    except (ConfigError, UsageError) as e:
        _err(str(e))
        return EXIT_USAGE
    except (CheckpointCorruptError, DatasetFormatError) as e:
        _err(f"corrupted input: {e}")
        return EXIT_CORRUPT
    except (NonFiniteError, FloatingPointError) as e:
        _err(f"numeric failure: {e}")
        return EXIT_RUNTIME
    except FileNotFoundError as e:
        _err(str(e))
        return EXIT_USAGE
    except ValueError as e:
        _err(str(e))
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
