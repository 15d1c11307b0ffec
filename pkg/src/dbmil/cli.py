"""Command-line entry point: synth, extract, train, eval, localize, ablate.

Exit codes: 0 success, 2 usage error, 3 data error, 4 numerical abort.
"""
from __future__ import annotations

import argparse
import csv
import logging
import sys
import warnings
from pathlib import Path

import numpy as np

from . import model as mdl
from .config import ConfigError, load_config, split_config
from .data import DataError, load_manifest, split_folds
from .evaluation import mean_std
from .features import FeatureFormatError, ingest_features
from .runs import TASKS, RunInfo, dumps_report, evaluate_run, localize
from .synth import SynthParams, synth_generate
from .trainer import BagBank, Geometry, NumericalError, TrainConfig, resume, train

log = logging.getLogger("dbmil")

EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 2, 3, 4
ABLATION_MODES = (("Cls-Det-RS", "full"), ("DB-Baseline", "no-normal-class"), ("Max-region", "max-region"))


class UsageError(Exception):
    pass


def manifest_path(data: str | Path) -> Path:
    p = Path(data)
    return p / "manifest.jsonl" if p.is_dir() else p


def parse_mix(text: str) -> tuple[float, float, float]:
    """'B:M:N' weights -> (m, b, n) fractions."""
    try:
        b, m, n = (float(v) for v in text.split(":"))
    except ValueError:
        raise UsageError(f"--mix must look like B:M:N, got {text!r}") from None
    total = b + m + n
    if min(b, m, n) < 0 or total <= 0:
        raise UsageError(f"--mix weights must be non-negative with a positive sum, got {text!r}")
    return m / total, b / total, n / total


def parse_overrides(items: list[str]) -> dict[str, str]:
    out = {}
    for item in items or ():
        key, sep, value = item.partition("=")
        if not sep:
            raise UsageError(f"--set expects key=value, got {item!r}")
        out[key.strip()] = value
    return out


# ---------------------------------------------------------------- commands

def cmd_synth(args) -> int:
    m_frac, b_frac, n_frac = parse_mix(args.mix)
    params = SynthParams(size=args.size, mix_m=m_frac, mix_b=b_frac, mix_n=n_frac,
                         sigma_range=(args.sigma_min, args.sigma_max))
    out = Path(args.out)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise DataError(f"cannot create {out}: {exc}") from None
    manifest = synth_generate(args.seed, args.n, params, out)
    counts = manifest.class_counts()
    print(f"wrote {len(manifest)} images to {out}")
    print(f"M={counts['M']} (with B: {counts['MB']}) B={counts['B']} N={counts['N']}")
    return 0


def cmd_extract(args) -> int:
    from .pipeline import extract_features

    manifest = load_manifest(manifest_path(args.data))
    geom = Geometry(window=args.window, stride=args.stride, coverage=args.coverage,
                    feature_seed=args.feature_seed, feature_dim=args.feature_dim)
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always")
        store, hist = extract_features(manifest, geom)
    for w in caught:
        print(f"warning: {w.message}", file=sys.stderr)
    store.write(args.out)
    print(f"wrote {len(store)} region features (dim {store.dim}) to {args.out}")
    print("regions/image  images")
    for m in sorted(hist):
        print(f"{m:>13}  {hist[m]}")
    return 0


def _run_config(args) -> dict:
    overrides = parse_overrides(args.set)
    for key in ("mode", "seed", "epochs", "folds"):
        value = getattr(args, key, None)
        if value is not None:
            overrides[key] = str(value)
    return load_config(args.config, overrides)


def _train_run(manifest, store, cfg: dict, run_dir: Path, data: str, features: str,
               bank: BagBank | None = None) -> RunInfo:
    train_cfg, geom = split_config(cfg)
    folds = split_folds(manifest, int(cfg["folds"]), int(cfg["fold_seed"]))
    run_dir.mkdir(parents=True, exist_ok=True)
    info = RunInfo(str(Path(data).resolve()), str(Path(features).resolve()),
                   {k: cfg[k] for k in sorted(cfg)}, geom.__dict__.copy(), folds.to_json())
    info.write(run_dir)
    if bank is None or bank.geometry != geom:
        bank = BagBank(manifest, store, geom)
    log.info("run %s: mode=%s folds=%d fold_hash=%s", run_dir, train_cfg.mode, folds.n_folds, folds.digest())
    train(bank, folds, train_cfg, run_dir)
    return info


def cmd_train(args) -> int:
    cfg = _run_config(args)
    mpath = manifest_path(args.data)
    manifest = load_manifest(mpath)
    store = ingest_features(args.features)
    run_dir = Path(args.run)
    if args.resume:
        info = RunInfo.read(run_dir)
        train_cfg, geom = split_config(cfg)
        bank = BagBank(manifest, store, geom)
        state = resume(args.resume, bank, info.fold_assignment, train_cfg, run_dir, args.resume_epochs)
        print(f"resumed to epoch {state.epoch}")
        return 0
    _train_run(manifest, store, cfg, run_dir, str(mpath), args.features)
    print(f"trained {cfg['folds']} folds into {run_dir}")
    return 0


def cmd_eval(args) -> int:
    run_dir = Path(args.run)
    report = evaluate_run(run_dir, args.task, args.breast_level)
    text = dumps_report(report)
    suffix = "_breast" if args.breast_level else ""
    out = Path(args.out) if args.out else run_dir / f"report_{args.task}{suffix}.json"
    out.write_text(text)
    agg = report["aggregate"]
    for key, val in agg.items():
        print(f"{key:>22}: {val['mean']:.4f} +/- {val['std']:.4f}")
    print(f"report: {out}")
    return 0


def cmd_localize(args) -> int:
    pred = localize(args.run, args.image, args.out)
    top_m = int(np.argmax(pred.loc[:, 0]))
    print(f"{args.image}: p_M={pred.p_m:.4f} p_B={pred.p_b:.4f}; top M region {pred.bboxes[top_m].tolist()}")
    print(f"overlay: {args.out}")
    return 0


def cmd_ablate(args) -> int:
    base = _run_config(args)
    mpath = manifest_path(args.data)
    manifest = load_manifest(mpath)
    store = ingest_features(args.features)
    out = Path(args.out)
    seeds = [int(s) for s in args.seeds.split(",")] if args.seeds else [int(base["seed"])]
    results: dict[tuple[str, str], list[dict]] = {}
    digests = set()
    bank = BagBank(manifest, store, split_config(base)[1])  # augmentation cache shared by all runs
    for label, mode in ABLATION_MODES:
        for seed in seeds:
            cfg = dict(base, mode=mode, seed=seed)
            run_dir = out / mode / f"seed{seed}"
            info = _train_run(manifest, store, cfg, run_dir, str(mpath), args.features, bank)
            digests.add(info.fold_assignment.digest())
            for task in TASKS:
                report = evaluate_run(run_dir, task)
                (run_dir / f"report_{task}.json").write_text(dumps_report(report))
                results.setdefault((label, task), []).append(report["aggregate"])
    print(f"fold hash: {','.join(sorted(digests))}")
    rows = write_ablation_table(out / "ablation.csv", results)
    for r in rows:
        print(",".join(str(v) for v in r))
    return 0


def write_ablation_table(path: Path, results: dict) -> list[list]:
    header = ["method", "task", "auroc_mean", "auroc_std", "pauc_ratio_mean", "pauc_ratio_std",
              "op_mean", "op_std"]
    rows = [header]
    for task in TASKS:
        for label, _ in ABLATION_MODES:
            aggs = results[(label, task)]
            row = [label, task]
            for key in ("auroc", "pauc_ratio", "op_specificity"):
                # mean/std over folds for one seed; pooled fold means across several seeds
                means = [a[key]["mean"] for a in aggs]
                if len(aggs) == 1:
                    stat = aggs[0][key]
                else:
                    stat = mean_std(means)
                row += [f"{stat['mean']:.4f}", f"{stat['std']:.4f}"]
            rows.append(row)
    with open(path, "w", newline="") as fh:
        csv.writer(fh).writerows(rows)
    return rows


# ---------------------------------------------------------------- parser

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="dbmil", description=__doc__.splitlines()[0])
    p.add_argument("--threads", type=int, default=None, help="BLAS thread cap (results do not change)")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("synth", help="generate the synthetic planted-lesion dataset")
    s.add_argument("--out", required=True)
    s.add_argument("--seed", type=int, default=1)
    s.add_argument("--n", type=int, default=800)
    s.add_argument("--mix", default="3:3:4", help="B:M:N weights")
    s.add_argument("--size", type=int, default=256)
    s.add_argument("--sigma-min", type=float, default=SynthParams().sigma_range[0])
    s.add_argument("--sigma-max", type=float, default=SynthParams().sigma_range[1])
    s.set_defaults(func=cmd_synth)

    e = sub.add_parser("extract", help="extract region features into a FEAT1 file")
    e.add_argument("--data", required=True)
    e.add_argument("--out", required=True)
    e.add_argument("--window", type=int, default=64)
    e.add_argument("--stride", type=int, default=32)
    e.add_argument("--coverage", type=float, default=0.5)
    e.add_argument("--feature-seed", type=int, default=0)
    e.add_argument("--feature-dim", type=int, default=128)
    e.set_defaults(func=cmd_extract)

    def training_flags(q):
        q.add_argument("--data", required=True)
        q.add_argument("--features", required=True)
        q.add_argument("--config", default=None)
        q.add_argument("--set", action="append", default=[], metavar="KEY=VALUE")
        q.add_argument("--seed", type=int, default=None)
        q.add_argument("--epochs", type=int, default=None)
        q.add_argument("--folds", type=int, default=None)

    t = sub.add_parser("train", help="cross-validated training")
    training_flags(t)
    t.add_argument("--mode", choices=mdl.MODES, default=None)
    t.add_argument("--run", required=True)
    t.add_argument("--resume", default=None, help="epoch checkpoint to continue from")
    t.add_argument("--resume-epochs", type=int, default=1)
    t.set_defaults(func=cmd_train)

    v = sub.add_parser("eval", help="held-out metrics for a run")
    v.add_argument("--run", required=True)
    v.add_argument("--task", choices=TASKS, required=True)
    v.add_argument("--breast-level", action="store_true")
    v.add_argument("--out", default=None)
    v.set_defaults(func=cmd_eval)

    lz = sub.add_parser("localize", help="overlay top-scoring regions for one image")
    lz.add_argument("--run", required=True)
    lz.add_argument("--image", required=True)
    lz.add_argument("--out", required=True)
    lz.set_defaults(func=cmd_localize)

    a = sub.add_parser("ablate", help="train and compare Cls-Det-RS, DB-Baseline and Max-region")
    training_flags(a)
    a.add_argument("--out", required=True)
    a.add_argument("--seeds", default=None, help="comma-separated training seeds")
    a.set_defaults(func=cmd_ablate)
    return p


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:  # argparse usage errors exit 2, --help exits 0
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.threads:
            from threadpoolctl import threadpool_limits
            with threadpool_limits(args.threads):
                return args.func(args)
        return args.func(args)
    except (UsageError, ConfigError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except NumericalError as exc:
        print(f"numerical abort: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (DataError, FeatureFormatError, mdl.CheckpointError, FileNotFoundError, KeyError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
