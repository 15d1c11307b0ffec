"""Acceptance criteria. Each test registers one PASS/FAIL line (see conftest)."""
import json
import time

import numpy as np
import pytest

from dbmil import evaluation as ev
from dbmil import model as mdl
from dbmil.cli import main
from dbmil.data import split_folds
from dbmil.features import ingest_features
from dbmil.runs import RunInfo, fold_checkpoint, open_run
from dbmil.synth import SynthParams, synth_generate
from dbmil.pipeline import extract_features
from dbmil.trainer import BagBank, Geometry, TrainConfig, resume, train
from oracles import (concordance, diagonal_curve, finite_difference, naive_forward, random_instance,
                     relative_error)


@pytest.fixture(scope="module")
def benchmark(tmp_path_factory):
    """Synthetic benchmark at the desk defaults, trained in full mode and evaluated on both tasks."""
    root = tmp_path_factory.mktemp("benchmark")
    data, feat, run = root / "data", root / "feat.bin", root / "run"
    t0 = time.perf_counter()
    assert main(["synth", "--out", str(data), "--seed", "1", "--n", "800", "--mix", "3:3:4", "--size", "256"]) == 0
    assert main(["extract", "--data", str(data), "--out", str(feat), "--window", "64", "--stride", "32"]) == 0
    assert main(["train", "--data", str(data), "--features", str(feat), "--run", str(run),
                 "--mode", "full", "--folds", "5"]) == 0
    reports = {}
    for task in ("mb-vs-n", "m-vs-bn"):
        assert main(["eval", "--run", str(run), "--task", task]) == 0
        reports[task] = json.loads((run / f"report_{task}.json").read_text())
    return {"root": root, "data": data, "features": feat, "run": run, "reports": reports,
            "seconds": time.perf_counter() - t0}


def test_gradient_exactness(record_criterion):
    rng = np.random.default_rng(20240601)
    t0 = time.perf_counter()
    worst = 0.0
    for j in range(100):
        mode = mdl.MODES[j % len(mdl.MODES)]
        params, X, labels = random_instance(rng, mode, m=8, d=8, hidden=8, k=3, scale=1.5)
        t = mdl.forward(params, [X])
        g = mdl.backward(params, t, labels[None])
        num = finite_difference(params, [X], labels[None], t, step=1e-5)
        worst = max(worst, max(relative_error(g[n], num[n]) for n in mdl.TENSOR_NAMES))
    seconds = time.perf_counter() - t0
    ok = worst < 1e-4 and seconds < 10
    record_criterion("gradient exactness", ok, f"max rel err {worst:.2e} over 100 instances, {seconds:.1f}s")
    assert ok


def test_forward_oracle(record_criterion):
    rng = np.random.default_rng(7)
    worst = 0.0
    mask_mismatch = 0
    for j in range(1000):
        mode = mdl.MODES[j % len(mdl.MODES)]
        m = int(rng.integers(1, 13))
        params, X, _ = random_instance(rng, mode, m=m, k=int(rng.integers(1, 6)), scale=float(rng.uniform(0.5, 3)))
        t = mdl.forward(params, [X])
        ref = naive_forward(params, X)
        worst = max(worst, float(np.abs(t.p_cls[0] - ref["p_cls"]).max()))
        for i, c in enumerate(mdl.ABNORMAL):
            worst = max(worst, abs(float(t.posterior[0, i]) - ref["posterior"][c]))
            if mode != "max-region":
                worst = max(worst, float(np.abs(t.p_det[0, :, i] - ref["p_det"][c]).max()))
                mask_mismatch += not np.array_equal(t.sel[0, :, i], ref["mask"][c])
    ok = worst <= 1e-12 and mask_mismatch == 0
    record_criterion("forward oracle", ok, f"max abs diff {worst:.1e} on 1000 instances, {mask_mismatch} mask mismatches")
    assert ok


def _normalization_errors(trace: mdl.ForwardTrace, hyper: mdl.Hyper) -> tuple[float, int]:
    v = trace.valid
    err = float(np.abs(trace.p_cls.sum(-1) - 1)[v].max())
    bad_support = 0
    if hyper.uses_detection:
        err = max(err, float(np.abs(trace.p_det.sum(1) - 1).max()))
        bad_support = int(((trace.p_det > 0) != (trace.sel > 0)).sum())
    return err, bad_support


def test_normalization_invariants(benchmark, record_criterion):
    worst, bad = 0.0, 0
    rng = np.random.default_rng(3)
    for j in range(400):
        params, X, _ = random_instance(rng, mdl.MODES[j % 4], m=int(rng.integers(1, 20)), scale=3.0)
        e, b = _normalization_errors(mdl.forward(params, [X]), params.hyper)
        worst, bad = max(worst, e), bad + b
    info, bank = open_run(benchmark["run"])
    ids = [e.image_id for e in bank.manifest]
    for f in range(info.fold_assignment.n_folds):
        params, _ = mdl.load_params(fold_checkpoint(benchmark["run"], f))
        for start in range(0, len(ids), 200):
            t = mdl.forward(params, [bank.features(i) for i in ids[start:start + 200]])
            e, b = _normalization_errors(t, params.hyper)
            worst, bad = max(worst, e), bad + b
    ok = worst <= 1e-9 and bad == 0
    record_criterion("normalization invariants", ok,
                     f"max |sum-1| {worst:.1e}; support mismatches {bad} (random + all benchmark folds)")
    assert ok


def test_metric_oracles(record_criterion):
    rng = np.random.default_rng(11)
    worst = 0.0
    for _ in range(200):
        n = int(rng.integers(4, 80))
        scores = rng.integers(0, 6, n).astype(float)  # heavy ties
        labels = rng.integers(0, 2, n)
        labels[:2] = [0, 1]
        worst = max(worst, abs(ev.auroc(ev.roc_curve(scores, labels)) - concordance(scores, labels)))
    diag = diagonal_curve()
    perfect = ev.roc_curve([0.9, 0.8, 0.3, 0.1], [1, 1, 0, 0])
    checks = {
        "auroc~concordance": worst <= 1e-12,
        "pAUCR diagonal": abs(ev.pauc_ratio(diag) - 0.1) <= 1e-9,
        "pAUCR perfect": ev.pauc_ratio(perfect) == 1.0,
        "spec@0.85 diagonal": abs(ev.specificity_at_sensitivity(diag, 0.85) - 0.15) <= 1e-9,
        "IoM inside": ev.iom((0, 0, 224, 224), (10, 10, 20, 20)) == 1.0,
        "IoM disjoint": ev.iom((0, 0, 10, 10), (50, 50, 10, 10)) == 0.0,
        "IoM quarter": ev.iom((0, 0, 224, 224), (112, 112, 224, 224)) == 0.25,
    }
    ok = all(checks.values())
    failed = [k for k, v in checks.items() if not v]
    record_criterion("metric oracles", ok, f"auroc-concordance max diff {worst:.1e}; failed: {failed or 'none'}")
    assert ok


@pytest.mark.slow
def test_end_to_end_benchmark(benchmark, record_criterion):
    mbn = benchmark["reports"]["mb-vs-n"]["aggregate"]["auroc"]["mean"]
    mvbn = benchmark["reports"]["m-vs-bn"]["aggregate"]
    recall = mvbn["froc_recall_at_2fp"]["mean"]
    minutes = benchmark["seconds"] / 60
    ok = mbn >= 0.90 and mvbn["auroc"]["mean"] >= 0.75 and recall >= 0.6 and minutes <= 15
    record_criterion("end-to-end synthetic benchmark", ok,
                     f"MBvN AUROC {mbn:.4f}, MvBN AUROC {mvbn['auroc']['mean']:.4f}, "
                     f"FROC M recall@2FP {recall:.4f}, {minutes:.1f} min")
    assert ok


@pytest.mark.slow
def test_ablation_trend(benchmark, record_criterion):
    out = benchmark["root"] / "ablation"
    seeds = [0, 1, 2, 3, 4]
    assert main(["ablate", "--data", str(benchmark["data"]), "--features", str(benchmark["features"]),
                 "--out", str(out), "--seeds", ",".join(map(str, seeds))]) == 0

    def mbn(mode, seed):
        rep = json.loads((out / mode / f"seed{seed}" / "report_mb-vs-n.json").read_text())
        return rep["aggregate"]["auroc"]["mean"]
    wins, rows = 0, []
    for s in seeds:
        full, db, mx = mbn("full", s), mbn("no-normal-class", s), mbn("max-region", s)
        wins += full >= db and full >= mx
        rows.append(f"s{s}:{full:.3f}/{db:.3f}/{mx:.3f}")
    ok = wins >= 3
    record_criterion("ablation trend", ok, f"full>=both in {wins}/5 seeds (full/DB-Baseline/Max-region) "
                                           + " ".join(rows))
    assert ok


def test_determinism_and_persistence(tmp_path, record_criterion):
    checks = {}
    manifest = synth_generate(5, 30, SynthParams(size=64, sigma_range=(3, 4)), tmp_path / "data")
    geom = Geometry(window=32, stride=16)
    store, _ = extract_features(manifest, geom)
    store.write(tmp_path / "f.bin")
    again = ingest_features(tmp_path / "f.bin")
    again.write(tmp_path / "g.bin")
    checks["feature roundtrip"] = again == store and (tmp_path / "f.bin").read_bytes() == (tmp_path / "g.bin").read_bytes()

    folds = split_folds(manifest, 2, 0)
    cfg = TrainConfig(epochs=2, batch_size=4, hidden_dim=8)
    for name in ("a", "b"):
        train(BagBank(manifest, store, geom), folds, cfg, tmp_path / name)
    same = all((tmp_path / "a" / f"fold{f}" / c).read_bytes() == (tmp_path / "b" / f"fold{f}" / c).read_bytes()
               for f in range(2) for c in ("epoch001.ckpt", "epoch002.ckpt", "best.ckpt"))
    checks["identical checkpoints"] = same

    params, meta = mdl.load_params(tmp_path / "a" / "fold0" / "best.ckpt")
    mdl.save_params(tmp_path / "copy.ckpt", params, {k: v for k, v in meta.items()
                                                      if k not in mdl.hyper_to_meta(params.hyper)})
    p2, _ = mdl.load_params(tmp_path / "copy.ckpt")
    checks["checkpoint roundtrip"] = all(p2[n].tobytes() == params[n].tobytes() for n in mdl.TENSOR_NAMES)

    bank = BagBank(manifest, store, geom)
    train(bank, folds, TrainConfig(epochs=1, batch_size=4, hidden_dim=8), tmp_path / "split", only_folds=[0])
    resume(tmp_path / "split" / "fold0" / "epoch001.ckpt", bank, folds, cfg, tmp_path / "split", epochs=1)
    checks["split-run 1+1 == 2"] = ((tmp_path / "split" / "fold0" / "epoch002.ckpt").read_bytes()
                                    == (tmp_path / "a" / "fold0" / "epoch002.ckpt").read_bytes())

    for name in ("a", "b"):
        RunInfo(str(tmp_path / "data" / "manifest.jsonl"), str(tmp_path / "f.bin"), {}, geom.__dict__.copy(),
                folds.to_json()).write(tmp_path / name)
        assert main(["eval", "--run", str(tmp_path / name), "--task", "mb-vs-n",
                     "--out", str(tmp_path / f"{name}.json")]) == 0
    checks["identical reports"] = (tmp_path / "a.json").read_bytes() == (tmp_path / "b.json").read_bytes()

    ok = all(checks.values())
    record_criterion("determinism and persistence", ok, ", ".join(f"{k}={'ok' if v else 'FAILED'}"
                                                                   for k, v in checks.items()))
    assert ok
