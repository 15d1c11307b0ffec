"""Run directories: held-out prediction, metric reports and localization overlays."""
from __future__ import annotations

import csv
import json
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from . import evaluation as ev
from . import model as mdl
from .data import DataError, DatasetManifest, FoldAssignment, load_manifest
from .features import ingest_features
from .imageio import read_pgm, write_ppm
from .pipeline import region_grid
from .trainer import BagBank, Geometry

TASKS = ("m-vs-bn", "mb-vs-n")
FROC_CLASS = {"m-vs-bn": "M", "mb-vs-n": "B"}
VIEW_SUFFIXES = ("_CC", "_MLO")


@dataclass
class RunInfo:
    data: str
    features: str
    config: dict
    geometry: dict
    folds: dict

    @property
    def fold_assignment(self) -> FoldAssignment:
        return FoldAssignment.from_json(self.folds)

    def write(self, run_dir: Path) -> None:
        obj = asdict(self)
        obj["fold_digest"] = self.fold_assignment.digest()
        (run_dir / "run.json").write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")

    @classmethod
    def read(cls, run_dir: str | Path) -> "RunInfo":
        path = Path(run_dir) / "run.json"
        if not path.is_file():
            raise DataError(f"{run_dir}: not a run directory (no run.json)")
        obj = json.loads(path.read_text())
        obj.pop("fold_digest", None)
        return cls(**obj)


def open_run(run_dir: str | Path) -> tuple[RunInfo, BagBank]:
    info = RunInfo.read(run_dir)
    manifest = load_manifest(info.data)
    store = ingest_features(info.features)
    return info, BagBank(manifest, store, Geometry(**info.geometry))


@dataclass
class Prediction:
    image_id: str
    fold: int
    p_m: float
    p_b: float
    region_index: np.ndarray
    bboxes: np.ndarray
    loc: np.ndarray  # (m, 2) localization scores for (M, B)


def fold_checkpoint(run_dir: str | Path, fold: int) -> Path:
    path = Path(run_dir) / f"fold{fold}" / "best.ckpt"
    if not path.is_file():
        raise DataError(f"missing checkpoint for fold {fold}: {path}")
    return path


def region_boxes(bank: BagBank, image_id: str) -> np.ndarray:
    grid = region_grid(bank.manifest[image_id], bank.geometry, with_patches=False)
    idx = bank.store.regions(image_id)
    lookup = {int(i): b for i, b in zip(grid.indices, grid.bboxes)}
    try:
        return np.array([lookup[int(i)] for i in idx]).reshape(-1, 4)
    except KeyError:
        raise DataError(f"{image_id}: feature regions do not match the run geometry") from None


def predict(params: mdl.ModelParams, bank: BagBank, ids: list[str], fold: int = -1,
            with_boxes: bool = True) -> list[Prediction]:
    out = []
    for start in range(0, len(ids), 128):
        chunk = ids[start:start + 128]
        trace = mdl.forward(params, [bank.features(i) for i in chunk])
        loc = mdl.localization_scores(params, trace.H, trace.p_cls, trace.valid)
        for b, image_id in enumerate(chunk):
            m = int(trace.valid[b].sum())
            boxes = region_boxes(bank, image_id) if with_boxes else np.zeros((0, 4), int)
            out.append(Prediction(image_id, fold, float(trace.p_m[b]), float(trace.p_b[b]),
                                  bank.store.regions(image_id), boxes, loc[b, :m]))
    return out


def predict_run(run_dir: str | Path, info: RunInfo, bank: BagBank) -> list[Prediction]:
    folds = info.fold_assignment
    preds = []
    for f in range(folds.n_folds):
        params, _ = mdl.load_params(fold_checkpoint(run_dir, f))
        if params.d != bank.store.dim:
            raise DataError(f"fold {f}: checkpoint input dim {params.d} != feature dim {bank.store.dim}")
        ids = folds.image_ids(bank.manifest, f, held_out=True)
        preds += predict(params, bank, ids, f)
    return preds


def task_label(manifest: DatasetManifest, image_id: str, task: str) -> int:
    e = manifest[image_id]
    return e.y_m if task == "m-vs-bn" else int(e.y_m or e.y_b)


def breast_id(image_id: str) -> str:
    for suffix in VIEW_SUFFIXES:
        if image_id.endswith(suffix):
            return image_id[: -len(suffix)]
    return image_id


def _classification_scores(preds, manifest, task, breast_level):
    scores = np.array([mdl.image_scores_for_task(p.p_m, p.p_b, task) for p in preds], dtype=np.float64)
    labels = np.array([task_label(manifest, p.image_id, task) for p in preds])
    if not breast_level:
        return scores, labels
    groups: dict[str, list[int]] = {}
    for j, p in enumerate(preds):
        groups.setdefault(breast_id(p.image_id), []).append(j)
    keys = sorted(groups)
    return (np.array([scores[groups[k]].max() for k in keys]),
            np.array([labels[groups[k]].max() for k in keys]))


def froc_for_fold(preds: list[Prediction], manifest: DatasetManifest, task: str,
                  sensitivity: float = 0.85) -> tuple[ev.FrocCurve | None, int]:
    """FROC over the fold's classification true positives at the given sensitivity."""
    cls = FROC_CLASS[task]
    col = mdl.ABNORMAL.index(cls)
    scores = np.array([mdl.image_scores_for_task(p.p_m, p.p_b, task) for p in preds])
    labels = np.array([task_label(manifest, p.image_id, task) for p in preds])
    thr = ev.threshold_at_sensitivity(scores, labels, sensitivity)
    images = []
    for p, s, y in zip(preds, scores, labels):
        lesions = [a.rect for a in manifest[p.image_id].annotations if a.cls == cls]
        if y == 1 and s >= thr and lesions:
            images.append(ev.LocalizedImage(p.image_id, p.loc[:, col], p.bboxes, np.array(lesions)))
    return (ev.froc(images) if images else None), len(images)


def evaluate_predictions(preds: list[Prediction], manifest: DatasetManifest, task: str,
                         breast_level: bool = False, max_fp: float = 2.0, curves_dir: Path | None = None) -> dict:
    if task not in TASKS:
        raise ValueError(f"unknown task {task!r}")
    fold_ids = sorted({p.fold for p in preds})
    per_fold = []
    for f in fold_ids:
        fp = [p for p in preds if p.fold == f]
        scores, labels = _classification_scores(fp, manifest, task, breast_level)
        curve = ev.roc_curve(scores, labels)
        row = {
            "fold": f,
            "n_images": len(fp),
            "n_positive": int(labels.sum()),
            "auroc": ev.auroc(curve),
            "pauc_ratio": ev.pauc_ratio(curve),
            "op_specificity": ev.specificity_at_sensitivity(curve, 0.85),
        }
        fr, n_tp = froc_for_fold(fp, manifest, task)
        row["froc_class"] = FROC_CLASS[task]
        row["froc_n_images"] = n_tp
        row[f"froc_recall_at_{max_fp:g}fp"] = None if fr is None else fr.recall_at(max_fp)
        per_fold.append(row)
        if curves_dir is not None:
            ev.write_curve_csv(curves_dir / f"roc_{task}_fold{f}.csv", curve.rows())
            if fr is not None:
                ev.write_curve_csv(curves_dir / f"froc_{task}_fold{f}.csv", fr.rows())
    metrics = ["auroc", "pauc_ratio", "op_specificity", f"froc_recall_at_{max_fp:g}fp"]
    aggregate = {}
    for key in metrics:
        vals = [r[key] for r in per_fold if r[key] is not None]
        if vals:
            aggregate[key] = ev.mean_std(vals)
    return {"task": task, "breast_level": breast_level, "folds": per_fold, "aggregate": aggregate}


def dumps_report(report: dict) -> str:
    return json.dumps(report, indent=2, sort_keys=True) + "\n"


def evaluate_run(run_dir: str | Path, task: str, breast_level: bool = False,
                 write_curves: bool = True) -> dict:
    run_dir = Path(run_dir)
    info, bank = open_run(run_dir)
    preds = predict_run(run_dir, info, bank)
    curves = run_dir / "curves" if write_curves else None
    if curves is not None:
        curves.mkdir(exist_ok=True)
    return evaluate_predictions(preds, bank.manifest, task, breast_level, curves_dir=curves)


# ---------------------------------------------------------------- localization overlays

def _outline(rgb: np.ndarray, box, channel: int) -> None:
    x, y, w, h = (int(v) for v in box)
    rgb[y, x:x + w, channel] = 255
    rgb[y + h - 1, x:x + w, channel] = 255
    rgb[y:y + h, x, channel] = 255
    rgb[y:y + h, x + w - 1, channel] = 255


def localize(run_dir: str | Path, image_id: str, out_path: str | Path, top: int = 3) -> Prediction:
    """Overlay top-scoring M (blue) and B (green) regions; sidecar CSV of all scores."""
    run_dir = Path(run_dir)
    info, bank = open_run(run_dir)
    if image_id not in bank.manifest:
        raise DataError(f"unknown image id {image_id!r}")
    folds = info.fold_assignment
    fold = folds.fold_of(bank.manifest[image_id].patient_id)
    params, _ = mdl.load_params(fold_checkpoint(run_dir, fold))
    pred = predict(params, bank, [image_id], fold)[0]

    image = read_pgm(bank.manifest[image_id].image_path)
    gray = np.round(np.clip(image, 0, 1) * 255).astype(np.uint8)
    rgb = np.repeat(gray[:, :, None], 3, axis=2)
    for col, channel in ((0, 2), (1, 1)):  # M -> blue, B -> green
        order = np.argsort(-pred.loc[:, col], kind="stable")[:top]
        for j in order:
            _outline(rgb, pred.bboxes[j], channel)
    out_path = Path(out_path)
    write_ppm(out_path, rgb)
    with open(out_path.with_suffix(".csv"), "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["region_index", "x", "y", "w", "h", "d_M", "d_B"])
        for idx, box, (dm, db) in zip(pred.region_index, pred.bboxes, pred.loc):
            w.writerow([int(idx), *(int(v) for v in box), repr(float(dm)), repr(float(db))])
    return pred
