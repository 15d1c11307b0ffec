"""Adam optimization over image batches, per-fold training, checkpoints and resume."""
from __future__ import annotations

import csv
import logging
import time
import warnings
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import model as mdl
from .data import (DataError, DatasetManifest, FoldAssignment, augment, augmentation_menu,
                   extract_regions, load_image_and_mask)
from .features import FeatureStore, featurize_patches

log = logging.getLogger(__name__)


class NumericalError(RuntimeError):
    pass


# ---------------------------------------------------------------- Adam

@dataclass
class AdamState:
    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    t: int = 0
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def zeros_like(cls, tensors: dict[str, np.ndarray], **kw) -> "AdamState":
        return cls({k: np.zeros_like(v) for k, v in tensors.items()},
                   {k: np.zeros_like(v) for k, v in tensors.items()}, **kw)


def adam_step(tensors: dict[str, np.ndarray], grads: dict[str, np.ndarray],
              state: AdamState) -> tuple[dict[str, np.ndarray], AdamState]:
    """One bias-corrected Adam update. Arithmetic is float64; storage keeps each tensor's dtype."""
    t = state.t + 1
    bc1 = 1.0 - state.beta1 ** t
    bc2 = 1.0 - state.beta2 ** t
    new_p, new_m, new_v = {}, {}, {}
    for name, p in tensors.items():
        g = np.asarray(grads[name], dtype=np.float64)
        if g.shape != p.shape or state.m[name].shape != p.shape:
            raise ValueError(f"shape mismatch for {name}: param {p.shape}, grad {g.shape}, "
                             f"moment {state.m[name].shape}")
        m = state.beta1 * state.m[name].astype(np.float64) + (1 - state.beta1) * g
        v = state.beta2 * state.v[name].astype(np.float64) + (1 - state.beta2) * g * g
        step = state.lr * (m / bc1) / (np.sqrt(v / bc2) + state.eps)
        with np.errstate(over="ignore"):  # overflow is caught by the caller's finiteness check
            new_p[name] = (p.astype(np.float64) - step).astype(p.dtype)
        new_m[name] = m.astype(state.m[name].dtype)
        new_v[name] = v.astype(state.v[name].dtype)
    return new_p, AdamState(new_m, new_v, t, state.lr, state.beta1, state.beta2, state.eps)


# ---------------------------------------------------------------- config

@dataclass
class TrainConfig:
    epochs: int = 400
    batch_size: int = 4
    seed: int = 0
    augment: bool = True
    balance: bool = True
    mode: str = "full"
    k: int = 10
    l2: float = 1e-4
    dropout_rate: float = 0.25
    hidden_dim: int = 64
    lr: float = 1e-4
    eval_every: int = 1
    val_fraction: float = 0.1

    def __post_init__(self):
        if self.epochs < 1 or self.batch_size < 1 or self.eval_every < 1:
            raise ValueError("epochs, batch_size and eval_every must be >= 1")
        if not 0 <= self.val_fraction < 1:
            raise ValueError("val_fraction must be in [0, 1)")
        self.hyper()

    def hyper(self) -> mdl.Hyper:
        return mdl.Hyper(k=self.k, l2=self.l2, dropout_rate=self.dropout_rate, mode=self.mode)


@dataclass(frozen=True)
class Geometry:
    window: int = 64
    stride: int = 32
    coverage: float = 0.5
    feature_seed: int = 0
    feature_dim: int = 128


# ---------------------------------------------------------------- region bags

class BagBank:
    """Per-image region features, with on-demand augmented variants.

    Augmented variants re-extract and re-featurize the transformed image with
    the built-in featurizer; they are cached per (image, op) for the process.
    """

    def __init__(self, manifest: DatasetManifest, store: FeatureStore, geometry: Geometry):
        self.manifest = manifest
        self.store = store
        self.geometry = geometry
        self._aug_cache: dict[tuple[str, int], np.ndarray] = {}
        self.menu = augmentation_menu(geometry.stride)

    def check_coverage(self, image_ids) -> None:
        missing = [i for i in image_ids if i not in self.store or len(self.store.regions(i)) == 0]
        if missing:
            raise DataError(f"missing features for {len(missing)} image(s), e.g. {missing[:3]}")

    def features(self, image_id: str) -> np.ndarray:
        return self.store.matrix(image_id)

    def label(self, image_id: str) -> tuple[int, int]:
        return self.manifest[image_id].label

    def augmented(self, image_id: str, op_index: int) -> np.ndarray:
        if op_index == 0:
            return self.features(image_id)
        key = (image_id, op_index)
        if key not in self._aug_cache:
            self._fill_cache(image_id)
        return self._aug_cache[key]

    def _fill_cache(self, image_id: str) -> None:
        # all variants of an image at once: one decode, one featurizer call
        g = self.geometry
        if self.store.dim != g.feature_dim:
            raise DataError(f"augmentation re-featurizes at dim {g.feature_dim}, "
                            f"but the feature store has dim {self.store.dim}")
        entry = self.manifest[image_id]
        image, mask = load_image_and_mask(entry)
        grids = []
        for ops in self.menu[1:]:
            aug = augment(image, entry.label, ops, entry.annotations, mask, g.stride)
            with warnings.catch_warnings():
                warnings.simplefilter("ignore")
                grids.append(extract_regions(aug.image, aug.mask, g.window, g.stride, g.coverage, image_id))
        patches = [gr.patches for gr in grids if len(gr)]
        feats = featurize_patches(np.concatenate(patches), g.feature_seed, g.feature_dim).astype(np.float32) \
            if patches else np.zeros((0, g.feature_dim), np.float32)
        pos = 0
        for op_index, gr in enumerate(grids, start=1):
            if len(gr):
                self._aug_cache[(image_id, op_index)] = feats[pos:pos + len(gr)]
                pos += len(gr)
            else:
                self._aug_cache[(image_id, op_index)] = self.features(image_id)


# ---------------------------------------------------------------- training

def _validation_split(manifest: DatasetManifest, train_ids: list[str], fraction: float,
                      seed: int, fold: int) -> tuple[list[str], list[str]]:
    patients = sorted({manifest[i].patient_id for i in train_ids})
    n_val = int(round(fraction * len(patients)))
    if fraction > 0:
        n_val = max(1, n_val)
    if n_val >= len(patients):
        n_val = 0
    rng = np.random.default_rng([seed, fold, 7])
    val_patients = {patients[j] for j in rng.permutation(len(patients))[:n_val]}
    fit = [i for i in train_ids if manifest[i].patient_id not in val_patients]
    val = [i for i in train_ids if manifest[i].patient_id in val_patients]
    return fit, val


def epoch_order(bank: BagBank, ids: list[str], balance: bool, rng: np.random.Generator) -> list[str]:
    """Training order for one epoch; with balance, severity groups are oversampled to equal size."""
    if not balance:
        return [ids[j] for j in rng.permutation(len(ids))]
    groups: dict[str, list[str]] = {}
    for i in ids:
        groups.setdefault(bank.manifest[i].severity, []).append(i)
    target = max(len(g) for g in groups.values())
    picked = []
    for sev in sorted(groups):
        members = groups[sev]
        draw: list[str] = []
        while len(draw) < target:
            draw += [members[j] for j in rng.permutation(len(members))]
        picked += draw[:target]
    return [picked[j] for j in rng.permutation(len(picked))]


def evaluate_loss(params: mdl.ModelParams, bank: BagBank, ids: list[str], batch_size: int = 256) -> float:
    total = 0.0
    for start in range(0, len(ids), batch_size):
        chunk = ids[start:start + batch_size]
        trace = mdl.forward(params, [bank.features(i) for i in chunk])
        labels = np.array([bank.label(i) for i in chunk])
        total += (mdl.loss(params, trace, labels) - mdl.l2_term(params)) * len(chunk)
    return total / len(ids)


@dataclass
class FoldState:
    params: mdl.ModelParams
    adam: AdamState
    epoch: int = 0  # completed epochs
    best_val: float = float("inf")
    best_epoch: int = -1


def save_state(path: Path, state: FoldState, config: TrainConfig, fold: int) -> None:
    tensors = {n: state.params[n] for n in mdl.TENSOR_NAMES}
    for n in mdl.TENSOR_NAMES:
        tensors[f"adam.m.{n}"] = state.adam.m[n]
        tensors[f"adam.v.{n}"] = state.adam.v[n]
    meta = {
        **mdl.hyper_to_meta(state.params.hyper),
        "fold": fold,
        "epoch": state.epoch,
        "adam_t": state.adam.t,
        "lr": repr(state.adam.lr),
        "beta1": repr(state.adam.beta1),
        "beta2": repr(state.adam.beta2),
        "adam_eps": repr(state.adam.eps),
        "best_val": repr(state.best_val),
        "best_epoch": state.best_epoch,
        "seed": config.seed,
        "hidden_dim": config.hidden_dim,
    }
    mdl.write_checkpoint(path, tensors, meta)


def load_state(path: str | Path) -> tuple[FoldState, dict[str, str]]:
    params, meta = mdl.load_params(path)
    tensors, _ = mdl.read_checkpoint(path)
    try:
        adam = AdamState({n: tensors[f"adam.m.{n}"] for n in mdl.TENSOR_NAMES},
                         {n: tensors[f"adam.v.{n}"] for n in mdl.TENSOR_NAMES},
                         t=int(meta["adam_t"]), lr=float(meta["lr"]), beta1=float(meta["beta1"]),
                         beta2=float(meta["beta2"]), eps=float(meta["adam_eps"]))
    except KeyError as exc:
        raise mdl.CheckpointError(f"{path}: not a training checkpoint (missing {exc})") from None
    for n in mdl.TENSOR_NAMES:
        if adam.m[n].shape != params[n].shape or adam.v[n].shape != params[n].shape:
            raise mdl.CheckpointError(f"{path}: optimizer state shape mismatch for {n}")
    state = FoldState(params, adam, int(meta["epoch"]), float(meta["best_val"]), int(meta["best_epoch"]))
    return state, meta


def init_state(config: TrainConfig, d: int, fold: int) -> FoldState:
    params = mdl.init_params(config.seed * 1000 + fold, d, config.hidden_dim, config.hyper(),
                             dtype=np.float32)
    return FoldState(params, AdamState.zeros_like(params.tensors, lr=config.lr))


def train_fold(bank: BagBank, train_ids: list[str], config: TrainConfig, fold: int,
               out_dir: str | Path, state: FoldState | None = None, epochs: int | None = None) -> FoldState:
    """Train one fold, writing epochNNN.ckpt, best.ckpt and train_log.csv under out_dir.

    ``state`` resumes from a saved FoldState; ``epochs`` bounds how many more epochs run
    (default: up to config.epochs in total).
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    bank.check_coverage(train_ids)
    fit_ids, val_ids = _validation_split(bank.manifest, train_ids, config.val_fraction, config.seed, fold)
    if not fit_ids:
        raise DataError(f"fold {fold}: no training images")
    if state is None:
        state = init_state(config, bank.store.dim, fold)
    if state.params.d != bank.store.dim:
        raise DataError(f"feature dimension {bank.store.dim} != checkpoint input dimension {state.params.d}")
    hp = state.params.hyper
    frozen = [n for n in mdl.TENSOR_NAMES if n not in hp.active_tensors()]
    if frozen:
        log.info("fold %d: mode %s keeps %s frozen (zero gradient asserted every step)",
                 fold, hp.mode, ",".join(frozen))

    last = config.epochs if epochs is None else state.epoch + epochs
    log_path = out_dir / "train_log.csv"
    new_log = not log_path.exists() or state.epoch == 0
    with open(log_path, "w" if new_log else "a", newline="") as fh:
        writer = csv.writer(fh)
        if new_log:
            writer.writerow(["epoch", "batch", "loss", "l2_term", "wall_ms"])
        while state.epoch < last:
            e = state.epoch
            rng = np.random.default_rng([config.seed, fold, e])
            order = epoch_order(bank, fit_ids, config.balance, rng)
            ops = rng.integers(0, len(bank.menu), size=len(order)) if config.augment else np.zeros(len(order), int)
            for b, start in enumerate(range(0, len(order), config.batch_size)):
                t0 = time.perf_counter()
                chunk = order[start:start + config.batch_size]
                feats = [bank.augmented(i, int(op)) for i, op in zip(chunk, ops[start:start + config.batch_size])]
                labels = np.array([bank.label(i) for i in chunk])
                trace = mdl.forward(state.params, feats, training=True, rng=rng)
                value = mdl.loss(state.params, trace, labels)
                if not np.isfinite(value):
                    raise NumericalError(f"fold {fold} epoch {e} batch {b}: non-finite loss {value}")
                grads = mdl.backward(state.params, trace, labels)
                for n in frozen:
                    if np.any(grads[n]):
                        raise NumericalError(f"fold {fold} epoch {e} batch {b}: gradient on frozen tensor {n}")
                tensors, adam = adam_step(state.params.tensors, grads, state.adam)
                for n, arr in tensors.items():
                    if not np.isfinite(arr).all():
                        raise NumericalError(f"fold {fold} epoch {e} batch {b}: non-finite parameter {n}")
                state.params = mdl.ModelParams(tensors, hp)
                state.adam = adam
                wall = (time.perf_counter() - t0) * 1000
                writer.writerow([e, b, f"{value:.8g}", f"{mdl.l2_term(state.params):.8g}", f"{wall:.1f}"])
            state.epoch = e + 1
            if val_ids and (state.epoch % config.eval_every == 0 or state.epoch == config.epochs):
                val = evaluate_loss(state.params, bank, val_ids)
                if val < state.best_val:
                    state.best_val, state.best_epoch = val, state.epoch
                    save_state(out_dir / "best.ckpt", state, config, fold)
            elif not val_ids:
                state.best_epoch = state.epoch
                save_state(out_dir / "best.ckpt", state, config, fold)
            save_state(out_dir / f"epoch{state.epoch:03d}.ckpt", state, config, fold)
    return state


def train(bank: BagBank, folds: FoldAssignment, config: TrainConfig, run_dir: str | Path,
          only_folds: list[int] | None = None) -> dict[int, FoldState]:
    """Cross-validated training: fold f trains on every image outside fold f."""
    run_dir = Path(run_dir)
    states = {}
    for f in range(folds.n_folds):
        if only_folds is not None and f not in only_folds:
            continue
        train_ids = folds.image_ids(bank.manifest, f, held_out=False)
        states[f] = train_fold(bank, train_ids, config, f, run_dir / f"fold{f}")
    return states


def resume(checkpoint: str | Path, bank: BagBank, folds: FoldAssignment, config: TrainConfig,
           run_dir: str | Path, epochs: int) -> FoldState:
    """Continue a fold from an epoch checkpoint for ``epochs`` more epochs."""
    state, meta = load_state(checkpoint)
    fold = int(meta["fold"])
    if state.params.hyper != config.hyper():
        raise mdl.CheckpointError(f"checkpoint hyperparameters {state.params.hyper} != config {config.hyper()}")
    train_ids = folds.image_ids(bank.manifest, fold, held_out=False)
    return train_fold(bank, train_ids, config, fold, Path(run_dir) / f"fold{fold}", state=state, epochs=epochs)


def config_dict(config: TrainConfig) -> dict:
    return asdict(config)
