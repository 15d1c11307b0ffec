"""Dual-branch region model: per-region classification, classification-guided
top-k selection, masked detection softmax, image posteriors, loss and exact
gradients.

Arrays are batched as (images, regions, ...); ragged bags are zero-padded and
carry a ``valid`` mask. Abnormal classes are ordered (M, B) everywhere a
per-class axis appears, matching the (y_M, y_B) label tuple.
"""
from __future__ import annotations

import math
import struct
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np

MODES = ("full", "no-selection", "no-normal-class", "max-region")
ABNORMAL = ("M", "B")
EPS = 1e-7
WEIGHT_NAMES = ("W3", "w_N", "w_B", "w_M", "u_B", "u_M")
TENSOR_NAMES = ("W3", "b3", "w_N", "w_B", "w_M", "u_B", "u_M")


@dataclass(frozen=True)
class Hyper:
    k: int = 10
    l2: float = 1e-4
    dropout_rate: float = 0.25
    mode: str = "full"

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"unknown mode {self.mode!r}; expected one of {MODES}")
        if self.k < 1:
            raise ValueError("k must be >= 1")
        if not 0 <= self.dropout_rate < 1:
            raise ValueError("dropout_rate must be in [0, 1)")
        if self.l2 < 0:
            raise ValueError("l2 must be >= 0")

    @property
    def classes(self) -> tuple[str, ...]:
        """Columns of the region softmax."""
        return ("B", "M") if self.mode == "no-normal-class" else ("N", "B", "M")

    @property
    def uses_selection(self) -> bool:
        return self.mode == "full"

    @property
    def uses_detection(self) -> bool:
        return self.mode != "max-region"

    def active_tensors(self) -> tuple[str, ...]:
        names = ["W3", "b3"] + [f"w_{c}" for c in self.classes]
        if self.uses_detection:
            names += ["u_B", "u_M"]
        return tuple(names)


@dataclass
class ModelParams:
    tensors: dict[str, np.ndarray]
    hyper: Hyper = field(default_factory=Hyper)

    @property
    def d(self) -> int:
        return self.tensors["W3"].shape[1]

    @property
    def hidden_dim(self) -> int:
        return self.tensors["W3"].shape[0]

    def __getitem__(self, name: str) -> np.ndarray:
        return self.tensors[name]

    def copy(self) -> "ModelParams":
        return ModelParams({k: v.copy() for k, v in self.tensors.items()}, self.hyper)

    def astype(self, dtype) -> "ModelParams":
        return ModelParams({k: v.astype(dtype) for k, v in self.tensors.items()}, self.hyper)

    def cls_heads(self) -> np.ndarray:
        return np.stack([self.tensors[f"w_{c}"] for c in self.hyper.classes])


def init_params(seed: int, d: int, hidden_dim: int, hyper: Hyper | None = None,
                dtype=np.float64) -> ModelParams:
    """Glorot-uniform weights, zero encoder bias."""
    if d < 1 or hidden_dim < 1:
        raise ValueError("dims must be >= 1")
    rng = np.random.default_rng(seed)

    def glorot(shape, fan_in, fan_out):
        a = math.sqrt(6.0 / (fan_in + fan_out))
        return rng.uniform(-a, a, size=shape)

    tensors = {"W3": glorot((hidden_dim, d), d, hidden_dim), "b3": np.zeros(hidden_dim)}
    for name in ("w_N", "w_B", "w_M", "u_B", "u_M"):
        tensors[name] = glorot(hidden_dim, hidden_dim, 1)
    return ModelParams({k: v.astype(dtype) for k, v in tensors.items()}, hyper or Hyper())


def set_mode(params: ModelParams, mode: str) -> ModelParams:
    return ModelParams(params.tensors, replace(params.hyper, mode=mode))


# ---------------------------------------------------------------- primitives

def softmax(logits: np.ndarray, axis: int = -1) -> np.ndarray:
    z = logits - logits.max(axis=axis, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=axis, keepdims=True)


def encode(params: ModelParams, x: np.ndarray, training: bool = False,
           rng: np.random.Generator | None = None) -> np.ndarray:
    """relu(W3 x + b3), with inverted dropout when training."""
    x = np.asarray(x, dtype=np.float64)
    if x.shape[-1] != params.d:
        raise ValueError(f"feature dimension {x.shape[-1]} != model input dimension {params.d}")
    h = np.maximum(x @ params["W3"].astype(np.float64).T + params["b3"], 0.0)
    rate = params.hyper.dropout_rate
    if training and rate > 0:
        rng = rng or np.random.default_rng()
        h = h * ((rng.random(h.shape) >= rate) / (1.0 - rate))
    return h


def classify_regions(params: ModelParams, H: np.ndarray) -> np.ndarray:
    """Per-region softmax over the mode's class columns (N, B, M) or (B, M)."""
    return softmax(H @ params.cls_heads().astype(np.float64).T)


def select_regions(scores: np.ndarray, k: int, valid: np.ndarray | None = None) -> np.ndarray:
    """k-hot mask over the last axis: highest scores, ties to the lower index."""
    scores = np.asarray(scores, dtype=np.float64)
    if valid is None:
        valid = np.ones(scores.shape, dtype=bool)
    keyed = np.where(valid, -scores, np.inf)
    order = np.argsort(keyed, axis=-1, kind="stable")
    rank = np.empty_like(order)
    np.put_along_axis(rank, order, np.arange(scores.shape[-1]), axis=-1)
    k_eff = np.minimum(k, valid.sum(axis=-1, keepdims=True))
    return ((rank < k_eff) & valid).astype(np.float64)


def masked_softmax(logits: np.ndarray, mask: np.ndarray) -> np.ndarray:
    """Softmax over the last axis restricted to mask == 1; exact zeros elsewhere."""
    mask = np.asarray(mask, dtype=bool)
    if not mask.any(axis=-1).all():
        raise ValueError("detection mask must select at least one region")
    top = np.where(mask, logits, -np.inf).max(axis=-1, keepdims=True)
    e = np.where(mask, np.exp(np.where(mask, logits - top, 0.0)), 0.0)
    return e / e.sum(axis=-1, keepdims=True)


def detect_regions(params: ModelParams, H: np.ndarray, mask: np.ndarray, cls: str) -> np.ndarray:
    return masked_softmax(H @ params[f"u_{cls}"].astype(np.float64), mask)


def image_posterior(p_cls_c: np.ndarray, p_det_c: np.ndarray) -> np.ndarray:
    """Detection-weighted average of region class probabilities."""
    return (p_det_c * p_cls_c).sum(axis=-1)


def normal_probability(p_m, p_b):
    return (1.0 - p_m) * (1.0 - p_b)


def image_scores_for_task(p_m, p_b, task: str):
    if task == "m-vs-bn":
        return p_m
    if task == "mb-vs-n":
        return np.maximum(p_m, p_b)
    raise ValueError(f"unknown task {task!r}")


def baseline_max_region(p_cls_c: np.ndarray, valid: np.ndarray | None = None) -> np.ndarray:
    if valid is not None:
        p_cls_c = np.where(valid, p_cls_c, -np.inf)
    return p_cls_c.max(axis=-1)


def localization_scores(params: ModelParams, H: np.ndarray, p_cls: np.ndarray,
                        valid: np.ndarray | None = None) -> np.ndarray:
    """(..., m, 2) region scores d^c for c in (M, B); detection spans all regions.

    In max-region mode there is no detector, so the region class probability is the score.
    """
    if valid is None:
        valid = np.ones(p_cls.shape[:-1], dtype=bool)
    cols = params.hyper.classes
    out = []
    for c in ABNORMAL:
        pc = p_cls[..., cols.index(c)]
        if params.hyper.uses_detection:
            out.append(pc * detect_regions(params, H, valid, c))
        else:
            out.append(np.where(valid, pc, 0.0))
    return np.stack(out, axis=-1)


# ---------------------------------------------------------------- batched forward / backward

def pad_batch(features: Sequence[np.ndarray]) -> tuple[np.ndarray, np.ndarray]:
    """Stack ragged (m_b, d) bags into (B, M, d) plus a (B, M) validity mask."""
    if not features:
        raise ValueError("empty batch")
    d = features[0].shape[1]
    m_max = max(f.shape[0] for f in features)
    X = np.zeros((len(features), m_max, d))
    valid = np.zeros((len(features), m_max), dtype=bool)
    for b, f in enumerate(features):
        if f.shape[0] == 0:
            raise ValueError(f"image {b} in batch has no regions")
        if f.shape[1] != d:
            raise ValueError("inconsistent feature dimensions within batch")
        X[b, :f.shape[0]] = f
        valid[b, :f.shape[0]] = True
    return X, valid


@dataclass
class ForwardTrace:
    X: np.ndarray          # (B, M, d)
    valid: np.ndarray      # (B, M)
    Z: np.ndarray          # encoder pre-activation
    drop: np.ndarray       # dropout multipliers (ones at inference)
    H: np.ndarray          # encoder output after dropout
    p_cls: np.ndarray      # (B, M, C)
    sel: np.ndarray        # (B, M, 2) selection masks for (M, B)
    p_det: np.ndarray      # (B, M, 2)
    posterior: np.ndarray  # (B, 2) p(y_M=1|x), p(y_B=1|x)
    argmax: np.ndarray     # (B, 2) region index used in max-region mode

    @property
    def p_m(self) -> np.ndarray:
        return self.posterior[:, 0]

    @property
    def p_b(self) -> np.ndarray:
        return self.posterior[:, 1]


def forward(params: ModelParams, features, training: bool = False,
            rng: np.random.Generator | None = None,
            dropout: np.ndarray | None = None,
            selection: np.ndarray | None = None) -> ForwardTrace:
    """Run the model on a batch.

    ``features`` is a list of (m_b, d) arrays or an already padded (X, valid) pair.
    ``dropout`` / ``selection`` pin the random dropout multipliers and the k-hot
    masks, e.g. to reproduce a trace while differentiating numerically.
    """
    X, valid = features if isinstance(features, tuple) else pad_batch(features)
    X = np.asarray(X, dtype=np.float64)
    hp = params.hyper
    if X.shape[-1] != params.d:
        raise ValueError(f"feature dimension {X.shape[-1]} != model input dimension {params.d}")
    W3 = params["W3"].astype(np.float64)
    Z = X @ W3.T + params["b3"].astype(np.float64)
    A = np.maximum(Z, 0.0)
    if dropout is None:
        if training and hp.dropout_rate > 0:
            rng = rng if rng is not None else np.random.default_rng()
            dropout = (rng.random(A.shape) >= hp.dropout_rate) / (1.0 - hp.dropout_rate)
        else:
            dropout = np.ones_like(A)
    H = A * dropout
    p_cls = softmax(H @ params.cls_heads().astype(np.float64).T)
    cols = hp.classes

    n_img, m = valid.shape
    sel = np.zeros((n_img, m, 2))
    p_det = np.zeros((n_img, m, 2))
    posterior = np.zeros((n_img, 2))
    argmax = np.zeros((n_img, 2), dtype=int)
    for j, c in enumerate(ABNORMAL):
        pc = p_cls[..., cols.index(c)]
        if not hp.uses_detection:
            masked = np.where(valid, pc, -np.inf)
            argmax[:, j] = masked.argmax(axis=-1)  # first index on ties
            posterior[:, j] = np.take_along_axis(pc, argmax[:, j:j + 1], axis=-1)[:, 0]
            continue
        if selection is not None:
            sel[..., j] = selection[..., j]
        elif hp.uses_selection:
            sel[..., j] = select_regions(pc, hp.k, valid)
        else:
            sel[..., j] = valid
        p_det[..., j] = masked_softmax(H @ params[f"u_{c}"].astype(np.float64), sel[..., j])
        posterior[:, j] = image_posterior(pc, p_det[..., j])
    return ForwardTrace(X, valid, Z, dropout, H, p_cls, sel, p_det, posterior, argmax)


def _label_prob(posterior: np.ndarray, labels: np.ndarray) -> np.ndarray:
    return np.where(labels == 1, posterior, 1.0 - posterior)


def l2_term(params: ModelParams) -> float:
    active = params.hyper.active_tensors()
    total = sum(float(np.sum(params[n].astype(np.float64) ** 2)) for n in WEIGHT_NAMES if n in active)
    return 0.5 * params.hyper.l2 * total


def loss(params: ModelParams, trace: ForwardTrace, labels) -> float:
    """Mean over images of the summed per-class log-loss, plus the l2 penalty."""
    labels = np.asarray(labels).reshape(-1, 2)
    q = np.clip(_label_prob(trace.posterior, labels), EPS, 1 - EPS)
    return float(-np.log(q).sum(axis=1).mean()) + l2_term(params)


def backward(params: ModelParams, trace: ForwardTrace, labels) -> dict[str, np.ndarray]:
    """Exact gradient of ``loss`` with selection and dropout masks held fixed."""
    labels = np.asarray(labels).reshape(-1, 2)
    hp = params.hyper
    cols = hp.classes
    n_img = labels.shape[0]
    P = trace.posterior
    q = _label_prob(P, labels)
    inside = (q > EPS) & (q < 1 - EPS)
    # d(-log q)/dP, zero where the clamp is active
    dP = np.where(inside, np.where(labels == 1, -1.0, 1.0) / np.where(inside, q, 1.0), 0.0) / n_img

    H = trace.H
    dp_cls = np.zeros_like(trace.p_cls)
    dT = np.zeros(trace.p_det.shape)
    for j, c in enumerate(ABNORMAL):
        ci = cols.index(c)
        if not hp.uses_detection:
            rows = np.arange(n_img)
            dp_cls[rows, trace.argmax[:, j], ci] += dP[:, j]
            continue
        pd = trace.p_det[..., j]
        pc = trace.p_cls[..., ci]
        dp_cls[..., ci] += dP[:, j, None] * pd
        dT[..., j] = dP[:, j, None] * pd * (pc - P[:, j, None])

    p = trace.p_cls
    dS = p * (dp_cls - (dp_cls * p).sum(axis=-1, keepdims=True))
    heads = params.cls_heads().astype(np.float64)
    grads = {name: np.zeros_like(params[name], dtype=np.float64) for name in TENSOR_NAMES}
    H2 = H.reshape(-1, H.shape[-1])
    dW_cls = dS.reshape(-1, dS.shape[-1]).T @ H2
    for ci, c in enumerate(cols):
        grads[f"w_{c}"] = dW_cls[ci]
    dH = dS @ heads
    if hp.uses_detection:
        for j, c in enumerate(ABNORMAL):
            grads[f"u_{c}"] = dT[..., j].reshape(-1) @ H2
            dH += dT[..., j, None] * params[f"u_{c}"].astype(np.float64)
    dZ = dH * trace.drop * (trace.Z > 0)
    grads["W3"] = dZ.reshape(-1, dZ.shape[-1]).T @ trace.X.reshape(-1, trace.X.shape[-1])
    grads["b3"] = dZ.sum(axis=(0, 1))

    if hp.l2:
        active = hp.active_tensors()
        for name in WEIGHT_NAMES:
            if name in active:
                grads[name] = grads[name] + hp.l2 * params[name].astype(np.float64)
    return grads


# ---------------------------------------------------------------- checkpoints

CKPT_MAGIC = b"WSDB1"
CKPT_VERSION = 1


class CheckpointError(Exception):
    pass


def write_checkpoint(path: str | Path, tensors: dict[str, np.ndarray], meta: dict[str, object]) -> None:
    """Named float32 tensors followed by a key=value metadata block."""
    buf = bytearray(CKPT_MAGIC)
    buf += struct.pack("<II", CKPT_VERSION, len(tensors))
    for name, arr in tensors.items():
        arr = np.asarray(arr)
        if arr.dtype != np.float32:
            raise CheckpointError(f"tensor {name!r} must be float32 to serialize exactly")
        raw = name.encode("utf-8")
        buf += struct.pack("<H", len(raw)) + raw
        buf += struct.pack("<B", arr.ndim)
        buf += struct.pack(f"<{arr.ndim}I", *arr.shape)
        buf += arr.astype("<f4").tobytes()
    for key, value in meta.items():
        if "\n" in str(value) or "=" in key:
            raise CheckpointError(f"bad metadata entry {key!r}")
        buf += f"{key}={value}\n".encode("utf-8")
    Path(path).write_bytes(bytes(buf))


def read_checkpoint(path: str | Path) -> tuple[dict[str, np.ndarray], dict[str, str]]:
    data = Path(path).read_bytes()
    if data[:5] != CKPT_MAGIC:
        raise CheckpointError(f"{path}: bad magic {data[:5]!r}")
    try:
        version, count = struct.unpack_from("<II", data, 5)
        if version != CKPT_VERSION:
            raise CheckpointError(f"{path}: checkpoint version {version}, expected {CKPT_VERSION}")
        pos = 13
        tensors = {}
        for _ in range(count):
            (n,) = struct.unpack_from("<H", data, pos)
            name = data[pos + 2:pos + 2 + n].decode("utf-8")
            pos += 2 + n
            (rank,) = struct.unpack_from("<B", data, pos)
            shape = struct.unpack_from(f"<{rank}I", data, pos + 1)
            pos += 1 + 4 * rank
            size = int(np.prod(shape, dtype=np.int64))
            if pos + 4 * size > len(data):
                raise CheckpointError(f"{path}: truncated tensor {name!r}")
            tensors[name] = np.frombuffer(data, "<f4", size, pos).astype(np.float32).reshape(shape)
            pos += 4 * size
    except struct.error as exc:
        raise CheckpointError(f"{path}: truncated checkpoint ({exc})") from None
    meta = {}
    for line in data[pos:].decode("utf-8").splitlines():
        if line:
            key, _, value = line.partition("=")
            meta[key] = value
    return tensors, meta


def hyper_to_meta(hp: Hyper) -> dict[str, object]:
    return {"k": hp.k, "l2": repr(hp.l2), "dropout_rate": repr(hp.dropout_rate), "mode": hp.mode}


def hyper_from_meta(meta: dict[str, str]) -> Hyper:
    return Hyper(k=int(meta["k"]), l2=float(meta["l2"]),
                 dropout_rate=float(meta["dropout_rate"]), mode=meta["mode"])


def save_params(path: str | Path, params: ModelParams, extra: dict | None = None) -> None:
    tensors = {n: params[n].astype(np.float32) for n in TENSOR_NAMES}
    write_checkpoint(path, tensors, {**hyper_to_meta(params.hyper), **(extra or {})})


def load_params(path: str | Path) -> tuple[ModelParams, dict[str, str]]:
    tensors, meta = read_checkpoint(path)
    missing = [n for n in TENSOR_NAMES if n not in tensors]
    if missing:
        raise CheckpointError(f"{path}: missing tensors {missing}")
    params = ModelParams({n: tensors[n] for n in TENSOR_NAMES}, hyper_from_meta(meta))
    h, d = params["W3"].shape
    for n in TENSOR_NAMES[1:]:
        if params[n].shape != (h,):
            raise CheckpointError(f"{path}: tensor {n} has shape {params[n].shape}, expected ({h},)")
    return params, meta
