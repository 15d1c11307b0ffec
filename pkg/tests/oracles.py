"""Slow, obviously-correct reference implementations used by the tests."""
import math

import numpy as np

from dbmil import evaluation as ev
from dbmil import model as mdl


def naive_forward(params: mdl.ModelParams, X: np.ndarray) -> dict:
    """Loop-by-loop evaluation of one image (m, d) at inference; returns p_cls, masks, p_det, posteriors."""
    hp = params.hyper
    T = {k: np.asarray(v, dtype=np.float64) for k, v in params.tensors.items()}
    m = X.shape[0]
    H = []
    for i in range(m):
        h = []
        for r in range(T["W3"].shape[0]):
            s = T["b3"][r]
            for j in range(X.shape[1]):
                s += T["W3"][r, j] * X[i, j]
            h.append(max(s, 0.0))
        H.append(h)
    cols = hp.classes
    dot = lambda w, h: sum(a * b for a, b in zip(w, h))
    p_cls = []
    for h in H:
        logits = [dot(T[f"w_{c}"], h) for c in cols]
        top = max(logits)
        e = [math.exp(z - top) for z in logits]
        p_cls.append([v / sum(e) for v in e])
    out = {"p_cls": np.array(p_cls), "mask": {}, "p_det": {}, "posterior": {}}
    for c in mdl.ABNORMAL:
        pc = [row[cols.index(c)] for row in p_cls]
        if not hp.uses_detection:
            out["posterior"][c] = max(pc)
            continue
        if hp.uses_selection:
            ranked = sorted(range(m), key=lambda i: (-pc[i], i))
            chosen = set(ranked[:min(hp.k, m)])
        else:
            chosen = set(range(m))
        mask = [1.0 if i in chosen else 0.0 for i in range(m)]
        logits = [dot(T[f"u_{c}"], h) for h in H]
        top = max(logits[i] for i in chosen)
        e = [mask[i] * math.exp(logits[i] - top) if mask[i] else 0.0 for i in range(m)]
        det = [v / sum(e) for v in e]
        out["mask"][c] = np.array(mask)
        out["p_det"][c] = np.array(det)
        out["posterior"][c] = sum(det[i] * pc[i] for i in range(m))
    return out


def random_instance(rng: np.random.Generator, mode: str, m: int = 8, d: int = 8, hidden: int = 8,
                    k: int = 3, l2: float = 1e-3, scale: float = 1.0):
    hyper = mdl.Hyper(k=k, l2=l2, dropout_rate=0.0, mode=mode)
    params = mdl.init_params(int(rng.integers(2**31)), d, hidden, hyper)
    for name in params.tensors:
        params.tensors[name] = params.tensors[name] * scale + (rng.normal(size=params[name].shape) * 0.1
                                                                if name == "b3" else 0.0)
    X = rng.normal(size=(m, d))
    labels = rng.integers(0, 2, size=2)
    return params, X, labels


def finite_difference(params: mdl.ModelParams, batch, labels, trace: mdl.ForwardTrace,
                      step: float = 1e-5) -> dict[str, np.ndarray]:
    """Central differences with the trace's selection and dropout masks pinned."""
    grads = {}
    for name, arr in params.tensors.items():
        g = np.zeros_like(arr, dtype=np.float64)
        for idx in np.ndindex(arr.shape):
            vals = []
            for sign in (1, -1):
                p = params.copy()
                p.tensors[name] = p.tensors[name].astype(np.float64).copy()
                p.tensors[name][idx] += sign * step
                t = mdl.forward(p, batch, dropout=trace.drop, selection=trace.sel)
                vals.append(mdl.loss(p, t, labels))
            g[idx] = (vals[0] - vals[1]) / (2 * step)
        grads[name] = g
    return grads


def relative_error(a: np.ndarray, b: np.ndarray, floor: float = 1e-8) -> float:
    a, b = np.asarray(a, float), np.asarray(b, float)
    if a.size == 0:
        return 0.0
    return float(np.max(np.abs(a - b) / np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)))


def concordance(scores, labels):
    pos = scores[labels == 1]
    neg = scores[labels == 0]
    total = 0.0
    for p in pos:
        for n in neg:
            total += 1.0 if p > n else 0.5 if p == n else 0.0
    return total / (len(pos) * len(neg))


def diagonal_curve(n=10):
    # n positives and n negatives interleaved so every threshold step adds one of each
    scores = np.repeat(np.arange(n, dtype=float), 2)
    labels = np.tile([1, 0], n)
    return ev.roc_curve(scores, labels)
