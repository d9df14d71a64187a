"""Text-guided attention over the temporal units of one video.

For a sentence feature ``w`` and unit features ``v_1..v_n``: transform each
unit with the FC layer, take cosine similarity with ``w``, softmax over time,
and pool the *raw* unit features with the resulting weights.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass

import numpy as np

from . import nn_core

SUM_TOLERANCE = 1e-6


def cosine(a, b, return_flag=False):
    """Cosine similarity; a zero-norm input gives 0 (flagged as degenerate)."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"length mismatch {a.shape} vs {b.shape}")
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    degenerate = bool(na == 0 or nb == 0)
    value = 0.0 if degenerate else float(np.clip(a @ b / (na * nb), -1.0, 1.0))
    return (value, degenerate) if return_flag else value


def _safe_inverse(norms):
    out = np.zeros_like(norms)
    nz = norms > 0
    out[nz] = 1.0 / norms[nz]
    return out


def similarity_row(w, vbar):
    """Cosine between ``w`` (T,) and each row of ``vbar`` (n, T)."""
    w = np.asarray(w)
    vbar = np.asarray(vbar)
    if vbar.ndim != 2 or vbar.shape[1] != w.shape[0]:
        raise ValueError(f"length mismatch: w has {w.shape[0]} entries, unit features are {vbar.shape}")
    inv_w = _safe_inverse(np.linalg.norm(w, keepdims=True))[0]
    inv_v = _safe_inverse(np.linalg.norm(vbar, axis=1))
    return (vbar @ w) * inv_v * inv_w


def similarity_row_backward(w, vbar, s, ds):
    """Gradients ``(dw, dvbar)`` of ``sum(ds * s)``; degenerate rows get zero."""
    nw = np.linalg.norm(w)
    nv = np.linalg.norm(vbar, axis=1)
    inv_w = 1.0 / nw if nw > 0 else 0.0
    inv_v = _safe_inverse(nv)
    # ds_k * (vbar_k / (|v||w|) - s_k w / |w|^2)
    coef = ds * inv_v * inv_w
    dw = coef @ vbar - (ds @ s) * w * inv_w * inv_w
    dvbar = np.outer(coef, w) - (ds * s * inv_v * inv_v)[:, None] * vbar
    return dw, dvbar


def temporal_softmax(s):
    s = np.asarray(s)
    if s.ndim != 1 or s.shape[0] < 1:
        raise ValueError("similarity row must be a non-empty vector")
    if not np.all(np.isfinite(s)):
        raise nn_core.NumericError("non-finite similarity values")
    e = np.exp(s - s.max())
    return e / e.sum()


def softmax_backward(a, da):
    return a * (da - a @ da)


def attention_pool(a, units):
    a = np.asarray(a)
    units = np.asarray(units)
    if units.ndim != 2 or units.shape[0] != a.shape[0]:
        raise ValueError(f"{a.shape[0]} attention weights for {units.shape[0]} units")
    return a @ units


@dataclass(frozen=True, eq=False)
class AttentionTrace:
    query_id: str
    video_id: str
    weights: np.ndarray

    def __post_init__(self):
        w = np.asarray(self.weights, dtype=np.float64)
        if w.ndim != 1 or w.size < 1:
            raise ValueError("attention weights must be a non-empty vector")
        if abs(w.sum() - 1.0) > SUM_TOLERANCE:
            raise ValueError(f"attention weights sum to {w.sum()!r}, not 1")
        if w.min() < 0.0 or w.max() > 1.0:
            raise ValueError("attention weights outside [0, 1]")
        w.setflags(write=False)
        object.__setattr__(self, "weights", w)

    def to_json(self) -> dict:
        return {"query_id": self.query_id, "video_id": self.video_id, "weights": [float(x) for x in self.weights]}


@dataclass
class TGACache:
    units: np.ndarray
    w: np.ndarray
    vbar: np.ndarray
    fc_cache: tuple
    s: np.ndarray
    a: np.ndarray


def tga_forward(w, units, params, mask=None):
    """Pooled feature ``f`` plus a cache for ``tga_backward``."""
    vbar, fc_cache = nn_core.fc_video_forward(units, params, mask)
    s = similarity_row(w, vbar)
    a = temporal_softmax(s)
    f = attention_pool(a, units)
    return f, TGACache(units, w, vbar, fc_cache, s, a)


def tga_backward(cache: TGACache, df, grads):
    """Accumulate fc gradients into ``grads``; returns the gradient w.r.t. ``w``."""
    da = cache.units @ df
    ds = softmax_backward(cache.a, da)
    dw, dvbar = similarity_row_backward(cache.w, cache.vbar, cache.s, ds)
    nn_core.fc_video_backward(cache.fc_cache, dvbar, grads)
    return dw


def text_guided_feature(w, video, params, mode="eval", rng=None, dropout=nn_core.DEFAULT_DROPOUT,
                        query_id=""):
    """Sentence-specific pooled video feature and its attention trace.

    ``video`` is a ``VideoFeatures`` (or a bare ``(n, V)`` array).  In
    ``"train"`` mode a dropout mask is drawn from ``rng``; ``"eval"`` is
    deterministic.
    """
    if mode not in ("train", "eval"):
        raise ValueError(f"mode must be 'train' or 'eval', not {mode!r}")
    units = getattr(video, "units", video)
    video_id = getattr(video, "video_id", "")
    dtype = params["fc.W"].dtype
    units = np.asarray(units, dtype=dtype)
    mask = None
    if mode == "train":
        if rng is None:
            raise ValueError("train mode needs a random generator for dropout")
        mask = nn_core.dropout_mask(rng, (units.shape[0], params["fc.W"].shape[0]), dropout, dtype)
    f, cache = tga_forward(np.asarray(w, dtype=dtype), units, params, mask)
    return f, AttentionTrace(query_id, video_id, cache.a)


def write_traces_jsonl(traces, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for t in traces:
            fh.write(json.dumps(t.to_json()) + "\n")


def read_traces_jsonl(path) -> list:
    with open(path, encoding="utf-8") as fh:
        return [AttentionTrace(d["query_id"], d["video_id"], d["weights"]) for d in map(json.loads, fh) if d]


def write_trace_csv(trace: AttentionTrace, path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        out = csv.writer(fh)
        out.writerow(["unit_index", "weight"])
        for k, a in enumerate(trace.weights):
            out.writerow([k, repr(float(a))])
