"""Numeric building blocks with hand-derived backward passes.

Parameters live in a plain ``dict`` keyed by the checkpoint tensor names
(``PARAM_NAMES``).  Matrices act on column vectors, i.e. ``y = W @ x``; for a
batch stored row-wise that is ``Y = X @ W.T``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import kernels

PARAM_NAMES = (
    "emb",
    "gru.Wz", "gru.Uz", "gru.bz",
    "gru.Wr", "gru.Ur", "gru.br",
    "gru.Wh", "gru.Uh", "gru.bh",
    "fc.W", "fc.b",
    "Wv", "Wt",
)

DEFAULT_TEXT_DIM = 1024
DEFAULT_JOINT_DIM = 1024
DEFAULT_WORD_DIM = 300
DEFAULT_DROPOUT = 0.5


class NumericError(Exception):
    """Non-finite values or a failed numerical check (CLI exit code 3)."""


class NonDeterministicProbe(NumericError):
    pass


# ---------------------------------------------------------------------------
# Parameters
# ---------------------------------------------------------------------------


def _uniform(rng, shape, fan_in):
    bound = 1.0 / math.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape)


def init_params(vocab_size, feature_dim, rng, text_dim=DEFAULT_TEXT_DIM, joint_dim=DEFAULT_JOINT_DIM,
                word_dim=DEFAULT_WORD_DIM, dtype=np.float32, pretrained_emb=None):
    """Fresh parameters drawn from ``rng`` in ``PARAM_NAMES`` order.

    Weights are uniform in +-1/sqrt(fan_in), biases zero and word embeddings
    normal(0, 0.01) unless ``pretrained_emb`` is given.
    """
    T, V, D, E = text_dim, feature_dim, joint_dim, word_dim
    p = {}
    if pretrained_emb is not None:
        emb = np.asarray(pretrained_emb)
        if emb.shape != (vocab_size, E):
            raise ValueError(f"pretrained embeddings have shape {emb.shape}, expected {(vocab_size, E)}")
        p["emb"] = emb.copy()
    else:
        p["emb"] = rng.normal(0.0, 0.01, size=(vocab_size, E))
    for gate in "zrh":
        p[f"gru.W{gate}"] = _uniform(rng, (T, E), E)
        p[f"gru.U{gate}"] = _uniform(rng, (T, T), T)
        p[f"gru.b{gate}"] = np.zeros(T)
    p["fc.W"] = _uniform(rng, (T, V), V)
    p["fc.b"] = np.zeros(T)
    p["Wv"] = _uniform(rng, (D, V), V)
    p["Wt"] = _uniform(rng, (D, T), T)
    return {k: np.ascontiguousarray(p[k], dtype=dtype) for k in PARAM_NAMES}


def param_dims(params) -> dict:
    """Infer and cross-check ``vocab, word, text, feature, joint`` sizes."""
    vocab, word = params["emb"].shape
    text = params["gru.Uz"].shape[0]
    feature = params["fc.W"].shape[1]
    joint = params["Wv"].shape[0]
    expected = {
        "emb": (vocab, word),
        "gru.Wz": (text, word), "gru.Uz": (text, text), "gru.bz": (text,),
        "gru.Wr": (text, word), "gru.Ur": (text, text), "gru.br": (text,),
        "gru.Wh": (text, word), "gru.Uh": (text, text), "gru.bh": (text,),
        "fc.W": (text, feature), "fc.b": (text,),
        "Wv": (joint, feature), "Wt": (joint, text),
    }
    missing = [k for k in PARAM_NAMES if k not in params]
    if missing:
        raise ValueError(f"missing parameter tensors: {missing}")
    for name, shape in expected.items():
        if tuple(params[name].shape) != shape:
            raise ValueError(f"parameter {name!r} has shape {params[name].shape}, expected {shape}")
    return {"vocab": vocab, "word": word, "text": text, "feature": feature, "joint": joint}


def params_from_tensors(tensors, dtype=np.float32) -> dict:
    params = {k: np.ascontiguousarray(tensors[k], dtype=dtype) for k in PARAM_NAMES if k in tensors}
    param_dims(params)
    return params


def cast_params(params, dtype) -> dict:
    return {k: np.ascontiguousarray(v, dtype=dtype) for k, v in params.items()}


def zeros_like_params(params) -> dict:
    return {k: np.zeros_like(v) for k, v in params.items()}


# ---------------------------------------------------------------------------
# Sentence encoder: embedding lookup + GRU, final hidden state
# ---------------------------------------------------------------------------


@dataclass
class _GroupCache:
    rows: np.ndarray
    tokens: np.ndarray  # (L, B)
    x: np.ndarray       # (L, B, E)
    hs: np.ndarray
    zs: np.ndarray
    rs: np.ndarray
    cs: np.ndarray


@dataclass
class SentenceCache:
    batch: int
    groups: list = field(default_factory=list)


def embed_sentences(token_lists, params):
    """Encode sentences to their final GRU state; returns ``(W, cache)``.

    Sentences are grouped by length and each group runs as one batch; no
    padding is involved, so every sentence sees exactly its own tokens.
    """
    vocab = params["emb"].shape[0]
    T = params["gru.Uz"].shape[0]
    dtype = params["emb"].dtype
    lengths = {}
    for i, toks in enumerate(token_lists):
        if len(toks) == 0:
            raise ValueError(f"sentence {i} is empty")
        lengths.setdefault(len(toks), []).append(i)
    out = np.zeros((len(token_lists), T), dtype=dtype)
    cache = SentenceCache(len(token_lists))
    for L in sorted(lengths):
        rows = np.asarray(lengths[L], dtype=np.int64)
        tok = np.asarray([token_lists[i] for i in rows], dtype=np.int64).T  # (L, B)
        if tok.min() < 0 or tok.max() >= vocab:
            raise ValueError(f"token id out of range [0, {vocab})")
        x = params["emb"][tok]  # (L, B, E)
        xz = np.ascontiguousarray(x @ params["gru.Wz"].T + params["gru.bz"])
        xr = np.ascontiguousarray(x @ params["gru.Wr"].T + params["gru.br"])
        xh = np.ascontiguousarray(x @ params["gru.Wh"].T + params["gru.bh"])
        hs, zs, rs, cs = kernels.gru_forward(xz, xr, xh, params["gru.Uz"], params["gru.Ur"], params["gru.Uh"])
        out[rows] = hs[-1]
        cache.groups.append(_GroupCache(rows, tok, x, hs, zs, rs, cs))
    return out, cache


def embed_sentences_backward(cache: SentenceCache, dW, params, grads) -> None:
    """Accumulate gradients of the sentence encoder into ``grads``."""
    for g in cache.groups:
        dxz, dxr, dxh, dUz, dUr, dUh = kernels.gru_backward(
            dW[g.rows], g.hs, g.zs, g.rs, g.cs, params["gru.Uz"], params["gru.Ur"], params["gru.Uh"]
        )
        grads["gru.Uz"] += dUz
        grads["gru.Ur"] += dUr
        grads["gru.Uh"] += dUh
        E = g.x.shape[-1]
        x2 = g.x.reshape(-1, E)
        dx = np.zeros_like(g.x)
        for gate, d in (("z", dxz), ("r", dxr), ("h", dxh)):
            d2 = d.reshape(-1, d.shape[-1])
            grads[f"gru.W{gate}"] += d2.T @ x2
            grads[f"gru.b{gate}"] += d2.sum(axis=0)
            dx += d @ params[f"gru.W{gate}"]
        np.add.at(grads["emb"], g.tokens.reshape(-1), dx.reshape(-1, E))


def embed_sentence(tokens, params):
    """Sentence feature ``w`` (length T) for one token sequence."""
    w, _ = embed_sentences([list(tokens)], params)
    return w[0]


# ---------------------------------------------------------------------------
# FC + ReLU + dropout on unit features
# ---------------------------------------------------------------------------


def dropout_mask(rng, shape, rate, dtype):
    """Inverted-dropout mask: kept entries scaled by 1/(1-rate)."""
    if rate <= 0.0:
        return None
    keep = rng.random(shape) >= rate
    return (keep / (1.0 - rate)).astype(dtype)


def fc_video_forward(X, params, mask=None):
    """``relu(X @ W.T + b)``, then the optional dropout mask; X is (n, V)."""
    if X.shape[-1] != params["fc.W"].shape[1]:
        raise ValueError(f"feature dim {X.shape[-1]} != fc input dim {params['fc.W'].shape[1]}")
    pre = X @ params["fc.W"].T + params["fc.b"]
    out = np.maximum(pre, 0)
    if mask is not None:
        out = out * mask
    return out, (X, pre, mask)


def fc_video_backward(cache, dout, grads):
    """Accumulate fc gradients; returns the gradient w.r.t. the input X."""
    X, pre, mask = cache
    if mask is not None:
        dout = dout * mask
    dpre = np.where(pre > 0, dout, 0)
    grads["fc.W"] += dpre.T @ X
    grads["fc.b"] += dpre.sum(axis=0)
    return dpre


def fc_video_transform(v, params, dropout_active=False, rate=DEFAULT_DROPOUT, rng=None):
    """Single-vector convenience wrapper around ``fc_video_forward``."""
    v = np.asarray(v)
    mask = None
    if dropout_active:
        if rng is None:
            raise ValueError("dropout needs a random generator")
        mask = dropout_mask(rng, (1, params["fc.W"].shape[0]), rate, params["fc.W"].dtype)
    out, _ = fc_video_forward(v[None, :], params, mask)
    return out[0]


# ---------------------------------------------------------------------------
# Joint-space projection
# ---------------------------------------------------------------------------


def joint_project(x, W):
    x = np.asarray(x)
    if x.shape[-1] != W.shape[1]:
        raise ValueError(f"cannot project length-{x.shape[-1]} input with a {W.shape} matrix")
    return x @ W.T


def joint_project_backward(x, W, dy):
    """Returns ``(dx, dW)`` for ``y = W @ x`` (row-batched when x is 2-D)."""
    dx = dy @ W
    dW = np.outer(dy, x) if np.ndim(x) == 1 else dy.T @ x
    return dx, dW


# ---------------------------------------------------------------------------
# Adam
# ---------------------------------------------------------------------------


@dataclass
class AdamState:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adam_step(params, grads, state: AdamState) -> None:
    """In-place bias-corrected Adam update of ``params``."""
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise NumericError(f"non-finite gradient for parameter {name!r}")
        if g.shape != params[name].shape:
            raise ValueError(f"gradient shape {g.shape} != parameter shape {params[name].shape} for {name!r}")
    state.step += 1
    t = state.step
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** t
    c2 = 1.0 - b2 ** t
    for name, g in grads.items():
        p = params[name]
        if name not in state.m:
            state.m[name] = np.zeros_like(p)
            state.v[name] = np.zeros_like(p)
        m, v = state.m[name], state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        p -= state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)


# ---------------------------------------------------------------------------
# Finite-difference gradient check
# ---------------------------------------------------------------------------


@dataclass
class GradCheckReport:
    max_rel_error: dict
    checked: dict
    tolerance: float

    @property
    def passed(self) -> bool:
        return all(err < self.tolerance for err in self.max_rel_error.values())

    @property
    def worst(self) -> str:
        return max(self.max_rel_error, key=self.max_rel_error.get)

    def lines(self):
        for name, err in self.max_rel_error.items():
            status = "ok" if err < self.tolerance else "FAIL"
            yield f"{name:8s} coords={self.checked[name]:4d} max_rel_err={err:.3e} {status}"

    def __str__(self):
        verdict = "PASS" if self.passed else f"FAIL (worst: {self.worst})"
        return "\n".join([*self.lines(), f"tolerance={self.tolerance:g} {verdict}"])


def relative_error(analytic, numeric, floor=1e-6):
    """Elementwise ``|a - n| / max(|a|, |n|, floor)``.

    The floor keeps coordinates with (near) zero gradient from producing
    meaningless ratios; there the check is an absolute one at ``floor`` scale.
    """
    analytic = np.asarray(analytic, dtype=np.float64)
    numeric = np.asarray(numeric, dtype=np.float64)
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
    return np.abs(analytic - numeric) / denom


def grad_check(probe, params, step=1e-5, tolerance=1e-4, max_coords=200, seed=0, floor=1e-6):
    """Compare analytic gradients with central differences.

    ``probe(params)`` must return ``(loss, grads)`` and be deterministic.  Up to
    ``max_coords`` coordinates per tensor are sampled (all when fewer).
    """
    params = cast_params(params, np.float64)
    loss0, grads = probe(params)
    loss1, _ = probe(params)
    if loss0 != loss1:
        raise NonDeterministicProbe(f"probe returned {loss0!r} then {loss1!r} for identical parameters")
    rng = np.random.default_rng(seed)
    errs, counts = {}, {}
    for name, p in params.items():
        if name not in grads:
            continue
        flat = p.reshape(-1)
        n = flat.size
        idx = np.arange(n) if n <= max_coords else np.sort(rng.choice(n, size=max_coords, replace=False))
        numeric = np.empty(len(idx))
        for j, i in enumerate(idx):
            orig = flat[i]
            flat[i] = orig + step
            lp, _ = probe(params)
            flat[i] = orig - step
            lm, _ = probe(params)
            flat[i] = orig
            numeric[j] = (lp - lm) / (2.0 * step)
        analytic = np.asarray(grads[name], dtype=np.float64).reshape(-1)[idx]
        errs[name] = float(relative_error(analytic, numeric, floor).max()) if len(idx) else 0.0
        counts[name] = len(idx)
    return GradCheckReport(errs, counts, tolerance)
