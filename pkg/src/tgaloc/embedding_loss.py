"""Joint-space projections and the bidirectional triplet ranking loss."""

from __future__ import annotations

import math

import numpy as np

from . import nn_core, tga


def joint_similarity(vp, tp):
    """Cosine of two joint-space points (0 for a zero-norm input)."""
    return tga.cosine(vp, tp)


def negative_mask(video_ids, query_ids, strict=False):
    """``mask[i, j]`` is True when entry ``j`` is a negative for anchor ``i``.

    By default entries showing the anchor's own video are never negatives, so
    a video is not pushed away from its other sentences.  ``strict`` keeps
    every entry whose (video, query) pair differs from the anchor's.
    """
    vids = np.asarray(video_ids, dtype=object)
    if strict:
        qids = np.asarray(query_ids, dtype=object)
        same = (vids[:, None] == vids[None, :]) & (qids[:, None] == qids[None, :])
    else:
        same = vids[:, None] == vids[None, :]
    return ~same


def hinge_from_similarity(S, neg, margin):
    """Loss and ``dL/dS`` for a similarity table ``S[i, j] = S(v_i, t_j)``.

    Per anchor ``i`` and negative ``j``: ``max(0, m - S_ii + S_ij)`` (negative
    text) and ``max(0, m - S_ii + S_ji)`` (negative video), summed.
    """
    S = np.asarray(S, dtype=np.float64)
    diag = np.diag(S)
    h_text = np.where(neg, margin - diag[:, None] + S, 0.0)
    h_video = np.where(neg, margin - diag[:, None] + S.T, 0.0)
    act_text = neg & (h_text > 0)
    act_video = neg & (h_video > 0)
    # exact, order-independent sum of the active terms
    loss = math.fsum(np.concatenate([np.sort(h_text[act_text]), np.sort(h_video[act_video])]).tolist())
    G = act_text.astype(np.float64) + act_video.T.astype(np.float64)
    G[np.diag_indices_from(G)] -= act_text.sum(axis=1) + act_video.sum(axis=1)
    return loss, G


def _normalize(X):
    norms = np.linalg.norm(X, axis=1)
    inv = np.zeros_like(norms)
    inv[norms > 0] = 1.0 / norms[norms > 0]
    return X * inv[:, None], inv


def _normalize_backward(Xn, inv, dXn):
    return (dXn - np.sum(dXn * Xn, axis=1, keepdims=True) * Xn) * inv[:, None]


def triplet_loss(VP, TP, video_ids, query_ids, margin, strict=False):
    """Triplet ranking loss over a batch of joint points.

    Returns ``(loss, dVP, dTP)``; the loss is the raw sum over all anchors.
    """
    VP = np.asarray(VP)
    TP = np.asarray(TP)
    B = VP.shape[0]
    if B < 2:
        raise ValueError(f"batch size {B} < 2: no negatives exist")
    if margin < 0:
        raise ValueError(f"negative margin {margin}")
    VPn, inv_v = _normalize(VP)
    TPn, inv_t = _normalize(TP)
    S = VPn @ TPn.T
    loss, G = hinge_from_similarity(S, negative_mask(video_ids, query_ids, strict), margin)
    G = G.astype(VP.dtype)
    dVP = _normalize_backward(VPn, inv_v, G @ TPn)
    dTP = _normalize_backward(TPn, inv_t, G.T @ VPn)
    return loss, dVP, dTP


def batch_forward(batch, params, margin, rng=None, dropout=nn_core.DEFAULT_DROPOUT, train=True,
                  strict=False):
    """Loss and gradients for every parameter over one batch.

    ``batch`` is a sequence of ``(units, query)`` where ``units`` is the
    ``(n, V)`` feature matrix of the query's video and ``query`` exposes
    ``query_id``, ``video_id`` and ``tokens``.  With ``train`` a dropout mask
    per pair is drawn from ``rng`` in batch order.
    """
    dtype = params["fc.W"].dtype
    T = params["gru.Uz"].shape[0]
    W, sent_cache = nn_core.embed_sentences([q.tokens for _, q in batch], params)

    caches, F = [], []
    for i, (units, _) in enumerate(batch):
        units = np.asarray(units, dtype=dtype)
        mask = None
        if train and dropout > 0:
            mask = nn_core.dropout_mask(rng, (units.shape[0], T), dropout, dtype)
        f, cache = tga.tga_forward(W[i], units, params, mask)
        F.append(f)
        caches.append(cache)
    F = np.stack(F)

    VP = nn_core.joint_project(F, params["Wv"])
    TP = nn_core.joint_project(W, params["Wt"])
    loss, dVP, dTP = triplet_loss(
        VP, TP, [q.video_id for _, q in batch], [q.query_id for _, q in batch], margin, strict
    )

    grads = nn_core.zeros_like_params(params)
    dF, grads["Wv"] = nn_core.joint_project_backward(F, params["Wv"], dVP)
    dW, grads["Wt"] = nn_core.joint_project_backward(W, params["Wt"], dTP)
    for i, cache in enumerate(caches):
        dW[i] += tga.tga_backward(cache, dF[i], grads)
    nn_core.embed_sentences_backward(sent_cache, dW, params, grads)
    return loss, grads
