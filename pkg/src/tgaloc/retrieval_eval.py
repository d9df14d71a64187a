"""Moment localization from attention traces, and R@K / mIoU metrics."""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field

import numpy as np

from . import dataio, kernels, nn_core, tga

PROTOCOLS = ("sliding_window", "didemo")
# scores are compared after rounding so float noise cannot break exact ties
_TIE_DECIMALS = 12


class MissingGroundTruth(dataio.DataError):
    pass


@dataclass(frozen=True)
class MomentCandidate:
    start_unit: int
    end_unit: int
    score: float = 0.0

    @property
    def interval(self):
        return (self.start_unit, self.end_unit)


def iou(a, b) -> float:
    """Temporal IoU of half-open intervals ``[start, end)``."""
    (s1, e1), (s2, e2) = a, b
    if e1 <= s1 or e2 <= s2:
        raise ValueError(f"degenerate interval in iou({a}, {b})")
    inter = max(0, min(e1, e2) - max(s1, s2))
    return inter / (max(e1, e2) - min(s1, s2))


def _round_half_up(x):
    return int(math.floor(x + 0.5))


def sliding_window_candidates(num_units, unit_duration_frames, window_frames, stride_fraction=0.5):
    """Fixed-length windows over the unit axis, deduplicated across lengths.

    Each window covers ``frames / unit_duration_frames`` units, starts advance
    by ``max(1, round(stride_fraction * length))`` and a right-aligned window
    closes any uncovered tail.  Videos shorter than a window get the whole
    video for that length.
    """
    if not window_frames:
        raise ValueError("empty window list")
    if not 0 < stride_fraction <= 1:
        raise ValueError(f"stride_fraction {stride_fraction} outside (0, 1]")
    if num_units < 1:
        raise ValueError("num_units must be positive")
    out = []
    for frames in window_frames:
        if frames <= 0 or frames % unit_duration_frames:
            raise ValueError(f"window of {frames} frames is not a multiple of {unit_duration_frames}")
        length = frames // unit_duration_frames
        if length >= num_units:
            out.append((0, num_units))
            continue
        stride = max(1, _round_half_up(stride_fraction * length))
        starts = list(range(0, num_units - length + 1, stride))
        if starts[-1] + length < num_units:
            starts.append(num_units - length)
        out.extend((s, s + length) for s in starts)
    return list(dict.fromkeys(out))


def didemo_candidates(num_segments):
    """All contiguous spans ``[i, j)`` over the segments: n(n+1)/2 of them."""
    if num_segments < 1:
        raise ValueError("num_segments must be positive")
    return [(i, j) for i in range(num_segments) for j in range(i + 1, num_segments + 1)]


def candidates_for(protocol, num_units, unit_duration_frames=16, windows=(128, 256), stride=0.5):
    if protocol == "didemo":
        return didemo_candidates(num_units)
    if protocol == "sliding_window":
        return sliding_window_candidates(num_units, unit_duration_frames, windows, stride)
    raise ValueError(f"unknown protocol {protocol!r}")


def rank_candidates(candidates, scores):
    """Descending score; ties go to the earlier start, then the shorter span."""
    keys = [(-round(float(s), _TIE_DECIMALS), c[0], c[1] - c[0]) for c, s in zip(candidates, scores)]
    order = sorted(range(len(candidates)), key=keys.__getitem__)
    return [MomentCandidate(candidates[i][0], candidates[i][1], float(scores[i])) for i in order]


def score_candidates(weights, candidates, use_sum=False):
    """Score each interval by the mean (or sum) attention over its units, ranked."""
    weights = np.asarray(getattr(weights, "weights", weights), dtype=np.float64)
    if not candidates:
        return []
    arr = np.asarray(candidates, dtype=np.int64).reshape(-1, 2)
    if arr[:, 0].min() < 0 or arr[:, 1].max() > weights.shape[0] or np.any(arr[:, 1] <= arr[:, 0]):
        raise ValueError(f"candidate outside trace of length {weights.shape[0]}")
    scores = kernels.interval_scores(weights, arr[:, 0], arr[:, 1], use_sum)
    return rank_candidates([tuple(c) for c in arr.tolist()], scores)


# ---------------------------------------------------------------------------
# Metrics
# ---------------------------------------------------------------------------


def recall_table(top_ious, ks, thresholds):
    """``{(k, tau): percent}`` from per-query IoU arrays of the ranked candidates."""
    n = len(top_ious)
    table = {}
    for k in ks:
        for tau in thresholds:
            hits = sum(1 for ious in top_ious if np.any(np.asarray(ious[:k]) >= tau))
            table[(k, tau)] = 100.0 * hits / n
    return table


def mean_iou(top_ious):
    return math.fsum(float(ious[0]) for ious in top_ious) / len(top_ious)


@dataclass
class QueryResult:
    query_id: str
    video_id: str
    gt_moment: tuple
    num_candidates: int
    top: list  # of (MomentCandidate, iou)


@dataclass
class EvalReport:
    protocol: str
    ks: tuple
    thresholds: tuple
    recall: dict
    miou: float
    queries: list = field(default_factory=list)
    extra: dict = field(default_factory=dict)

    def to_json(self) -> dict:
        return {
            "protocol": self.protocol,
            "ks": list(self.ks),
            "iou_thresholds": list(self.thresholds),
            "recall": {f"R@{k}": {f"{t:g}": self.recall[(k, t)] for t in self.thresholds} for k in self.ks},
            "miou": self.miou,
            **self.extra,
            "queries": [
                {
                    "query_id": q.query_id,
                    "video_id": q.video_id,
                    "gt_moment": list(q.gt_moment),
                    "num_candidates": q.num_candidates,
                    "top": [{"start": c.start_unit, "end": c.end_unit, "score": c.score, "iou": i}
                            for c, i in q.top],
                }
                for q in self.queries
            ],
        }

    def table(self) -> str:
        head = "        " + "".join(f"  IoU={t:<5g}" for t in self.thresholds)
        rows = [head]
        for k in self.ks:
            rows.append(f"R@{k:<5d} " + "".join(f"  {self.recall[(k, t)]:9.2f}" for t in self.thresholds))
        rows.append(f"mIoU     {self.miou:.4f}")
        return "\n".join(rows)


def write_report_json(report: EvalReport, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(report.to_json(), fh, indent=1)
        fh.write("\n")


def write_report_csv(report: EvalReport, path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        out = csv.writer(fh)
        out.writerow(["query_id", "rank", "start", "end", "score", "iou"])
        for q in report.queries:
            for r, (c, i) in enumerate(q.top, 1):
                out.writerow([q.query_id, r, c.start_unit, c.end_unit, repr(c.score), repr(i)])


def localize(params, query, video, protocol="sliding_window", windows=(128, 256), stride=0.5,
             use_sum=False):
    """Ranked candidates and the attention trace for one query on its video."""
    w = nn_core.embed_sentence(query.tokens, params)
    _, trace = tga.text_guided_feature(w, video, params, mode="eval", query_id=query.query_id)
    cands = candidates_for(protocol, trace.weights.shape[0], video.unit_duration_frames, windows, stride)
    return score_candidates(trace.weights, cands, use_sum), trace


def evaluate(params, manifest, split="test", protocol="sliding_window", iou_thresholds=(0.3, 0.5, 0.7),
             ks=(1, 5, 10), windows=(128, 256), stride=0.5, use_sum=False, shuffle_rng=None) -> EvalReport:
    """R@K at each IoU threshold and mIoU over one split.

    With ``shuffle_rng`` the attention scores are replaced by uniform random
    draws, which gives the shuffled-score baseline on the same candidates.
    """
    if protocol not in PROTOCOLS:
        raise ValueError(f"unknown protocol {protocol!r}")
    queries = manifest.split(split)
    if not queries:
        raise ValueError(f"split {split!r} has no queries")
    for q in queries:
        if q.gt_moment is None:
            raise MissingGroundTruth(f"query {q.query_id!r} has no gt_moment")
    videos = manifest.load_videos(sorted({q.video_id for q in queries}))
    max_k = max(ks)

    W, _ = nn_core.embed_sentences([q.tokens for q in queries], params)
    results, top_ious = [], []
    for q, w in zip(queries, W):
        video = videos[q.video_id]
        cands = candidates_for(protocol, video.num_units, video.unit_duration_frames, windows, stride)
        if shuffle_rng is not None:
            ranked = rank_candidates(cands, shuffle_rng.random(len(cands)))
        else:
            _, trace = tga.text_guided_feature(w, video, params, mode="eval", query_id=q.query_id)
            ranked = score_candidates(trace.weights, cands, use_sum)
        starts = np.array([c.start_unit for c in ranked])
        ends = np.array([c.end_unit for c in ranked])
        ious = kernels.interval_iou(starts, ends, *q.gt_moment)
        top_ious.append(ious)
        results.append(QueryResult(q.query_id, q.video_id, q.gt_moment, len(cands),
                                   [(c, float(i)) for c, i in zip(ranked[:max_k], ious[:max_k])]))
    return EvalReport(protocol, tuple(ks), tuple(iou_thresholds), recall_table(top_ious, ks, iou_thresholds),
                      mean_iou(top_ious), results)


def random_baseline_exact_match(num_queries, num_segments, rng):
    """R@1 (percent) of random ranking with exact-moment correctness, simulated."""
    cands = didemo_candidates(num_segments)
    hits = 0
    for _ in range(num_queries):
        gt = cands[rng.integers(len(cands))]
        ranked = rank_candidates(cands, rng.random(len(cands)))
        hits += ranked[0].interval == gt
    return 100.0 * hits / num_queries
