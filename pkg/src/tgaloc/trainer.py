"""Batch-wise training with a step learning-rate schedule and model selection
by validation recall sum."""

from __future__ import annotations

import json
import math
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import dataio, embedding_loss, nn_core


@dataclass
class TrainConfig:
    lr: float = 1e-3
    lr_decay_every: int = 15
    lr_decay_factor: float = 10.0
    margin: float = 0.1
    batch_size: int = 128
    max_epochs: int = 30
    seed: int = 0
    text_dim: int = nn_core.DEFAULT_TEXT_DIM
    joint_dim: int = nn_core.DEFAULT_JOINT_DIM
    word_dim: int = nn_core.DEFAULT_WORD_DIM
    dropout: float = nn_core.DEFAULT_DROPOUT
    strict_batch_negatives: bool = False
    bidirectional_val: bool = False

    def validate(self):
        if not self.lr > 0 or not self.lr_decay_factor > 0:
            raise ValueError("lr and lr_decay_factor must be positive")
        if self.lr_decay_every < 1:
            raise ValueError("lr_decay_every must be at least 1")
        if not 0 <= self.margin <= 2:
            raise ValueError(f"margin {self.margin} outside [0, 2]")
        if self.batch_size < 2:
            raise ValueError(f"batch_size {self.batch_size} < 2")
        if self.max_epochs < 0 or self.seed < 0:
            raise ValueError("max_epochs and seed must be non-negative")
        if min(self.text_dim, self.joint_dim, self.word_dim) < 1:
            raise ValueError("dimensions must be positive")
        if not 0 <= self.dropout < 1:
            raise ValueError(f"dropout rate {self.dropout} outside [0, 1)")


@dataclass(frozen=True)
class TrainingPair:
    """A video-sentence pair as the trainer sees it: no temporal boundaries."""

    query_id: str
    video_id: str
    tokens: tuple


def training_pairs(manifest, split="train") -> list:
    return [TrainingPair(q.query_id, q.video_id, q.tokens) for q in manifest.split(split)]


def learning_rate(config: TrainConfig, epoch_index: int) -> float:
    """Rate used during 0-based epoch ``epoch_index``."""
    return config.lr / config.lr_decay_factor ** (epoch_index // config.lr_decay_every)


@dataclass
class EpochRecord:
    epoch: int
    lr: float
    mean_loss: float
    batches: int
    val_recall_sum: float
    val_recalls: dict
    wall_time: float = field(default=0.0, compare=False)


@dataclass
class RunLog:
    config: dict
    epochs: list = field(default_factory=list)
    best_epoch: int | None = None

    def to_json(self) -> dict:
        # wall time is kept out so identical runs give identical files
        return {
            "config": self.config,
            "epochs": [{k: v for k, v in asdict(r).items() if k != "wall_time"} for r in self.epochs],
            "best_epoch": self.best_epoch,
        }


@dataclass
class TrainResult:
    best_params: dict
    last_params: dict
    log: RunLog


# ---------------------------------------------------------------------------
# Validation: text-to-video retrieval with text-specific pooling
# ---------------------------------------------------------------------------


@dataclass
class ValidationResult:
    recall_sum: float
    recalls: dict


def _rows_normalized(X):
    n = np.linalg.norm(X, axis=1, keepdims=True)
    return np.divide(X, n, out=np.zeros_like(X), where=n > 0)


def retrieval_scores(params, queries, videos):
    """``scores[q, v]``: joint cosine of sentence q and its pooled feature on video v."""
    W, _ = nn_core.embed_sentences([q.tokens for q in queries], params)
    Wn = _rows_normalized(W)
    TPn = _rows_normalized(W @ params["Wt"].T)
    dtype = params["fc.W"].dtype
    scores = np.empty((len(queries), len(videos)), dtype=np.float64)
    for j, units in enumerate(videos):
        X = np.asarray(units, dtype=dtype)
        vbar, _ = nn_core.fc_video_forward(X, params)
        S = Wn @ _rows_normalized(vbar).T
        A = np.exp(S - S.max(axis=1, keepdims=True))
        A /= A.sum(axis=1, keepdims=True)
        VPn = _rows_normalized((A @ X) @ params["Wv"].T)
        scores[:, j] = np.sum(VPn * TPn, axis=1)
    return scores


def ranks_with_tiebreak(scores, target):
    """1-based rank of column ``target[i]`` in row i; ties go to lower column index."""
    scores = np.asarray(scores)
    rows = np.arange(scores.shape[0])
    own = scores[rows, target][:, None]
    cols = np.arange(scores.shape[1])[None, :]
    better = (scores > own) | ((scores == own) & (cols < np.asarray(target)[:, None]))
    return 1 + better.sum(axis=1)


def validate_retrieval(params, queries, videos: dict, ks=(1, 5, 10), bidirectional=False) -> ValidationResult:
    """Recall sum of text-to-video retrieval over the videos of ``queries``.

    ``videos`` maps video id to its unit feature matrix.  Recalls are fractions,
    so the sum for the default Ks is in [0, 3] (or [0, 6] bidirectional).
    """
    if not queries:
        raise ValueError("validation split is empty")
    video_ids = sorted({q.video_id for q in queries})
    col = {vid: j for j, vid in enumerate(video_ids)}
    scores = retrieval_scores(params, queries, [videos[v] for v in video_ids])
    target = np.array([col[q.video_id] for q in queries])
    ranks = ranks_with_tiebreak(scores, target)
    recalls = {f"t2v_R@{k}": float(np.mean(ranks <= k)) for k in ks}

    if bidirectional:
        # rank sentences for each video, ties by ascending query id; best rank of its sentences
        order = sorted(range(len(queries)), key=lambda i: queries[i].query_id)
        st = scores[order].T  # (videos, queries in id order)
        pos = {q: i for i, q in enumerate(order)}
        best = []
        for j, vid in enumerate(video_ids):
            mine = [pos[i] for i, q in enumerate(queries) if q.video_id == vid]
            r = [ranks_with_tiebreak(st[j:j + 1], np.array([m]))[0] for m in mine]
            best.append(min(r))
        best = np.array(best)
        recalls.update({f"v2t_R@{k}": float(np.mean(best <= k)) for k in ks})
    return ValidationResult(math.fsum(recalls.values()), recalls)


# ---------------------------------------------------------------------------
# Training loop
# ---------------------------------------------------------------------------


def _unit_matrices(manifest, video_ids):
    return {vid: np.asarray(manifest.load_video(vid).units, dtype=np.float32) for vid in sorted(set(video_ids))}


def validate_split(params, manifest, split="val", bidirectional=False) -> ValidationResult:
    """``validate_retrieval`` on a manifest split, exactly as run after each epoch."""
    queries = training_pairs(manifest, split)
    units = _unit_matrices(manifest, [q.video_id for q in queries])
    return validate_retrieval(params, queries, units, bidirectional=bidirectional)


def train(manifest, config: TrainConfig, report=None) -> TrainResult:
    """Train on the manifest's train split and select by val recall sum.

    One seeded generator drives initialization, shuffling and dropout, so a
    fixed seed reproduces the run bit for bit.  ``report`` is called with each
    finished ``EpochRecord``.
    """
    config.validate()
    pairs = training_pairs(manifest, "train")
    val_queries = training_pairs(manifest, "val")
    if not pairs:
        raise dataio.IntegrityError("train split is empty")
    if not val_queries:
        raise dataio.IntegrityError("val split is empty")
    if len(pairs) < config.batch_size:
        raise dataio.IntegrityError(
            f"train split has {len(pairs)} pairs, fewer than batch_size {config.batch_size}"
        )

    vocab_size = len(manifest.vocabulary())
    rng = np.random.default_rng(config.seed)
    params = nn_core.init_params(vocab_size, manifest.feature_dim, rng, text_dim=config.text_dim,
                                 joint_dim=config.joint_dim, word_dim=config.word_dim, dtype=np.float32)
    train_units = _unit_matrices(manifest, [p.video_id for p in pairs])
    val_units = _unit_matrices(manifest, [q.video_id for q in val_queries])

    log = RunLog(config=asdict(config))
    best = {k: v.copy() for k, v in params.items()}
    best_score = -math.inf
    opt = nn_core.AdamState(lr=config.lr)
    n_batches = len(pairs) // config.batch_size

    for e in range(config.max_epochs):
        t0 = time.perf_counter()
        opt.lr = learning_rate(config, e)
        order = rng.permutation(len(pairs))
        losses = []
        for b in range(n_batches):
            idx = order[b * config.batch_size:(b + 1) * config.batch_size]
            batch = [(train_units[pairs[i].video_id], pairs[i]) for i in idx]
            loss, grads = embedding_loss.batch_forward(
                batch, params, config.margin, rng=rng, dropout=config.dropout, train=True,
                strict=config.strict_batch_negatives,
            )
            if not math.isfinite(loss):
                raise nn_core.NumericError(f"non-finite loss at epoch {e + 1}, batch {b + 1}")
            nn_core.adam_step(params, grads, opt)
            losses.append(loss)
        val = validate_retrieval(params, val_queries, val_units, bidirectional=config.bidirectional_val)
        rec = EpochRecord(e + 1, opt.lr, math.fsum(losses) / len(losses), n_batches, val.recall_sum,
                          val.recalls, time.perf_counter() - t0)
        log.epochs.append(rec)
        if val.recall_sum > best_score:
            best_score = val.recall_sum
            best = {k: v.copy() for k, v in params.items()}
            log.best_epoch = e + 1
        if report is not None:
            report(rec)
    return TrainResult(best, params, log)


def write_run(result: TrainResult, out_dir) -> None:
    """best.tgac, last.tgac and runlog.json, plus wall times in timing.json."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    dataio.save_checkpoint(result.best_params, out / "best.tgac")
    dataio.save_checkpoint(result.last_params, out / "last.tgac")
    (out / "runlog.json").write_text(json.dumps(result.log.to_json(), indent=1) + "\n", encoding="utf-8")
    timing = [{"epoch": r.epoch, "wall_time": r.wall_time} for r in result.log.epochs]
    (out / "timing.json").write_text(json.dumps(timing, indent=1) + "\n", encoding="utf-8")
