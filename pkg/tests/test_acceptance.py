"""End-to-end acceptance criteria, one test each.

Every test appends a one-line PASS/FAIL summary to ``ACCEPTANCE_LINES``
(printed at the end of the pytest run) before asserting.
"""

import itertools
import json
import math
import time

import numpy as np
import pytest

from tgaloc import cli, dataio, embedding_loss, nn_core, retrieval_eval, tga, trainer

from .conftest import ACCEPTANCE_LINES, random_params

# planted moments span 3-5 units of 16 frames, so windows of 48/64/80 frames
PLANTED_WINDOWS = (48, 64, 80)
PLANTED_STRIDE = 0.25


def record(number, title, ok, detail):
    ACCEPTANCE_LINES.append(f"[{'PASS' if ok else 'FAIL'}] {number}. {title}: {detail}")
    return ok


# --- 1 ---------------------------------------------------------------------


def test_1_gradient_fidelity():
    t0 = time.perf_counter()
    report = cli.run_gradcheck(seed=0, tolerance=1e-4)
    elapsed = time.perf_counter() - t0
    ok = report.passed and len(report.checked) == 14 and elapsed < 60
    worst = report.max_rel_error[report.worst]
    assert record(1, "gradient fidelity", ok,
                  f"{len(report.checked)} tensors, worst {report.worst} rel err {worst:.2e} (< 1e-4), "
                  f"{elapsed:.1f}s (< 60s)"), str(report)


# --- 2 ---------------------------------------------------------------------


def _attention_instance(rng):
    V, T = int(rng.integers(2, 10)), int(rng.integers(2, 10))
    n = int(rng.integers(1, 20))
    params = random_params(rng, feature=V, text=T)
    units = rng.normal(size=(n, V)) * rng.uniform(0.1, 10)
    w = rng.normal(size=T)
    return params, units, w


def test_2_attention_invariants():
    rng = np.random.default_rng(2024)
    failures = {"sum": 0, "shift": 0, "scale": 0, "monotone": 0}
    n_instances = 1000
    for _ in range(n_instances):
        params, units, w = _attention_instance(rng)
        _, trace = tga.text_guided_feature(w, units, params)
        a = trace.weights
        if abs(a.sum() - 1.0) > 1e-6:
            failures["sum"] += 1
        vbar = nn_core.fc_video_transform(units, params)
        s = tga.similarity_row(w, vbar)
        if np.max(np.abs(tga.temporal_softmax(s + rng.uniform(-50, 50)) - a)) > 1e-9:
            failures["shift"] += 1
        _, scaled = tga.text_guided_feature(w * rng.uniform(1e-3, 1e3), units, params)
        if np.max(np.abs(scaled.weights - a)) > 1e-9:
            failures["scale"] += 1
        if s.size > 1:
            k = int(rng.integers(s.size))
            s2 = s.copy()
            s2[k] += rng.uniform(1e-3, 1.0)
            b = tga.temporal_softmax(s2)
            others = np.arange(s.size) != k
            if not (b[k] > a[k] and np.all(b[others] < a[others])):
                failures["monotone"] += 1
    ok = not any(failures.values())
    assert record(2, "attention invariants", ok, f"{n_instances} instances, failures {failures}")


# --- 3 ---------------------------------------------------------------------


def brute_loss(S, vids, margin):
    terms = []
    B = len(vids)
    for i in range(B):
        for j in range(B):
            if vids[i] == vids[j]:
                continue
            terms.append(max(0.0, margin - S[i][i] + S[i][j]))
            terms.append(max(0.0, margin - S[i][i] + S[j][i]))
    return math.fsum(terms)


def test_3_loss_properties():
    rng = np.random.default_rng(3)
    problems = []

    # margin-satisfied constructions
    for B in range(2, 7):
        E = np.eye(B, 8)
        loss, dV, dT = embedding_loss.triplet_loss(E, E, [f"v{i}" for i in range(B)], [str(i) for i in range(B)],
                                                   0.1)
        if loss != 0.0 or dV.any() or dT.any():
            problems.append(f"nonzero loss for satisfied batch of {B}")

    checked = 0
    margins = (0.0, 0.05, 0.1, 0.2, 0.5, 1.0)
    for t in range(100):
        S = rng.uniform(-1, 1, size=(4, 4))
        vids = [f"v{x}" for x in rng.integers(0, 3, size=4)]
        neg = embedding_loss.negative_mask(vids, None)
        losses = [embedding_loss.hinge_from_similarity(S, neg, m)[0] for m in margins]
        if any(a > b for a, b in zip(losses, losses[1:])):
            problems.append(f"table {t}: not monotone in margin")
        for size in (2, 3, 4):
            for sub in itertools.combinations(range(4), size):
                idx = list(sub)
                sub_vids = [vids[i] for i in idx]
                sub_S = S[np.ix_(idx, idx)]
                margin = float(margins[(t + size) % len(margins)])
                got, _ = embedding_loss.hinge_from_similarity(sub_S, embedding_loss.negative_mask(sub_vids, None),
                                                              margin)
                if abs(got - brute_loss(sub_S.tolist(), sub_vids, margin)) > 1e-9:
                    problems.append(f"table {t} batch {idx}: oracle mismatch")
                checked += 1

    # the same oracle through the joint-space entry point
    for _ in range(20):
        VP, TP = rng.normal(size=(4, 6)), rng.normal(size=(4, 6))
        vids = [f"v{x}" for x in rng.integers(0, 3, size=4)]
        S = [[float(v @ t) / (np.linalg.norm(v) * np.linalg.norm(t)) for t in TP] for v in VP]
        got, _, _ = embedding_loss.triplet_loss(VP, TP, vids, list("abcd"), 0.2)
        if abs(got - brute_loss(S, vids, 0.2)) > 1e-9:
            problems.append("triplet_loss oracle mismatch")

    ok = not problems
    assert record(3, "loss properties", ok,
                  f"100 tables, {checked} sub-batches vs brute force at 1e-9, problems: {problems[:3] or 'none'}")


# --- 4 ---------------------------------------------------------------------


@pytest.mark.slow
def test_4_planted_localization(tmp_path):
    t0 = time.perf_counter()
    synth = dataio.SyntheticConfig()
    assert synth.num_videos == {"train": 200, "val": 50, "test": 50}
    assert (synth.units_per_video, synth.feature_dim, synth.moments_per_video) == (16, 64, 2)
    assert synth.moment_length_range == (3, 5) and synth.signal_to_noise == 8.0
    manifest = dataio.generate_synthetic(synth, tmp_path / "data")

    config = trainer.TrainConfig()
    assert (config.lr, config.margin, config.lr_decay_every, config.lr_decay_factor, config.max_epochs) == (
        1e-3, 0.1, 15, 10.0, 30)
    result = trainer.train(manifest, config)

    kw = dict(split="test", windows=PLANTED_WINDOWS, stride=PLANTED_STRIDE, iou_thresholds=(0.5,), ks=(1,))
    model = retrieval_eval.evaluate(result.best_params, manifest, **kw).recall[(1, 0.5)]
    shuffled = [retrieval_eval.evaluate(result.best_params, manifest, shuffle_rng=np.random.default_rng(s),
                                        **kw).recall[(1, 0.5)] for s in range(20)]
    baseline = float(np.mean(shuffled))
    elapsed = time.perf_counter() - t0
    ok = model >= 60.0 and model >= 3 * baseline and elapsed < 300
    assert record(4, "planted-moment localization", ok,
                  f"test R@1@0.5 = {model:.1f} (>= 60), shuffled baseline {baseline:.1f} "
                  f"(ratio {model / max(baseline, 1e-9):.2f} >= 3), best epoch {result.log.best_epoch}, "
                  f"{elapsed:.0f}s (< 300s)")


# --- 5 ---------------------------------------------------------------------


def test_5_candidate_enumeration():
    problems = []
    if len(retrieval_eval.didemo_candidates(6)) != 21:
        problems.append("didemo(6) != 21")
    for n in range(1, 13):
        oracle = {(i, j) for i in range(n) for j in range(n + 1) if i < j}
        got = retrieval_eval.didemo_candidates(n)
        if len(got) != n * (n + 1) // 2 or set(got) != oracle or len(set(got)) != len(got):
            problems.append(f"didemo({n})")
    sw = retrieval_eval.sliding_window_candidates(16, 16, [128, 256], 0.5)
    if sorted(sw) != [(0, 8), (0, 16), (4, 12), (8, 16)]:
        problems.append(f"sliding window example gave {sorted(sw)}")
    ok = not problems
    assert record(5, "candidate enumeration", ok,
                  f"didemo(6) = {len(retrieval_eval.didemo_candidates(6))}, n(n+1)/2 for n in 1..12, "
                  f"sliding example {sorted(sw)}; problems: {problems or 'none'}")


# --- 6 ---------------------------------------------------------------------


def _naive_report(traces, manifest, split, protocol, ks, taus):
    """Independent reference: plain loops for scoring, ranking, IoU and recall."""
    per_query = []
    for q in manifest.split(split):
        video = manifest.video(q.video_id)
        n = video.num_units
        weights = traces[q.query_id]
        if protocol == "didemo":
            cands = [(i, j) for i in range(n) for j in range(i + 1, n + 1)]
        else:
            cands = set()
            for frames in PLANTED_WINDOWS:
                L = frames // video.unit_duration_frames
                if L >= n:
                    cands.add((0, n))
                    continue
                step = max(1, int(PLANTED_STRIDE * L + 0.5))
                s = 0
                while s + L <= n:
                    cands.add((s, s + L))
                    s += step
                cands.add((n - L, n))
            cands = list(cands)
        scored = []
        for (s, e) in cands:
            total = 0.0
            for u in range(s, e):
                total += weights[u]
            scored.append((-round(total / (e - s), 12), s, e - s, (s, e)))
        scored.sort()
        gs, ge = q.gt_moment
        ious = []
        for *_, (s, e) in scored:
            inter = max(0, min(e, ge) - max(s, gs))
            ious.append(inter / (max(e, ge) - min(s, gs)))
        per_query.append(ious)
    recall = {}
    for k in ks:
        for tau in taus:
            hits = 0
            for ious in per_query:
                if any(x >= tau for x in ious[:k]):
                    hits += 1
            recall[(k, tau)] = 100.0 * hits / len(per_query)
    miou = sum(ious[0] for ious in per_query) / len(per_query)
    return recall, miou


def test_6_metric_oracle(crafted_dataset, monkeypatch):
    root, ckpt = crafted_dataset
    manifest = dataio.load_manifest(root)
    params = dataio.load_checkpoint(ckpt)
    ks, taus = (1, 2, 5, 10), (0.1, 0.3, 0.5, 0.7, 1.0)
    worst = 0.0
    mismatches = 0
    for seed in range(50):
        rng = np.random.default_rng(seed)
        traces = {}
        for q in manifest.split("test"):
            raw = rng.random(manifest.video(q.video_id).num_units) ** 4
            if seed % 5 == 0:
                raw = np.round(raw * 3)  # forces score ties
                raw[0] += 1.0
            traces[q.query_id] = raw / raw.sum()

        def fake_feature(w, video, p, mode="eval", query_id="", **kw):
            return None, tga.AttentionTrace(query_id, video.video_id, traces[query_id])

        monkeypatch.setattr(retrieval_eval.tga, "text_guided_feature", fake_feature)
        protocol = "didemo" if seed % 2 else "sliding_window"
        report = retrieval_eval.evaluate(params, manifest, protocol=protocol, iou_thresholds=taus, ks=ks,
                                         windows=PLANTED_WINDOWS, stride=PLANTED_STRIDE)
        recall, miou = _naive_report(traces, manifest, "test", protocol, ks, taus)
        diffs = [abs(report.recall[key] - recall[key]) for key in recall] + [abs(report.miou - miou)]
        worst = max(worst, max(diffs))
        mismatches += max(diffs) > 1e-12
    ok = mismatches == 0
    assert record(6, "metric oracle equivalence", ok,
                  f"50 prediction sets, max |diff| {worst:.1e} (<= 1e-12), mismatched sets {mismatches}")


# --- 7 ---------------------------------------------------------------------


def test_7_random_baseline():
    r1 = retrieval_eval.random_baseline_exact_match(10_000, 6, np.random.default_rng(7))
    ok = abs(r1 - 100 / 21) <= 0.5
    assert record(7, "random baseline", ok, f"R@1 = {r1:.2f} over 10^4 queries (target 4.76 +/- 0.5)")


# --- 8 ---------------------------------------------------------------------


def test_8_reproducibility(tiny_synth, tmp_path, capsys):
    root, _ = tiny_synth
    flags = ["--epochs", "3", "--batch", "16", "--text-dim", "32", "--joint-dim", "32", "--word-dim", "16",
             "--seed", "11"]
    codes = [cli.main(["train", "--data", str(root), "--out", str(tmp_path / name), *flags]) for name in "ab"]
    same_ckpt = (tmp_path / "a/best.tgac").read_bytes() == (tmp_path / "b/best.tgac").read_bytes()
    same_log = (tmp_path / "a/runlog.json").read_bytes() == (tmp_path / "b/runlog.json").read_bytes()

    log = json.loads((tmp_path / "a/runlog.json").read_text())
    in_run = log["epochs"][log["best_epoch"] - 1]["val_recall_sum"]
    capsys.readouterr()
    code = cli.main(["eval", "--data", str(root), "--ckpt", str(tmp_path / "a/best.tgac"),
                     "--out", str(tmp_path / "eval")])
    reloaded = json.loads((tmp_path / "eval/report.json").read_text())["val_recall_sum"]
    ok = codes == [0, 0] and code == 0 and same_ckpt and same_log and reloaded == in_run
    assert record(8, "reproducibility", ok,
                  f"best.tgac identical: {same_ckpt}, runlog.json identical: {same_log}, "
                  f"val recall sum in run {in_run!r} vs reloaded {reloaded!r}")
