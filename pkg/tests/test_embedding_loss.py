import itertools
import math

import numpy as np
import pytest

from tgaloc import embedding_loss as el
from tgaloc import nn_core

from .conftest import crafted_params, make_query, random_params


def brute_loss(S, vids, qids, margin, strict=False):
    """Naive double loop over anchors and negatives."""
    B = len(vids)
    terms = []
    for i in range(B):
        for j in range(B):
            if strict:
                is_neg = (vids[i], qids[i]) != (vids[j], qids[j])
            else:
                is_neg = vids[i] != vids[j]
            if not is_neg:
                continue
            terms.append(max(0.0, margin - S[i][i] + S[i][j]))
            terms.append(max(0.0, margin - S[i][i] + S[j][i]))
    return math.fsum(terms)


def _points(rng, B, D=5):
    return rng.normal(size=(B, D)), rng.normal(size=(B, D))


def _cos_table(VP, TP):
    return [[float(v @ t) / (np.linalg.norm(v) * np.linalg.norm(t)) for t in TP] for v in VP]


def test_joint_similarity_values():
    assert el.joint_similarity([2.0, 1.0], [2.0, 1.0]) == pytest.approx(1.0)
    assert el.joint_similarity([1.0, 0.0], [0.0, 1.0]) == 0.0
    assert el.joint_similarity([1.0, 1.0], [1.0, 0.0]) == pytest.approx(1 / math.sqrt(2), abs=1e-12)


def test_margin_satisfied_zero_loss():
    E = np.eye(3)
    loss, dVP, dTP = el.triplet_loss(E, E, ["a", "b", "c"], ["1", "2", "3"], 0.1)
    assert loss == 0.0
    assert not dVP.any() and not dTP.any()


def test_two_by_two_example():
    S = np.array([[0.2, 0.3], [0.1, 0.2]])
    neg = el.negative_mask(["v1", "v2"], ["q1", "q2"])
    h_text_1 = max(0.0, 0.1 - S[0, 0] + S[0, 1])
    h_video_1 = max(0.0, 0.1 - S[0, 0] + S[1, 0])
    assert h_text_1 == pytest.approx(0.2) and h_video_1 == 0.0
    loss, _ = el.hinge_from_similarity(S, neg, 0.1)
    assert loss == pytest.approx(brute_loss(S, ["v1", "v2"], ["q1", "q2"], 0.1), abs=1e-15)
    assert loss == pytest.approx(0.4, abs=1e-15)


def test_zero_margin_equal_similarities():
    S = np.full((3, 3), 0.37)
    loss, G = el.hinge_from_similarity(S, el.negative_mask(["a", "b", "c"], ["1", "2", "3"]), 0.0)
    assert loss == 0.0 and not G.any()


def test_monotone_in_margin(rng):
    for _ in range(20):
        S = rng.uniform(-1, 1, size=(4, 4))
        neg = el.negative_mask(list("abcd"), list("1234"))
        losses = [el.hinge_from_similarity(S, neg, m)[0] for m in (0.0, 0.05, 0.1, 0.3, 1.0)]
        assert all(a <= b for a, b in zip(losses, losses[1:]))
        assert min(losses) >= 0.0


def test_permutation_invariance(rng):
    VP, TP = _points(rng, 6)
    vids = ["a", "a", "b", "c", "d", "d"]
    qids = [f"q{i}" for i in range(6)]
    base, _, _ = el.triplet_loss(VP, TP, vids, qids, 0.3)
    S = np.array(_cos_table(VP, TP))
    ref, _ = el.hinge_from_similarity(S, el.negative_mask(vids, qids), 0.3)
    for perm in itertools.islice(itertools.permutations(range(6)), 0, 720, 37):
        p = list(perm)
        got, _, _ = el.triplet_loss(VP[p], TP[p], [vids[i] for i in p], [qids[i] for i in p], 0.3)
        assert got == pytest.approx(base, abs=1e-12)
        exact, _ = el.hinge_from_similarity(S[np.ix_(p, p)], el.negative_mask([vids[i] for i in p], None), 0.3)
        assert exact == ref


def test_non_participating_entry_has_zero_gradient():
    VP = np.array([[1.0, 0.0, 0.0], [0.8, 0.6, 0.0], [0.0, 0.0, 1.0]])
    TP = np.array([[0.9, 0.1, 0.0], [1.0, 0.2, 0.0], [0.0, 0.0, 1.0]])
    loss, dVP, dTP = el.triplet_loss(VP, TP, ["a", "b", "c"], ["1", "2", "3"], 0.1)
    assert loss > 0
    assert not dVP[2].any() and not dTP[2].any()
    assert dVP[:2].any()


def test_loss_gradient_fd(rng):
    VP, TP = _points(rng, 4)
    vids, qids = ["a", "b", "b", "c"], ["1", "2", "3", "4"]

    def probe(p):
        loss, dVP, dTP = el.triplet_loss(p["VP"], p["TP"], vids, qids, 0.4)
        return loss, {"VP": dVP, "TP": dTP}

    assert nn_core.grad_check(probe, {"VP": VP, "TP": TP}).passed


def test_strict_versus_exclusion(rng):
    VP, TP = _points(rng, 4)
    vids, qids = ["a", "a", "b", "c"], ["1", "2", "3", "4"]
    S = _cos_table(VP, TP)
    for strict in (False, True):
        loss, _, _ = el.triplet_loss(VP, TP, vids, qids, 0.5, strict=strict)
        assert loss == pytest.approx(brute_loss(S, vids, qids, 0.5, strict), abs=1e-12)
    excl = el.negative_mask(vids, qids)
    strict = el.negative_mask(vids, qids, strict=True)
    assert not excl[0, 1] and strict[0, 1]
    assert not strict[0, 0]


def test_duplicate_pair_oracle(rng):
    VP, TP = _points(rng, 3)
    vids, qids = ["a", "b", "c"], ["1", "2", "3"]
    base, _, _ = el.triplet_loss(VP, TP, vids, qids, 0.5)
    idx = [0, 1, 2, 0]
    dup, _, _ = el.triplet_loss(VP[idx], TP[idx], [vids[i] for i in idx], [qids[i] for i in idx], 0.5)
    S = _cos_table(VP[idx], TP[idx])
    assert dup == pytest.approx(brute_loss(S, [vids[i] for i in idx], [qids[i] for i in idx], 0.5), abs=1e-12)
    # the extra copy repeats anchor 0's terms and adds itself as a negative for anchors 1 and 2
    S3 = _cos_table(VP, TP)
    extra = sum(max(0.0, 0.5 - S3[0][0] + S3[0][j]) + max(0.0, 0.5 - S3[0][0] + S3[j][0]) for j in (1, 2))
    extra += sum(max(0.0, 0.5 - S3[i][i] + S3[i][0]) + max(0.0, 0.5 - S3[i][i] + S3[0][i]) for i in (1, 2))
    assert dup == pytest.approx(base + extra, abs=1e-12)


def test_errors():
    with pytest.raises(ValueError, match="< 2"):
        el.triplet_loss(np.ones((1, 3)), np.ones((1, 3)), ["a"], ["1"], 0.1)
    with pytest.raises(ValueError, match="margin"):
        el.triplet_loss(np.eye(2), np.eye(2), ["a", "b"], ["1", "2"], -0.1)


# --- batch_forward ---------------------------------------------------------


def _random_batch(rng, n=4, feature=12, vocab=20):
    batch = []
    for i in range(n):
        units = rng.normal(size=(int(rng.integers(3, 7)), feature))
        tokens = rng.integers(0, vocab, size=int(rng.integers(2, 5)))
        batch.append((units, make_query(f"q{i}", f"v{i % 3}", tokens)))
    return batch


def test_batch_forward_gradient_fd(rng):
    params = random_params(rng)
    batch = _random_batch(rng)

    def probe(p):
        return el.batch_forward(batch, p, margin=0.5, rng=np.random.default_rng(5), dropout=0.3)

    report = nn_core.grad_check(probe, params)
    assert report.passed, str(report)
    assert set(report.checked) == set(nn_core.PARAM_NAMES)


def test_batch_forward_satisfied_fixed_point():
    n = 5
    params = nn_core.cast_params(crafted_params(n), np.float64)
    batch = []
    for t in range(n):
        units = np.zeros((4, n))
        units[:, t] = 1.0
        batch.append((units, make_query(f"q{t}", f"v{t}", [t])))
    loss, grads = el.batch_forward(batch, params, margin=0.1, train=False)
    assert loss == 0.0
    assert all(not g.any() for g in grads.values())


def test_descent_sanity(rng):
    for trial in range(20):
        params = random_params(rng)
        batch = _random_batch(rng, n=4)
        loss, grads = el.batch_forward(batch, params, margin=0.5, train=False)
        stepped = {k: params[k] - 1e-6 * grads[k] for k in params}
        after, _ = el.batch_forward(batch, stepped, margin=0.5, train=False)
        assert after <= loss + 1e-12, trial
