import json
from types import SimpleNamespace

import numpy as np
import pytest

from tgaloc import dataio, nn_core

ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)


def make_query(query_id, video_id, tokens):
    return SimpleNamespace(query_id=query_id, video_id=video_id, tokens=tuple(tokens))


def random_params(rng, vocab=20, feature=12, text=8, joint=8, word=10, dtype=np.float64):
    params = nn_core.init_params(vocab, feature, rng, text_dim=text, joint_dim=joint, word_dim=word, dtype=dtype)
    params["emb"] = rng.normal(0.0, 0.5, size=params["emb"].shape).astype(dtype)
    for name in ("gru.bz", "gru.br", "gru.bh", "fc.b"):
        params[name] = rng.normal(0.0, 0.1, size=params[name].shape).astype(dtype)
    return params


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def tiny_synth(tmp_path_factory):
    """A small synthetic dataset (fast to train on)."""
    cfg = dataio.SyntheticConfig(
        num_videos={"train": 40, "val": 10, "test": 10}, units_per_video=16, feature_dim=16,
        vocab_size=30, sentence_length=4, moments_per_video=2, moment_length_range=(3, 5),
        signal_to_noise=8.0, seed=3,
    )
    out = tmp_path_factory.mktemp("tiny")
    dataio.generate_synthetic(cfg, out)
    return out, cfg


def crafted_params(n_tokens):
    """Model whose sentence feature for token t points along axis t and whose
    FC/projections are identities, so a unit equal to e_t gets cosine 1 and
    units orthogonal to it get 0."""
    n = n_tokens
    p = {
        "emb": 3.0 * np.eye(n),
        "gru.Wz": np.zeros((n, n)), "gru.Uz": np.zeros((n, n)), "gru.bz": np.full(n, 10.0),
        "gru.Wr": np.zeros((n, n)), "gru.Ur": np.zeros((n, n)), "gru.br": np.zeros(n),
        "gru.Wh": np.eye(n), "gru.Uh": np.zeros((n, n)), "gru.bh": np.zeros(n),
        "fc.W": np.eye(n), "fc.b": np.zeros(n),
        "Wv": np.eye(n), "Wt": np.eye(n),
    }
    return {k: p[k].astype(np.float32) for k in nn_core.PARAM_NAMES}


@pytest.fixture(scope="session")
def crafted_dataset(tmp_path_factory):
    """Videos of 12 units where query token t is planted as e_t over a 2-unit
    moment; every other unit is orthogonal to every query direction."""
    root = tmp_path_factory.mktemp("crafted")
    (root / "features").mkdir()
    n_tok = 6
    dim = n_tok + 1  # last axis is background
    rng = np.random.default_rng(7)
    videos, queries = [], []
    for split, count in (("train", 4), ("val", 2), ("test", 6)):
        for i in range(count):
            vid = f"{split}_{i}"
            units = np.zeros((12, dim), dtype=np.float32)
            units[:, -1] = 1.0
            t1, t2 = rng.choice(n_tok, size=2, replace=False)
            s1 = int(rng.integers(0, 4))
            s2 = int(rng.integers(6, 10))
            for (s, t) in ((s1, t1), (s2, t2)):
                units[s:s + 2] = 0.0
                units[s:s + 2, t] = 1.0
            dataio.write_features(dataio.VideoFeatures(vid, units, 16), root / f"features/{vid}.tgaf")
            videos.append({"id": vid, "features": f"features/{vid}.tgaf", "num_units": 12,
                           "unit_duration_frames": 16})
            queries.append({"id": f"{vid}_a", "video_id": vid, "tokens": [int(t1)], "gt_moment": [s1, s1 + 2],
                            "split": split})
            queries.append({"id": f"{vid}_b", "video_id": vid, "tokens": [int(t2)], "gt_moment": [s2, s2 + 2],
                            "split": split})
    (root / "vocab.json").write_text(json.dumps({f"w{i}": i for i in range(n_tok + 1)}))
    (root / "manifest.json").write_text(json.dumps(
        {"feature_dim": dim, "vocabulary": "vocab.json", "videos": videos, "queries": queries}))
    params = crafted_params(n_tok + 1)
    ckpt = root / "crafted.tgac"
    dataio.save_checkpoint(params, ckpt)
    return root, ckpt
