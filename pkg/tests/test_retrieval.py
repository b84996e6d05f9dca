import logging

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

import oracles
from manetlab.model import EmbeddingBundle
from manetlab.retrieval import VARIANTS, ablation_run, fuse_similarity, rank_at_k, rank_metrics, ranking
from manetlab.training import TrainConfig


def _bundle(g, l=None):
    g = torch.as_tensor(g, dtype=torch.float64)
    return EmbeddingBundle(g, None if l is None else torch.as_tensor(l, dtype=torch.float64))


def test_fuse_identical_is_two_orthogonal_is_zero():
    q = _bundle([[1.0, 2.0]], [[[0.0, 1.0]]])
    sim = fuse_similarity(q, q)
    assert sim.S[0, 0] == pytest.approx(2.0)
    g = _bundle([[-2.0, 1.0]], [[[1.0, 0.0]]])
    assert fuse_similarity(q, g).S[0, 0] == pytest.approx(0.0, abs=1e-15)


def test_fuse_hand_2x2():
    q = _bundle([[1.0, 0.0], [1.0, 1.0]], [[[1.0, 0.0]], [[0.0, 2.0]]])
    g = _bundle([[0.0, 1.0], [3.0, 4.0]], [[[1.0, 1.0]], [[1.0, 0.0]]])
    r = 1 / np.sqrt(2)
    s_g = np.array([[0.0, 0.6], [r, 7 / (5 * np.sqrt(2))]])
    s_l = np.array([[r, 1.0], [r, 0.0]])
    sim = fuse_similarity(q, g)
    np.testing.assert_allclose(sim.S_g, s_g, atol=1e-15)
    np.testing.assert_allclose(sim.S_l, s_l, atol=1e-15)
    np.testing.assert_allclose(sim.S, s_g + s_l, atol=1e-15)


def test_fuse_zero_norm_scores_zero_and_logs(caplog):
    q = _bundle([[0.0, 0.0]], [[[0.0, 0.0]]])
    g = _bundle([[1.0, 0.0]], [[[1.0, 0.0]]])
    with caplog.at_level(logging.WARNING):
        sim = fuse_similarity(q, g)
    assert sim.S[0, 0] == 0.0
    assert "zero-norm" in caplog.text


def test_fuse_without_locals():
    q = _bundle([[1.0, 0.0]])
    sim = fuse_similarity(q, q)
    assert sim.S_l[0, 0] == 0.0 and sim.S[0, 0] == pytest.approx(1.0)


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**31 - 1), st.floats(0.01, 100.0))
def test_fuse_scale_invariant_and_bounded(seed, scale):
    rng = np.random.default_rng(seed)
    g = rng.normal(size=(3, 4))
    l = rng.normal(size=(3, 2, 2))
    q = _bundle(g, l)
    gal = _bundle(rng.normal(size=(5, 4)), rng.normal(size=(5, 2, 2)))
    a = fuse_similarity(q, gal)
    b = fuse_similarity(_bundle(g * scale, l * scale), gal)
    np.testing.assert_allclose(a.S, b.S, atol=1e-12)
    assert np.all(np.abs(a.S_g) <= 1 + 1e-12) and np.all(np.abs(a.S_l) <= 1 + 1e-12)


def test_rank_identity_like_and_large_k():
    s = np.eye(5) + 0.01 * np.random.default_rng(0).random((5, 5))
    labels = np.arange(5)
    assert rank_at_k(s, labels, labels, 1) == 1.0
    s = np.random.default_rng(1).random((5, 7))
    assert rank_at_k(s, labels, np.array([0, 1, 2, 3, 4, 0, 1]), 7) == 1.0
    assert rank_at_k(s, labels, np.array([0, 1, 2, 3, 4, 0, 1]), 50) == 1.0


def test_rank_ties_broken_by_gallery_index():
    s = np.array([[1.0, 1.0, 1.0]])
    assert ranking(s).tolist() == [[0, 1, 2]]
    assert rank_at_k(s, np.array([7]), np.array([3, 7, 7]), 1) == 0.0
    assert rank_at_k(s, np.array([3]), np.array([3, 7, 7]), 1) == 1.0


def test_rank_errors():
    with pytest.raises(ValueError):
        rank_at_k(np.zeros((2, 2)), np.zeros(2), np.zeros(2), 0)
    with pytest.raises(ValueError):
        rank_at_k(np.zeros((2, 0)), np.zeros(2), np.zeros(0), 1)


def test_rank_oracle_random_matrices():
    rng = np.random.default_rng(11)
    for _ in range(20):
        s = rng.normal(size=(50, 50))
        ql, gl = rng.integers(0, 10, 50), rng.integers(0, 10, 50)
        for k in (1, 5, 10):
            expected = np.mean([oracles.rank_hit(s[i].tolist(), ql[i], gl.tolist(), k) for i in range(50)])
            assert rank_at_k(s, ql, gl, k) == expected


@settings(max_examples=40, deadline=None)
@given(arrays(np.float64, (6, 8), elements=st.sampled_from((np.arange(-40, 41) / 8).tolist())),
       st.integers(0, 2**31 - 1))
def test_rank_monotone_transform_and_k_monotone(s, seed):
    rng = np.random.default_rng(seed)
    ql, gl = rng.integers(0, 3, 6), rng.integers(0, 3, 8)
    base = rank_metrics(s, ql, gl, ks=(1, 2, 3, 5, 8))
    transformed = rank_metrics(np.exp(s) * 3 + 1, ql, gl, ks=(1, 2, 3, 5, 8))
    assert base == transformed
    values = list(base.values())
    assert values == sorted(values)


def test_variant_table():
    assert VARIANTS["baseline"] == ()
    assert set(VARIANTS["full"]) == {"ga", "ila", "rgl", "caf"}


@pytest.mark.slow
def test_ablation_rows(tiny_dataset):
    cfg = TrainConfig(epochs=1, batch_size=16, batch_ids=8, warmup_epochs=0)
    rows = ablation_run(["baseline", "full", ()], cfg, tiny_dataset, seeds=(0,))
    assert [r["variant"] for r in rows] == ["baseline", "full", "baseline"]
    for row in rows:
        assert set(row) == {"variant", "seed", "r1", "r5", "r10", "params"}
        assert 0 <= row["r1"] <= row["r5"] <= row["r10"] <= 1
    assert rows[1]["params"] > rows[0]["params"] == rows[2]["params"]
