"""Similarity fusion, Rank-K evaluation and the component ablation harness."""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np
import torch

from .model import EmbeddingBundle, MANet, ModelConfig, param_count
from .objectives import cosine_matrix

log = logging.getLogger(__name__)

VARIANTS: dict[str, tuple[str, ...]] = {
    "baseline": (),
    "ga": ("ga",),
    "ila": ("ila",),
    "ga+ila": ("ga", "ila"),
    "ga+ila+rgl": ("ga", "ila", "rgl"),
    "ga+ila+caf": ("ga", "ila", "caf"),
    "full": ("ga", "ila", "rgl", "caf"),
}


@dataclass
class SimilarityMatrix:
    S: np.ndarray
    S_g: np.ndarray
    S_l: np.ndarray


def _cosine(a: torch.Tensor, b: torch.Tensor, what: str) -> np.ndarray:
    zero_a = int((a.abs().sum(dim=1) == 0).sum())
    zero_b = int((b.abs().sum(dim=1) == 0).sum())
    if zero_a or zero_b:
        log.warning("%s: %d query / %d gallery zero-norm embeddings scored as cosine 0",
                    what, zero_a, zero_b)
    return cosine_matrix(a, b).detach().cpu().numpy()


def fuse_similarity(queries: EmbeddingBundle, gallery: EmbeddingBundle) -> SimilarityMatrix:
    """Text queries x image gallery: ``S = cos(t_g, v_g) + cos(t_l, v_l)``.

    Without local embeddings the local term is zero.
    """
    s_g = _cosine(queries.global_, gallery.global_, "global")
    if queries.locals is None or gallery.locals is None:
        s_l = np.zeros_like(s_g)
    else:
        s_l = _cosine(queries.local_concat, gallery.local_concat, "local")
    return SimilarityMatrix(s_g + s_l, s_g, s_l)


def ranking(S: np.ndarray) -> np.ndarray:
    """Gallery order per query: descending score, ties by ascending gallery index."""
    return np.argsort(-np.asarray(S), axis=1, kind="stable")


def rank_at_k(S, query_labels, gallery_labels, k: int) -> float:
    S = np.asarray(S)
    if k < 1:
        raise ValueError("k must be at least 1")
    if S.ndim != 2 or S.shape[1] == 0:
        raise ValueError("gallery is empty")
    if S.shape[0] == 0:
        return 0.0
    top = ranking(S)[:, :k]
    hits = np.asarray(gallery_labels)[top] == np.asarray(query_labels)[:, None]
    return float(hits.any(axis=1).mean())


def rank_metrics(S, query_labels, gallery_labels, ks=(1, 5, 10)) -> dict[str, float]:
    return {f"r{k}": rank_at_k(S, query_labels, gallery_labels, k) for k in ks}


@torch.no_grad()
def embed_images(model: MANet, images, batch_size: int = 128) -> EmbeddingBundle:
    was_training = model.training
    model.eval()
    dtype = next(model.parameters()).dtype
    out = []
    for start in range(0, len(images), batch_size):
        chunk = torch.as_tensor(np.asarray(images[start:start + batch_size])).to(dtype)
        out.append(model.encode_images(chunk).bundle)
    model.train(was_training)
    return _cat(out)


@torch.no_grad()
def embed_texts(model: MANet, tokens, lengths, batch_size: int = 128) -> EmbeddingBundle:
    was_training = model.training
    model.eval()
    out = []
    for start in range(0, len(tokens), batch_size):
        tok = torch.as_tensor(np.asarray(tokens[start:start + batch_size]))
        lens = torch.as_tensor(np.asarray(lengths[start:start + batch_size]))
        out.append(model.encode_texts(tok, lens).bundle)
    model.train(was_training)
    return _cat(out)


def _cat(bundles: list[EmbeddingBundle]) -> EmbeddingBundle:
    g = torch.cat([b.global_ for b in bundles])
    locs = None if bundles[0].locals is None else torch.cat([b.locals for b in bundles])
    return EmbeddingBundle(g, locs)


def evaluate(model: MANet, dataset, split: str = "test") -> dict[str, float]:
    """Captions of ``split`` query images of ``split``; returns R@1/5/10."""
    idx = dataset.indices(split)
    gallery = embed_images(model, dataset.images[idx])
    queries = embed_texts(model, dataset.tokens[idx], dataset.lengths[idx])
    sim = fuse_similarity(queries, gallery)
    labels = dataset.labels[idx]
    return rank_metrics(sim.S, labels, labels)


def ablation_run(variants, train_cfg, dataset, seeds=(0,), model_cfg: ModelConfig | None = None,
                 loss_cfg=None, eval_split: str = "test") -> list[dict]:
    """Train one model per (variant, seed) and report held-out Rank-K and size.

    ``variants`` holds names from ``VARIANTS`` or explicit flag collections.
    """
    from dataclasses import replace

    from .training import train

    model_cfg = model_cfg or ModelConfig()
    rows = []
    for variant in variants:
        if isinstance(variant, str):
            name, flags = variant, VARIANTS[variant]
        else:
            flags = tuple(sorted(variant))
            name = "+".join(flags) if flags else "baseline"
        cfg = model_cfg.with_flags(flags)
        for seed in seeds:
            result = train(replace(train_cfg, seed=seed), dataset, model_cfg=cfg, loss_cfg=loss_cfg,
                           eval_split=eval_split)
            metrics = evaluate(result.model, dataset, eval_split)
            rows.append({"variant": name, "seed": seed, **metrics,
                         "params": param_count(result.model)})
            log.info("ablation %s seed=%d r1=%.4f", name, seed, metrics["r1"])
    return rows
