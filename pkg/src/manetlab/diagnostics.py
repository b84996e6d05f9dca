"""Behavioural probes of the suppression stage on synthetic data."""

from __future__ import annotations

import numpy as np
import torch

from .datagen import Nuisance, render_image, sample_rngs, BRIGHTNESS_RANGE, TINT_RANGE
from .model import MANet
from .objectives import cosine_matrix
from .retrieval import embed_images


def mask_to_grid(masks: np.ndarray, grid: tuple[int, int]) -> np.ndarray:
    """Fraction of body pixels inside each feature cell: ``[M, H_in, W_in] -> [M, H, W]``."""
    m, h_in, w_in = masks.shape
    h, w = grid
    return masks.reshape(m, h, h_in // h, w, w_in // w).mean(axis=(2, 4))


@torch.no_grad()
def attention_body_ratio(model: MANet, dataset, split: str = "test") -> float:
    """Mean channel-averaged attention on body cells over that on background cells.

    A feature cell counts as body when at least half of its pixels are on the mask.
    """
    if model.rgl is None:
        raise ValueError("model has no relation-guided localization stage")
    model.eval()
    idx = dataset.indices(split)
    dtype = next(model.parameters()).dtype
    images = torch.from_numpy(dataset.images[idx]).to(dtype)
    attn = model.encode_images(images).attention.mean(dim=1).numpy()
    body = mask_to_grid(dataset.masks[idx].astype(float), attn.shape[1:]) >= 0.5
    return float(attn[body].mean() / attn[~body].mean())


def perturbed_copies(dataset, index: int, copies: int, rng: np.random.Generator) -> np.ndarray:
    """Re-render sample ``index`` with fresh tint/brightness; background and layout unchanged."""
    spec = dataset.identities[int(dataset.labels[index])]
    base = dataset.nuisances[index]
    h, w = dataset.images.shape[-2:]
    out = []
    for _ in range(copies):
        nuisance = Nuisance(base.background_id,
                            tuple(float(t) for t in rng.uniform(*TINT_RANGE, size=3)),
                            float(rng.uniform(*BRIGHTNESS_RANGE)))
        image, _ = render_image(spec, nuisance, sample_rngs(dataset.seed, index)[1], h, w,
                                dataset.meta.get("clutter_block"))
        out.append(image)
    return np.stack(out)


def tint_invariance(model: MANet, dataset, split: str = "test", copies: int = 4,
                    seed: int = 0) -> float:
    """Mean cosine between the global embedding of an image and of its re-lit copies."""
    rng = np.random.default_rng(seed)
    idx = dataset.indices(split)
    originals = embed_images(model, dataset.images[idx]).global_
    scores = []
    for row, i in enumerate(idx):
        copies_emb = embed_images(model, perturbed_copies(dataset, int(i), copies, rng)).global_
        scores.append(cosine_matrix(originals[row:row + 1], copies_emb).mean())
    return float(torch.stack(scores).mean())
