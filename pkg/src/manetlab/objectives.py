"""Training objective: identification, cross-modal ranking and content consistency losses."""

from __future__ import annotations

import math
from dataclasses import dataclass

import torch
import torch.nn.functional as F
from torch import nn

from .alignment import l2_normalize
from .errors import DegenerateBatchError, NumericError


@dataclass(frozen=True)
class LossConfig:
    alpha1: float = 0.2
    alpha2: float = 0.2
    alpha3: float = 0.2
    lambda1: float = 0.1
    lambda2: float = 1.0

    def __post_init__(self):
        for name in ("alpha1", "alpha2", "alpha3"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be non-negative")


@dataclass
class LossBreakdown:
    id: torch.Tensor
    rank_global: torch.Tensor
    rank_local: torch.Tensor
    cons: torch.Tensor
    total: torch.Tensor

    def as_floats(self) -> dict[str, float]:
        return {k: float(getattr(self, k).detach()) for k in ("id", "rank_global", "rank_local", "cons", "total")}


class ClassifierBank(nn.Module):
    """Identity classifiers for the global embedding and each of the K local ones.

    Each matrix is applied to both modalities.
    """

    def __init__(self, d_g: int, d_c: int, num_centers: int, num_classes: int):
        super().__init__()
        self.num_classes = num_classes
        self.global_weight = nn.Parameter(torch.randn(d_g, num_classes) / math.sqrt(d_g))
        self.local_weight = nn.Parameter(torch.randn(num_centers, d_c, num_classes) / math.sqrt(d_c))


def cosine_matrix(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    """Pairwise cosine ``[N, D] x [M, D] -> [N, M]``; zero vectors score 0."""
    return l2_normalize(a) @ l2_normalize(b).t()


def _check_labels(labels: torch.Tensor, num_classes: int) -> None:
    if labels.numel() and (int(labels.min()) < 0 or int(labels.max()) >= num_classes):
        raise ValueError(f"labels must lie in [0, {num_classes})")


def id_loss(image_global: torch.Tensor, text_global: torch.Tensor, labels: torch.Tensor,
            bank: ClassifierBank, image_locals: torch.Tensor | None = None,
            text_locals: torch.Tensor | None = None) -> torch.Tensor:
    """Cross-entropy of both modalities under the global head and each local head,
    summed over heads and averaged over the batch."""
    _check_labels(labels, bank.num_classes)
    loss = (F.cross_entropy(image_global @ bank.global_weight, labels)
            + F.cross_entropy(text_global @ bank.global_weight, labels))
    if image_locals is not None:
        for k in range(image_locals.shape[1]):
            w = bank.local_weight[k]
            loss = loss + F.cross_entropy(image_locals[:, k] @ w, labels)
            loss = loss + F.cross_entropy(text_locals[:, k] @ w, labels)
    return loss


def _negatives(labels: torch.Tensor) -> torch.Tensor:
    neg = labels[:, None] != labels[None, :]
    if not bool(neg.any()):
        raise DegenerateBatchError("batch holds a single identity; no negatives to mine")
    return neg


def _hardest(sim: torch.Tensor, neg: torch.Tensor, dim: int) -> torch.Tensor:
    return sim.masked_fill(~neg, float("-inf")).amax(dim=dim)


def pick_surrogates(labels: torch.Tensor, generator: torch.Generator | None = None) -> torch.Tensor:
    """For each sample, a uniformly drawn other sample of the same identity (itself if none)."""
    n = labels.shape[0]
    same = (labels[:, None] == labels[None, :]) & ~torch.eye(n, dtype=torch.bool)
    out = torch.arange(n)
    for p in range(n):
        candidates = torch.nonzero(same[p]).flatten()
        if candidates.numel():
            out[p] = candidates[torch.randint(candidates.numel(), (1,), generator=generator)]
    return out


def ranking_loss(image: torch.Tensor, text: torch.Tensor, surrogate_text: torch.Tensor,
                 labels: torch.Tensor, alpha1: float = 0.2, alpha2: float = 0.2,
                 lambda1: float = 0.1) -> torch.Tensor:
    """Bi-directional hardest-negative ranking loss with surrogate-text terms.

    Row p of ``surrogate_text`` is a caption of another image of identity
    ``labels[p]``. Negatives are mined in-batch: the most similar text of a
    different identity for each image, and the most similar image of a
    different identity for each (surrogate) text.
    """
    neg = _negatives(labels)
    sim = cosine_matrix(image, text)
    sim_bar = cosine_matrix(image, surrogate_text)
    pos = sim.diagonal()
    pos_bar = sim_bar.diagonal()
    hard_text = _hardest(sim, neg, dim=1)            # S(v_p, t_n)
    hard_image = _hardest(sim, neg, dim=0)           # S(v_n, t_p)
    hard_image_bar = _hardest(sim_bar, neg, dim=0)   # S(v_n, tbar_p)
    per_anchor = (F.relu(alpha1 - pos + hard_text)
                  + F.relu(alpha1 - pos + hard_image)
                  + lambda1 * F.relu(alpha2 - pos_bar + hard_text)
                  + lambda1 * F.relu(alpha2 - pos_bar + hard_image_bar))
    return per_anchor.mean()


def global_average(x: torch.Tensor) -> torch.Tensor:
    return x.mean(dim=(-2, -1)) if x.dim() == 4 else x


def consistency_loss(before: torch.Tensor, after: torch.Tensor, labels: torch.Tensor,
                     alpha3: float = 0.2) -> torch.Tensor:
    """Triplet loss tying each map's pooled feature before and after filtration.

    ``before``/``after`` are ``[N, C, H, W]`` maps (pooled here) or already
    pooled ``[N, C]`` vectors.
    """
    neg = _negatives(labels)
    sim = cosine_matrix(global_average(before), global_average(after))
    pos = sim.diagonal()
    hard_after = _hardest(sim, neg, dim=1)     # S(f~, f^_n)
    hard_before = _hardest(sim, neg, dim=0)    # S(f~_n, f^)
    return (F.relu(alpha3 - pos + hard_after) + F.relu(alpha3 - pos + hard_before)).mean()


def total_loss(id_term, rank_global, rank_local, cons, lambda2: float = 1.0) -> LossBreakdown:
    parts = {"id": id_term, "rank_global": rank_global, "rank_local": rank_local, "cons": cons}
    parts = {k: v if torch.is_tensor(v) else torch.tensor(float(v)) for k, v in parts.items()}
    bad = [k for k, v in parts.items() if not bool(torch.isfinite(v).all())]
    if bad:
        raise NumericError(f"non-finite loss component(s): {', '.join(bad)}")
    total = parts["id"] + parts["rank_global"] + parts["rank_local"] + lambda2 * parts["cons"]
    return LossBreakdown(total=total, **parts)
