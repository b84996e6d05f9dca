"""Implicit local alignment over shared topic centers, and global alignment heads."""

from __future__ import annotations

import math

import torch
from torch import nn

from .suppression import RelationUnit

ASSIGNMENTS = ("relation", "inner_product")
CENTER_INITS = ("normal", "uniform", "kaiming_normal", "xavier_normal", "zeros",
                "ones", "identity", "constant", "orthogonal")


def l2_normalize(x: torch.Tensor, dim: int = -1) -> torch.Tensor:
    """L2-normalize along ``dim``; all-zero vectors stay zero."""
    sq = (x * x).sum(dim=dim, keepdim=True)
    norm = torch.where(sq > 0, sq, torch.ones_like(sq)).sqrt()
    return x / norm


def positions_last(featmap: torch.Tensor) -> torch.Tensor:
    """``[B, C, H, W]`` or ``[B, C, L]`` (or ``[B, C, L, 1]``) -> ``[B, P, C]``."""
    return featmap.flatten(2).transpose(1, 2)


def project_shared(featmap: torch.Tensor, W_s: torch.Tensor) -> torch.Tensor:
    """Normalize each position's channel vector, then apply the 1x1 projection.

    ``featmap [B, C, ...]``, ``W_s [d_c, C]`` -> ``Z [B, P, d_c]``.
    """
    return l2_normalize(positions_last(featmap)) @ W_s.t()


def init_centers(centers: torch.Tensor, scheme: str) -> None:
    with torch.no_grad():
        if scheme == "normal":
            centers.normal_()
        elif scheme == "uniform":
            centers.uniform_()
        elif scheme == "kaiming_normal":
            nn.init.kaiming_normal_(centers)
        elif scheme == "xavier_normal":
            nn.init.xavier_normal_(centers)
        elif scheme == "zeros":
            centers.fill_(1e-8)
        elif scheme == "ones":
            centers.fill_(1.0)
        elif scheme == "identity":
            nn.init.eye_(centers)
        elif scheme == "constant":
            centers.fill_(0.3)
        elif scheme == "orthogonal":
            nn.init.orthogonal_(centers)
        else:
            raise ValueError(f"unknown center init {scheme!r}; expected one of {CENTER_INITS}")


class ImplicitLocalAlignment(nn.Module):
    """Soft-assigns every pixel/word to K topic centers shared by both modalities.

    One instance serves the image and the text path: the projection ``W_s``,
    the centers and the relation unit (including its batch-norm statistics)
    are the same objects for both.
    """

    def __init__(self, channels: int, d_c: int, num_centers: int, r3: int,
                 assignment: str = "relation", center_init: str = "normal"):
        super().__init__()
        if assignment not in ASSIGNMENTS:
            raise ValueError(f"unknown assignment {assignment!r}; expected one of {ASSIGNMENTS}")
        self.d_c, self.num_centers, self.assignment = d_c, num_centers, assignment
        self.W_s = nn.Parameter(torch.empty(d_c, channels))
        nn.init.kaiming_uniform_(self.W_s, a=math.sqrt(5))
        self.centers = nn.Parameter(torch.empty(num_centers, d_c))
        init_centers(self.centers, center_init)
        self.unit = RelationUnit(d_c, d_c // r3, d_c)

    def assign(self, z: torch.Tensor) -> torch.Tensor:
        """Assignment vectors of ``z [M, d_c]`` to every center -> ``[M, K, d_c]``."""
        if self.assignment == "inner_product":
            return (z @ self.centers.t()).unsqueeze(-1).expand(-1, -1, self.d_c)
        return self.unit.pairwise(z, self.centers)

    def aggregate(self, z: torch.Tensor, mask: torch.Tensor | None = None) -> torch.Tensor:
        """``v_j = sum_i a_ij * z_i`` over valid positions: ``z [B, P, d_c]`` -> ``[B, K, d_c]``.

        Only valid rows go through the relation unit, so padding neither
        contributes to the sum nor to batch-norm statistics.
        """
        b, p, _ = z.shape
        if mask is None:
            mask = torch.ones(b, p, dtype=torch.bool, device=z.device)
        rows = z[mask]
        owner = torch.arange(b, device=z.device)[:, None].expand(b, p)[mask]
        contrib = self.assign(rows) * rows.unsqueeze(1)
        out = z.new_zeros(b, self.num_centers, self.d_c)
        return out.index_add(0, owner, contrib)

    def forward(self, featmap: torch.Tensor, mask: torch.Tensor | None = None) -> torch.Tensor:
        z = project_shared(featmap, self.W_s)
        if mask is not None:
            z = z * mask.unsqueeze(-1).to(z.dtype)
        return self.aggregate(z, mask)


def ila_assign(z: torch.Tensor, center: torch.Tensor, ila: ImplicitLocalAlignment) -> torch.Tensor:
    """Assignment of one position ``z [d_c]`` to one center ``[d_c]``."""
    if ila.assignment == "inner_product":
        return (z @ center).expand(ila.d_c)
    return ila.unit(z[None], center[None])[0]


def masked_max(x: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
    """Max over positions of ``x [B, P, D]`` restricted to ``mask [B, P]``."""
    if bool((mask.sum(dim=1) == 0).any()):
        raise ValueError("global text pooling needs at least one valid position")
    return x.masked_fill(~mask.unsqueeze(-1), float("-inf")).amax(dim=1)


class GlobalImageHead(nn.Module):
    """1x1 projection to the joint space followed by global max pooling."""

    def __init__(self, channels: int, d_g: int):
        super().__init__()
        self.proj = nn.Linear(channels, d_g, bias=False)

    def forward(self, featmap: torch.Tensor) -> torch.Tensor:
        return self.proj(positions_last(featmap)).amax(dim=1)


class GlobalTextHead(nn.Module):
    """Global max pooling over valid words followed by the projection."""

    def __init__(self, channels: int, d_g: int):
        super().__init__()
        self.proj = nn.Linear(channels, d_g, bias=False)

    def forward(self, featmap: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
        return self.proj(masked_max(positions_last(featmap), mask))


class SharedGlobalHead(nn.Module):
    """Baseline global alignment: max pool either modality, then one shared projection."""

    def __init__(self, channels: int, d_g: int):
        super().__init__()
        self.proj = nn.Linear(channels, d_g, bias=False)

    def image(self, featmap: torch.Tensor) -> torch.Tensor:
        return self.proj(positions_last(featmap).amax(dim=1))

    def text(self, featmap: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
        return self.proj(masked_max(positions_last(featmap), mask))


def global_image(featmap: torch.Tensor, W_g: torch.Tensor) -> torch.Tensor:
    """``F_hat [C, H, W]`` -> ``v_g [d_g]``: project, then max over positions."""
    return (positions_last(featmap[None])[0] @ W_g.t()).amax(dim=0)


def global_text(featmap: torch.Tensor, W_g: torch.Tensor, valid_length: int) -> torch.Tensor:
    """``E [C, L]`` (or ``[C, L, 1]``) -> ``t_g [d_g]``: max over valid words, then project."""
    if valid_length < 1:
        raise ValueError("valid_length must be at least 1")
    cols = positions_last(featmap[None])[0][:valid_length]
    return W_g @ cols.amax(dim=0)
