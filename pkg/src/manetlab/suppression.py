"""Image-specific information suppression.

``RelationGuidedLocalization`` gates every position and channel of the visual
feature map with an attention inferred from the position's feature and its
relation vectors to all positions. ``ChannelAttentionFiltration``
instance-normalizes the gated map to strip style and adds back the channels
of the removed residual that a squeeze-excite gate deems identity-relevant.
"""

from __future__ import annotations

import torch
import torch.nn.functional as F
from torch import nn

IN_EPS = 1e-5


class RowBatchNorm(nn.BatchNorm1d):
    """BatchNorm over ``[rows, features]`` that falls back to running statistics
    when a training batch has a single row."""

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        if self.training and x.shape[0] < 2:
            return F.batch_norm(x, self.running_mean, self.running_var, self.weight,
                                self.bias, False, 0.0, self.eps)
        return super().forward(x)


class RelationUnit(nn.Module):
    """``r(x, y) = ReLU(BN(W (x_theta - y_phi)))`` with
    ``x_theta = ReLU(BN(W_theta x))`` and ``y_phi = ReLU(BN(W_phi y))``."""

    def __init__(self, d_in: int, d_mid: int, d_out: int):
        super().__init__()
        if d_mid < 1 or d_out < 1:
            raise ValueError(f"relation unit widths must be positive, got d_mid={d_mid}, d_out={d_out}")
        self.d_in, self.d_mid, self.d_out = d_in, d_mid, d_out
        self.theta = nn.Linear(d_in, d_mid, bias=False)
        self.phi = nn.Linear(d_in, d_mid, bias=False)
        self.bn_theta = RowBatchNorm(d_mid)
        self.bn_phi = RowBatchNorm(d_mid)
        self.W = nn.Linear(d_mid, d_out, bias=False)
        self.bn_out = RowBatchNorm(d_out)

    def embed_x(self, x: torch.Tensor) -> torch.Tensor:
        return F.relu(self.bn_theta(self.theta(x)))

    def embed_y(self, y: torch.Tensor) -> torch.Tensor:
        return F.relu(self.bn_phi(self.phi(y)))

    def finish(self, pre: torch.Tensor) -> torch.Tensor:
        shape = pre.shape
        return F.relu(self.bn_out(pre.reshape(-1, self.d_out))).reshape(shape)

    def forward(self, x: torch.Tensor, y: torch.Tensor) -> torch.Tensor:
        """Row-paired relation vectors: ``x, y [M, d_in]`` -> ``[M, d_out]``."""
        return self.finish(self.W(self.embed_x(x) - self.embed_y(y)))

    def pairwise(self, x: torch.Tensor, y: torch.Tensor) -> torch.Tensor:
        """All pairs: ``x [..., M, d_in]``, ``y [..., P, d_in]`` -> ``[..., M, P, d_out]``.

        W is linear, so ``W(x_theta - y_phi)`` is formed as ``W x_theta - W y_phi``
        and the pair tensor never holds d_mid-wide rows.
        """
        lead_x, lead_y = x.shape[:-1], y.shape[:-1]
        wx = self.W(self.embed_x(x.reshape(-1, self.d_in))).reshape(*lead_x, self.d_out)
        wy = self.W(self.embed_y(y.reshape(-1, self.d_in))).reshape(*lead_y, self.d_out)
        return self.finish(wx.unsqueeze(-2) - wy.unsqueeze(-3))


def relation_vector(x: torch.Tensor, y: torch.Tensor, unit: RelationUnit) -> torch.Tensor:
    """Relation between two single vectors ``[d_in]`` -> ``[d_out]``."""
    return unit(x[None], y[None])[0]


class RelationGuidedLocalization(nn.Module):
    def __init__(self, channels: int, spatial: tuple[int, int], r1: int, r2: int):
        super().__init__()
        self.channels = channels
        self.spatial = tuple(spatial)
        self.num_positions = spatial[0] * spatial[1]
        self.unit = RelationUnit(channels, channels // r1, channels // r2)
        self.relation_width = self.num_positions * self.unit.d_out
        self.W_a = nn.Linear(channels + self.relation_width, channels, bias=False)
        self.bn_a = RowBatchNorm(channels)

    def relations(self, feat: torch.Tensor) -> torch.Tensor:
        """``F [B, C, H, W]`` -> global relation vectors ``[B, N, N * d_out]``.

        Row i concatenates ``r(f_i, f_j)`` for j = 1..N in row-major order.
        """
        b = feat.shape[0]
        f = feat.flatten(2).transpose(1, 2)
        return self.unit.pairwise(f, f).reshape(b, self.num_positions, self.relation_width)

    def forward(self, feat: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        """Returns the attention map ``A`` and the gated map ``A * F``, both ``[B, C, H, W]``."""
        b, c, h, w = feat.shape
        if (h, w) != self.spatial or c != self.channels:
            raise ValueError(f"expected feature maps [B, {c}, {self.spatial}], got {tuple(feat.shape)}")
        f = feat.flatten(2).transpose(1, 2)
        joint = torch.cat([f, self.relations(feat)], dim=-1)
        a = torch.sigmoid(self.bn_a(self.W_a(joint).reshape(-1, c))).reshape(b, h * w, c)
        attn = a.transpose(1, 2).reshape(b, c, h, w)
        return attn, attn * feat


def instance_norm(x: torch.Tensor, gamma: torch.Tensor | None = None,
                  beta: torch.Tensor | None = None, eps: float = IN_EPS) -> torch.Tensor:
    """Per-sample, per-channel normalization over the spatial axes of ``[B, C, H, W]``."""
    mu = x.mean(dim=(-2, -1), keepdim=True)
    var = x.var(dim=(-2, -1), keepdim=True, unbiased=False)
    out = (x - mu) / torch.sqrt(var + eps)
    if gamma is not None:
        out = out * gamma[:, None, None]
    if beta is not None:
        out = out + beta[:, None, None]
    return out


def restitute(normalized: torch.Tensor, removed: torch.Tensor, gate: torch.Tensor) -> torch.Tensor:
    """``F_hat = F_IN + w_C * R`` with ``gate [B, C]`` broadcast over space."""
    return normalized + gate[:, :, None, None] * removed


class ChannelAttentionFiltration(nn.Module):
    def __init__(self, channels: int, se_ratio: int = 16):
        super().__init__()
        hidden = max(1, channels // se_ratio)
        self.gamma = nn.Parameter(torch.ones(channels))
        self.beta = nn.Parameter(torch.zeros(channels))
        self.squeeze = nn.Linear(channels, hidden, bias=False)
        self.excite = nn.Linear(hidden, channels, bias=False)

    def gate(self, removed: torch.Tensor) -> torch.Tensor:
        return torch.sigmoid(self.excite(F.relu(self.squeeze(removed.mean(dim=(-2, -1))))))

    def forward(self, feat: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
        """Returns ``(F_hat, R, w_C)`` for a gated map ``feat [B, C, H, W]``."""
        normalized = instance_norm(feat, self.gamma, self.beta)
        removed = feat - normalized
        w = self.gate(removed)
        return restitute(normalized, removed, w), removed, w
