"""Visual and textual backbones.

The visual backbone is a small strided convolution stack standing in for a
pretrained ResNet-50; the textual backbone is a bidirectional gated
recurrent encoder whose per-word output is the mean of the two directions.
"""

from __future__ import annotations

from collections.abc import Sequence

import torch
from torch import nn


def embed_words(tokens: torch.Tensor, weight: torch.Tensor) -> torch.Tensor:
    """Look up word vectors: ``[L]`` ids -> ``[d_e, L]`` (or batched ``[B, d_e, L]``)."""
    if tokens.numel() and (int(tokens.min()) < 0 or int(tokens.max()) >= weight.shape[0]):
        raise IndexError(f"token id out of range for vocabulary of size {weight.shape[0]}")
    return weight[tokens].transpose(-1, -2)


def valid_mask(lengths: torch.Tensor, max_len: int) -> torch.Tensor:
    return torch.arange(max_len, device=lengths.device)[None, :] < lengths[:, None]


def reverse_valid(x: torch.Tensor, lengths: torch.Tensor) -> torch.Tensor:
    """Reverse each sequence of ``x [B, L, D]`` within its valid prefix; padding stays put."""
    batch, max_len = x.shape[:2]
    pos = torch.arange(max_len, device=x.device)[None, :].expand(batch, -1)
    rev = lengths[:, None] - 1 - pos
    idx = torch.where(rev >= 0, rev, pos)
    return x.gather(1, idx[..., None].expand_as(x))


class WordEmbedding(nn.Module):
    def __init__(self, vocab_size: int, dim: int):
        super().__init__()
        self.weight = nn.Parameter(torch.randn(vocab_size, dim) * 0.1)
        self.zero_padding_row()

    @torch.no_grad()
    def zero_padding_row(self):
        self.weight[0].zero_()

    def forward(self, tokens: torch.Tensor) -> torch.Tensor:
        # the padding row carries no gradient, so Adam never moves it
        w = torch.cat([torch.zeros_like(self.weight[:1]), self.weight[1:]], dim=0)
        return embed_words(tokens, w)


class TextEncoder(nn.Module):
    """Bidirectional GRU; ``E[:, j] = (h_fwd[j] + h_bwd[j]) / 2`` with padding zeroed."""

    def __init__(self, embed_dim: int, hidden: int):
        super().__init__()
        self.hidden = hidden
        self.forward_cell = nn.GRUCell(embed_dim, hidden)
        self.backward_cell = nn.GRUCell(embed_dim, hidden)

    def _run(self, cell: nn.GRUCell, x: torch.Tensor) -> torch.Tensor:
        h = x.new_zeros(x.shape[0], self.hidden)
        states = []
        for t in range(x.shape[1]):
            h = cell(x[:, t], h)
            states.append(h)
        return torch.stack(states, dim=1)

    def forward(self, embeddings: torch.Tensor, lengths: torch.Tensor) -> torch.Tensor:
        """``embeddings [B, d_e, L]``, ``lengths [B]`` -> ``E [B, C, L]``."""
        max_len = embeddings.shape[-1]
        if lengths.numel() and (int(lengths.max()) > max_len or int(lengths.min()) < 0):
            raise ValueError(f"valid_length must lie in [0, {max_len}]")
        x = embeddings.transpose(1, 2)
        h_fwd = self._run(self.forward_cell, x)
        h_bwd = reverse_valid(self._run(self.backward_cell, reverse_valid(x, lengths)), lengths)
        out = 0.5 * (h_fwd + h_bwd) * valid_mask(lengths, max_len)[..., None].to(x.dtype)
        return out.transpose(1, 2)


def encode_text(embeddings: torch.Tensor, valid_length: int, encoder: TextEncoder) -> torch.Tensor:
    """Unbatched convenience wrapper: ``[d_e, L]`` -> ``[C, L]``."""
    if valid_length > embeddings.shape[-1]:
        raise ValueError(f"valid_length {valid_length} exceeds caption length {embeddings.shape[-1]}")
    lengths = torch.tensor([valid_length])
    return encoder(embeddings[None], lengths)[0]


class VisualEncoder(nn.Module):
    """``len(widths)`` stages of stride-2 3x3 convolution + BN + ReLU, optionally
    followed by stride-1 refinement convolutions inside each stage."""

    def __init__(self, in_channels: int = 3, widths: Sequence[int] = (32, 64),
                 input_size: tuple[int, int] = (48, 16), convs_per_stage: int = 1,
                 batch_norm: bool = True):
        super().__init__()
        self.input_size = tuple(input_size)
        layers: list[nn.Module] = []
        prev = in_channels
        for width in widths:
            for stride in [2] + [1] * (convs_per_stage - 1):
                layers.append(nn.Conv2d(prev, width, 3, stride=stride, padding=1, bias=not batch_norm))
                if batch_norm:
                    layers.append(nn.BatchNorm2d(width))
                layers.append(nn.ReLU())
                prev = width
        self.body = nn.Sequential(*layers)
        self.in_channels = in_channels
        self.out_channels = prev
        h, w = self.input_size
        for _ in widths:
            h, w = (h + 1) // 2, (w + 1) // 2
        self.output_size = (h, w)

    def forward(self, images: torch.Tensor) -> torch.Tensor:
        expected = (self.in_channels, *self.input_size)
        if tuple(images.shape[-3:]) != expected:
            raise ValueError(f"expected images of shape [..., {expected}], got {tuple(images.shape)}")
        return self.body(images)


def encode_image(image: torch.Tensor, encoder: VisualEncoder) -> torch.Tensor:
    """Unbatched convenience wrapper: ``[3, H_in, W_in]`` -> ``F [C, H, W]``."""
    return encoder(image[None])[0]
