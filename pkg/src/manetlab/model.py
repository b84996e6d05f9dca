"""The full network: backbones, suppression, global and local alignment, classifiers."""

from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass, field

import torch
from torch import nn

from .alignment import (GlobalImageHead, GlobalTextHead, ImplicitLocalAlignment,
                        SharedGlobalHead)
from .encoders import TextEncoder, VisualEncoder, WordEmbedding, valid_mask
from .objectives import (ClassifierBank, LossBreakdown, LossConfig, consistency_loss,
                         id_loss, ranking_loss, total_loss)
from .suppression import ChannelAttentionFiltration, RelationGuidedLocalization


@dataclass(frozen=True)
class ModelConfig:
    image_height: int = 48
    image_width: int = 16
    in_channels: int = 3
    backbone_widths: tuple[int, ...] = (32, 64)
    convs_per_stage: int = 2
    embed_dim: int = 32
    caption_len: int = 24
    d_g: int = 64
    d_c: int = 32
    num_centers: int = 6
    r1: int = 4
    r2: int = 16
    r3: int = 4
    se_ratio: int = 4
    ga: bool = True
    ila: bool = True
    rgl: bool = True
    caf: bool = True
    assignment: str = "relation"
    center_init: str = "normal"

    @property
    def channels(self) -> int:
        return self.backbone_widths[-1]

    def with_flags(self, flags) -> "ModelConfig":
        flags = {f.lower() for f in flags}
        unknown = flags - {"ga", "ila", "rgl", "caf"}
        if unknown:
            raise ValueError(f"unknown component flags {sorted(unknown)}")
        return dataclasses.replace(self, ga="ga" in flags, ila="ila" in flags,
                                   rgl="rgl" in flags, caf="caf" in flags)


FULL_DIMS = ModelConfig(
    image_height=384, image_width=128, backbone_widths=(64, 128, 256, 2048),
    convs_per_stage=1, embed_dim=512, caption_len=100, d_g=2048, d_c=512,
    num_centers=6, r1=32, r2=256, r3=4, se_ratio=16,
)


def config_hash(cfg: ModelConfig, vocab_size: int, num_classes: int) -> str:
    payload = dict(dataclasses.asdict(cfg), vocab_size=vocab_size, num_classes=num_classes)
    return hashlib.sha256(json.dumps(payload, sort_keys=True).encode()).hexdigest()


@dataclass
class EmbeddingBundle:
    """Per-sample embeddings: ``global_ [B, d_g]`` and ``locals [B, K, d_c]`` (or None)."""

    global_: torch.Tensor
    locals: torch.Tensor | None = None

    @property
    def local_concat(self) -> torch.Tensor | None:
        return None if self.locals is None else self.locals.flatten(1)

    def detach(self) -> "EmbeddingBundle":
        return EmbeddingBundle(self.global_.detach(),
                               None if self.locals is None else self.locals.detach())


@dataclass
class ImageOutputs:
    feat: torch.Tensor
    gated: torch.Tensor
    filtered: torch.Tensor
    bundle: EmbeddingBundle
    attention: torch.Tensor | None = None
    removed: torch.Tensor | None = None
    gate: torch.Tensor | None = None


@dataclass
class TextOutputs:
    feat: torch.Tensor
    mask: torch.Tensor
    bundle: EmbeddingBundle
    extras: dict = field(default_factory=dict)


class MANet(nn.Module):
    def __init__(self, cfg: ModelConfig, vocab_size: int, num_classes: int):
        super().__init__()
        self.cfg, self.vocab_size, self.num_classes = cfg, vocab_size, num_classes
        c = cfg.channels
        self.backbone = VisualEncoder(cfg.in_channels, cfg.backbone_widths,
                                      (cfg.image_height, cfg.image_width), cfg.convs_per_stage)
        self.word_embedding = WordEmbedding(vocab_size, cfg.embed_dim)
        self.text_encoder = TextEncoder(cfg.embed_dim, c)
        self.rgl = RelationGuidedLocalization(c, self.backbone.output_size, cfg.r1, cfg.r2) if cfg.rgl else None
        self.caf = ChannelAttentionFiltration(c, cfg.se_ratio) if cfg.caf else None
        if cfg.ga:
            self.image_global = GlobalImageHead(c, cfg.d_g)
            self.text_global = GlobalTextHead(c, cfg.d_g)
        else:
            self.shared_global = SharedGlobalHead(c, cfg.d_g)
        self.ila = (ImplicitLocalAlignment(c, cfg.d_c, cfg.num_centers, cfg.r3,
                                           cfg.assignment, cfg.center_init) if cfg.ila else None)
        self.classifier = ClassifierBank(cfg.d_g, cfg.d_c, cfg.num_centers if cfg.ila else 0, num_classes)

    @property
    def hash(self) -> str:
        return config_hash(self.cfg, self.vocab_size, self.num_classes)

    def backbone_parameters(self) -> list[nn.Parameter]:
        return list(self.backbone.parameters())

    def rest_parameters(self) -> list[nn.Parameter]:
        ids = {id(p) for p in self.backbone.parameters()}
        return [p for p in self.parameters() if id(p) not in ids]

    def encode_images(self, images: torch.Tensor) -> ImageOutputs:
        feat = self.backbone(images)
        attention = None
        gated = feat
        if self.rgl is not None:
            attention, gated = self.rgl(feat)
        filtered, removed, gate = gated, None, None
        if self.caf is not None:
            filtered, removed, gate = self.caf(gated)
        if self.cfg.ga:
            g = self.image_global(filtered)
        else:
            g = self.shared_global.image(filtered)
        locals_ = self.ila(filtered) if self.ila is not None else None
        return ImageOutputs(feat, gated, filtered, EmbeddingBundle(g, locals_),
                            attention, removed, gate)

    def encode_texts(self, tokens: torch.Tensor, lengths: torch.Tensor) -> TextOutputs:
        feat = self.text_encoder(self.word_embedding(tokens), lengths)
        mask = valid_mask(lengths, tokens.shape[-1])
        if self.cfg.ga:
            g = self.text_global(feat, mask)
        else:
            g = self.shared_global.text(feat, mask)
        locals_ = self.ila(feat, mask) if self.ila is not None else None
        return TextOutputs(feat, mask, EmbeddingBundle(g, locals_))

    def loss(self, img: ImageOutputs, txt: TextOutputs, labels: torch.Tensor,
             surrogate: torch.Tensor, loss_cfg: LossConfig) -> LossBreakdown:
        vi, ti = img.bundle, txt.bundle
        term_id = id_loss(vi.global_, ti.global_, labels, self.classifier, vi.locals, ti.locals)
        rank_g = ranking_loss(vi.global_, ti.global_, ti.global_[surrogate], labels,
                              loss_cfg.alpha1, loss_cfg.alpha2, loss_cfg.lambda1)
        zero = term_id.new_zeros(())
        rank_l = zero
        if self.ila is not None:
            tl = ti.local_concat
            rank_l = ranking_loss(vi.local_concat, tl, tl[surrogate], labels,
                                  loss_cfg.alpha1, loss_cfg.alpha2, loss_cfg.lambda1)
        cons = zero
        if self.caf is not None:
            cons = consistency_loss(img.gated, img.filtered, labels, loss_cfg.alpha3)
        return total_loss(term_id, rank_g, rank_l, cons, loss_cfg.lambda2)


def param_count(model: nn.Module) -> int:
    return sum(p.numel() for p in model.parameters() if p.requires_grad)
