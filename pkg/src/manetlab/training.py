"""Optimization loop: identity-balanced batches, two Adam parameter groups with
warmup and step decay, per-epoch evaluation, checkpoints."""

from __future__ import annotations

import copy
import csv
import json
import logging
import math
from dataclasses import dataclass, field
from decimal import Decimal
from pathlib import Path

import numpy as np
import torch

from . import arrayio
from .errors import CompatibilityError, NumericError
from .model import MANet, ModelConfig
from .objectives import LossConfig, pick_surrogates
from .retrieval import evaluate

log = logging.getLogger(__name__)

METRIC_FIELDS = ("epoch", "lr", "loss_id", "loss_rank", "loss_cons", "loss_total", "r1", "r5", "r10")


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 40
    batch_size: int = 32
    batch_ids: int = 8
    lr_backbone: float = 0.001
    lr_rest: float = 0.01
    decay_epochs: tuple[int, ...] = (30, 50)
    decay_factor: float = 0.1
    warmup_epochs: int = 10
    flip_prob: float = 0.5
    seed: int = 0

    def __post_init__(self):
        if self.epochs < 0:
            raise ValueError("epochs must be non-negative")
        if self.decay_epochs and self.warmup_epochs >= min(self.decay_epochs):
            raise ValueError("warmup must end before the first decay epoch")
        if not 0 < self.decay_factor < 1:
            raise ValueError("decay_factor must lie in (0, 1)")
        if self.batch_ids < 2:
            raise ValueError("batches need at least two identities")
        if self.batch_size % self.batch_ids:
            raise ValueError("batch_size must be a multiple of batch_ids")

    @property
    def images_per_id(self) -> int:
        return self.batch_size // self.batch_ids


PAPER_SCHEDULE = TrainConfig(epochs=70, batch_size=64, batch_ids=16)


def lr_multiplier(epoch: int, warmup_epochs: int = 10, decay_epochs=(30, 50),
                  decay_factor: float = 0.1) -> float:
    if epoch < 0:
        raise ValueError("epoch must be non-negative")
    if epoch < warmup_epochs:
        return 0.1 + 0.9 * epoch / warmup_epochs
    n = sum(1 for d in decay_epochs if epoch >= d)
    # exact decimal power so 0.1 ** 2 is the float 0.01
    return float(Decimal(repr(decay_factor)) ** n)


def lr_schedule(epoch: int, base_lr: float, warmup_epochs: int = 10, decay_epochs=(30, 50),
                decay_factor: float = 0.1) -> float:
    """Linear warmup from 0.1x over ``warmup_epochs``, then step decay."""
    return lr_multiplier(epoch, warmup_epochs, decay_epochs, decay_factor) * base_lr


class PKSampler:
    """Batches of P identities x Q images drawn from the training indices."""

    def __init__(self, labels: np.ndarray, indices: np.ndarray, p: int, q: int,
                 rng: np.random.Generator):
        self.p, self.q, self.rng = p, q, rng
        self.by_id: dict[int, np.ndarray] = {}
        for idx in indices:
            self.by_id.setdefault(int(labels[idx]), []).append(int(idx))
        self.by_id = {k: np.asarray(v) for k, v in sorted(self.by_id.items())}
        if len(self.by_id) < 2:
            raise ValueError("need at least two identities to form batches")
        self.p = min(p, len(self.by_id))
        self.batches_per_epoch = max(1, math.ceil(len(indices) / (self.p * q)))

    def epoch(self):
        ids = np.asarray(list(self.by_id))
        for _ in range(self.batches_per_epoch):
            chosen = self.rng.choice(ids, size=self.p, replace=False)
            batch = []
            for k in chosen:
                pool = self.by_id[int(k)]
                batch.extend(self.rng.choice(pool, size=self.q, replace=len(pool) < self.q))
            yield np.asarray(batch)


@dataclass
class CheckpointRecord:
    arrays: dict[str, np.ndarray]
    epoch: int
    config_hash: str

    def to_archive(self) -> dict[str, np.ndarray]:
        out = dict(self.arrays)
        out["meta/epoch"] = np.array(self.epoch, dtype=np.float64)
        out["meta/config_sha256"] = np.frombuffer(bytes.fromhex(self.config_hash), dtype=np.uint8).astype(np.float64)
        return out

    def save(self, path) -> None:
        arrayio.save_archive(path, self.to_archive())

    @classmethod
    def load(cls, path) -> "CheckpointRecord":
        arrays = arrayio.load_archive(path)
        epoch = int(arrays.pop("meta/epoch"))
        digest = bytes(arrays.pop("meta/config_sha256").astype(np.uint8)).hex()
        return cls(arrays, epoch, digest)

    @classmethod
    def capture(cls, model: MANet, optimizer: torch.optim.Optimizer | None, epoch: int) -> "CheckpointRecord":
        arrays = {f"model/{k}": v.detach().cpu().double().numpy().copy()
                  for k, v in model.state_dict().items()}
        if optimizer is not None:
            names = {id(p): n for n, p in model.named_parameters()}
            for group in optimizer.param_groups:
                for p in group["params"]:
                    for key, value in optimizer.state.get(p, {}).items():
                        arrays[f"optim/{names[id(p)]}/{key}"] = torch.as_tensor(value).detach().double().numpy().copy()
        return cls(arrays, epoch, model.hash)

    def restore(self, model: MANet, optimizer: torch.optim.Optimizer | None = None) -> None:
        if self.config_hash != model.hash:
            raise CompatibilityError(
                f"checkpoint config {self.config_hash[:12]} does not match model config {model.hash[:12]}")
        state = model.state_dict()
        for key, tensor in state.items():
            arr = self.arrays.get(f"model/{key}")
            if arr is None or tuple(arr.shape) != tuple(tensor.shape):
                raise CompatibilityError(f"checkpoint lacks a matching entry for {key}")
            with torch.no_grad():
                tensor.copy_(torch.from_numpy(arr).to(tensor.dtype))
        if optimizer is not None:
            params = dict(model.named_parameters())
            for name, p in params.items():
                prefix = f"optim/{name}/"
                entries = {k[len(prefix):]: v for k, v in self.arrays.items() if k.startswith(prefix)}
                if entries:
                    optimizer.state[p] = {
                        k: torch.tensor(float(v)) if k == "step" else torch.from_numpy(v).to(p.dtype)
                        for k, v in entries.items()
                    }


@dataclass
class TrainResult:
    model: MANet
    best: CheckpointRecord
    last: CheckpointRecord
    metrics: list[dict] = field(default_factory=list)


def build_model(model_cfg: ModelConfig, dataset, seed: int) -> MANet:
    torch.manual_seed(seed)
    return MANet(model_cfg, len(dataset.vocab), dataset.num_ids)


def make_optimizer(model: MANet, cfg: TrainConfig) -> torch.optim.Adam:
    return torch.optim.Adam([
        {"params": model.backbone_parameters(), "lr": cfg.lr_backbone, "base_lr": cfg.lr_backbone},
        {"params": model.rest_parameters(), "lr": cfg.lr_rest, "base_lr": cfg.lr_rest},
    ])


def _write_metrics(path: Path, rows: list[dict]) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=METRIC_FIELDS)
        writer.writeheader()
        for row in rows:
            writer.writerow({k: row[k] for k in METRIC_FIELDS})


def train(cfg: TrainConfig, dataset, model: MANet | None = None,
          model_cfg: ModelConfig | None = None, loss_cfg: LossConfig | None = None,
          out_dir=None, eval_split: str = "test") -> TrainResult:
    """Train end to end. Deterministic for a fixed ``cfg.seed``.

    Writes ``metrics.csv``, ``best.ckpt`` and ``last.ckpt`` under ``out_dir``
    when given. The returned model is the final one; ``best`` holds the
    highest-R@1 epoch.
    """
    loss_cfg = loss_cfg or LossConfig()
    if model is None:
        model = build_model(model_cfg or ModelConfig(), dataset, cfg.seed)
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)

    torch.manual_seed(cfg.seed)
    rng = np.random.default_rng(cfg.seed)
    generator = torch.Generator().manual_seed(cfg.seed)
    optimizer = make_optimizer(model, cfg)

    images = torch.from_numpy(dataset.images)
    tokens = torch.from_numpy(dataset.tokens)
    lengths = torch.from_numpy(dataset.lengths)
    labels = torch.from_numpy(dataset.labels)
    dtype = next(model.parameters()).dtype
    sampler = PKSampler(dataset.labels, dataset.indices("train"), cfg.batch_ids,
                        cfg.images_per_id, rng)

    rows: list[dict] = []
    best = None
    best_r1 = -1.0
    for epoch in range(cfg.epochs):
        mult = lr_multiplier(epoch, cfg.warmup_epochs, cfg.decay_epochs, cfg.decay_factor)
        for group in optimizer.param_groups:
            group["lr"] = group["base_lr"] * mult
        model.train()
        sums = {"id": 0.0, "rank": 0.0, "cons": 0.0, "total": 0.0}
        n_batches = 0
        for batch_id, idx in enumerate(sampler.epoch()):
            idx_t = torch.from_numpy(idx)
            imgs = images[idx_t].to(dtype)
            flip = torch.from_numpy(rng.random(len(idx)) < cfg.flip_prob)
            imgs = torch.where(flip[:, None, None, None], imgs.flip(-1), imgs)
            y = labels[idx_t]
            surrogate = pick_surrogates(y, generator)
            img_out = model.encode_images(imgs)
            txt_out = model.encode_texts(tokens[idx_t], lengths[idx_t])
            try:
                parts = model.loss(img_out, txt_out, y, surrogate, loss_cfg)
            except NumericError as exc:
                _dump_divergence(out, epoch, batch_id, idx, str(exc))
                raise NumericError(f"epoch {epoch} batch {batch_id}: {exc}") from exc
            optimizer.zero_grad(set_to_none=True)
            parts.total.backward()
            optimizer.step()
            model.word_embedding.zero_padding_row()
            vals = parts.as_floats()
            sums["id"] += vals["id"]
            sums["rank"] += vals["rank_global"] + vals["rank_local"]
            sums["cons"] += vals["cons"]
            sums["total"] += vals["total"]
            n_batches += 1

        metrics = evaluate(model, dataset, eval_split)
        row = {"epoch": epoch, "lr": optimizer.param_groups[1]["lr"],
               **{f"loss_{k}": v / n_batches for k, v in sums.items()}, **metrics}
        rows.append(row)
        log.info("epoch %d total=%.4f r1=%.4f", epoch, row["loss_total"], row["r1"])
        if metrics["r1"] > best_r1:
            best_r1 = metrics["r1"]
            best = CheckpointRecord.capture(model, optimizer, epoch)
            if out is not None:
                best.save(out / "best.ckpt")
        if out is not None:
            _write_metrics(out / "metrics.csv", rows)

    last = CheckpointRecord.capture(model, optimizer, max(cfg.epochs - 1, 0))
    if best is None:
        best = last
    if out is not None:
        last.save(out / "last.ckpt")
    return TrainResult(model, best, last, rows)


def _dump_divergence(out: Path | None, epoch: int, batch_id: int, idx, message: str) -> None:
    log.error("non-finite loss at epoch %d batch %d: %s", epoch, batch_id, message)
    if out is not None:
        (out / "diverged_batch.json").write_text(json.dumps({
            "epoch": epoch, "batch_id": batch_id, "indices": [int(i) for i in idx],
            "error": message,
        }, indent=2) + "\n")


def parameter_hash(model: torch.nn.Module) -> str:
    import hashlib

    h = hashlib.sha256()
    for name, tensor in model.state_dict().items():
        h.update(name.encode())
        h.update(tensor.detach().cpu().contiguous().numpy().tobytes())
    return h.hexdigest()


def clone_model(model: MANet) -> MANet:
    return copy.deepcopy(model)
