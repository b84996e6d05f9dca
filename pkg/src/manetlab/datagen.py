"""Synthetic person identities, images and captions.

Each identity is a tuple of colour attributes (hair, shirt, pants, shoes, bag).
Images paint those colours into a fixed body template over a cluttered
background and apply a per-image illumination nuisance (channel tint and
global brightness) to the body. Captions name every attribute through
shuffled template clauses and never mention the background or the
illumination, so the text carries strictly less information than the image.
"""

from __future__ import annotations

import json
from collections import Counter
from collections.abc import Iterable, Sequence
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import arrayio
from .errors import CapacityError, VocabularyError

PAD = "<pad>"

COLORS: dict[str, tuple[float, float, float]] = {
    "red": (0.85, 0.15, 0.15),
    "green": (0.15, 0.70, 0.20),
    "blue": (0.15, 0.25, 0.85),
    "yellow": (0.90, 0.85, 0.15),
    "white": (0.92, 0.92, 0.92),
    "black": (0.08, 0.08, 0.08),
}
COLOR_NAMES = tuple(COLORS)

SLOTS = ("head", "top", "bottom", "shoes", "accessory")
SLOT_PALETTES: dict[str, tuple[str, ...]] = {slot: COLOR_NAMES for slot in SLOTS}

# (row0, row1, col0, col1) on the 48x16 reference canvas; accessory is painted last.
BODY_TEMPLATE: dict[str, tuple[int, int, int, int]] = {
    "head": (3, 11, 5, 11),
    "top": (11, 26, 3, 13),
    "bottom": (26, 41, 4, 12),
    "shoes": (41, 45, 4, 12),
    "accessory": (15, 21, 3, 6),
}
REFERENCE_SIZE = (48, 16)

CLAUSES: dict[str, tuple[str, ...]] = {
    "head": ("{c} hair", "hair is {c}", "with {c} hair"),
    "top": ("a {c} shirt", "wearing a {c} shirt", "{c} shirt"),
    "bottom": ("{c} pants", "wearing {c} pants"),
    "shoes": ("{c} shoes", "with {c} shoes"),
    "accessory": ("a {c} bag", "carrying a {c} bag"),
}
FUNCTION_WORDS = ("and", "the", "person", ".")
MAX_DISTRACTORS = 3

TINT_RANGE = (0.7, 1.3)
BRIGHTNESS_RANGE = (0.6, 1.4)
NUM_BACKGROUNDS = 16
CLUTTER_BLOCK = 4
# share of background blocks painted with body palette colours
CLUTTER_PALETTE_SHARE = 0.5


@dataclass(frozen=True)
class IdentitySpec:
    id: int
    attributes: tuple[int, ...]

    def colors(self) -> dict[str, str]:
        return {slot: SLOT_PALETTES[slot][a] for slot, a in zip(SLOTS, self.attributes)}


@dataclass(frozen=True)
class Nuisance:
    background_id: int
    tint: tuple[float, float, float] = (1.0, 1.0, 1.0)
    brightness: float = 1.0

    def __post_init__(self):
        if len(self.tint) != 3:
            raise ValueError("tint must have three components")
        if not all(0.5 <= t <= 1.5 for t in self.tint):
            raise ValueError(f"tint components must lie in [0.5, 1.5], got {self.tint}")
        if not 0.5 <= self.brightness <= 1.5:
            raise ValueError(f"brightness must lie in [0.5, 1.5], got {self.brightness}")
        if self.background_id < 0:
            raise ValueError("background_id must be non-negative")

    def to_json(self) -> dict:
        return {
            "background_id": int(self.background_id),
            "tint": [float(t) for t in self.tint],
            "brightness": float(self.brightness),
        }


class Vocabulary:
    """Word to id map with id 0 reserved for padding."""

    def __init__(self, words: Iterable[str]):
        self.itos: list[str] = [PAD] + [w for w in words if w != PAD]
        self.stoi: dict[str, int] = {w: i for i, w in enumerate(self.itos)}
        if len(self.stoi) != len(self.itos):
            raise ValueError("duplicate words in vocabulary")

    def __len__(self) -> int:
        return len(self.itos)

    def __contains__(self, word: str) -> bool:
        return word in self.stoi

    def encode(self, words: Sequence[str]) -> list[int]:
        missing = [w for w in words if w not in self.stoi]
        if missing:
            raise VocabularyError(f"words not in vocabulary: {sorted(set(missing))}")
        return [self.stoi[w] for w in words]

    def decode(self, ids: Iterable[int]) -> list[str]:
        return [self.itos[int(i)] for i in ids if int(i) != 0]

    def to_json(self) -> list[str]:
        return list(self.itos)

    @classmethod
    def from_json(cls, itos: list[str]) -> "Vocabulary":
        if not itos or itos[0] != PAD:
            raise ValueError("vocabulary must start with the padding token")
        return cls(itos[1:])


def attribute_space_size() -> int:
    return int(np.prod([len(SLOT_PALETTES[s]) for s in SLOTS]))


def gen_identities(seed: int, num_ids: int) -> list[IdentitySpec]:
    capacity = attribute_space_size()
    if num_ids < 0:
        raise ValueError("num_ids must be non-negative")
    if num_ids > capacity:
        raise CapacityError(f"requested {num_ids} identities, attribute space holds {capacity}")
    rng = np.random.default_rng(seed)
    codes = rng.choice(capacity, size=num_ids, replace=False)
    sizes = [len(SLOT_PALETTES[s]) for s in SLOTS]
    specs = []
    for label, code in enumerate(codes):
        attrs = []
        code = int(code)
        for size in sizes:
            attrs.append(code % size)
            code //= size
        specs.append(IdentitySpec(label, tuple(attrs)))
    return specs


def _scaled_box(box, height, width):
    r0, r1, c0, c1 = box
    rh, rw = REFERENCE_SIZE
    return (r0 * height // rh, r1 * height // rh, c0 * width // rw, c1 * width // rw)


def body_mask(height: int = 48, width: int = 16) -> np.ndarray:
    mask = np.zeros((height, width), dtype=bool)
    for slot in ("head", "top", "bottom", "shoes"):
        r0, r1, c0, c1 = _scaled_box(BODY_TEMPLATE[slot], height, width)
        mask[r0:r1, c0:c1] = True
    return mask


def background_pattern(background_id: int, height: int = 48, width: int = 16,
                       block: int | None = None) -> np.ndarray:
    """Blocky clutter, half of whose blocks reuse body colours as distractors."""
    rng = np.random.default_rng([0xB6, background_id])
    block = CLUTTER_BLOCK if block is None else block
    block = max(1, block * height // REFERENCE_SIZE[0])
    gh, gw = -(-height // block), -(-width // block)
    palette = np.array(list(COLORS.values()))
    colors = rng.uniform(0.0, 1.0, size=(gh, gw, 3))
    use_palette = rng.random((gh, gw)) < CLUTTER_PALETTE_SHARE
    picks = palette[rng.integers(0, len(palette), size=(gh, gw))]
    colors[use_palette] = picks[use_palette]
    tiles = np.repeat(np.repeat(colors, block, axis=0), block, axis=1)[:height, :width]
    return np.transpose(tiles, (2, 0, 1))


def render_image(spec: IdentitySpec, nuisance: Nuisance, rng: np.random.Generator,
                 height: int = 48, width: int = 16,
                 clutter_block: int | None = None) -> tuple[np.ndarray, np.ndarray]:
    """Paint one identity; returns a [3, H, W] image in [0, 1] and an [H, W] body mask."""
    background = background_pattern(nuisance.background_id, height, width, clutter_block)
    shift = rng.integers(0, [height, width])
    background = np.roll(background, shift=(int(shift[0]), int(shift[1])), axis=(1, 2))

    body = np.zeros((3, height, width))
    for slot, color in spec.colors().items():
        r0, r1, c0, c1 = _scaled_box(BODY_TEMPLATE[slot], height, width)
        body[:, r0:r1, c0:c1] = np.asarray(COLORS[color])[:, None, None]
    gain = np.asarray(nuisance.tint, dtype=float)[:, None, None] * nuisance.brightness
    body = np.clip(body * gain, 0.0, 1.0)

    mask = body_mask(height, width)
    image = np.where(mask[None], body, background)
    return image.astype(np.float32), mask


def caption_words(spec: IdentitySpec, rng: np.random.Generator) -> list[str]:
    clauses = []
    for slot, color in spec.colors().items():
        options = CLAUSES[slot]
        template = options[int(rng.integers(len(options)))]
        clauses.append(template.format(c=color).split())
    order = rng.permutation(len(clauses))
    pieces = [clauses[i] for i in order]
    for _ in range(int(rng.integers(0, MAX_DISTRACTORS + 1))):
        at = int(rng.integers(0, len(pieces) + 1))
        pieces.insert(at, [FUNCTION_WORDS[int(rng.integers(len(FUNCTION_WORDS)))]])
    return [w for piece in pieces for w in piece]


def pad_or_truncate(ids: Sequence[int], length: int) -> tuple[np.ndarray, int]:
    """Keep the first ``length`` ids and zero-fill the rest."""
    tokens = np.zeros(length, dtype=np.int64)
    valid = min(len(ids), length)
    tokens[:valid] = np.asarray(ids[:valid], dtype=np.int64)
    return tokens, valid


def render_caption(spec: IdentitySpec, rng: np.random.Generator, L: int,
                   vocab: Vocabulary | None = None) -> tuple[np.ndarray, int]:
    if L < 5:
        raise ValueError("caption length must be at least 5")
    vocab = vocab if vocab is not None else standard_vocab()
    return pad_or_truncate(vocab.encode(caption_words(spec, rng)), L)


def build_vocab(corpus: Sequence[Sequence[str]]) -> Vocabulary:
    """Keep words seen more than twice; ids follow first appearance in the corpus."""
    if not corpus:
        raise ValueError("corpus must be non-empty")
    counts = Counter(w for sentence in corpus for w in sentence)
    seen: dict[str, None] = {}
    for sentence in corpus:
        for w in sentence:
            if counts[w] > 2 and w != PAD:
                seen.setdefault(w)
    return Vocabulary(seen)


def standard_corpus() -> list[list[str]]:
    """Every clause with every colour, three times, plus the function words."""
    corpus = []
    for _ in range(3):
        for slot in SLOTS:
            for template in CLAUSES[slot]:
                for color in SLOT_PALETTES[slot]:
                    corpus.append(template.format(c=color).split())
        corpus.append(list(FUNCTION_WORDS))
    return corpus


def standard_vocab() -> Vocabulary:
    return build_vocab(standard_corpus())


def sample_rngs(seed: int, index: int) -> tuple[np.random.Generator, ...]:
    """Independent (nuisance, image, caption) streams for one sample."""
    children = np.random.SeedSequence([seed, index]).spawn(3)
    return tuple(np.random.default_rng(c) for c in children)


def sample_nuisance(rng: np.random.Generator, num_backgrounds: int = NUM_BACKGROUNDS) -> Nuisance:
    return Nuisance(
        background_id=int(rng.integers(num_backgrounds)),
        tint=tuple(float(t) for t in rng.uniform(*TINT_RANGE, size=3)),
        brightness=float(rng.uniform(*BRIGHTNESS_RANGE)),
    )


@dataclass
class SyntheticDataset:
    seed: int
    identities: list[IdentitySpec]
    vocab: Vocabulary
    images: np.ndarray        # [M, 3, H, W] float32
    masks: np.ndarray         # [M, H, W] bool
    tokens: np.ndarray        # [M, L] int64
    lengths: np.ndarray       # [M] int64
    labels: np.ndarray        # [M] int64
    nuisances: list[Nuisance]
    splits: np.ndarray        # [M] "train" / "test"
    meta: dict = field(default_factory=dict)

    def __len__(self) -> int:
        return len(self.labels)

    @property
    def caption_len(self) -> int:
        return int(self.tokens.shape[1])

    @property
    def num_ids(self) -> int:
        return len(self.identities)

    def indices(self, split: str | None = None) -> np.ndarray:
        if split is None or split == "all":
            return np.arange(len(self))
        if split not in ("train", "test"):
            raise ValueError(f"unknown split {split!r}")
        return np.flatnonzero(self.splits == split)

    def subset(self, idx) -> "SyntheticDataset":
        idx = np.asarray(idx)
        return SyntheticDataset(
            seed=self.seed, identities=self.identities, vocab=self.vocab,
            images=self.images[idx], masks=self.masks[idx], tokens=self.tokens[idx],
            lengths=self.lengths[idx], labels=self.labels[idx],
            nuisances=[self.nuisances[i] for i in idx], splits=self.splits[idx],
            meta=dict(self.meta),
        )


def generate_dataset(seed: int, num_ids: int, images_per_id: int, caption_len: int = 24,
                     holdout_per_id: int | None = None, height: int = 48, width: int = 16,
                     num_backgrounds: int = NUM_BACKGROUNDS,
                     clutter_block: int | None = None) -> SyntheticDataset:
    """Sample ``images_per_id`` image/caption pairs per identity.

    The last ``holdout_per_id`` images of every identity (default a quarter,
    at least one) form the ``test`` split.
    """
    if images_per_id < 1:
        raise ValueError("images_per_id must be positive")
    if holdout_per_id is None:
        holdout_per_id = max(1, images_per_id // 4) if images_per_id > 1 else 0
    if not 0 <= holdout_per_id < images_per_id:
        raise ValueError("holdout_per_id must leave at least one training image per identity")

    clutter_block = CLUTTER_BLOCK if clutter_block is None else clutter_block
    identities = gen_identities(seed, num_ids)
    vocab = standard_vocab()
    m = num_ids * images_per_id
    images = np.zeros((m, 3, height, width), dtype=np.float32)
    masks = np.zeros((m, height, width), dtype=bool)
    tokens = np.zeros((m, caption_len), dtype=np.int64)
    lengths = np.zeros(m, dtype=np.int64)
    labels = np.zeros(m, dtype=np.int64)
    splits = np.empty(m, dtype=object)
    nuisances = []
    for idx in range(m):
        spec = identities[idx // images_per_id]
        rng_n, rng_i, rng_c = sample_rngs(seed, idx)
        nuisance = sample_nuisance(rng_n, num_backgrounds)
        images[idx], masks[idx] = render_image(spec, nuisance, rng_i, height, width,
                                                  clutter_block)
        tokens[idx], lengths[idx] = render_caption(spec, rng_c, caption_len, vocab)
        labels[idx] = spec.id
        splits[idx] = "test" if idx % images_per_id >= images_per_id - holdout_per_id else "train"
        nuisances.append(nuisance)
    meta = {
        "seed": seed, "num_ids": num_ids, "images_per_id": images_per_id,
        "holdout_per_id": holdout_per_id, "caption_len": caption_len,
        "height": height, "width": width, "num_backgrounds": num_backgrounds,
        "clutter_block": clutter_block,
    }
    return SyntheticDataset(seed, identities, vocab, images, masks, tokens, lengths,
                            labels, nuisances, splits.astype(str), meta)


def write_dataset(ds: SyntheticDataset, out: str | Path) -> Path:
    out = Path(out)
    (out / "images").mkdir(parents=True, exist_ok=True)
    (out / "masks").mkdir(parents=True, exist_ok=True)
    lines = []
    for idx in range(len(ds)):
        image_file = f"images/{idx:06d}.bin"
        mask_file = f"masks/{idx:06d}.bin"
        arrayio.write_array(out / image_file, ds.images[idx])
        arrayio.write_array(out / mask_file, ds.masks[idx].astype(np.float32))
        record = {
            "id": idx,
            "label": int(ds.labels[idx]),
            "attributes": list(ds.identities[int(ds.labels[idx])].attributes),
            "image": image_file,
            "mask": mask_file,
            "tokens": [int(t) for t in ds.tokens[idx]],
            "valid_length": int(ds.lengths[idx]),
            "nuisance": ds.nuisances[idx].to_json(),
            "split": str(ds.splits[idx]),
        }
        lines.append(json.dumps(record, sort_keys=True))
    (out / "manifest.jsonl").write_text("\n".join(lines) + "\n")
    (out / "vocab.json").write_text(json.dumps(ds.vocab.to_json()) + "\n")
    (out / "dataset.json").write_text(json.dumps(ds.meta, sort_keys=True, indent=2) + "\n")
    return out


def load_dataset(path: str | Path) -> SyntheticDataset:
    path = Path(path)
    meta = json.loads((path / "dataset.json").read_text())
    vocab = Vocabulary.from_json(json.loads((path / "vocab.json").read_text()))
    records = [json.loads(line) for line in (path / "manifest.jsonl").read_text().splitlines() if line]
    records.sort(key=lambda r: r["id"])
    specs: dict[int, IdentitySpec] = {}
    for r in records:
        specs.setdefault(r["label"], IdentitySpec(r["label"], tuple(r["attributes"])))
    images = np.stack([arrayio.read_array(path / r["image"]) for r in records])
    masks = np.stack([arrayio.read_array(path / r["mask"]) > 0.5 for r in records])
    return SyntheticDataset(
        seed=meta["seed"],
        identities=[specs[k] for k in sorted(specs)],
        vocab=vocab,
        images=images,
        masks=masks,
        tokens=np.array([r["tokens"] for r in records], dtype=np.int64),
        lengths=np.array([r["valid_length"] for r in records], dtype=np.int64),
        labels=np.array([r["label"] for r in records], dtype=np.int64),
        nuisances=[Nuisance(r["nuisance"]["background_id"], tuple(r["nuisance"]["tint"]),
                            r["nuisance"]["brightness"]) for r in records],
        splits=np.array([r["split"] for r in records]),
        meta=meta,
    )
