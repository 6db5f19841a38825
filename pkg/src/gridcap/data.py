"""Vocabulary, caption tokenization, synthetic scene datasets, and
Karpathy-split JSON ingestion.

The synthetic datasets render small images of colored shapes whose captions
follow a fixed template ("a red square above a blue circle"), so the whole
pixels-to-words pipeline is learnable on a desk in minutes.
"""

from __future__ import annotations

import json
import string
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .fileio import FormatError, load_image_tensor, save_image_tensor

__all__ = [
    "BOS_ID",
    "EOS_ID",
    "PAD_ID",
    "UNK_ID",
    "RESERVED_TOKENS",
    "Vocabulary",
    "TokenSequence",
    "CaptionExample",
    "SyntheticSceneSpec",
    "Scene",
    "SceneObject",
    "normalize_text",
    "tokenize",
    "detokenize",
    "build_vocab",
    "scene_caption",
    "render_scene",
    "generate_synthetic",
    "save_dataset",
    "load_dataset",
    "load_karpathy_json",
]

BOS_ID, EOS_ID, PAD_ID, UNK_ID = 0, 1, 2, 3
RESERVED_TOKENS = ("<bos>", "<eos>", "<pad>", "<unk>")

_PUNCT_TABLE = str.maketrans("", "", string.punctuation)


class Vocabulary:
    """Token <-> id bijection with fixed reserved ids and a count threshold.

    Non-reserved tokens are ordered by corpus count (descending), ties broken
    lexicographically, so ids are stable across runs on identical corpora.
    """

    def __init__(self, tokens: list[str]):
        for t in tokens:
            if t in RESERVED_TOKENS:
                raise ValueError(f"reserved token {t!r} cannot be re-added")
        if len(set(tokens)) != len(tokens):
            raise ValueError("duplicate tokens in vocabulary")
        self._tokens = list(RESERVED_TOKENS) + list(tokens)
        self._ids = {t: i for i, t in enumerate(self._tokens)}

    def __len__(self) -> int:
        return len(self._tokens)

    def __contains__(self, token: str) -> bool:
        return token in self._ids

    def encode(self, token: str) -> int:
        return self._ids.get(token, UNK_ID)

    def decode(self, idx: int) -> str:
        if not 0 <= idx < len(self._tokens):
            raise IndexError(f"token id {idx} outside vocabulary of size {len(self._tokens)}")
        return self._tokens[idx]

    def encode_words(self, words: list[str]) -> list[int]:
        """[BOS, word ids..., EOS]."""
        return [BOS_ID] + [self.encode(w) for w in words] + [EOS_ID]

    def words_of(self, ids) -> list[str]:
        """Drop delimiters/padding and map ids back to tokens."""
        return [self._tokens[i] for i in ids if i not in (BOS_ID, EOS_ID, PAD_ID)]

    def to_json(self) -> dict:
        return {"tokens": self._tokens[len(RESERVED_TOKENS) :]}

    @classmethod
    def from_json(cls, obj: dict) -> "Vocabulary":
        return cls(list(obj["tokens"]))

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_json(), sort_keys=True))

    @classmethod
    def load(cls, path) -> "Vocabulary":
        return cls.from_json(json.loads(Path(path).read_text()))


def build_vocab(corpus, min_count: int = 1) -> Vocabulary:
    """Vocabulary over token lists, dropping tokens seen fewer than
    ``min_count`` times (they map to the unknown token)."""
    counts = Counter()
    for words in corpus:
        counts.update(words)
    kept = [t for t, c in counts.items() if c >= min_count]
    kept.sort(key=lambda t: (-counts[t], t))
    return Vocabulary(kept)


def normalize_text(text: str) -> list[str]:
    """Lowercase, strip punctuation, split on whitespace."""
    return text.lower().translate(_PUNCT_TABLE).split()


@dataclass
class TokenSequence:
    """Begin/end-delimited token ids, optionally bound to a vocabulary."""

    ids: list[int]
    vocab: Vocabulary | None = None

    @property
    def words(self) -> list[str]:
        if self.vocab is None:
            raise ValueError("token sequence has no vocabulary bound")
        return self.vocab.words_of(self.ids)

    @property
    def text(self) -> str:
        return " ".join(self.words)

    def __len__(self) -> int:
        return len(self.ids)


def tokenize(text: str, vocab: Vocabulary) -> TokenSequence:
    return TokenSequence(vocab.encode_words(normalize_text(text)), vocab)


def detokenize(seq: TokenSequence | list[int], vocab: Vocabulary | None = None) -> str:
    if isinstance(seq, TokenSequence):
        vocab = vocab or seq.vocab
        ids = seq.ids
    else:
        ids = seq
    if vocab is None:
        raise ValueError("detokenize needs a vocabulary")
    return " ".join(vocab.words_of(ids))


# ---------------------------------------------------------------------------
# synthetic scenes
# ---------------------------------------------------------------------------

COLOR_VALUES = {
    "red": (0.95, 0.1, 0.1),
    "green": (0.1, 0.85, 0.15),
    "blue": (0.15, 0.2, 0.95),
    "yellow": (0.95, 0.9, 0.1),
    "purple": (0.7, 0.1, 0.9),
}

SHAPE_NAMES = ("square", "circle", "triangle", "cross")

RELATIONS = ("above", "left of")


@dataclass(frozen=True)
class SceneObject:
    color: str
    shape: str
    cell: tuple[int, int]  # (row, col) in the 2x2 cell layout


@dataclass(frozen=True)
class Scene:
    objects: tuple[SceneObject, ...]
    relation: str | None = None  # between objects[0] and objects[1]


@dataclass
class SyntheticSceneSpec:
    """What the generator may draw: attribute lists, object counts, relations.

    ``pairs`` restricts (color, shape) combinations when given; that is how
    compositions are held out between training stages.
    """

    colors: tuple[str, ...] = ("red", "green", "blue", "yellow")
    shapes: tuple[str, ...] = ("square", "circle", "triangle", "cross")
    object_counts: tuple[int, ...] = (1, 2)
    relations: tuple[str, ...] = RELATIONS
    pairs: tuple[tuple[str, str], ...] | None = None
    image_size: int = 16
    cell_size: int = 8

    def allowed_pairs(self) -> list[tuple[str, str]]:
        if self.pairs is not None:
            return list(self.pairs)
        return [(c, s) for c in self.colors for s in self.shapes]


@dataclass
class CaptionExample:
    """One image with its reference captions (as word lists)."""

    image_id: str
    image: np.ndarray | None
    references: list[list[str]]
    scene: Scene | None = None

    def __post_init__(self):
        if not self.references:
            raise ValueError(f"{self.image_id}: every example needs at least one reference")


def scene_caption(scene: Scene) -> list[str]:
    """The deterministic caption template for a scene."""
    (first, *rest) = scene.objects
    words = ["a", first.color, first.shape]
    if rest:
        words += scene.relation.split() + ["a", rest[0].color, rest[0].shape]
    return words


def _glyph(shape: str, side: int) -> np.ndarray:
    """Boolean stencil of a shape inside a side x side cell."""
    m = np.zeros((side, side), dtype=bool)
    lo, hi = 1, side - 1
    if shape == "square":
        m[lo:hi, lo:hi] = True
    elif shape == "circle":
        yy, xx = np.mgrid[0:side, 0:side]
        c = (side - 1) / 2.0
        m[(yy - c) ** 2 + (xx - c) ** 2 <= (side / 2.0 - 1) ** 2] = True
    elif shape == "triangle":
        for r in range(lo, hi):
            span = r - lo + 1
            mid = side // 2
            m[r, max(lo, mid - span) : min(hi, mid + span)] = True
    elif shape == "cross":
        mid = side // 2
        m[lo:hi, mid - 1 : mid + 1] = True
        m[mid - 1 : mid + 1, lo:hi] = True
    else:
        raise ValueError(f"unknown shape {shape!r}")
    return m


def render_scene(scene: Scene, spec: SyntheticSceneSpec) -> np.ndarray:
    """Rasterize a scene into [image_size, image_size, 3] floats in [0, 1]."""
    img = np.zeros((spec.image_size, spec.image_size, 3))
    cs = spec.cell_size
    for obj in scene.objects:
        stencil = _glyph(obj.shape, cs)
        r0, c0 = obj.cell[0] * cs, obj.cell[1] * cs
        img[r0 : r0 + cs, c0 : c0 + cs][stencil] = COLOR_VALUES[obj.color]
    return img


def _draw_scene(rng: np.random.Generator, spec: SyntheticSceneSpec) -> Scene:
    pairs = spec.allowed_pairs()
    n = int(rng.choice(np.asarray(spec.object_counts)))
    first = pairs[int(rng.integers(len(pairs)))]
    if n == 1:
        cell = (int(rng.integers(2)), int(rng.integers(2)))
        return Scene((SceneObject(first[0], first[1], cell),))
    second = pairs[int(rng.integers(len(pairs)))]
    relation = spec.relations[int(rng.integers(len(spec.relations)))]
    if relation == "above":
        col = int(rng.integers(2))
        cells = ((0, col), (1, col))
    else:  # left of
        row = int(rng.integers(2))
        cells = ((row, 0), (row, 1))
    return Scene(
        (SceneObject(first[0], first[1], cells[0]), SceneObject(second[0], second[1], cells[1])),
        relation,
    )


def generate_synthetic(count: int, spec: SyntheticSceneSpec, seed: int) -> list[CaptionExample]:
    """Render ``count`` scenes; the same seed reproduces the dataset bit-exactly."""
    rng = np.random.default_rng(seed)
    out = []
    for i in range(count):
        scene = _draw_scene(rng, spec)
        out.append(
            CaptionExample(
                image_id=f"synthetic-{seed}-{i:04d}",
                image=render_scene(scene, spec),
                references=[scene_caption(scene)],
                scene=scene,
            )
        )
    return out


def save_dataset(directory, examples: list[CaptionExample]) -> None:
    """Directory layout: images/<id>.img raw tensors + captions.jsonl."""
    directory = Path(directory)
    (directory / "images").mkdir(parents=True, exist_ok=True)
    with open(directory / "captions.jsonl", "w") as f:
        for ex in examples:
            rel = f"images/{ex.image_id}.img"
            save_image_tensor(directory / rel, ex.image)
            record = {
                "image_id": ex.image_id,
                "image": rel,
                "captions": [" ".join(words) for words in ex.references],
            }
            f.write(json.dumps(record, sort_keys=True) + "\n")


def load_dataset(directory) -> list[CaptionExample]:
    directory = Path(directory)
    manifest = directory / "captions.jsonl"
    if not manifest.exists():
        raise FormatError(f"{directory}: missing captions.jsonl")
    out = []
    for lineno, line in enumerate(manifest.read_text().splitlines()):
        if not line.strip():
            continue
        try:
            record = json.loads(line)
            image = load_image_tensor(directory / record["image"])
            refs = [normalize_text(c) for c in record["captions"]]
            out.append(CaptionExample(record["image_id"], image, refs))
        except (KeyError, json.JSONDecodeError) as exc:
            raise FormatError(f"{manifest}: record {lineno}: {exc}") from exc
    return out


# ---------------------------------------------------------------------------
# Karpathy split ingestion
# ---------------------------------------------------------------------------

_SPLIT_MAP = {"train": "train", "restval": "train", "val": "val", "test": "test"}


def load_karpathy_json(path) -> dict[str, list[dict]]:
    """Parse the standard captioning split file into train/val/test lists.

    Each record becomes {"image_id", "filename", "captions": [word lists]}.
    The auxiliary restval portion counts as training data, following the
    usual re-partition.
    """
    try:
        payload = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise FormatError(f"{path}: not valid JSON ({exc})") from exc
    if "images" not in payload:
        raise FormatError(f"{path}: missing top-level 'images' array")
    splits: dict[str, list[dict]] = {"train": [], "val": [], "test": []}
    for i, img in enumerate(payload["images"]):
        try:
            split = img["split"]
            sentences = img["sentences"]
            filename = img.get("filename", f"image-{i}")
            image_id = str(img.get("cocoid", img.get("imgid", i)))
        except (KeyError, TypeError) as exc:
            raise FormatError(f"{path}: record {i}: missing field {exc}") from exc
        if split not in _SPLIT_MAP:
            raise FormatError(f"{path}: record {i}: unknown split tag {split!r}")
        captions = []
        for s in sentences:
            if "tokens" not in s:
                raise FormatError(f"{path}: record {i}: sentence without tokens")
            captions.append([t.lower() for t in s["tokens"]])
        splits[_SPLIT_MAP[split]].append(
            {"image_id": image_id, "filename": filename, "captions": captions}
        )
    return splits
