"""Seeded synthetic visual question answering task.

A scene is up to ``n_regions`` coloured shapes, one per region slot.  Each
region's feature vector is a fixed random projection of the one-hot code of
(shape, colour, slot) plus Gaussian noise; empty slots hold a fixed null
vector.  Questions come from three templates whose answer categories
mirror the usual VQA breakdown: yes/no, number and other.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from enum import IntEnum
from typing import NamedTuple, Sequence

import numpy as np

SHAPES = ("circle", "square", "triangle", "star")
COLORS = ("red", "green", "blue", "yellow")

PAD = 0
WORDS = ("is", "there", "a", "how", "many", "what", "color", "the")
VOCAB = ("<pad>",) + WORDS + COLORS + SHAPES
TOKEN = {w: i for i, w in enumerate(VOCAB)}

ANSWERS = ("yes", "no") + tuple(str(i) for i in range(9)) + COLORS + ("<unanswerable>",)
ANSWER = {a: i for i, a in enumerate(ANSWERS)}
N_ANSWERS = len(ANSWERS)
MAX_OBJECTS = 8


class Category(IntEnum):
    YESNO = 0
    NUMBER = 1
    OTHER = 2

    @property
    def label(self) -> str:
        return self.name.lower()


class QuestionError(ValueError):
    """Token sequence does not match any question template."""


class SceneObject(NamedTuple):
    shape: int
    color: int
    position: int


@dataclass(frozen=True)
class Scene:
    objects: tuple[SceneObject, ...]

    def __post_init__(self):
        if len(self.objects) > MAX_OBJECTS:
            raise ValueError(f"scene has {len(self.objects)} objects, max {MAX_OBJECTS}")
        positions = [o.position for o in self.objects]
        if len(set(positions)) != len(positions):
            raise ValueError("scene positions must be unique")

    @classmethod
    def of(cls, *objs: tuple[str, str] | tuple[str, str, int]) -> Scene:
        """Build from (colour, shape[, position]) names; positions default to 0, 1, ..."""
        out = []
        for i, o in enumerate(objs):
            color, shape = o[0], o[1]
            pos = o[2] if len(o) > 2 else i
            out.append(SceneObject(SHAPES.index(shape), COLORS.index(color), pos))
        return cls(tuple(out))

    def key(self) -> tuple:
        return tuple(sorted(self.objects, key=lambda o: o.position))

    def to_json(self) -> list[dict]:
        return [{"shape": SHAPES[o.shape], "color": COLORS[o.color], "position": o.position}
                for o in self.key()]

    @classmethod
    def from_json(cls, items: list[dict]) -> Scene:
        return cls(tuple(SceneObject(SHAPES.index(d["shape"]), COLORS.index(d["color"]),
                                     int(d["position"])) for d in items))


def encode(text: str) -> list[int]:
    try:
        return [TOKEN[w] for w in text.split()]
    except KeyError as e:
        raise QuestionError(f"unknown word {e.args[0]!r}") from None


def decode(tokens: Sequence[int]) -> str:
    return " ".join(VOCAB[t] for t in tokens)


def _parse(question: Sequence[int]) -> tuple[Category, int | None, int]:
    """Return (category, colour or None, shape) for a templated question."""
    words = [VOCAB[t] if 0 <= t < len(VOCAB) else None for t in question]
    if len(words) == 5 and words[:3] == ["is", "there", "a"] \
            and words[3] in COLORS and words[4] in SHAPES:
        return Category.YESNO, COLORS.index(words[3]), SHAPES.index(words[4])
    if len(words) == 3 and words[:2] == ["how", "many"] and words[2] in SHAPES:
        return Category.NUMBER, None, SHAPES.index(words[2])
    if len(words) == 5 and words[:4] == ["what", "color", "is", "the"] and words[4] in SHAPES:
        return Category.OTHER, None, SHAPES.index(words[4])
    raise QuestionError(f"malformed question: {list(question)}")


def question_category(question: Sequence[int]) -> Category:
    return _parse(question)[0]


def oracle_answer(scene: Scene, question: Sequence[int]) -> int:
    """Exact symbolic answer id for ``question`` about ``scene``."""
    cat, color, shape = _parse(question)
    if cat is Category.YESNO:
        hit = any(o.shape == shape and o.color == color for o in scene.objects)
        return ANSWER["yes" if hit else "no"]
    matches = [o for o in scene.objects if o.shape == shape]
    if cat is Category.NUMBER:
        return ANSWER[str(len(matches))]
    if len(matches) != 1:
        return ANSWER["<unanswerable>"]
    return ANSWER[COLORS[matches[0].color]]


# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class DataConfig:
    n_regions: int = 8
    feat_dim: int = 16
    max_question_len: int = 8
    noise_std: float = 0.05
    projection_seed: int = 0

    def __post_init__(self):
        if self.n_regions < MAX_OBJECTS:
            raise ValueError(f"n_regions must be >= {MAX_OBJECTS}")
        if self.max_question_len < 5:
            raise ValueError("max_question_len must be >= 5")

    @classmethod
    def for_model(cls, config, **overrides) -> DataConfig:
        return cls(n_regions=config.n_regions, feat_dim=config.feat_dim,
                   max_question_len=config.max_question_len, **overrides)

    def projection(self) -> np.ndarray:
        """[onehot_dim + 1, feat_dim]; the last row is the null-slot feature."""
        rng = np.random.default_rng([self.projection_seed, 0x5EED])
        n_in = len(SHAPES) + len(COLORS) + self.n_regions + 1
        return rng.standard_normal((n_in, self.feat_dim))


def region_features(scene: Scene, config: DataConfig, rng: np.random.Generator | None,
                    projection: np.ndarray | None = None) -> np.ndarray:
    proj = config.projection() if projection is None else projection
    feats = np.tile(proj[-1], (config.n_regions, 1))
    for o in scene.objects:
        code = proj[o.shape] + proj[len(SHAPES) + o.color] + proj[len(SHAPES) + len(COLORS) + o.position]
        if rng is not None and config.noise_std > 0:
            code = code + rng.normal(0.0, config.noise_std, size=config.feat_dim)
        feats[o.position] = code
    return feats


@dataclass
class SynthDataset:
    """Column-oriented examples; token rows are right-padded with ``PAD``."""

    tokens: np.ndarray
    lengths: np.ndarray
    regions: np.ndarray
    answers: np.ndarray
    categories: np.ndarray
    scenes: list[Scene] = field(repr=False)

    def __len__(self) -> int:
        return len(self.answers)

    def subset(self, idx) -> SynthDataset:
        idx = np.asarray(idx, dtype=np.int64)
        return SynthDataset(self.tokens[idx], self.lengths[idx], self.regions[idx],
                            self.answers[idx], self.categories[idx],
                            [self.scenes[i] for i in idx])

    def question(self, i: int) -> list[int]:
        return self.tokens[i, : self.lengths[i]].tolist()

    def to_jsonl(self) -> str:
        lines = []
        for i in range(len(self)):
            lines.append(json.dumps({
                "scene": self.scenes[i].to_json(),
                "tokens": self.question(i),
                "answer": int(self.answers[i]),
                "category": Category(int(self.categories[i])).label,
            }, separators=(",", ":")))
        return "\n".join(lines) + "\n"


def _sample_scene(rng: np.random.Generator, n_regions: int) -> Scene:
    n = int(rng.integers(1, MAX_OBJECTS + 1))
    positions = rng.choice(n_regions, size=n, replace=False)
    shapes = rng.integers(0, len(SHAPES), size=n)
    colors = rng.integers(0, len(COLORS), size=n)
    return Scene(tuple(SceneObject(int(s), int(c), int(p)) for s, c, p in zip(shapes, colors, positions)))


def _sample_question(cat: Category, rng: np.random.Generator, n_regions: int) -> tuple[Scene, list[int]]:
    scene = _sample_scene(rng, n_regions)
    if cat is Category.YESNO:
        present = {(o.color, o.shape) for o in scene.objects}
        if rng.random() < 0.5:
            color, shape = sorted(present)[rng.integers(len(present))]
        else:
            absent = [(c, s) for c in range(len(COLORS)) for s in range(len(SHAPES))
                      if (c, s) not in present]
            color, shape = absent[rng.integers(len(absent))]
        return scene, encode(f"is there a {COLORS[color]} {SHAPES[shape]}")
    if cat is Category.NUMBER:
        shape = int(rng.integers(len(SHAPES)))
        return scene, encode(f"how many {SHAPES[shape]}")
    while True:
        counts = np.bincount([o.shape for o in scene.objects], minlength=len(SHAPES))
        unique = np.flatnonzero(counts == 1)
        if unique.size:
            break
        scene = _sample_scene(rng, n_regions)
    shape = int(unique[rng.integers(unique.size)])
    return scene, encode(f"what color is the {SHAPES[shape]}")


def generate_dataset(seed: int, n_examples: int, config: DataConfig | None = None) -> SynthDataset:
    """``n_examples`` examples, categories balanced to within one.

    Categories are a seeded permutation of ``i % 3``; everything else about
    example ``i`` comes from a generator seeded by ``(seed, i)``, so slices
    of the index range can be produced in parallel.
    """
    if n_examples < 1:
        raise ValueError("n_examples must be >= 1")
    config = config or DataConfig()
    proj = config.projection()
    cats = np.random.default_rng([seed, 0xCA7]).permutation(np.arange(n_examples) % 3)
    tokens = np.full((n_examples, config.max_question_len), PAD, dtype=np.int64)
    lengths = np.zeros(n_examples, dtype=np.int64)
    regions = np.zeros((n_examples, config.n_regions, config.feat_dim))
    answers = np.zeros(n_examples, dtype=np.int64)
    scenes = []
    for i in range(n_examples):
        rng = np.random.default_rng([seed, 1, i])
        scene, q = _sample_question(Category(int(cats[i])), rng, config.n_regions)
        tokens[i, : len(q)] = q
        lengths[i] = len(q)
        regions[i] = region_features(scene, config, rng, proj)
        answers[i] = oracle_answer(scene, q)
        scenes.append(scene)
    return SynthDataset(tokens, lengths, regions, answers, cats.astype(np.int64), scenes)


class Splits(NamedTuple):
    train: SynthDataset
    val: SynthDataset
    test: SynthDataset


def split_by_scene(ds: SynthDataset, seed: int, fractions=(0.8, 0.1, 0.1)) -> Splits:
    """Partition distinct scenes 80/10/10 so no scene spans two splits."""
    keys = sorted({s.key() for s in ds.scenes})
    order = np.random.default_rng([seed, 0x5B17]).permutation(len(keys))
    n_train = int(round(fractions[0] * len(keys)))
    n_val = int(round(fractions[1] * len(keys)))
    which = {}
    for rank, k in enumerate(order):
        which[keys[k]] = 0 if rank < n_train else (1 if rank < n_train + n_val else 2)
    assign = np.array([which[s.key()] for s in ds.scenes])
    return Splits(*(ds.subset(np.flatnonzero(assign == j)) for j in range(3)))
