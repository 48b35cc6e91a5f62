"""Synthetic datasets: spatial-relation VQA with compositional splits, and a
procedural few-shot class universe with episode sampling.

The VQA generator follows the "X R Y?" protocol: images hold a handful of
distinct glyphs on a cell grid, questions are (left object, relation, right
object) triples, and the train split restricts each left-hand glyph to a
fixed number of right-hand partners while the test split covers all ordered
pairs. Relations are judged on cell indices: left_of means a strictly
smaller column, above a strictly smaller row.

Everything is a pure function of config and seed.
"""

from __future__ import annotations

import base64
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

RELATIONS = ("left_of", "right_of", "above", "below")


class DataConfigError(ValueError):
    """Invalid or unsatisfiable dataset configuration."""


def relation_holds(r_id: int, cell_x: tuple[int, int], cell_y: tuple[int, int]) -> bool:
    """Does relation r hold between object cells (row, col)?"""
    (rx, cx), (ry, cy) = cell_x, cell_y
    if r_id == 0:
        return cx < cy
    if r_id == 1:
        return cx > cy
    if r_id == 2:
        return rx < ry
    if r_id == 3:
        return rx > ry
    raise DataConfigError(f"unknown relation id {r_id}")


# --------------------------------------------------------------------------
# rendering
# --------------------------------------------------------------------------

def make_glyphs(alphabet: int, cell_pixels: int, rng: np.random.Generator) -> np.ndarray:
    """Distinct binary patterns, one per glyph, [A, cp, cp].

    Patterns keep a minimum pairwise Hamming distance (when the cell has
    room for it) and a mid-range ink density, so glyph identity survives
    downsampling by convolution stacks.
    """
    bits = cell_pixels * cell_pixels
    if 2 ** bits <= alphabet:
        raise DataConfigError("cell too small to draw distinct glyph patterns")
    min_dist = 4 if bits >= 16 else 1
    lo, hi = max(1, bits // 3), bits - bits // 3
    chosen: list[np.ndarray] = []
    attempts = 0
    while len(chosen) < alphabet:
        attempts += 1
        if attempts == 100_000:
            # constraints unsatisfiable at this size; fall back to distinctness
            min_dist, lo, hi = 1, 1, bits
        pat = rng.integers(0, 2, size=(cell_pixels, cell_pixels))
        if not lo <= int(pat.sum()) <= hi:
            continue
        if any(int(np.abs(pat - q).sum()) < min_dist for q in chosen):
            continue
        chosen.append(pat.astype(np.float64))
    return np.stack(chosen)


def render_scene(placements: list[tuple[int, int, int]], glyphs: np.ndarray,
                 grid_cells: int, cell_pixels: int, encoding: str = "gray") -> np.ndarray:
    """Rasterize (glyph, row, col) placements onto a canvas.

    Grayscale encoding stacks every glyph onto one channel ([1, S, S]);
    the one-hot diagnostic encoding gives each glyph id its own channel
    ([A, S, S])."""
    cells = set()
    for _, row, col in placements:
        if not (0 <= row < grid_cells and 0 <= col < grid_cells):
            raise DataConfigError(f"cell ({row},{col}) outside {grid_cells}x{grid_cells} grid")
        if (row, col) in cells:
            raise DataConfigError(f"overlapping placements at cell ({row},{col})")
        cells.add((row, col))
    side = grid_cells * cell_pixels
    channels = len(glyphs) if encoding == "onehot" else 1
    img = np.zeros((channels, side, side))
    for glyph, row, col in placements:
        ch = glyph if encoding == "onehot" else 0
        img[ch, row * cell_pixels:(row + 1) * cell_pixels,
            col * cell_pixels:(col + 1) * cell_pixels] = glyphs[glyph]
    return img


# --------------------------------------------------------------------------
# spatial-relation VQA generator
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class SqoopConfig:
    alphabet: int
    rhs_per_lhs: int
    grid_cells: int = 3
    cell_pixels: int = 4
    objects_per_image: int = 5
    train_samples: int = 4096
    val_samples: int = 1024
    test_samples: int = 2048
    encoding: str = "gray"
    seed: int = 0

    def __post_init__(self):
        if self.encoding not in ("gray", "onehot"):
            raise DataConfigError("encoding must be gray or onehot")
        if self.alphabet < 2:
            raise DataConfigError("alphabet must have at least two glyphs")
        if not 1 <= self.rhs_per_lhs <= self.alphabet - 1:
            raise DataConfigError(
                f"rhs_per_lhs must be in [1, alphabet-1]={self.alphabet - 1}, "
                f"got {self.rhs_per_lhs}")
        if self.objects_per_image > self.grid_cells ** 2:
            raise DataConfigError("more objects than grid cells")
        if self.objects_per_image > self.alphabet:
            raise DataConfigError("more objects than distinct glyphs (duplicates not allowed)")
        if self.objects_per_image < 2:
            raise DataConfigError("images need at least the two question objects")

    @property
    def image_side(self) -> int:
        return self.grid_cells * self.cell_pixels

    @property
    def image_channels(self) -> int:
        return self.alphabet if self.encoding == "onehot" else 1


@dataclass
class SqoopSplit:
    images: np.ndarray        # [n, 1, S, S] float64
    questions: np.ndarray     # [n, 3] int64 rows (x_id, r_id, y_id)
    answers: np.ndarray       # [n] int64 in {0, 1}
    coords: list              # per sample: [[glyph, row, col], ...]
    triples: list             # distinct (x_id, r_id, y_id) this split draws from

    def __len__(self):
        return len(self.answers)


@dataclass
class SqoopDataset:
    config: SqoopConfig
    glyphs: np.ndarray
    splits: dict[str, SqoopSplit]


def train_triples(cfg: SqoopConfig, rng: np.random.Generator) -> list[tuple[int, int, int]]:
    """k right-hand partners per left-hand glyph via seeded cyclic pairing.

    Each glyph appears as a partner of exactly k others, no glyph pairs
    with itself, and k = alphabet-1 yields all ordered pairs.
    """
    order = rng.permutation(cfg.alphabet)
    pos = {int(g): i for i, g in enumerate(order)}
    triples = []
    for x in range(cfg.alphabet):
        partners = [int(order[(pos[x] + s) % cfg.alphabet])
                    for s in range(1, cfg.rhs_per_lhs + 1)]
        for r in range(len(RELATIONS)):
            for y in partners:
                triples.append((x, r, y))
    return triples


def test_triples(cfg: SqoopConfig) -> list[tuple[int, int, int]]:
    return [(x, r, y)
            for x in range(cfg.alphabet)
            for r in range(len(RELATIONS))
            for y in range(cfg.alphabet) if y != x]


def _sample_scene(cfg: SqoopConfig, triple: tuple[int, int, int], answer: int,
                  rng: np.random.Generator) -> list[tuple[int, int, int]]:
    """Place X, Y and distractors so that the relation truth equals `answer`."""
    x_id, r_id, y_id = triple
    others = [g for g in range(cfg.alphabet) if g not in (x_id, y_id)]
    n_extra = cfg.objects_per_image - 2
    n_cells = cfg.grid_cells ** 2
    for _ in range(10_000):
        cells = rng.choice(n_cells, size=cfg.objects_per_image, replace=False)
        rc = [(int(c) // cfg.grid_cells, int(c) % cfg.grid_cells) for c in cells]
        if relation_holds(r_id, rc[0], rc[1]) != bool(answer):
            continue
        extra = rng.choice(len(others), size=n_extra, replace=False) if n_extra else []
        glyph_ids = [x_id, y_id] + [others[int(i)] for i in extra]
        return [(g, row, col) for g, (row, col) in zip(glyph_ids, rc)]
    raise DataConfigError("could not satisfy relation constraint (degenerate grid?)")


def _build_split(cfg: SqoopConfig, triples: list, n_samples: int, glyphs: np.ndarray,
                 rng: np.random.Generator) -> SqoopSplit:
    side = cfg.image_side
    images = np.zeros((n_samples, cfg.image_channels, side, side))
    questions = np.zeros((n_samples, 3), dtype=np.int64)
    answers = np.zeros(n_samples, dtype=np.int64)
    coords = []
    for i in range(n_samples):
        triple = triples[int(rng.integers(len(triples)))]
        answer = i % 2  # exactly balanced yes/no
        placements = _sample_scene(cfg, triple, answer, rng)
        images[i] = render_scene(placements, glyphs, cfg.grid_cells, cfg.cell_pixels,
                                 cfg.encoding)
        questions[i] = triple
        answers[i] = answer
        coords.append([[int(g), int(r), int(c)] for g, r, c in placements])
    return SqoopSplit(images, questions, answers, coords, list(triples))


def generate_sqoop(cfg: SqoopConfig) -> SqoopDataset:
    """Build train/validation/test splits; validation reuses the train
    triple set with fresh images."""
    rng = np.random.default_rng(cfg.seed)
    glyphs = make_glyphs(cfg.alphabet, cfg.cell_pixels, rng)
    tr = train_triples(cfg, rng)
    te = test_triples(cfg)
    splits = {
        "train": _build_split(cfg, tr, cfg.train_samples, glyphs, rng),
        "validation": _build_split(cfg, tr, cfg.val_samples, glyphs, rng),
        "test": _build_split(cfg, te, cfg.test_samples, glyphs, rng),
    }
    return SqoopDataset(config=cfg, glyphs=glyphs, splits=splits)


def question_tokens(questions: np.ndarray, alphabet: int) -> np.ndarray:
    """Map (x_id, r_id, y_id) rows into one token vocabulary: glyphs first,
    then the four relation tokens."""
    toks = questions.copy()
    toks[:, 1] += alphabet
    return toks


def gen_sqoop(cfg: SqoopConfig) -> dict[str, SqoopSplit]:
    return generate_sqoop(cfg).splits


# --------------------------------------------------------------------------
# serialization (JSON-lines per split + manifest)
# --------------------------------------------------------------------------

def _encode_image(img: np.ndarray) -> str:
    return base64.b64encode(np.asarray(img, dtype="<f4").tobytes()).decode("ascii")


def _decode_image(payload: str, shape) -> np.ndarray:
    flat = np.frombuffer(base64.b64decode(payload), dtype="<f4")
    return flat.reshape(shape).astype(np.float64)


def save_sqoop(ds: SqoopDataset, out_dir: str | Path) -> Path:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    for name, split in ds.splits.items():
        with open(out / f"{name}.jsonl", "w") as fh:
            for i in range(len(split)):
                line = {
                    "image": _encode_image(split.images[i]),
                    "shape": list(split.images[i].shape),
                    "question": [int(v) for v in split.questions[i]],
                    "answer": int(split.answers[i]),
                    "coords": split.coords[i],
                }
                fh.write(json.dumps(line) + "\n")
    manifest = {
        "kind": "sqoop",
        "seed": ds.config.seed,
        "config": asdict(ds.config),
        "splits": {name: {"num_samples": len(split), "num_triples": len(split.triples)}
                   for name, split in ds.splits.items()},
    }
    with open(out / "manifest.json", "w") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return out


def load_sqoop(in_dir: str | Path) -> SqoopDataset:
    src = Path(in_dir)
    with open(src / "manifest.json") as fh:
        manifest = json.load(fh)
    if manifest.get("kind") != "sqoop":
        raise DataConfigError(f"{src} does not hold a sqoop dataset")
    cfg = SqoopConfig(**manifest["config"])
    rng = np.random.default_rng(cfg.seed)
    glyphs = make_glyphs(cfg.alphabet, cfg.cell_pixels, rng)
    tr = train_triples(cfg, rng)
    te = test_triples(cfg)
    triples = {"train": tr, "validation": tr, "test": te}
    splits = {}
    for name in ("train", "validation", "test"):
        images, questions, answers, coords = [], [], [], []
        with open(src / f"{name}.jsonl") as fh:
            for raw in fh:
                line = json.loads(raw)
                images.append(_decode_image(line["image"], line["shape"]))
                questions.append(line["question"])
                answers.append(line["answer"])
                coords.append(line["coords"])
        splits[name] = SqoopSplit(np.stack(images), np.asarray(questions, dtype=np.int64),
                                  np.asarray(answers, dtype=np.int64), coords, triples[name])
    return SqoopDataset(config=cfg, glyphs=glyphs, splits=splits)


# --------------------------------------------------------------------------
# few-shot class universe
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class FewshotConfig:
    n_classes: int = 30
    per_class: int = 40
    image_size: int = 14
    jitter: float = 0.1
    train_classes: int = 20
    val_classes: int = 5
    test_classes: int = 5
    seed: int = 0

    def __post_init__(self):
        if self.train_classes + self.val_classes + self.test_classes > self.n_classes:
            raise DataConfigError("class splits exceed the number of classes")
        if self.jitter < 0:
            raise DataConfigError("jitter must be non-negative")


@dataclass
class FewshotPool:
    config: FewshotConfig
    images: np.ndarray                 # [n_classes, per_class, 1, S, S]
    class_split: dict[str, np.ndarray]  # split name -> class ids


@dataclass
class EpisodeConfig:
    ways: int = 5
    shots: int = 5
    queries_per_class: int = 5


@dataclass
class Episode:
    support_x: np.ndarray  # [ways*shots, 1, S, S]
    support_y: np.ndarray  # [ways*shots] episode-local labels
    query_x: np.ndarray
    query_y: np.ndarray
    class_ids: np.ndarray  # global ids of the episode's classes


def _class_blobs(rng: np.random.Generator, size: int):
    n_blobs = 3
    centers = rng.uniform(0.15 * size, 0.85 * size, size=(n_blobs, 2))
    sigmas = rng.uniform(0.10 * size, 0.20 * size, size=n_blobs)
    amps = rng.uniform(0.6, 1.0, size=n_blobs)
    return centers, sigmas, amps


def _render_blobs(centers, sigmas, amps, size: int) -> np.ndarray:
    yy, xx = np.mgrid[0:size, 0:size]
    img = np.zeros((size, size))
    for (cy, cx), s, a in zip(centers, sigmas, amps):
        img += a * np.exp(-((yy - cy) ** 2 + (xx - cx) ** 2) / (2.0 * s * s))
    return img


def gen_fewshot_universe(cfg: FewshotConfig) -> FewshotPool:
    """Procedural classes (blob mixtures) with per-sample jitter.

    Jitter perturbs blob centers and adds pixel noise; jitter 0 makes all
    samples of a class identical.
    """
    rng = np.random.default_rng(cfg.seed)
    size = cfg.image_size
    images = np.zeros((cfg.n_classes, cfg.per_class, 1, size, size))
    for cls in range(cfg.n_classes):
        centers, sigmas, amps = _class_blobs(rng, size)
        for j in range(cfg.per_class):
            offs = rng.standard_normal(centers.shape) * (cfg.jitter * 0.15 * size)
            noise = rng.standard_normal((size, size)) * (cfg.jitter * 0.3)
            images[cls, j, 0] = _render_blobs(centers + offs, sigmas, amps, size) + noise
    ids = np.arange(cfg.n_classes)
    class_split = {
        "train": ids[:cfg.train_classes],
        "validation": ids[cfg.train_classes:cfg.train_classes + cfg.val_classes],
        "test": ids[cfg.train_classes + cfg.val_classes:
                    cfg.train_classes + cfg.val_classes + cfg.test_classes],
    }
    return FewshotPool(config=cfg, images=images, class_split=class_split)


def sample_episode(pool: FewshotPool, split: str, ep: EpisodeConfig,
                   rng: np.random.Generator) -> Episode:
    """Uniform class and sample choice without replacement within the episode."""
    classes = pool.class_split[split]
    if ep.ways > len(classes):
        raise DataConfigError(f"{split} split has {len(classes)} classes, need {ep.ways}")
    need = ep.shots + ep.queries_per_class
    if need > pool.config.per_class:
        raise DataConfigError(f"classes hold {pool.config.per_class} samples, need {need}")
    chosen = rng.choice(classes, size=ep.ways, replace=False)
    sup_x, sup_y, qry_x, qry_y = [], [], [], []
    for local, cls in enumerate(chosen):
        idx = rng.choice(pool.config.per_class, size=need, replace=False)
        sup_x.append(pool.images[cls, idx[:ep.shots]])
        qry_x.append(pool.images[cls, idx[ep.shots:]])
        sup_y.extend([local] * ep.shots)
        qry_y.extend([local] * ep.queries_per_class)
    return Episode(support_x=np.concatenate(sup_x),
                   support_y=np.asarray(sup_y, dtype=np.int64),
                   query_x=np.concatenate(qry_x),
                   query_y=np.asarray(qry_y, dtype=np.int64),
                   class_ids=np.asarray(chosen))


def save_fewshot(pool: FewshotPool, out_dir: str | Path) -> Path:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    for name, classes in pool.class_split.items():
        with open(out / f"{name}.jsonl", "w") as fh:
            for cls in classes:
                for j in range(pool.config.per_class):
                    img = pool.images[cls, j]
                    line = {"image": _encode_image(img),
                            "shape": list(img.shape),
                            "class": int(cls)}
                    fh.write(json.dumps(line) + "\n")
    manifest = {
        "kind": "fewshot",
        "seed": pool.config.seed,
        "config": asdict(pool.config),
        "splits": {name: {"num_classes": int(len(classes)),
                          "num_samples": int(len(classes) * pool.config.per_class)}
                   for name, classes in pool.class_split.items()},
    }
    with open(out / "manifest.json", "w") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return out


def load_fewshot(in_dir: str | Path) -> FewshotPool:
    src = Path(in_dir)
    with open(src / "manifest.json") as fh:
        manifest = json.load(fh)
    if manifest.get("kind") != "fewshot":
        raise DataConfigError(f"{src} does not hold a fewshot dataset")
    cfg = FewshotConfig(**manifest["config"])
    images = np.zeros((cfg.n_classes, cfg.per_class, 1, cfg.image_size, cfg.image_size))
    class_split = {}
    for name in ("train", "validation", "test"):
        seen: dict[int, int] = {}
        with open(src / f"{name}.jsonl") as fh:
            for raw in fh:
                line = json.loads(raw)
                cls = int(line["class"])
                j = seen.get(cls, 0)
                images[cls, j] = _decode_image(line["image"], line["shape"])
                seen[cls] = j + 1
        class_split[name] = np.asarray(sorted(seen), dtype=np.int64)
    return FewshotPool(config=cfg, images=images, class_split=class_split)
