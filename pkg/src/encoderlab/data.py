"""Procedural shape datasets: captioned images, motion clips and segmentation maps.

Everything here is a pure function of ``seed`` so datasets regenerate bit-exactly.
Rendering uses hard pixel tests (no anti-aliasing).
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

COLORS: dict[str, tuple[float, float, float]] = {
    "red": (0.92, 0.12, 0.10),
    "green": (0.15, 0.80, 0.20),
    "blue": (0.15, 0.30, 0.95),
    "yellow": (0.95, 0.90, 0.12),
    "magenta": (0.90, 0.20, 0.85),
    "cyan": (0.10, 0.85, 0.90),
    "orange": (0.95, 0.55, 0.10),
    "purple": (0.50, 0.15, 0.80),
    "white": (0.95, 0.95, 0.95),
    "pink": (0.98, 0.60, 0.70),
    "lime": (0.60, 0.95, 0.20),
    "teal": (0.10, 0.50, 0.50),
}
SHAPES: tuple[str, ...] = ("circle", "square", "triangle", "diamond", "cross", "ring")
POSITIONS: tuple[str, ...] = ("top left", "top right", "bottom left", "bottom right")
MOTIONS: tuple[str, ...] = ("static", "right", "left", "up", "down")
_MOTION_STEP = {"static": (0, 0), "right": (0, 1), "left": (0, -1), "up": (-1, 0), "down": (1, 0)}


@dataclass(frozen=True)
class ShapeVocab:
    colors: tuple[str, ...] = tuple(COLORS)
    shapes: tuple[str, ...] = SHAPES
    positions: tuple[str, ...] = POSITIONS

    def words(self) -> list[str]:
        out: list[str] = []
        for phrase in (*self.colors, *self.shapes, *self.positions, "and", "moving", *MOTIONS[1:]):
            for w in phrase.split():
                if w not in out:
                    out.append(w)
        return out


@dataclass(frozen=True)
class ShapeObject:
    color: str | None
    shape: str
    position: str | None


@dataclass
class ShapesDataset:
    images: np.ndarray  # uint8 [N, H, W, 3]
    captions: list[str]
    objects: list[tuple[ShapeObject, ...]]
    instances: np.ndarray  # int16 [N, H, W]; 0 = background, i = i-th object of the caption
    vocab: ShapeVocab = field(default_factory=ShapeVocab)

    def __len__(self) -> int:
        return len(self.captions)

    @property
    def shape_labels(self) -> np.ndarray:
        """Shape class of the first object in every image."""
        return np.array([self.vocab.shapes.index(o[0].shape) for o in self.objects])

    @property
    def color_labels(self) -> np.ndarray:
        return np.array([self.vocab.colors.index(o[0].color) for o in self.objects])

    def semantic(self) -> np.ndarray:
        """Per-pixel shape class map: 0 background, 1 + shape index otherwise."""
        out = np.zeros_like(self.instances, dtype=np.int64)
        for n, objs in enumerate(self.objects):
            for i, o in enumerate(objs, start=1):
                out[n][self.instances[n] == i] = 1 + self.vocab.shapes.index(o.shape)
        return out

    def subset(self, idx) -> "ShapesDataset":
        idx = np.asarray(idx)
        return ShapesDataset(
            self.images[idx],
            [self.captions[i] for i in idx],
            [self.objects[i] for i in idx],
            self.instances[idx],
            self.vocab,
        )


@dataclass
class MotionClips:
    frames: np.ndarray  # uint8 [N, T, H, W, 3]
    captions: list[str]
    objects: list[ShapeObject]
    motions: list[str]
    masks: np.ndarray  # bool [N, T, H, W]
    vocab: ShapeVocab = field(default_factory=ShapeVocab)

    def __len__(self) -> int:
        return len(self.captions)

    def subset(self, idx) -> "MotionClips":
        idx = np.asarray(idx)
        return MotionClips(
            self.frames[idx],
            [self.captions[i] for i in idx],
            [self.objects[i] for i in idx],
            [self.motions[i] for i in idx],
            self.masks[idx],
            self.vocab,
        )


def shape_mask(shape: str, size: int, cy: float, cx: float, r: float) -> np.ndarray:
    """Boolean mask of ``shape`` centred at (cy, cx) with radius ``r`` on a size x size canvas."""
    yy, xx = np.mgrid[0:size, 0:size] + 0.5
    dy, dx = yy - cy, xx - cx
    if shape == "circle":
        return dy**2 + dx**2 <= r**2
    if shape == "ring":
        d2 = dy**2 + dx**2
        return (d2 <= r**2) & (d2 >= (0.5 * r) ** 2)
    if shape == "square":
        return np.maximum(np.abs(dy), np.abs(dx)) <= 0.82 * r
    if shape == "diamond":
        return np.abs(dy) + np.abs(dx) <= r
    if shape == "cross":
        arm = r / 3.0
        return ((np.abs(dx) <= arm) & (np.abs(dy) <= r)) | ((np.abs(dy) <= arm) & (np.abs(dx) <= r))
    if shape == "triangle":
        # apex up, base at cy + 0.8r
        t = (dy + r) / (1.8 * r)
        return (t >= 0) & (t <= 1) & (np.abs(dx) <= t * r)
    raise ValueError(f"unknown shape {shape!r}")


def caption_for(objects, keep=None) -> str:
    """Caption ``objects``; ``keep`` optionally gives per-object (color?, position?) flags.

    Attributes that are None are left out, so this also inverts :func:`parse_caption`.
    """
    parts = []
    for i, o in enumerate(objects):
        kc, kp = (True, True) if keep is None else keep[i]
        kc, kp = kc and o.color is not None, kp and o.position is not None
        words = ([o.color] if kc else []) + [o.shape] + ([o.position] if kp else [])
        parts.append(" ".join(words))
    return " and ".join(parts)


def parse_caption(caption: str, vocab: ShapeVocab = ShapeVocab()) -> tuple[ShapeObject, ...]:
    """Invert :func:`caption_for`. Omitted attributes come back as None."""
    out = []
    for part in caption.split(" and "):
        words = part.split()
        color = words[0] if words and words[0] in vocab.colors else None
        rest = words[1:] if color else words
        if not rest or rest[0] not in vocab.shapes:
            raise ValueError(f"not a shapes caption: {caption!r}")
        shape, position = rest[0], " ".join(rest[1:]) or None
        if position is not None and position not in vocab.positions:
            raise ValueError(f"not a shapes caption: {caption!r}")
        out.append(ShapeObject(color, shape, position))
    return tuple(out)


def motion_caption(obj: ShapeObject, motion: str) -> str:
    """Static clips are captioned like still images; moving ones name the direction."""
    if motion == "static":
        return caption_for((obj,))
    return f"{obj.color} {obj.shape} moving {motion}"


def parse_motion_caption(caption: str, vocab: ShapeVocab = ShapeVocab()) -> tuple[str, str, str]:
    words = caption.split()
    if len(words) == 4 and words[2] == "moving" and words[3] in MOTIONS[1:]:
        return words[0], words[1], words[3]
    objs = parse_caption(caption, vocab)
    if len(objs) != 1 or objs[0].color is None or objs[0].position is None:
        raise ValueError(f"not a motion caption: {caption!r}")
    return objs[0].color, objs[0].shape, "static"


def _background(rng: np.random.Generator, size: int) -> np.ndarray:
    level = rng.uniform(0.0, 0.35)
    noise = rng.normal(0.0, 0.03, size=(size, size, 1))
    return np.clip(level + noise, 0.0, 1.0) * np.ones((1, 1, 3))


def _pick_pair(rng, vocab: ShapeVocab, exclude: frozenset) -> tuple[str, str]:
    while True:
        color = vocab.colors[rng.integers(len(vocab.colors))]
        shape = vocab.shapes[rng.integers(len(vocab.shapes))]
        if (color, shape) not in exclude:
            return color, shape


def sample_scene(rng: np.random.Generator, vocab: ShapeVocab, count_weights, exclude=frozenset()):
    counts = np.arange(1, len(count_weights) + 1)
    k = int(rng.choice(counts, p=np.asarray(count_weights) / np.sum(count_weights)))
    slots = np.sort(rng.choice(len(vocab.positions), size=k, replace=False))
    return tuple(ShapeObject(*_pick_pair(rng, vocab, exclude), vocab.positions[s]) for s in slots)


def render_scene(rng, objects, size: int = 64, vocab: ShapeVocab = ShapeVocab()):
    img = _background(rng, size)
    inst = np.zeros((size, size), dtype=np.int16)
    half = size / 2
    for i, o in enumerate(objects, start=1):
        slot = vocab.positions.index(o.position)
        row, col = divmod(slot, 2)
        r = rng.uniform(0.32, 0.44) * half
        slack = max(half / 2 - r - 1, 0.0)
        cy = row * half + half / 2 + rng.uniform(-slack, slack)
        cx = col * half + half / 2 + rng.uniform(-slack, slack)
        m = shape_mask(o.shape, size, cy, cx, r)
        img[m] = COLORS[o.color]
        inst[m] = i
    return (np.round(img * 255)).astype(np.uint8), inst


def gen_shapes_dataset(
    seed: int,
    n: int,
    vocab: ShapeVocab = ShapeVocab(),
    *,
    size: int = 64,
    count_weights=(1.0, 1.0, 1.0),
    exclude=(),
    attr_dropout: float = 0.0,
) -> ShapesDataset:
    """Generate ``n`` captioned images of 1..len(count_weights) coloured shapes.

    ``exclude`` lists (color, shape) pairs that never appear, which is how
    held-out attribute combinations are carved out for zero-shot tests.
    ``attr_dropout`` drops each colour / position word from the caption with
    that probability, mimicking captions of varying detail. It draws from a
    separate stream, so images do not depend on it.
    """
    if not 0.0 <= attr_dropout < 1.0:
        raise ValueError("attr_dropout must be in [0, 1)")
    if n <= 0:
        raise ValueError("n must be positive")
    rng = np.random.default_rng(seed)
    cap_rng = np.random.default_rng([seed, 1])
    exclude = frozenset(tuple(p) for p in exclude)
    images = np.empty((n, size, size, 3), dtype=np.uint8)
    instances = np.empty((n, size, size), dtype=np.int16)
    objects, captions = [], []
    for i in range(n):
        objs = sample_scene(rng, vocab, count_weights, exclude)
        images[i], instances[i] = render_scene(rng, objs, size, vocab)
        objects.append(objs)
        keep = None
        if attr_dropout > 0:
            keep = [tuple(cap_rng.random(2) >= attr_dropout) for _ in objs]
        captions.append(caption_for(objs, keep))
    return ShapesDataset(images, captions, objects, instances, vocab)


def gen_motion_clips(
    seed: int,
    n: int,
    frames: int = 8,
    vocab: ShapeVocab = ShapeVocab(),
    *,
    size: int = 64,
    displacement: float = 0.25,
    static_fraction: float = 0.2,
    exclude=(),
) -> MotionClips:
    """Clips of one shape drifting from near the centre in one of four directions.

    Moving clips start near the centre and travel ``displacement * size`` pixels,
    so the set of visited positions (not only their order) encodes direction.
    About ``static_fraction`` of clips do not move: they hold a still image of
    the kind :func:`gen_shapes_dataset` draws and carry its caption, with no
    motion words. Shapes have the same size distribution as in still images.
    """
    if frames < 2:
        raise ValueError("frames must be >= 2")
    rng = np.random.default_rng(seed)
    exclude = frozenset(tuple(p) for p in exclude)
    out = np.empty((n, frames, size, size, 3), dtype=np.uint8)
    masks = np.empty((n, frames, size, size), dtype=bool)
    objects, motions, captions = [], [], []
    for i in range(n):
        color, shape = _pick_pair(rng, vocab, exclude)
        motion = "static" if rng.random() < static_fraction else MOTIONS[1 + rng.integers(4)]
        if motion == "static":
            obj = ShapeObject(color, shape, vocab.positions[rng.integers(len(vocab.positions))])
            img, inst = render_scene(rng, (obj,), size, vocab)
            out[i] = img
            masks[i] = inst == 1
        else:
            obj = ShapeObject(color, shape, None)
            r = rng.uniform(0.32, 0.44) * size / 2
            cy, cx = size / 2 + rng.uniform(-3, 3, size=2)
            sy, sx = _MOTION_STEP[motion]
            bg = _background(rng, size)
            for t in range(frames):
                frac = t / (frames - 1)
                m = shape_mask(shape, size, cy + sy * displacement * size * frac,
                               cx + sx * displacement * size * frac, r)
                img = bg.copy()
                img[m] = COLORS[color]
                out[i, t] = np.round(img * 255).astype(np.uint8)
                masks[i, t] = m
        objects.append(obj)
        motions.append(motion)
        captions.append(motion_caption(obj, motion))
    return MotionClips(out, captions, objects, motions, masks, vocab)


def heldout_pairs(vocab: ShapeVocab = ShapeVocab(), shift: int = 0) -> list[tuple[str, str]]:
    """One (color, shape) pair per shape, colour index shifted diagonally."""
    nc = len(vocab.colors)
    return [(vocab.colors[(j + shift) % nc], s) for j, s in enumerate(vocab.shapes)]


def gen_heldout_eval(seed: int, n: int, vocab: ShapeVocab = ShapeVocab(), *, size: int = 64, pairs=None) -> ShapesDataset:
    """Single-object images drawn only from the held-out (color, shape) pairs."""
    pairs = list(pairs if pairs is not None else heldout_pairs(vocab))
    allowed = set(pairs)
    everything = {(c, s) for c in vocab.colors for s in vocab.shapes}
    return gen_shapes_dataset(seed, n, vocab, size=size, count_weights=(1.0,), exclude=everything - allowed)


def centroid_track(mask_seq: np.ndarray) -> np.ndarray:
    """(row, col) centroid of a boolean mask per frame."""
    out = []
    for m in mask_seq:
        ys, xs = np.nonzero(m)
        out.append((ys.mean(), xs.mean()))
    return np.asarray(out)
