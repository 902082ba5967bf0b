"""Procedural scenes with exact segmentation, sketch and keypoint annotations.

A scene is 1-3 flat-colored shapes (circle, square, triangle), optionally a
black stick figure, an optional brown frame, on a plain background. Every
class owns a disjoint set of palette colors, so the class of a pixel can be
read back from its color. Geometry is tested at pixel centers with plain
arithmetic (no trig), and the segmentation is computed from the placement
parameters with the same tests that paint the image.
"""
from dataclasses import dataclass

import numpy as np

from cocktail.errors import ContractError
from cocktail.nn import make_rng

SIZE = 32
CLASSES = ("background", "circle", "square", "triangle", "figure", "border")
KEYPOINTS = ("head", "left_hand", "right_hand", "left_foot", "right_foot")
N_TOKENS = 8
EDGE_THRESHOLD = 0.2
HEATMAP_SIGMA = 1.0

PALETTE = {
    "gray": ((0.5, 0.5, 0.5), "background"),
    "white": ((0.95, 0.95, 0.95), "background"),
    "red": ((0.9, 0.1, 0.1), "circle"),
    "orange": ((1.0, 0.55, 0.0), "circle"),
    "green": ((0.05, 0.65, 0.15), "square"),
    "yellow": ((0.95, 0.9, 0.05), "square"),
    "blue": ((0.1, 0.2, 0.95), "triangle"),
    "purple": ((0.55, 0.0, 0.75), "triangle"),
    "black": ((0.0, 0.0, 0.0), "figure"),
    "brown": ((0.4, 0.2, 0.0), "border"),
}
COLOR_NAMES = tuple(PALETTE)
COLORS_BY_CLASS = {c: tuple(n for n, (_, k) in PALETTE.items() if k == c) for c in CLASSES}
STOP_WORDS = frozenset({"a", "and", "on"})
VOCAB = ("<pad>",) + COLOR_NAMES + ("circle", "square", "triangle", "figure", "background")
PAD = 0


class PromptError(ValueError):
    """Prompt text uses a word outside the grammar's vocabulary."""


def tokenize(text, n_tokens=N_TOKENS):
    words = [w for w in text.lower().replace(",", " ").split() if w not in STOP_WORDS]
    unknown = [w for w in words if w not in VOCAB]
    if unknown:
        raise PromptError(f"words outside the vocabulary: {unknown}")
    if len(words) > n_tokens:
        raise PromptError(f"prompt has {len(words)} content words, limit is {n_tokens}")
    ids = [VOCAB.index(w) for w in words]
    return np.array(ids + [PAD] * (n_tokens - len(ids)), dtype=np.int64)


def detokenize(ids):
    return " ".join(VOCAB[i] for i in ids if i != PAD)


@dataclass
class ModalityBundle:
    """Control maps for one or more scenes, batched along axis 0.

    ``presence`` is (B, 3) booleans for (sketch, segmentation, keypoints); an
    absent entry has an all-zero map. A modality absent from every sample may
    be stored as None.
    """
    sketch: np.ndarray = None
    segmentation: np.ndarray = None
    keypoints: np.ndarray = None
    presence: np.ndarray = None

    KINDS = ("sketch", "segmentation", "keypoints")
    CHANNELS = {"sketch": 1, "segmentation": len(CLASSES), "keypoints": len(KEYPOINTS)}

    def __post_init__(self):
        maps = [m for m in (self.sketch, self.segmentation, self.keypoints) if m is not None]
        if self.presence is None:
            B = maps[0].shape[0] if maps else 1
            self.presence = np.array([[m is not None for m in (self.sketch, self.segmentation, self.keypoints)]] * B)
        self.presence = np.asarray(self.presence, dtype=bool).reshape(-1, 3)

    @property
    def batch(self):
        return self.presence.shape[0]

    def get(self, kind):
        return getattr(self, kind)

    def validate(self, size=SIZE):
        for i, kind in enumerate(self.KINDS):
            m = self.get(kind)
            if m is None:
                if self.presence[:, i].any():
                    raise ContractError(f"{kind} flagged present but missing")
                continue
            if m.shape != (self.batch, self.CHANNELS[kind], size, size):
                raise ContractError(f"{kind} map has shape {m.shape}")
        if self.segmentation is not None and (self.segmentation.sum(axis=1) > 1 + 1e-6).any():
            raise ContractError("segmentation channels sum above 1")
        if self.keypoints is not None and self.keypoints.max(initial=0.0) > 1 + 1e-6:
            raise ContractError("keypoint heatmap exceeds 1")
        return self

    def with_presence(self, mask):
        """Copy with modalities switched off where ``mask`` is False."""
        mask = np.asarray(mask, dtype=bool).reshape(-1, 3) & self.presence
        out = {}
        for i, kind in enumerate(self.KINDS):
            m = self.get(kind)
            if m is None or not mask[:, i].any():
                out[kind] = None
            else:
                out[kind] = m * mask[:, i].reshape(-1, 1, 1, 1)
        return ModalityBundle(**out, presence=mask)

    @classmethod
    def empty(cls, batch=1):
        return cls(presence=np.zeros((batch, 3), dtype=bool))

    @classmethod
    def stack(cls, bundles):
        out = {}
        B = sum(b.batch for b in bundles)
        for kind in cls.KINDS:
            if all(b.get(kind) is None for b in bundles):
                out[kind] = None
                continue
            parts = []
            for b in bundles:
                m = b.get(kind)
                parts.append(m if m is not None else np.zeros((b.batch, cls.CHANNELS[kind], SIZE, SIZE), np.float32))
            out[kind] = np.concatenate(parts).astype(np.float32)
        presence = np.concatenate([b.presence for b in bundles]).reshape(B, 3)
        return cls(**out, presence=presence)

    def take(self, index):
        if not isinstance(index, slice):
            index = np.atleast_1d(index)
        return ModalityBundle(*(None if self.get(k) is None else self.get(k)[index] for k in self.KINDS),
                              presence=self.presence[index])


@dataclass
class Scene:
    seed: int
    image: np.ndarray            # (3, 32, 32) in [0, 1]
    labels: np.ndarray           # (32, 32) class index
    prompt: str
    tokens: np.ndarray           # (N_TOKENS,)
    bundle: ModalityBundle       # batch of one
    keypoints: np.ndarray        # (5, 2) x, y in pixel units, or None
    figure_scale: float          # bounding-box diagonal of the figure, 0 if none
    objects: list                # placement records

    def tobytes(self):
        parts = [self.image.tobytes(), self.labels.tobytes(), self.tokens.tobytes(), self.prompt.encode()]
        for k in ModalityBundle.KINDS:
            m = self.bundle.get(k)
            parts.append(b"-" if m is None else m.tobytes())
        return b"".join(parts)


# --------------------------------------------------------------------------- geometry

def _grid(size=SIZE):
    ys, xs = np.mgrid[0:size, 0:size]
    return xs + 0.5, ys + 0.5


def _seg_dist2(px, py, ax, ay, bx, by):
    dx, dy = bx - ax, by - ay
    t = ((px - ax) * dx + (py - ay) * dy) / (dx * dx + dy * dy)
    t = np.clip(t, 0.0, 1.0)
    ex, ey = px - (ax + t * dx), py - (ay + t * dy)
    return ex * ex + ey * ey


def shape_mask(obj, size=SIZE):
    xs, ys = _grid(size)
    kind = obj["kind"]
    cx, cy, s = obj["cx"], obj["cy"], obj["size"]
    if kind == "circle":
        return (xs - cx) ** 2 + (ys - cy) ** 2 <= s * s
    if kind == "square":
        return (np.abs(xs - cx) <= s) & (np.abs(ys - cy) <= s)
    if kind == "triangle":
        # apex up: (cx, cy - s), (cx - s, cy + s), (cx + s, cy + s)
        inside_base = ys <= cy + s
        left = 2.0 * (xs - cx) >= -(ys - (cy - s))
        right = 2.0 * (xs - cx) <= (ys - (cy - s))
        return inside_base & left & right
    if kind == "figure":
        return figure_mask(obj, size)
    raise ContractError(f"unknown shape kind {kind!r}")


def figure_points(obj):
    """Head, hands, feet, plus shoulder and hip joints, as (x, y)."""
    hx, hy = obj["cx"], obj["cy"]
    arm, leg = obj["arm"], obj["leg"]
    shoulder = (hx, hy + 4.0)
    hip = (hx, hy + 9.0)
    return {
        "head": (hx, hy),
        "left_hand": (hx - 5.0, hy + 4.0 - arm),
        "right_hand": (hx + 5.0, hy + 4.0 - arm),
        "left_foot": (hx - leg, hy + 15.0),
        "right_foot": (hx + leg, hy + 15.0),
        "shoulder": shoulder,
        "hip": hip,
    }


def figure_mask(obj, size=SIZE):
    xs, ys = _grid(size)
    p = figure_points(obj)
    hx, hy = p["head"]
    m = (xs - hx) ** 2 + (ys - hy) ** 2 <= 2.25 * 2.25
    width2 = 0.8 * 0.8
    segs = [((hx, hy + 2.0), p["hip"]), (p["shoulder"], p["left_hand"]), (p["shoulder"], p["right_hand"]),
            (p["hip"], p["left_foot"]), (p["hip"], p["right_foot"])]
    for a, b in segs:
        m |= _seg_dist2(xs, ys, a[0], a[1], b[0], b[1]) <= width2
    return m


def _bbox(obj):
    cx, cy, s = obj["cx"], obj["cy"], obj["size"]
    if obj["kind"] == "figure":
        leg = obj["leg"]
        return (cx - max(5.0, leg) - 1, cy - 2.5 - max(0.0, obj["arm"]), cx + max(5.0, leg) + 1, cy + 16.0)
    return (cx - s, cy - s, cx + s, cy + s)


def _overlaps(a, b, gap=1.5):
    return not (a[2] + gap < b[0] or b[2] + gap < a[0] or a[3] + gap < b[1] or b[3] + gap < a[1])


# --------------------------------------------------------------------------- rendering

def edge_map(image, threshold=EDGE_THRESHOLD):
    """Binary edges: forward-difference gradient magnitude, scaled to [0, 1].

    magnitude = sqrt(mean_c dx^2 + mean_c dy^2) / sqrt(2), which is 1 for a
    full black/white step in both directions.
    """
    img = np.asarray(image, dtype=np.float64)
    if img.ndim == 2:
        img = img[None]
    dx = np.zeros_like(img)
    dy = np.zeros_like(img)
    dx[:, :, :-1] = img[:, :, 1:] - img[:, :, :-1]
    dy[:, :-1, :] = img[:, 1:, :] - img[:, :-1, :]
    mag = np.sqrt((dx ** 2).mean(axis=0) + (dy ** 2).mean(axis=0)) / np.sqrt(2.0)
    return (mag > threshold).astype(np.float32)


def keypoint_heatmaps(points, size=SIZE, sigma=HEATMAP_SIGMA):
    xs, ys = _grid(size)
    out = np.zeros((len(points), size, size), dtype=np.float32)
    for k, (x, y) in enumerate(points):
        out[k] = np.exp(-((xs - x) ** 2 + (ys - y) ** 2) / (2.0 * sigma * sigma))
    return out


def render(objects, background, border, size=SIZE):
    """Paint objects in order; returns (image, labels)."""
    image = np.empty((3, size, size), dtype=np.float32)
    image[:] = np.asarray(PALETTE[background][0], dtype=np.float32)[:, None, None]
    labels = np.zeros((size, size), dtype=np.int64)
    if border:
        frame = np.zeros((size, size), dtype=bool)
        frame[:2, :] = frame[-2:, :] = frame[:, :2] = frame[:, -2:] = True
        image[:, frame] = np.asarray(PALETTE["brown"][0], dtype=np.float32)[:, None]
        labels[frame] = CLASSES.index("border")
    for obj in objects:
        m = shape_mask(obj, size)
        image[:, m] = np.asarray(PALETTE[obj["color"]][0], dtype=np.float32)[:, None]
        labels[m] = CLASSES.index(obj["kind"])
    return image, labels


def one_hot(labels, n=len(CLASSES)):
    return (np.arange(n)[:, None, None] == labels[None]).astype(np.float32)


def _pick(rng, seq):
    return seq[int(rng.integers(len(seq)))]


def _half(rng, lo, hi):
    """Uniform multiple of 0.5 in [lo, hi]."""
    return float(rng.integers(int(2 * lo), int(2 * hi) + 1)) / 2.0


def _place_shapes(rng, placed, n, lo, hi):
    for _ in range(n):
        for attempt in range(200):
            kind = _pick(rng, ("circle", "square", "triangle"))
            s = _half(rng, 3.0, 6.5 if attempt < 100 else 3.5)
            obj = {"kind": kind, "color": _pick(rng, COLORS_BY_CLASS[kind]), "size": s,
                   "cx": _half(rng, lo + s, hi - s), "cy": _half(rng, lo + s, hi - s)}
            if all(not _overlaps(_bbox(obj), _bbox(o)) for o in placed):
                placed.append(obj)
                break


def generate_scene(seed):
    rng = make_rng(seed)
    background = _pick(rng, COLORS_BY_CLASS["background"])
    border = bool(rng.integers(2))
    n_shapes = int(rng.integers(1, 4))
    with_figure = n_shapes <= 2 and bool(rng.integers(2))
    lo, hi = (3.0, SIZE - 3.0) if border else (1.0, SIZE - 1.0)
    placed = []
    if with_figure:
        for _ in range(50):
            fig = {"kind": "figure", "color": "black", "size": 0.0,
                   "arm": _half(rng, -1.0, 3.0), "leg": _half(rng, 2.0, 4.0),
                   # pixel-centered so every keypoint lands on a figure pixel
                   "cx": float(rng.integers(int(lo) + 7, int(hi) - 7)) + 0.5,
                   "cy": float(rng.integers(int(lo) + 3, int(hi) - 16)) + 0.5}
            b = _bbox(fig)
            if b[0] >= lo and b[1] >= lo and b[2] <= hi and b[3] <= hi:
                if all(not _overlaps(b, _bbox(o)) for o in placed):
                    placed.append(fig)
                    break
    _place_shapes(rng, placed, n_shapes, lo, hi)
    if len(placed) == len([o for o in placed if o["kind"] == "figure"]):
        placed = []  # the figure left no room; drop it
        _place_shapes(rng, placed, n_shapes, lo, hi)
    shapes = [o for o in placed if o["kind"] != "figure"]
    figures = [o for o in placed if o["kind"] == "figure"]
    image, labels = render(shapes + figures, background, border)
    words = []
    for o in shapes:
        words += ["a", o["color"], o["kind"], "and"]
    if figures:
        words += ["a", "figure", "and"]
    words = words[:-1] + ["on", "a", background, "background"]
    prompt = " ".join(words)
    seg = one_hot(labels)
    if figures:
        p = figure_points(figures[0])
        kps = np.array([p[k] for k in KEYPOINTS], dtype=np.float64)
        heat = keypoint_heatmaps(kps)[None]
        b = _bbox(figures[0])
        scale = float(np.hypot(b[2] - b[0], b[3] - b[1]))
    else:
        kps, heat, scale = None, None, 0.0
    bundle = ModalityBundle(sketch=edge_map(image)[None, None], segmentation=seg[None], keypoints=heat)
    return Scene(seed=int(seed), image=image, labels=labels, prompt=prompt, tokens=tokenize(prompt),
                 bundle=bundle, keypoints=kps, figure_scale=scale, objects=placed)


# --------------------------------------------------------------------------- splits

@dataclass
class Manifest:
    name: str
    seeds: list

    def render(self):
        return f"split={self.name} count={len(self.seeds)}\n" + "".join(f"{s}\n" for s in self.seeds)

    @classmethod
    def parse(cls, text):
        lines = [ln.strip() for ln in text.splitlines() if ln.strip()]
        if not lines or not lines[0].startswith("split="):
            raise ContractError("manifest must start with 'split=<name> count=<n>'")
        head = dict(kv.split("=", 1) for kv in lines[0].split())
        seeds = [int(s) for s in lines[1:]]
        if int(head["count"]) != len(seeds):
            raise ContractError(f"manifest declares {head['count']} seeds, lists {len(seeds)}")
        return cls(head["split"], seeds)

    def write(self, path):
        with open(path, "w") as f:
            f.write(self.render())

    @classmethod
    def read(cls, path):
        with open(path) as f:
            return cls.parse(f.read())

    def scenes(self):
        return [generate_scene(s) for s in self.seeds]


EVAL_OFFSET = 1_000_000


def make_split(n_train, n_eval, base_seed=0, eval_start=None):
    """Train seeds ``base_seed + [0, n_train)``, eval seeds from ``eval_start``."""
    if n_train < 1 or n_eval < 1:
        raise ContractError("split counts must be at least 1")
    eval_start = base_seed + EVAL_OFFSET if eval_start is None else eval_start
    train = range(base_seed, base_seed + n_train)
    ev = range(eval_start, eval_start + n_eval)
    if ev.start < train.stop and train.start < ev.stop:
        raise ContractError("train and eval seed ranges overlap")
    return Manifest("train", list(train)), Manifest("eval", list(ev))
