"""Fidelity metrics: conditions are extracted from a generated image and
compared with the conditions it was meant to follow."""
import math
from dataclasses import dataclass, field

import numpy as np

from cocktail.errors import ContractError, ShapeError
from cocktail.synthdata import (CLASSES, KEYPOINTS, PALETTE, ModalityBundle, edge_map,
                                keypoint_heatmaps, one_hot)

KAPPA = 0.1
OKS_THRESHOLDS = np.arange(50, 100, 5) / 100.0
# OKS values within this of a threshold count as reaching it
OKS_TOL = 1e-12

_PROTO = np.array([c for c, _ in PALETTE.values()], dtype=np.float64)         # (P, 3)
_PROTO_CLASS = np.array([CLASSES.index(k) for _, k in PALETTE.values()])
FIGURE = CLASSES.index("figure")


def edge_l2(gen_edges, ref_edges):
    """||gen - ref||_2 / sqrt(pixel count)."""
    a = np.asarray(gen_edges, dtype=np.float64)
    b = np.asarray(ref_edges, dtype=np.float64)
    if a.shape != b.shape:
        raise ShapeError(f"edge maps differ in shape: {a.shape} vs {b.shape}")
    return float(np.sqrt(((a - b) ** 2).sum() / a.size))


def seg_scores(gen_labels, ref_labels, n_classes=len(CLASSES)):
    """(mPA, mIoU). mPA averages over classes in ``ref``; mIoU over classes in either map."""
    g = np.asarray(gen_labels)
    r = np.asarray(ref_labels)
    if g.shape != r.shape:
        raise ShapeError(f"label maps differ in shape: {g.shape} vs {r.shape}")
    if g.size and (min(g.min(), r.min()) < 0 or max(g.max(), r.max()) >= n_classes):
        raise ContractError(f"label outside [0, {n_classes})")
    g = g.reshape(-1)
    r = r.reshape(-1)
    gc = np.bincount(g, minlength=n_classes)
    rc = np.bincount(r, minlength=n_classes)
    inter = np.bincount(r[g == r], minlength=n_classes)
    in_ref = rc > 0
    in_any = (rc + gc) > 0
    union = gc + rc - inter
    # correctly rounded class means, independent of summation order
    mpa = _mean([inter[c] / rc[c] for c in np.flatnonzero(in_ref)])
    miou = _mean([inter[c] / union[c] for c in np.flatnonzero(in_any)])
    return mpa, miou


def _mean(values):
    return math.fsum(float(v) for v in values) / len(values) if values else 1.0


def keypoint_oks(gen_points, ref_points, scale, visible=None, kappa=KAPPA):
    """Object keypoint similarity; mean over visible keypoints of exp(-d^2 / (2 s^2 k^2))."""
    g = np.asarray(gen_points, dtype=np.float64).reshape(-1, 2)
    r = np.asarray(ref_points, dtype=np.float64).reshape(-1, 2)
    if g.shape != r.shape:
        raise ContractError(f"keypoint counts differ: {len(g)} vs {len(r)}")
    vis = np.ones(len(r), dtype=bool) if visible is None else np.asarray(visible, dtype=bool)
    if vis.shape != (len(r),):
        raise ContractError("visibility flags do not match the keypoints")
    if not vis.any():
        return 0.0
    if scale <= 0:
        raise ContractError("keypoint scale must be positive")
    d2 = ((g - r) ** 2).sum(axis=1)
    return float(np.exp(-d2[vis] / (2.0 * scale * scale * kappa * kappa)).mean())


def ap_from_oks(oks):
    """Mean over thresholds 0.50:0.05:0.95 of the fraction of instances reaching each."""
    oks = np.atleast_1d(np.asarray(oks, dtype=np.float64))
    if oks.size == 0:
        return float("nan")
    hits = oks[None, :] >= OKS_THRESHOLDS[:, None] - OKS_TOL
    return float(hits.mean(axis=1).mean())


def keypoint_map(gen_points, ref_points, scale, visible=None):
    """mAP of one figure; ``gen_points`` None means nothing was detected."""
    if gen_points is None:
        return 0.0
    return ap_from_oks(keypoint_oks(gen_points, ref_points, scale, visible))


# --------------------------------------------------------------------------- extraction

def classify_pixels(image):
    """Nearest palette color per pixel, mapped to its class."""
    img = np.asarray(image, dtype=np.float64)
    d = ((img.transpose(1, 2, 0)[:, :, None, :] - _PROTO[None, None]) ** 2).sum(axis=-1)
    return _PROTO_CLASS[d.argmin(axis=-1)]


def _disc(radius):
    r = int(np.ceil(radius))
    ys, xs = np.mgrid[-r:r + 1, -r:r + 1]
    return (xs * xs + ys * ys <= radius * radius).astype(np.float64)


HEAD_TEMPLATE = _disc(2.25)


def _correlate(mask, template):
    """Valid-sized correlation, zero padded so the output matches ``mask``."""
    th, tw = template.shape
    ph, pw = th // 2, tw // 2
    pad = np.pad(mask.astype(np.float64), ((ph, ph), (pw, pw)))
    win = np.lib.stride_tricks.sliding_window_view(pad, template.shape)
    return np.einsum("ijkl,kl->ij", win, template)


def find_keypoints(labels):
    """(5, 2) keypoint estimates (x, y) from a label map, or None without a figure.

    The head is the peak of a disc-template correlation over figure pixels;
    hands and feet are the extremal figure pixels in the quadrants around it.
    """
    fig = labels == FIGURE
    if fig.sum() < 5:
        return None
    # ties broken toward the top, matching a head above the body
    score = _correlate(fig, HEAD_TEMPLATE) * fig
    hy, hx = np.unravel_index(int(score.argmax()), score.shape)
    ys, xs = np.nonzero(fig)
    px, py = xs + 0.5, ys + 0.5
    cx, cy = hx + 0.5, hy + 0.5
    points = [(cx, cy)]
    upper = (py > cy + 1.0) & (py < cy + 9.0)
    lower = py > cy + 9.0
    for region, side in ((upper, -1), (upper, 1), (lower, -1), (lower, 1)):
        sel = region & ((px - cx) * side > 0)
        if not sel.any():
            points.append((cx, cy + (4.0 if region is upper else 15.0)))
            continue
        if region is upper:
            # the hand is the far end of the arm: most lateral, then highest
            key = np.lexsort((py[sel], -side * px[sel]))
        else:
            # the foot is the lowest point, then most lateral
            key = np.lexsort((-side * px[sel], -py[sel]))
        i = key[0]
        points.append((px[sel][i], py[sel][i]))
    return np.array(points, dtype=np.float64)


@dataclass
class Extracted:
    edges: np.ndarray
    labels: np.ndarray
    points: np.ndarray   # (5, 2) or None

    def bundle(self):
        heat = None if self.points is None else keypoint_heatmaps(self.points)[None]
        return ModalityBundle(sketch=self.edges[None, None], segmentation=one_hot(self.labels)[None],
                              keypoints=heat)


def extract(image):
    image = np.clip(np.asarray(image, dtype=np.float64), 0.0, 1.0)
    labels = classify_pixels(image)
    return Extracted(edge_map(image), labels, find_keypoints(labels))


def extract_conditions(image):
    """Predicted ModalityBundle (batch of one) for an image in [0, 1]."""
    return extract(image).bundle()


# --------------------------------------------------------------------------- reports

FIELDS = ("edge_l2", "mpa", "miou", "kp_map", "pixel_mse")


def score_image(image, scene):
    """Per-sample metrics of ``image`` against a scene's exact annotations."""
    ex = extract(image)
    mpa, miou = seg_scores(ex.labels, scene.labels)
    out = {"edge_l2": edge_l2(ex.edges, scene.bundle.sketch[0, 0]), "mpa": mpa, "miou": miou,
           "pixel_mse": float(((np.asarray(image, np.float64) - scene.image) ** 2).mean()),
           "kp_map": float("nan")}
    if scene.keypoints is not None:
        out["kp_map"] = keypoint_map(ex.points, scene.keypoints, scene.figure_scale)
    return out


@dataclass
class EvalReport:
    name: str = "eval"
    samples: dict = field(default_factory=lambda: {k: [] for k in FIELDS})

    def add(self, scores):
        for k in FIELDS:
            self.samples[k].append(float(scores[k]))

    @property
    def count(self):
        return len(self.samples["miou"])

    def values(self, key):
        v = np.asarray(self.samples[key], dtype=np.float64)
        return v[~np.isnan(v)]

    def mean(self, key):
        v = self.values(key)
        return float(v.mean()) if v.size else float("nan")

    def stderr(self, key):
        v = self.values(key)
        return float(v.std(ddof=1) / np.sqrt(v.size)) if v.size > 1 else 0.0

    def lines(self):
        out = [f"{self.name}.count={self.count}"]
        for k in FIELDS:
            out.append(f"{self.name}.{k}={self.mean(k):.6f}")
            out.append(f"{self.name}.{k}_se={self.stderr(k):.6f}")
        return out

    def table(self):
        rows = [f"{'metric':<10} {'mean':>10} {'stderr':>10} {'n':>5}"]
        for k in FIELDS:
            rows.append(f"{k:<10} {self.mean(k):>10.4f} {self.stderr(k):>10.4f} {self.values(k).size:>5d}")
        return "\n".join(rows)
