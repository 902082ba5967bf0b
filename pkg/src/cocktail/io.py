"""Portable pixmap/graymap files, bundle directories and region spec files."""
import os

import numpy as np

from cocktail.errors import ContractError
from cocktail.guidance import RegionSpec
from cocktail.synthdata import CLASSES, KEYPOINTS, SIZE, ModalityBundle, one_hot

BUNDLE_INDEX = "bundle.txt"


def _to_bytes(arr):
    return np.clip(np.rint(np.asarray(arr, dtype=np.float64) * 255.0), 0, 255).astype(np.uint8)


def write_ppm(path, image):
    """(3, H, W) in [0, 1] as binary P6."""
    img = _to_bytes(image)
    _, H, W = img.shape
    with open(path, "wb") as f:
        f.write(f"P6\n{W} {H}\n255\n".encode())
        f.write(img.transpose(1, 2, 0).tobytes())


def write_pgm(path, gray, raw=False):
    """(H, W) in [0, 1] (or bytes when ``raw``) as binary P5."""
    g = np.asarray(gray, dtype=np.uint8) if raw else _to_bytes(gray)
    H, W = g.shape
    with open(path, "wb") as f:
        f.write(f"P5\n{W} {H}\n255\n".encode())
        f.write(g.tobytes())


def _read_netpbm(path):
    with open(path, "rb") as f:
        data = f.read()
    fields, pos = [], 0
    while len(fields) < 4:
        while data[pos:pos + 1].isspace():
            pos += 1
        if data[pos:pos + 1] == b"#":
            pos = data.index(b"\n", pos) + 1
            continue
        end = pos
        while not data[end:end + 1].isspace():
            end += 1
        fields.append(data[pos:end].decode("ascii"))
        pos = end
    pos += 1
    magic, W, H, maxval = fields[0], int(fields[1]), int(fields[2]), int(fields[3])
    if maxval != 255 or magic not in ("P5", "P6"):
        raise ContractError(f"{path}: only 8-bit P5/P6 files are supported")
    ch = 3 if magic == "P6" else 1
    arr = np.frombuffer(data, dtype=np.uint8, count=W * H * ch, offset=pos)
    return arr.reshape(H, W, ch)


def read_ppm(path):
    return (_read_netpbm(path).transpose(2, 0, 1).astype(np.float32) / 255.0)


def read_pgm(path, raw=False):
    g = _read_netpbm(path)[:, :, 0]
    return g.copy() if raw else g.astype(np.float32) / 255.0


# --------------------------------------------------------------------------- bundles

def write_bundle(directory, bundle, index=0):
    """One sample of ``bundle`` as graymaps plus a ``key = file`` index.

    Segmentation is stored as a label graymap; keypoint heatmaps are stacked
    vertically into one tall graymap.
    """
    os.makedirs(directory, exist_ok=True)
    lines = []
    if bundle.presence[index, 0]:
        write_pgm(os.path.join(directory, "sketch.pgm"), bundle.sketch[index, 0])
        lines.append("sketch = sketch.pgm")
    if bundle.presence[index, 1]:
        labels = bundle.segmentation[index].argmax(axis=0).astype(np.uint8)
        write_pgm(os.path.join(directory, "segmentation.pgm"), labels, raw=True)
        lines.append("segmentation = segmentation.pgm")
    if bundle.presence[index, 2]:
        write_pgm(os.path.join(directory, "keypoints.pgm"), bundle.keypoints[index].reshape(-1, SIZE))
        lines.append("keypoints = keypoints.pgm")
    with open(os.path.join(directory, BUNDLE_INDEX), "w") as f:
        f.write("\n".join(lines) + ("\n" if lines else ""))


def read_bundle(directory):
    maps = {}
    with open(os.path.join(directory, BUNDLE_INDEX)) as f:
        for line in f:
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            key, _, name = (s.strip() for s in line.partition("="))
            if key not in ModalityBundle.KINDS:
                raise ContractError(f"unknown modality {key!r} in bundle index")
            path = os.path.join(directory, name)
            if key == "sketch":
                maps[key] = (read_pgm(path) >= 0.5).astype(np.float32)[None, None]
            elif key == "segmentation":
                labels = read_pgm(path, raw=True).astype(np.int64)
                if labels.max() >= len(CLASSES):
                    raise ContractError("segmentation label outside the class list")
                maps[key] = one_hot(labels)[None]
            else:
                maps[key] = read_pgm(path).reshape(len(KEYPOINTS), SIZE, SIZE)[None]
    return ModalityBundle(**maps).validate()


# --------------------------------------------------------------------------- regions

def read_regions(path):
    """Lines ``token=<i> polarity=<pos|neg> mask=<file>``; mask paths are relative to the file."""
    base = os.path.dirname(os.path.abspath(path))
    specs = []
    with open(path) as f:
        for n, line in enumerate(f, 1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            kv = dict(part.split("=", 1) for part in line.split())
            if set(kv) != {"token", "polarity", "mask"} or kv["polarity"] not in ("pos", "neg"):
                raise ContractError(f"{path}:{n}: malformed region line")
            mask = read_pgm(os.path.join(base, kv["mask"])) >= 0.5
            specs.append(RegionSpec(int(kv["token"]), mask, kv["polarity"] == "pos"))
    return specs


def write_regions(path, specs):
    base = os.path.dirname(os.path.abspath(path))
    lines = []
    for i, s in enumerate(specs):
        name = f"region{i}.pgm"
        write_pgm(os.path.join(base, name), s.region.astype(np.float32))
        lines.append(f"token={s.token} polarity={'pos' if s.positive else 'neg'} mask={name}")
    with open(path, "w") as f:
        f.write("\n".join(lines) + "\n")
