"""Deterministic synthetic debris-scene generator and polygon annotation I/O.

Scenes are small RGB images of an "ocean" background (2-octave value noise
around a base color) with 0-4 polygonal "debris" blobs.  Annotations use the
normalized text format ``class_id x1 y1 x2 y2 ... xn yn`` with coordinates
in [0,1], one instance per line; masks and tight boxes are derived by
even-odd scanline rasterization sampled at pixel centers.

All randomness flows through PCG32 with fixed constants, one stream per
image index, so a (seed, config) pair determines every emitted byte across
implementations.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field

import numpy as np
from PIL import Image

_M64 = (1 << 64) - 1
_PCG_MULT = 6364136223846793005


class PCG32:
    """PCG-XSH-RR 64/32 with explicit stream selection."""

    def __init__(self, seed: int, stream: int = 0):
        self.inc = ((stream << 1) | 1) & _M64
        self.state = 0
        self._step()
        self.state = (self.state + (seed & _M64)) & _M64
        self._step()

    def _step(self) -> None:
        self.state = (self.state * _PCG_MULT + self.inc) & _M64

    def next_u32(self) -> int:
        old = self.state
        self._step()
        xorshifted = (((old >> 18) ^ old) >> 27) & 0xFFFFFFFF
        rot = old >> 59
        return ((xorshifted >> rot) | (xorshifted << ((-rot) & 31))) & 0xFFFFFFFF

    def random(self) -> float:
        """Uniform in [0, 1)."""
        return self.next_u32() / 4294967296.0

    def uniform(self, lo: float, hi: float) -> float:
        return lo + (hi - lo) * self.random()

    def randint(self, lo: int, hi: int) -> int:
        """Uniform integer in [lo, hi] inclusive (modulo reduction)."""
        return lo + self.next_u32() % (hi - lo + 1)

    def shuffle(self, items: list) -> None:
        for i in range(len(items) - 1, 0, -1):
            j = self.randint(0, i)
            items[i], items[j] = items[j], items[i]


class AnnotationError(ValueError):
    """Malformed annotation file or degenerate polygon."""


class GenerationError(RuntimeError):
    """Dataset generation I/O failure."""


@dataclass
class InstanceAnnotation:
    """One ground-truth instance: polygon plus derived mask and tight box."""

    class_id: int
    polygon: list[tuple[float, float]]
    mask: np.ndarray
    box: tuple[int, int, int, int]

    @property
    def image_id(self) -> str:
        return ""


@dataclass
class GenConfig:
    image_size: int = 64
    count: int = 100
    seed: int = 0
    difficulty: str = "easy"
    max_blobs: int = 4
    bands: int = 3

    def __post_init__(self):
        if self.count < 1:
            raise ValueError("count must be >= 1")
        if self.difficulty not in ("easy", "hard"):
            raise ValueError(f"difficulty must be 'easy' or 'hard', got {self.difficulty!r}")

    def to_dict(self) -> dict:
        return {"image_size": self.image_size, "count": self.count,
                "seed": self.seed, "difficulty": self.difficulty,
                "max_blobs": self.max_blobs, "bands": self.bands}


# ---------------------------------------------------------------------------
# rasterization


def rasterize_polygon(polygon, width: int, height: int) -> np.ndarray:
    """Even-odd scanline fill of a normalized polygon, sampled at pixel
    centers (x+0.5, y+0.5).  Raises on degenerate (empty) results."""
    pts = [(float(x) * width, float(y) * height) for x, y in polygon]
    if len(pts) < 3:
        raise AnnotationError(f"polygon needs >= 3 vertices, got {len(pts)}")
    mask = np.zeros((height, width), dtype=bool)
    n = len(pts)
    for row in range(height):
        yc = row + 0.5
        xs = []
        for i in range(n):
            x1, y1 = pts[i]
            x2, y2 = pts[(i + 1) % n]
            if (y1 <= yc < y2) or (y2 <= yc < y1):
                xs.append(x1 + (yc - y1) * (x2 - x1) / (y2 - y1))
        xs.sort()
        for k in range(0, len(xs) - 1, 2):
            lo = int(np.ceil(xs[k] - 0.5))
            hi = int(np.ceil(xs[k + 1] - 0.5))
            if hi > lo:
                mask[row, max(lo, 0):min(hi, width)] = True
    if not mask.any():
        raise AnnotationError("degenerate polygon rasterizes to an empty mask")
    return mask


def mask_box(mask: np.ndarray) -> tuple[int, int, int, int]:
    """Tight half-open pixel bounds of a nonempty mask."""
    ys, xs = np.nonzero(mask)
    return int(xs.min()), int(ys.min()), int(xs.max()) + 1, int(ys.max()) + 1


def shoelace_area(polygon) -> float:
    """Signed-area magnitude of a normalized polygon (unit square scale)."""
    total = 0.0
    n = len(polygon)
    for i in range(n):
        x1, y1 = polygon[i]
        x2, y2 = polygon[(i + 1) % n]
        total += x1 * y2 - x2 * y1
    return abs(total) / 2.0


# ---------------------------------------------------------------------------
# annotation files


def save_annotations(path, annotations) -> None:
    lines = []
    for ann in annotations:
        coords = " ".join(f"{x:.6f} {y:.6f}" for x, y in ann.polygon)
        lines.append(f"{ann.class_id} {coords}")
    with open(path, "w") as fh:
        fh.write("\n".join(lines) + ("\n" if lines else ""))


def load_annotations(path, img_w: int, img_h: int) -> list[InstanceAnnotation]:
    """Parse a label file; each line is ``class_id x1 y1 ... xn yn`` with
    normalized coordinates.  Raises AnnotationError with the line number on
    malformed input."""
    anns: list[InstanceAnnotation] = []
    with open(path) as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.strip()
            if not line:
                continue
            fields = line.split()
            try:
                class_id = int(fields[0])
            except ValueError:
                raise AnnotationError(f"{path}:{lineno}: non-integer class id {fields[0]!r}")
            coords = fields[1:]
            if len(coords) % 2 != 0:
                raise AnnotationError(f"{path}:{lineno}: odd coordinate count")
            try:
                vals = [float(v) for v in coords]
            except ValueError:
                raise AnnotationError(f"{path}:{lineno}: non-numeric coordinate")
            if len(vals) < 6:
                raise AnnotationError(
                    f"{path}:{lineno}: polygon needs at least 3 points, got {len(vals) // 2}")
            if any(v < 0.0 or v > 1.0 for v in vals):
                raise AnnotationError(f"{path}:{lineno}: coordinate outside [0,1]")
            polygon = list(zip(vals[0::2], vals[1::2]))
            mask = rasterize_polygon(polygon, img_w, img_h)
            anns.append(InstanceAnnotation(class_id=class_id, polygon=polygon,
                                           mask=mask, box=mask_box(mask)))
    return anns


# ---------------------------------------------------------------------------
# scene synthesis


def _value_noise(rng: PCG32, size: int, cell: int) -> np.ndarray:
    """Bilinear-interpolated lattice noise in [0,1] with the given cell size."""
    g = size // cell + 2
    lattice = np.array([[rng.random() for _ in range(g)] for _ in range(g)])
    coords = np.arange(size) / cell
    i = coords.astype(int)
    f = coords - i
    top = lattice[np.ix_(i, i)] * np.outer(1 - f, 1 - f) \
        + lattice[np.ix_(i, i + 1)] * np.outer(1 - f, f) \
        + lattice[np.ix_(i + 1, i)] * np.outer(f, 1 - f) \
        + lattice[np.ix_(i + 1, i + 1)] * np.outer(f, f)
    return top


OCEAN_RGB = (0.08, 0.22, 0.45)
DEBRIS_RGB_EASY = (0.74, 0.68, 0.55)
DEBRIS_RGB_HARD = (0.30, 0.38, 0.50)


def _random_polygon(rng: PCG32, size: int) -> list[tuple[float, float]]:
    cx = rng.uniform(0.18, 0.82)
    cy = rng.uniform(0.18, 0.82)
    nv = rng.randint(5, 9)
    base_r = rng.uniform(0.06, 0.14)
    poly = []
    for k in range(nv):
        ang = 2.0 * np.pi * (k + rng.uniform(-0.25, 0.25)) / nv
        r = base_r * rng.uniform(0.7, 1.3)
        x = min(max(cx + r * np.cos(ang), 0.0), 1.0)
        y = min(max(cy + r * np.sin(ang), 0.0), 1.0)
        poly.append((round(x, 6), round(y, 6)))
    return poly


def render_sample(rng: PCG32, cfg: GenConfig):
    """Render one scene; returns (image (3,S,S) float64 in [0,1], annotations)."""
    s = cfg.image_size
    easy = cfg.difficulty == "easy"
    noise_amp = 0.03 if easy else 0.07
    noise = 0.5 * _value_noise(rng, s, max(4, s // 4)) \
        + 0.5 * _value_noise(rng, s, max(2, s // 8))

    img = np.empty((3, s, s))
    for b, base in enumerate(OCEAN_RGB):
        img[b] = base + noise_amp * (noise - 0.5) * 2.0

    nblobs = rng.randint(0, cfg.max_blobs)
    annotations: list[InstanceAnnotation] = []
    debris_base = DEBRIS_RGB_EASY if easy else DEBRIS_RGB_HARD
    for _ in range(nblobs):
        poly = None
        for _attempt in range(20):
            cand = _random_polygon(rng, s)
            if not easy:
                poly = cand
                break
            cxs = [p[0] for p in cand]
            cys = [p[1] for p in cand]
            cc = (sum(cxs) / len(cxs), sum(cys) / len(cys))
            clear = all(
                (cc[0] - o[0]) ** 2 + (cc[1] - o[1]) ** 2 > 0.38 ** 2
                for o in [(sum(q[0] for q in a.polygon) / len(a.polygon),
                           sum(q[1] for q in a.polygon) / len(a.polygon))
                          for a in annotations])
            if clear:
                poly = cand
                break
        if poly is None:
            continue
        try:
            mask = rasterize_polygon(poly, s, s)
        except AnnotationError:
            continue
        jitter = rng.uniform(-0.04, 0.04)
        for b, base in enumerate(debris_base):
            img[b][mask] = base + jitter + 0.02 * (noise[mask] - 0.5)
        annotations.append(InstanceAnnotation(class_id=0, polygon=poly,
                                              mask=mask, box=mask_box(mask)))
    if not easy:
        # sparse bright speckle over the whole frame
        for _ in range(s):
            px, py = rng.randint(0, s - 1), rng.randint(0, s - 1)
            img[:, py, px] += rng.uniform(-0.1, 0.15)
    return np.clip(img, 0.0, 1.0), annotations


def image_to_png_bytes(img: np.ndarray) -> Image.Image:
    arr = np.round(img * 255.0).astype(np.uint8).transpose(1, 2, 0)
    return Image.fromarray(arr, mode="RGB")


def load_image(path) -> np.ndarray:
    """Read a PNG back to (3,H,W) float64 in [0,1]."""
    with Image.open(path) as im:
        arr = np.asarray(im.convert("RGB"), dtype=np.float64) / 255.0
    return arr.transpose(2, 0, 1)


def generate_dataset(cfg: GenConfig, out_dir) -> dict:
    """Write images/, labels/ and manifest.json; returns the manifest.

    The train/test split is deterministic: image ids are shuffled with the
    PCG32 stream ``cfg.count`` and the first round(0.79 * count) become the
    training set.
    """
    img_dir = os.path.join(out_dir, "images")
    lbl_dir = os.path.join(out_dir, "labels")
    try:
        os.makedirs(img_dir, exist_ok=True)
        os.makedirs(lbl_dir, exist_ok=True)
    except OSError as e:
        raise GenerationError(f"cannot create output directory {out_dir}: {e}")

    for i in range(cfg.count):
        rng = PCG32(cfg.seed, stream=i)
        img, anns = render_sample(rng, cfg)
        name = f"{i:05d}"
        try:
            image_to_png_bytes(img).save(os.path.join(img_dir, name + ".png"))
            save_annotations(os.path.join(lbl_dir, name + ".txt"), anns)
        except OSError as e:
            raise GenerationError(f"failed writing sample {name} under {out_dir}: {e}")

    ids = [f"{i:05d}" for i in range(cfg.count)]
    split_rng = PCG32(cfg.seed, stream=cfg.count)
    split_rng.shuffle(ids)
    n_train = int(np.floor(cfg.count * 0.79 + 0.5))
    manifest = {
        "train": sorted(ids[:n_train]),
        "test": sorted(ids[n_train:]),
        "seed": cfg.seed,
        "size": cfg.image_size,
    }
    try:
        with open(os.path.join(out_dir, "manifest.json"), "w") as fh:
            json.dump(manifest, fh, indent=2, sort_keys=True)
            fh.write("\n")
    except OSError as e:
        raise GenerationError(f"failed writing manifest under {out_dir}: {e}")
    return manifest


def load_manifest(data_dir) -> dict:
    path = os.path.join(data_dir, "manifest.json")
    if not os.path.exists(path):
        raise GenerationError(f"no manifest.json under {data_dir}")
    with open(path) as fh:
        return json.load(fh)


def load_split(data_dir, split: str):
    """Load (images, annotation lists, ids) for 'train' or 'test'."""
    manifest = load_manifest(data_dir)
    size = manifest["size"]
    images, ann_lists, ids = [], [], []
    for name in manifest[split]:
        images.append(load_image(os.path.join(data_dir, "images", name + ".png")))
        ann_lists.append(load_annotations(
            os.path.join(data_dir, "labels", name + ".txt"), size, size))
        ids.append(name)
    return images, ann_lists, ids
