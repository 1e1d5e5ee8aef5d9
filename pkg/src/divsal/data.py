"""Multi-annotator saliency datasets: majority voting, disk layout, synthetic generator.

On-disk layout::

    root/<split>/img/<id>.png          8-bit RGB
    root/<split>/gt/<id>/<j>.png       8-bit gray annotation j = 1..M
    root/<split>/gt/<id>/0.png         optional majority map
    root/<split>/meta/<id>.json        synthetic sidecar (optional)

The ``single_gt`` layout replaces the per-sample directory with
``root/<split>/gt/<id>.png``.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np
from PIL import Image

from .errors import DatasetError, GenerationError, InvalidInputError
from .kernels import binary_morph

MASK_THRESHOLD = 128
SPLITS = ("train", "test")
LAYOUTS = ("multi_annotation", "single_gt")
SHAPES = ("ellipse", "rectangle", "triangle")


@dataclass
class MultiAnnotationSample:
    id: str
    image: np.ndarray  # (H, W, 3) float in [0, 1]
    annotations: np.ndarray  # (M, H, W) uint8 in {0, 1}
    majority: np.ndarray  # (H, W) uint8
    meta: dict = field(default_factory=dict)
    object_masks: np.ndarray | None = None  # (n_obj, H, W), synthetic only

    def __post_init__(self):
        if self.annotations.ndim != 3 or self.annotations.shape[0] < 1:
            raise InvalidInputError(f"{self.id}: annotations must have shape (M, H, W) with M >= 1")
        hw = self.image.shape[:2]
        if self.annotations.shape[1:] != hw or self.majority.shape != hw:
            raise InvalidInputError(f"{self.id}: image, annotations and majority must share H x W")

    @property
    def num_annotators(self) -> int:
        return self.annotations.shape[0]


@dataclass
class DatasetMeta:
    size: int
    num_annotators: int
    split: str
    image_size: int

    def __post_init__(self):
        if self.size < 1 or self.num_annotators < 1:
            raise InvalidInputError("dataset size and num_annotators must be >= 1")
        if self.split not in SPLITS:
            raise InvalidInputError(f"unknown split {self.split!r}")


@dataclass
class SyntheticSpec:
    num_images: int = 500
    canvas: int = 64
    objects_per_image: tuple[int, int] = (2, 3)
    salience_probs: tuple[float, ...] = (1.0, 0.6, 0.3)
    jitter_radius: int = 1
    num_annotators: int = 5
    seed: int = 0
    split: str = "train"

    def __post_init__(self):
        self.objects_per_image = tuple(int(v) for v in self.objects_per_image)
        self.salience_probs = tuple(float(p) for p in self.salience_probs)
        lo, hi = self.objects_per_image
        if not 1 <= lo <= hi:
            raise InvalidInputError(f"bad objects_per_image range {self.objects_per_image}")
        if any(not 0.0 <= p <= 1.0 for p in self.salience_probs):
            raise InvalidInputError("salience_probs entries must lie in [0, 1]")
        if len(self.salience_probs) < hi:
            raise InvalidInputError("need one salience probability per object slot")
        if self.jitter_radius < 0 or self.num_annotators < 1 or self.num_images < 1:
            raise InvalidInputError("jitter_radius >= 0, num_annotators >= 1, num_images >= 1 required")


def majority_vote(annotations) -> np.ndarray:
    """Per-pixel vote over M binary maps. Ties (even M) resolve to salient."""
    a = np.asarray(annotations)
    if a.ndim != 3 or a.shape[0] < 1:
        raise InvalidInputError("expected a stack of M >= 1 binary maps with identical shape")
    if not np.isin(a, (0, 1)).all():
        raise InvalidInputError("annotation values must be 0 or 1")
    votes = a.astype(np.int64).sum(axis=0)
    return (2 * votes >= a.shape[0]).astype(np.uint8)


# --------------------------------------------------------------------------
# synthetic generator
# --------------------------------------------------------------------------


def _background(rng, n):
    base = rng.uniform(0.25, 0.75, size=3)
    coarse = rng.normal(0.0, 1.0, size=(n // 8 + 2, n // 8 + 2, 3))
    t = np.linspace(0, coarse.shape[0] - 1.001, n)
    i0 = t.astype(int)
    f = t - i0
    rows = coarse[i0] * (1 - f)[:, None, None] + coarse[i0 + 1] * f[:, None, None]
    smooth = rows[:, i0] * (1 - f)[None, :, None] + rows[:, i0 + 1] * f[None, :, None]
    freq = rng.uniform(0.2, 0.6)
    angle = rng.uniform(0, np.pi)
    grid = np.arange(n)
    stripes = np.sin(freq * (np.cos(angle) * grid[None, :] + np.sin(angle) * grid[:, None]))
    img = base + 0.06 * smooth + 0.03 * stripes[..., None]
    return np.clip(img, 0.0, 1.0)


def _shape_mask(kind, n, cy, cx, ry, rx, angle):
    yy, xx = np.mgrid[0:n, 0:n].astype(np.float64)
    dy, dx = yy - cy, xx - cx
    c, s = math.cos(angle), math.sin(angle)
    u = c * dx + s * dy
    v = -s * dx + c * dy
    if kind == "ellipse":
        m = (u / rx) ** 2 + (v / ry) ** 2 <= 1.0
    elif kind == "rectangle":
        m = (np.abs(u) <= rx) & (np.abs(v) <= ry)
    else:
        # isosceles triangle, apex at v = -ry, base at v = +ry
        t = (v + ry) / (2 * ry)
        m = (t >= 0) & (t <= 1) & (np.abs(u) <= rx * t)
    return m.astype(np.uint8)


def _place_objects(rng, n, count, max_tries=200):
    r_lo = max(4, n // 10)
    r_hi = max(r_lo + 1, n // 6)
    margin = 2
    placed = []
    for _ in range(count):
        for _try in range(max_tries):
            r = rng.integers(r_lo, r_hi + 1)
            lo, hi = r + margin, n - r - margin
            if hi <= lo:
                raise GenerationError(f"canvas {n} too small for objects of radius {r}")
            cy, cx = rng.integers(lo, hi), rng.integers(lo, hi)
            if all(math.hypot(cy - py, cx - px) > r + pr + 3 for py, px, pr in placed):
                placed.append((int(cy), int(cx), int(r)))
                break
        else:
            raise GenerationError(f"canvas {n} too small to place {count} non-overlapping objects")
    return placed


def _render_sample(rng, spec: SyntheticSpec, index: int) -> MultiAnnotationSample:
    n = spec.canvas
    lo, hi = spec.objects_per_image
    count = int(rng.integers(lo, hi + 1))
    img = _background(rng, n)
    bg_mean = img.reshape(-1, 3).mean(axis=0)
    objects, masks = [], []
    for o, (cy, cx, r) in enumerate(_place_objects(rng, n, count)):
        p_s = spec.salience_probs[o]
        kind = SHAPES[o % len(SHAPES)]
        aspect = rng.uniform(0.7, 1.0)
        angle = float(rng.uniform(0, np.pi))
        mask = _shape_mask(kind, n, cy, cx, r, r * aspect, angle)
        # contrast grows with salience so that it is visually inferable
        direction = np.abs(rng.normal(size=3)) * np.sign(0.5 - bg_mean + 1e-9)
        direction /= np.linalg.norm(direction) + 1e-12
        contrast = 0.15 + 0.45 * p_s
        color = np.clip(bg_mean + contrast * direction, 0.0, 1.0)
        img[mask > 0] = color
        masks.append(mask)
        objects.append({"shape": kind, "p_s": p_s, "center": [cy, cx], "radius": r})
    img = np.clip(img + rng.normal(0.0, 0.01, size=img.shape), 0.0, 1.0)

    m_ann = spec.num_annotators
    inclusions = rng.random((m_ann, count)) < np.array([o["p_s"] for o in objects])
    jitters = rng.integers(-spec.jitter_radius, spec.jitter_radius + 1, size=(m_ann, count))
    annotations = np.zeros((m_ann, n, n), np.uint8)
    for j in range(m_ann):
        for o in range(count):
            if not inclusions[j, o]:
                continue
            r = int(jitters[j, o])
            annotations[j] |= binary_morph(masks[o], abs(r), dilate=r > 0)
    meta = {
        "objects": objects,
        "inclusions": inclusions.astype(int).tolist(),
        "jitter": jitters.tolist(),
    }
    return MultiAnnotationSample(
        id=f"{spec.split}_{index:05d}",
        image=img,
        annotations=annotations,
        majority=majority_vote(annotations),
        meta=meta,
        object_masks=np.stack(masks),
    )


def generate_synthetic(spec: SyntheticSpec) -> tuple[list[MultiAnnotationSample], DatasetMeta]:
    """Deterministically render ``spec.num_images`` samples from ``spec.seed``.

    Annotator j includes object o with probability ``salience_probs[o]`` and
    jitters its boundary by a random dilation/erosion of up to
    ``jitter_radius`` pixels.
    """
    rng = np.random.default_rng(spec.seed)
    samples = [_render_sample(rng, spec, i) for i in range(spec.num_images)]
    meta = DatasetMeta(len(samples), spec.num_annotators, spec.split, spec.canvas)
    return samples, meta


# --------------------------------------------------------------------------
# disk I/O
# --------------------------------------------------------------------------


def _to_u8(a):
    return np.clip(np.rint(np.asarray(a, dtype=np.float64) * 255.0), 0, 255).astype(np.uint8)


def _write_png(path: Path, arr: np.ndarray):
    path.parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(arr).save(path, format="PNG", optimize=False)


def save_dataset(root, split: str, samples: Sequence[MultiAnnotationSample], layout="multi_annotation"):
    root = Path(root) / split
    for s in samples:
        _write_png(root / "img" / f"{s.id}.png", _to_u8(s.image))
        if layout == "single_gt":
            _write_png(root / "gt" / f"{s.id}.png", s.majority * np.uint8(255))
        else:
            _write_png(root / "gt" / s.id / "0.png", s.majority * np.uint8(255))
            for j, ann in enumerate(s.annotations, start=1):
                _write_png(root / "gt" / s.id / f"{j}.png", ann * np.uint8(255))
        if s.meta:
            p = root / "meta" / f"{s.id}.json"
            p.parent.mkdir(parents=True, exist_ok=True)
            p.write_text(json.dumps(s.meta, sort_keys=True, indent=1) + "\n")


def _read_image(path: Path, size):
    try:
        with Image.open(path) as im:
            im = im.convert("RGB")
            if size is not None and im.size != (size, size):
                im = im.resize((size, size), Image.BILINEAR)
            return np.asarray(im, dtype=np.float64) / 255.0
    except OSError as exc:
        raise OSError(f"cannot read image {path}: {exc}") from exc


def _read_mask(path: Path, size):
    try:
        with Image.open(path) as im:
            im = im.convert("L")
            if size is not None and im.size != (size, size):
                im = im.resize((size, size), Image.NEAREST)
            return (np.asarray(im) >= MASK_THRESHOLD).astype(np.uint8)
    except OSError as exc:
        raise OSError(f"cannot read mask {path}: {exc}") from exc


def _load_one(split_root: Path, sid: str, layout: str, image_size):
    image = _read_image(split_root / "img" / f"{sid}.png", image_size)
    if layout == "single_gt":
        path = split_root / "gt" / f"{sid}.png"
        if not path.exists():
            raise DatasetError(f"sample {sid}: missing ground truth {path}", sample_id=sid)
        m = _read_mask(path, image_size)
        return MultiAnnotationSample(sid, image, m[None], m.copy())
    gt_dir = split_root / "gt" / sid
    if not gt_dir.is_dir():
        raise DatasetError(f"sample {sid}: missing annotation directory {gt_dir}", sample_id=sid)
    indices = sorted(int(p.stem) for p in gt_dir.glob("*.png") if p.stem.isdigit() and int(p.stem) > 0)
    if not indices:
        raise DatasetError(f"sample {sid}: no annotations in {gt_dir}", sample_id=sid)
    expected = list(range(1, indices[-1] + 1))
    if indices != expected:
        missing = sorted(set(expected) - set(indices))
        raise DatasetError(f"sample {sid}: missing annotation index {missing}", sample_id=sid)
    annotations = np.stack([_read_mask(gt_dir / f"{j}.png", image_size) for j in expected])
    maj_path = gt_dir / "0.png"
    majority = _read_mask(maj_path, image_size) if maj_path.exists() else majority_vote(annotations)
    meta = {}
    meta_path = split_root / "meta" / f"{sid}.json"
    if meta_path.exists():
        meta = json.loads(meta_path.read_text())
    return MultiAnnotationSample(sid, image, annotations, majority, meta)


def list_ids(root, split: str) -> list[str]:
    img_dir = Path(root) / split / "img"
    if not img_dir.is_dir():
        raise DatasetError(f"no image directory at {img_dir}")
    return sorted(p.stem for p in img_dir.glob("*.png"))


def iter_dataset(root, split="train", layout="multi_annotation", image_size=None) -> Iterator[MultiAnnotationSample]:
    if layout not in LAYOUTS:
        raise InvalidInputError(f"unknown layout {layout!r}")
    split_root = Path(root) / split
    for sid in list_ids(root, split):
        yield _load_one(split_root, sid, layout, image_size)


def load_dataset(root, split="train", layout="multi_annotation", image_size=None) -> list[MultiAnnotationSample]:
    """Read every sample of ``split``. Masks are binarized at 128 of 8 bits."""
    return list(iter_dataset(root, split, layout, image_size))


def dataset_meta(samples: Sequence[MultiAnnotationSample], split: str) -> DatasetMeta:
    counts = {s.num_annotators for s in samples}
    if len(counts) != 1:
        raise DatasetError(f"inconsistent annotator counts across samples: {sorted(counts)}")
    return DatasetMeta(len(samples), counts.pop(), split, samples[0].image.shape[0])


def spec_to_dict(spec: SyntheticSpec) -> dict:
    d = asdict(spec)
    d["objects_per_image"] = list(spec.objects_per_image)
    d["salience_probs"] = list(spec.salience_probs)
    return d
