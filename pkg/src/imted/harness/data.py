"""Synthetic shape dataset, JSON ingestion and the occluded-subset filter."""
import json
import logging
import os
from dataclasses import dataclass, field

import numpy as np

from ..proposals import iou_matrix

log = logging.getLogger(__name__)

SHAPES = ("rectangle", "disk", "triangle")


@dataclass
class Dataset:
    images: np.ndarray  # (N, 3, H, W) float32 in [0, 1]
    boxes: list  # per image (n, 4) float64, x1 y1 x2 y2 in pixels
    labels: list  # per image (n,) int64 class ids
    class_names: tuple = SHAPES
    ids: np.ndarray = field(default=None)

    def __post_init__(self):
        if self.ids is None:
            self.ids = np.arange(len(self.boxes), dtype=np.int64)
        self.ids = np.asarray(self.ids, dtype=np.int64)

    def __len__(self):
        return len(self.boxes)

    @property
    def num_classes(self):
        return len(self.class_names)

    def subset(self, index):
        index = np.asarray(index, dtype=np.int64)
        return Dataset(self.images[index], [self.boxes[i] for i in index], [self.labels[i] for i in index],
                       self.class_names, self.ids[index])

    def validate(self):
        if len(self) == 0:
            return
        H, W = self.images.shape[2:]
        for i, (b, lab) in enumerate(zip(self.boxes, self.labels)):
            if b.size and (b[:, 0].min() < 0 or b[:, 1].min() < 0 or b[:, 2].max() > W or b[:, 3].max() > H):
                raise ValueError(f"image {self.ids[i]}: box outside image bounds")
            if lab.size and (lab.min() < 0 or lab.max() >= self.num_classes):
                raise ValueError(f"image {self.ids[i]}: class id out of range")


@dataclass
class SyntheticSpec:
    n_images: int = 500
    image_size: int = 64
    classes: tuple = SHAPES
    objects_per_image: tuple = (1, 3)
    object_size: tuple = (12, 32)
    occlusion_rate: float = 0.0
    noise_level: float = 0.05
    seed: int = 0
    max_retries: int = 50


def _render(canvas, shape, box, color):
    x1, y1, x2, y2 = box
    H, W = canvas.shape[1:]
    yy, xx = np.mgrid[y1:y2, x1:x2]
    if shape == "rectangle":
        mask = np.ones(yy.shape, dtype=bool)
    elif shape == "disk":
        cy, cx = (y1 + y2 - 1) / 2.0, (x1 + x2 - 1) / 2.0
        ry, rx = (y2 - y1) / 2.0, (x2 - x1) / 2.0
        mask = ((yy - cy) / ry) ** 2 + ((xx - cx) / rx) ** 2 <= 1.0
    else:  # apex at top centre, base along the bottom edge
        t = (yy - y1 + 0.5) / (y2 - y1)
        half = t * (x2 - x1) / 2.0
        cx = (x1 + x2) / 2.0
        mask = np.abs(xx + 0.5 - cx) <= half
    mask &= (yy < H) & (xx < W)
    region = canvas[:, y1:y2, x1:x2]
    region[:, mask] = np.asarray(color)[:, None]
    ys, xs = np.nonzero(mask)
    return [x1 + xs.min(), y1 + ys.min(), x1 + xs.max() + 1, y1 + ys.max() + 1]


def _random_box(rng, spec):
    lo, hi = spec.object_size
    w = int(rng.integers(lo, hi + 1))
    h = int(rng.integers(lo, hi + 1))
    x = int(rng.integers(0, spec.image_size - w + 1))
    y = int(rng.integers(0, spec.image_size - h + 1))
    return [x, y, x + w, y + h]


def _occluding_box(rng, ref, spec):
    """A jittered copy of ``ref`` that stays inside the image."""
    x1, y1, x2, y2 = ref
    w, h = x2 - x1, y2 - y1
    dx = int(rng.integers(-max(1, w // 6), max(1, w // 6) + 1))
    dy = int(rng.integers(-max(1, h // 6), max(1, h // 6) + 1))
    nx = min(max(x1 + dx, 0), spec.image_size - w)
    ny = min(max(y1 + dy, 0), spec.image_size - h)
    return [nx, ny, nx + w, ny + h]


def _generate_one(rng, spec, class_ids):
    S = spec.image_size
    bg = rng.uniform(0.0, 0.35)
    img = np.full((3, S, S), bg) + rng.normal(0.0, spec.noise_level, (3, S, S))
    n = int(rng.integers(spec.objects_per_image[0], spec.objects_per_image[1] + 1))
    occlude = rng.random() < spec.occlusion_rate
    placed, labels, drawn = [], [], []
    for k in range(n):
        cls = int(rng.choice(class_ids))
        box = None
        for _ in range(spec.max_retries):
            if occlude and k == 1 and placed:
                cand = _occluding_box(rng, placed[0], spec)
                if iou_matrix(np.array([cand], float), np.array(placed[:1], float))[0, 0] > 0.5:
                    box = cand
                    break
                continue
            cand = _random_box(rng, spec)
            if not placed or iou_matrix(np.array([cand], float), np.array(placed, float)).max() <= 0.3:
                box = cand
                break
        if box is None:
            log.info("object %d skipped after %d placement attempts", k, spec.max_retries)
            continue
        placed.append(box)
        labels.append(cls)
        color = rng.uniform(0.55, 1.0, 3)
        drawn.append(_render(img, spec.classes[cls], box, color))
    img = np.clip(img, 0.0, 1.0).astype(np.float32)
    boxes = np.asarray(drawn, dtype=np.float64).reshape(-1, 4)
    # later objects paint over earlier ones; keep only the annotations of what was drawn
    return img, boxes, np.asarray(labels, dtype=np.int64)


def gen_synthetic_dataset(spec: SyntheticSpec) -> Dataset:
    """Deterministic in ``spec.seed``; each image draws from its own spawned stream."""
    if spec.image_size % 16:
        raise ValueError("image_size must be a multiple of 16")
    unknown = [c for c in spec.classes if c not in SHAPES]
    if unknown:
        raise ValueError(f"unknown shape classes {unknown}")
    S = spec.image_size
    children = np.random.SeedSequence(spec.seed).spawn(spec.n_images)
    images = np.zeros((spec.n_images, 3, S, S), dtype=np.float32)
    boxes, labels = [], []
    class_ids = np.arange(len(spec.classes))
    for i, ss in enumerate(children):
        img, b, lab = _generate_one(np.random.default_rng(ss), spec, class_ids)
        images[i] = img
        boxes.append(b)
        labels.append(lab)
    return Dataset(images, boxes, labels, tuple(spec.classes))


# -- occlusion filter ----------------------------------------------------------------

def has_occluded_pair(boxes, iou_thresh=0.5):
    boxes = np.asarray(boxes, dtype=np.float64).reshape(-1, 4)
    if boxes.shape[0] < 2:
        return False
    m = iou_matrix(boxes, boxes)
    iu = np.triu_indices(boxes.shape[0], k=1)
    return bool((m[iu] > iou_thresh).any())


def filter_occluded(ds: Dataset, iou_thresh=0.5) -> Dataset:
    """Images holding at least one ground-truth pair with IoU above ``iou_thresh``."""
    keep = [i for i, b in enumerate(ds.boxes) if has_occluded_pair(b, iou_thresh)]
    return ds.subset(keep)


# -- persistence ---------------------------------------------------------------------

def to_coco_json(ds: Dataset):
    H, W = ds.images.shape[2:] if len(ds) else (0, 0)
    images, anns = [], []
    aid = 1
    for i, (b, lab) in enumerate(zip(ds.boxes, ds.labels)):
        images.append({"id": int(ds.ids[i]), "width": int(W), "height": int(H), "index": i})
        for box, c in zip(b, lab):
            x1, y1, x2, y2 = (float(v) for v in box)
            anns.append({"id": aid, "image_id": int(ds.ids[i]), "bbox": [x1, y1, x2 - x1, y2 - y1],
                         "category_id": int(c), "area": (x2 - x1) * (y2 - y1), "iscrowd": 0})
            aid += 1
    cats = [{"id": k, "name": n} for k, n in enumerate(ds.class_names)]
    return {"images": images, "annotations": anns, "categories": cats}


def save_dataset(ds: Dataset, path):
    """Write ``<path>.json`` (COCO-style annotations) and ``<path>.npz`` (pixels)."""
    base = os.fspath(path)
    base = base[:-5] if base.endswith(".json") else base
    meta = to_coco_json(ds)
    meta["pixels"] = os.path.basename(base) + ".npz"
    with open(base + ".json", "w") as fh:
        json.dump(meta, fh)
    np.savez_compressed(base + ".npz", images=ds.images)
    return base + ".json"


def _load_pixels(meta, root):
    if meta.get("pixels"):
        with np.load(os.path.join(root, meta["pixels"])) as z:
            return z["images"]
    from PIL import Image  # only needed for image-file datasets

    arrs = []
    for im in meta["images"]:
        with Image.open(os.path.join(root, im["file_name"])) as pic:
            arrs.append(np.asarray(pic.convert("RGB"), dtype=np.float32).transpose(2, 0, 1) / 255.0)
    return np.stack(arrs) if arrs else np.zeros((0, 3, 16, 16), np.float32)


def load_dataset(path) -> Dataset:
    """Read the minimal JSON schema: images[], annotations[] with xywh bbox and category_id."""
    with open(path) as fh:
        meta = json.load(fh)
    try:
        images = meta["images"]
        anns = meta["annotations"]
    except KeyError as exc:
        raise ValueError(f"{path}: missing top-level key {exc}") from None
    cats = sorted(meta.get("categories", []), key=lambda c: c["id"])
    cat_ids = [c["id"] for c in cats] or sorted({a["category_id"] for a in anns})
    names = tuple(c.get("name", str(c["id"])) for c in cats) or tuple(str(c) for c in cat_ids)
    cat_index = {c: k for k, c in enumerate(cat_ids)}
    pos = {im["id"]: k for k, im in enumerate(images)}
    boxes = [[] for _ in images]
    labels = [[] for _ in images]
    for a in anns:
        x, y, w, h = a["bbox"]
        k = pos[a["image_id"]]
        boxes[k].append([x, y, x + w, y + h])
        labels[k].append(cat_index[a["category_id"]])
    pixels = _load_pixels(meta, os.path.dirname(os.path.abspath(path)))
    ds = Dataset(pixels.astype(np.float32), [np.asarray(b, np.float64).reshape(-1, 4) for b in boxes],
                 [np.asarray(lab, np.int64) for lab in labels], names, [im["id"] for im in images])
    ds.validate()
    return ds
