"""Synthetic shape scenes plus COCO-style annotation and detection I/O.

Each image is uniform noise with 1-4 non-overlapping colored shapes; the
three classes are rectangle, disc, and triangle.  Masks are rasterized
exactly and every box is the tight bound of its mask, so the annotations are
noise-free by construction.  Pixel values are quantized to uint8 before the
float image is derived, which makes the PPM files a lossless serialization.

Instance class ids are 0-based (0 rectangle, 1 disc, 2 triangle).  COCO
category ids and the detector's label space are the same ids shifted by one,
since the detector reserves 0 for background.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

CLASS_NAMES = ("rectangle", "disc", "triangle")


@dataclass
class Instance:
    box: np.ndarray          # [x1, y1, x2, y2], tight bound of mask
    cls: int                 # 0-based class id
    mask: np.ndarray         # HxW uint8 {0,1}


@dataclass
class GroundTruth:
    """Detector-facing view: labels are 1-based (0 means background)."""
    boxes: np.ndarray        # (n, 4) float64
    labels: np.ndarray       # (n,) int64 in 1..K
    masks: np.ndarray = None  # (n, H, W) uint8


@dataclass
class Sample:
    image: np.ndarray        # (3, H, W) float32 in [0,1]
    pixels: np.ndarray       # (H, W, 3) uint8, the serialized form
    instances: list          # list[Instance]
    image_id: int = 0
    _gt: GroundTruth = field(default=None, repr=False)

    @property
    def gt(self) -> GroundTruth:
        if self._gt is None:
            if self.instances:
                self._gt = GroundTruth(
                    boxes=np.stack([i.box for i in self.instances]).astype(np.float64),
                    labels=np.array([i.cls + 1 for i in self.instances], dtype=np.int64),
                    masks=np.stack([i.mask for i in self.instances]).astype(np.uint8))
            else:
                h, w = self.pixels.shape[:2]
                self._gt = GroundTruth(np.zeros((0, 4)), np.zeros(0, dtype=np.int64),
                                       np.zeros((0, h, w), dtype=np.uint8))
        return self._gt


def _sample_to_float(pixels: np.ndarray) -> np.ndarray:
    return (pixels.astype(np.float32) / 255.0).transpose(2, 0, 1)


def _raster_shape(kind: int, x1, y1, x2, y2, h, w) -> np.ndarray:
    """Pixel-center rasterization of one shape inside [x1,x2)x[y1,y2)."""
    mask = np.zeros((h, w), dtype=np.uint8)
    ys = np.arange(h) + 0.5
    xs = np.arange(w) + 0.5
    if kind == 0:      # rectangle
        mask[int(y1):int(y2), int(x1):int(x2)] = 1
    elif kind == 1:    # disc (inscribed ellipse)
        cy, cx = (y1 + y2) / 2.0, (x1 + x2) / 2.0
        ry, rx = (y2 - y1) / 2.0, (x2 - x1) / 2.0
        d = ((ys[:, None] - cy) / ry) ** 2 + ((xs[None, :] - cx) / rx) ** 2
        mask[d <= 1.0] = 1
    else:              # triangle, apex centered on the top edge
        ax, ay = (x1 + x2) / 2.0, y1
        inside = np.ones((h, w), dtype=bool)
        for (px, py), (qx, qy) in (((x1, y2), (x2, y2)),     # base, left->right
                                   ((x2, y2), (ax, ay)),     # right edge
                                   ((ax, ay), (x1, y2))):    # left edge
            cross = (qx - px) * (ys[:, None] - py) - (qy - py) * (xs[None, :] - px)
            inside &= cross <= 0
        mask[inside] = 1
    return mask


def _tight_box(mask: np.ndarray) -> np.ndarray:
    ys, xs = np.nonzero(mask)
    return np.array([xs.min(), ys.min(), xs.max() + 1, ys.max() + 1], dtype=np.float64)


_CLASS_TINT = ((0, 1, 2), (1, 0, 2), (2, 1, 0))  # channel roles: hi, mid, lo


def synth_generate(n: int, image_size=(64, 64), num_classes: int = 3, seed: int = 0) -> list:
    """Deterministic dataset of ``n`` scenes. ``num_classes`` <= 3."""
    if n <= 0:
        raise ValueError("n must be positive")
    if not 1 <= num_classes <= len(CLASS_NAMES):
        raise ValueError(f"num_classes must be in 1..{len(CLASS_NAMES)}")
    w, h = image_size
    if min(w, h) < 16:
        raise ValueError("image_size too small for shape placement")
    rng = np.random.default_rng(seed)
    lo, hi = max(6, min(w, h) // 8), min(w, h) // 2
    samples = []
    for image_id in range(n):
        pixels = rng.integers(70, 180, size=(h, w, 3), dtype=np.uint8)
        instances = []
        boxes = []
        for _ in range(int(rng.integers(1, 5))):
            for _attempt in range(40):
                sw = int(rng.integers(lo, hi + 1))
                sh = int(rng.integers(lo, hi + 1))
                x1 = int(rng.integers(0, w - sw + 1))
                y1 = int(rng.integers(0, h - sh + 1))
                cand = np.array([x1, y1, x1 + sw, y1 + sh], dtype=np.float64)
                if all(_separated(cand, b) for b in boxes):
                    break
            else:
                continue  # crowded scene; skip this shape
            cls = int(rng.integers(0, num_classes))
            mask = _raster_shape(cls, *cand, h, w)
            hi_c, mid_c, lo_c = _CLASS_TINT[cls]
            color = np.empty(3, dtype=np.uint8)
            color[hi_c] = rng.integers(190, 256)
            color[mid_c] = rng.integers(80, 150)
            color[lo_c] = rng.integers(0, 60)
            pixels[mask.astype(bool)] = color
            boxes.append(cand)
            instances.append(Instance(box=_tight_box(mask), cls=cls, mask=mask))
        samples.append(Sample(image=_sample_to_float(pixels), pixels=pixels,
                              instances=instances, image_id=image_id))
    return samples


def _separated(a: np.ndarray, b: np.ndarray, gap: float = 1.0) -> bool:
    return (a[2] + gap <= b[0] or b[2] + gap <= a[0]
            or a[3] + gap <= b[1] or b[3] + gap <= a[1])


# --- run-length masks --------------------------------------------------------

def rle_encode(mask: np.ndarray) -> dict:
    """Uncompressed COCO RLE: column-major runs, starting with a zero run."""
    mask = np.asarray(mask)
    h, w = mask.shape
    flat = (mask.flatten(order="F") != 0).astype(np.int8)
    if flat.size == 0:
        return {"size": [int(h), int(w)], "counts": []}
    change = np.flatnonzero(np.diff(flat)) + 1
    bounds = np.concatenate([[0], change, [flat.size]])
    counts = np.diff(bounds).tolist()
    if flat[0] == 1:
        counts = [0] + counts
    return {"size": [int(h), int(w)], "counts": [int(c) for c in counts]}


def rle_decode(rle: dict) -> np.ndarray:
    h, w = rle["size"]
    counts = rle["counts"]
    total = int(sum(counts))
    if total != h * w:
        raise ValueError(f"RLE counts sum {total} != {h}x{w}")
    vals = np.zeros(total, dtype=np.uint8)
    pos = 0
    val = 0
    for c in counts:
        if val:
            vals[pos:pos + c] = 1
        pos += c
        val ^= 1
    return vals.reshape((w, h)).T.copy()  # column-major layout


# --- box format conversions --------------------------------------------------

def xyxy_to_xywh(box) -> list:
    x1, y1, x2, y2 = [float(v) for v in box]
    return [x1, y1, x2 - x1, y2 - y1]


def xywh_to_xyxy(box) -> list:
    x, y, w, h = [float(v) for v in box]
    return [x, y, x + w, y + h]


# --- COCO-style annotation files ---------------------------------------------

def coco_write(dataset: list, path) -> None:
    images, annotations = [], []
    ann_id = 1
    for s in dataset:
        h, w = s.pixels.shape[:2]
        images.append({"id": s.image_id, "width": w, "height": h,
                       "file_name": image_file_name(s.image_id)})
        for inst in s.instances:
            annotations.append({
                "id": ann_id,
                "image_id": s.image_id,
                "category_id": inst.cls + 1,
                "bbox": xyxy_to_xywh(inst.box),
                "area": int(inst.mask.sum()),
                "iscrowd": 0,
                "segmentation": rle_encode(inst.mask),
            })
            ann_id += 1
    doc = {
        "images": images,
        "annotations": annotations,
        "categories": [{"id": i + 1, "name": n} for i, n in enumerate(CLASS_NAMES)],
    }
    with open(path, "w") as fh:
        json.dump(doc, fh, indent=None, separators=(",", ":"), sort_keys=True)


def image_file_name(image_id: int) -> str:
    return f"img_{image_id:05d}.ppm"


def coco_read(path, image_dir=None) -> list:
    """Rebuild samples from an annotation file.

    Images are loaded from ``image_dir`` (default: the file's directory) when
    the referenced PPM files exist; otherwise pixel data is zero.  Masks must
    be uncompressed RLE dicts.
    """
    from .netpbm import read_netpbm
    path = Path(path)
    if image_dir is None:
        image_dir = path.parent
    try:
        doc = json.loads(path.read_text())
    except json.JSONDecodeError as e:
        raise ValueError(f"{path}: malformed JSON: {e}") from e
    cats = {c["id"] for c in doc.get("categories", [])}
    by_image = {}
    for ann in doc.get("annotations", []):
        if ann["category_id"] not in cats:
            raise ValueError(f"annotation {ann.get('id')}: unknown category "
                             f"{ann['category_id']}")
        seg = ann.get("segmentation")
        if not isinstance(seg, dict):
            raise ValueError("only RLE segmentation dicts are supported")
        by_image.setdefault(ann["image_id"], []).append(ann)
    samples = []
    for im in sorted(doc.get("images", []), key=lambda d: d["id"]):
        h, w = im["height"], im["width"]
        img_path = Path(image_dir) / im.get("file_name", "")
        if img_path.is_file():
            pixels = read_netpbm(img_path)
            if pixels.ndim != 3:
                pixels = np.repeat(pixels[:, :, None], 3, axis=2)
        else:
            pixels = np.zeros((h, w, 3), dtype=np.uint8)
        instances = [
            Instance(box=np.array(xywh_to_xyxy(a["bbox"]), dtype=np.float64),
                     cls=a["category_id"] - 1,
                     mask=rle_decode(a["segmentation"]))
            for a in sorted(by_image.get(im["id"], []), key=lambda a: a["id"])
        ]
        samples.append(Sample(image=_sample_to_float(pixels), pixels=pixels,
                              instances=instances, image_id=im["id"]))
    return samples


# --- detection result files --------------------------------------------------

def detections_write(dets_per_image: dict, path) -> None:
    """``dets_per_image``: image_id -> list of Detection-like objects."""
    rows = []
    for image_id in sorted(dets_per_image):
        for d in dets_per_image[image_id]:
            row = {"image_id": int(image_id), "category_id": int(d.label),
                   "bbox": xyxy_to_xywh(d.box), "score": float(d.score)}
            if getattr(d, "mask", None) is not None:
                row["segmentation"] = rle_encode(d.mask)
            rows.append(row)
    with open(path, "w") as fh:
        json.dump(rows, fh, separators=(",", ":"))


def detections_read(path) -> dict:
    """Returns image_id -> list of Detection objects (mask optional)."""
    from .model import Detection
    rows = json.loads(Path(path).read_text())
    out: dict = {}
    for row in rows:
        mask = rle_decode(row["segmentation"]) if "segmentation" in row else None
        out.setdefault(int(row["image_id"]), []).append(
            Detection(box=np.array(xywh_to_xyxy(row["bbox"])),
                      label=int(row["category_id"]), score=float(row["score"]),
                      mask=None if mask is None else mask.astype(bool)))
    for dets in out.values():
        dets.sort(key=lambda d: -d.score)
    return out
