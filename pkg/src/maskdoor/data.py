"""Synthetic shape datasets, VOC annotation ingestion and dataset persistence."""
from __future__ import annotations

import io
import json
import os
import xml.etree.ElementTree as ET
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np
import torch

from .core import AnnotatedImage, CornerBox

GENERATOR_VERSION = "shapes-1"
DATASET_VERSION = 1
SHAPE_KINDS = ("circle", "square", "triangle", "cross", "diamond")


class DatasetError(Exception):
    pass


class VocParseError(DatasetError):
    pass


@dataclass
class Dataset:
    samples: list[AnnotatedImage]
    classes: list[str]
    split: str = "train"
    provenance: dict = field(default_factory=dict)

    def __len__(self):
        return len(self.samples)

    def __getitem__(self, i):
        return self.samples[i]

    def images(self, idx=None) -> torch.Tensor:
        """Stack images (all, or ``idx``) into an NCHW float32 tensor."""
        sel = self.samples if idx is None else [self.samples[i] for i in idx]
        if not sel:
            return torch.zeros((0, 3, 0, 0))
        arr = np.stack([s.image for s in sel]).transpose(0, 3, 1, 2)
        return torch.from_numpy(np.ascontiguousarray(arr, dtype=np.float32))

    def subset(self, idx, split=None) -> "Dataset":
        return Dataset([self.samples[i] for i in idx], list(self.classes),
                       split or self.split, dict(self.provenance))

    def manifest(self) -> dict:
        return {
            "split": self.split,
            "count": len(self.samples),
            "classes": list(self.classes),
            "provenance": self.provenance,
            "records": [
                {"index": i, "height": s.height, "width": s.width,
                 "boxes": [box_to_list(b) for b in s.boxes]}
                for i, s in enumerate(self.samples)
            ],
        }


def box_to_list(b: CornerBox) -> list:
    return [b.class_id, b.x_min, b.y_min, b.x_max, b.y_max, int(b.difficult)]


def box_from_list(v) -> CornerBox:
    c, x0, y0, x1, y1, *rest = v
    return CornerBox(int(c), float(x0), float(y0), float(x1), float(y1), bool(rest and rest[0]))


def _background(rng, size):
    base = rng.uniform(0.25, 0.75, size=3)
    coarse = rng.normal(0.0, 0.08, size=(5, 5, 3))
    # bilinear upsample of a coarse noise grid gives a smooth texture
    t = np.linspace(0, 4, size)
    i0 = np.clip(np.floor(t).astype(int), 0, 3)
    f = t - i0
    rows = coarse[i0] * (1 - f)[:, None, None] + coarse[i0 + 1] * f[:, None, None]
    tex = rows[:, i0] * (1 - f)[None, :, None] + rows[:, i0 + 1] * f[None, :, None]
    grain = rng.normal(0.0, 0.01, size=(size, size, 3))
    return np.clip(base + tex + grain, 0.0, 1.0)


def _shape_mask(kind, s):
    """Boolean s x s footprint of a shape that touches all four sides of its square."""
    c = (s - 1) / 2
    yy, xx = np.mgrid[0:s, 0:s]
    if kind == "circle":
        m = (xx - c) ** 2 + (yy - c) ** 2 <= (s / 2) ** 2
    elif kind == "square":
        m = np.ones((s, s), dtype=bool)
    elif kind == "triangle":
        m = np.abs(xx - c) <= (yy + 1) / 2
    elif kind == "cross":
        t = max(s // 3, 1)
        lo = (s - t) // 2
        m = ((xx >= lo) & (xx < lo + t)) | ((yy >= lo) & (yy < lo + t))
    elif kind == "diamond":
        m = np.abs(xx - c) + np.abs(yy - c) <= s / 2
    else:
        raise ValueError(kind)
    return m


def _tight(m):
    rows = np.flatnonzero(m.any(1))
    cols = np.flatnonzero(m.any(0))
    return cols[0], rows[0], cols[-1] + 1, rows[-1] + 1


def _render_one(seed, num_classes, image_size, min_size, max_size, max_objects):
    rng = np.random.default_rng(seed)
    img = _background(rng, image_size)
    boxes = []
    n_obj = int(rng.integers(1, max_objects + 1))
    for _ in range(n_obj):
        for _attempt in range(20):
            cls = int(rng.integers(num_classes))
            s = int(rng.integers(min_size, max_size + 1))
            x0 = int(rng.integers(0, image_size - s + 1))
            y0 = int(rng.integers(0, image_size - s + 1))
            cand = CornerBox(cls, x0, y0, x0 + s, y0 + s)
            # keep objects mostly visible; some overlap is allowed
            if all(_overlap_frac(cand, b) < 0.25 for b in boxes):
                break
        else:
            continue
        m = _shape_mask(SHAPE_KINDS[cls], s)
        bx0, by0, bx1, by1 = _tight(m)
        color = rng.uniform(0.0, 1.0, size=3)
        color[rng.integers(3)] = rng.choice([0.05, 0.95])
        shade = 1.0 - 0.15 * np.linspace(0, 1, s)
        fill = np.clip(shade[:, None, None] * color[None, None, :], 0, 1)
        patch = img[y0:y0 + s, x0:x0 + s]
        patch[m] = np.broadcast_to(fill, (s, s, 3))[m]
        boxes.append(CornerBox(cls, float(x0 + bx0), float(y0 + by0), float(x0 + bx1), float(y0 + by1)))
    # quantize to 8-bit levels like a decoded photo
    img = (np.round(img * 255.0) / 255.0).astype(np.float32)
    return AnnotatedImage(img, boxes)


def _overlap_frac(a: CornerBox, b: CornerBox) -> float:
    iw = min(a.x_max, b.x_max) - max(a.x_min, b.x_min)
    ih = min(a.y_max, b.y_max) - max(a.y_min, b.y_min)
    if iw <= 0 or ih <= 0:
        return 0.0
    return iw * ih / min(a.area, b.area)


def gen_synthetic(n: int, num_classes=3, image_size=64, seed=0, split="train",
                  min_size=10, max_size=28, max_objects=4, num_workers=None) -> Dataset:
    """Colored shapes on textured backgrounds; class ``k`` is ``SHAPE_KINDS[k]``.

    Each image gets its own child seed, so output does not depend on ``num_workers``.
    """
    if n < 0:
        raise ValueError("n must be >= 0")
    if not 2 <= num_classes <= len(SHAPE_KINDS):
        raise ValueError(f"num_classes must be in [2, {len(SHAPE_KINDS)}]")
    if min_size < 8 or max_size > image_size:
        raise ValueError("object sizes must be >= 8 px and fit inside the image")
    children = np.random.SeedSequence(seed).spawn(n)
    if num_workers is None:
        num_workers = int(os.environ.get("MASKDOOR_NUM_WORKERS", "1"))

    def job(ss):
        return _render_one(ss, num_classes, image_size, min_size, max_size, max_objects)

    if num_workers > 1 and n > 1:
        with ThreadPoolExecutor(num_workers) as ex:
            samples = list(ex.map(job, children))
    else:
        samples = [job(ss) for ss in children]
    prov = {"source": "synthetic", "generator_version": GENERATOR_VERSION, "seed": seed,
            "image_size": image_size}
    return Dataset(samples, list(SHAPE_KINDS[:num_classes]), split, prov)


def parse_voc(xml_document: str | bytes, class_map: dict[str, int]) -> list[CornerBox]:
    """Boxes from one VOC annotation document.

    VOC pixel coordinates are kept as given; ``difficult`` is carried on the box.
    """
    try:
        root = ET.fromstring(xml_document)
    except ET.ParseError as e:
        line, col = e.position
        raise VocParseError(f"malformed VOC annotation at line {line}, column {col}: {e}") from e
    if root.tag != "annotation":
        raise VocParseError(f"root element is <{root.tag}>, expected <annotation>")
    boxes = []
    for k, obj in enumerate(root.iter("object")):
        name = (obj.findtext("name") or "").strip()
        if name not in class_map:
            raise VocParseError(f"object {k}: unknown class name {name!r}")
        bb = obj.find("bndbox")
        if bb is None:
            raise VocParseError(f"object {k} ({name}): missing <bndbox>")
        try:
            coords = [float(bb.findtext(t)) for t in ("xmin", "ymin", "xmax", "ymax")]
        except (TypeError, ValueError) as e:
            raise VocParseError(f"object {k} ({name}): bad <bndbox> coordinates") from e
        difficult = (obj.findtext("difficult") or "0").strip() == "1"
        try:
            boxes.append(CornerBox(class_map[name], *coords, difficult=difficult))
        except ValueError as e:
            raise VocParseError(f"object {k} ({name}): {e}") from e
    return boxes


def save_dataset(path, ds: Dataset, extra_manifest: dict | None = None):
    """Write images (float32, lossless) and the JSON manifest into one ``.npz`` file."""
    manifest = ds.manifest()
    manifest["version"] = DATASET_VERSION
    if extra_manifest:
        manifest.update(extra_manifest)
    arrays = {f"img_{i:06d}": s.image for i, s in enumerate(ds.samples)}
    arrays["__manifest__"] = np.frombuffer(json.dumps(manifest, sort_keys=True).encode(), dtype=np.uint8)
    buf = io.BytesIO()
    np.savez(buf, **arrays)
    with open(path, "wb") as f:
        f.write(buf.getvalue())
    return manifest


def load_dataset(path) -> tuple[Dataset, dict]:
    try:
        z = np.load(path, allow_pickle=False)
        manifest = json.loads(z["__manifest__"].tobytes().decode())
    except (OSError, ValueError, KeyError) as e:
        raise DatasetError(f"{path}: unreadable dataset file ({e})") from e
    if manifest.get("version") != DATASET_VERSION:
        raise DatasetError(f"{path}: dataset version {manifest.get('version')!r} != {DATASET_VERSION}")
    samples = []
    with z:
        for rec in manifest["records"]:
            img = z[f"img_{rec['index']:06d}"]
            samples.append(AnnotatedImage(img, [box_from_list(b) for b in rec["boxes"]]))
    ds = Dataset(samples, manifest["classes"], manifest["split"], manifest.get("provenance", {}))
    return ds, manifest


def save_poisoned(path, ds: Dataset, poison_records: list[dict], spec_dict: dict):
    """Persist a poisoned split; ``poison_records`` holds one audit record per image."""
    return save_dataset(path, ds, {"poison": {"spec": spec_dict, "records": poison_records}})


def load_poisoned(path):
    ds, manifest = load_dataset(path)
    if "poison" not in manifest:
        raise DatasetError(f"{path}: not a poisoned dataset (no poison manifest)")
    return ds, manifest


def load_voc(root, classes: list[str], split="trainval", image_size=64, limit=None) -> Dataset:
    """Read a VOC-layout directory, resizing every image to ``image_size`` squared.

    Expects ``Annotations/``, ``JPEGImages/`` and ``ImageSets/Main/<split>.txt``.
    """
    from PIL import Image as PILImage

    class_map = {c: i for i, c in enumerate(classes)}
    ids_path = os.path.join(root, "ImageSets", "Main", f"{split}.txt")
    try:
        with open(ids_path) as f:
            ids = [ln.strip() for ln in f if ln.strip()]
    except OSError as e:
        raise DatasetError(f"cannot read image list {ids_path}: {e}") from e
    if limit is not None:
        ids = ids[:limit]
    samples = []
    for image_id in ids:
        xml_path = os.path.join(root, "Annotations", f"{image_id}.xml")
        with open(xml_path, "rb") as f:
            try:
                boxes = parse_voc(f.read(), class_map)
            except VocParseError as e:
                raise VocParseError(f"{xml_path}: {e}") from e
        with PILImage.open(os.path.join(root, "JPEGImages", f"{image_id}.jpg")) as im:
            im = im.convert("RGB")
            sx, sy = image_size / im.width, image_size / im.height
            im = im.resize((image_size, image_size), PILImage.BILINEAR)
            img = np.asarray(im, dtype=np.float32) / 255.0
        scaled = []
        for b in boxes:
            try:
                scaled.append(CornerBox(b.class_id, b.x_min * sx, b.y_min * sy, b.x_max * sx,
                                        b.y_max * sy, b.difficult))
            except ValueError:
                continue
        samples.append(AnnotatedImage(img, scaled))
    prov = {"source": "voc", "root": os.path.abspath(root), "split": split, "image_size": image_size}
    return Dataset(samples, list(classes), split, prov)
