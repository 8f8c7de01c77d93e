"""Synthetic long-tail segmentation data: an elliptical "organ" holding one or
two small "tumor" blobs, plus split / labeled-fraction bookkeeping and the
on-disk directory format (``images/<id>.png``, ``masks/<id>.png``,
``manifest.json``).
"""
import hashlib
import json
import math
import os
from dataclasses import dataclass, field

import numpy as np
from PIL import Image
from scipy import ndimage

from .errors import ConfigError, DataError

BACKGROUND, ORGAN, TUMOR = 0, 1, 2
CLASS_NAMES = {ORGAN: "organ", TUMOR: "tumor"}
DEFAULT_RATIOS = (0.8, 0.15, 0.05)
SPLITS = ("train", "val", "test")

ORGAN_AREA = (0.08, 0.40)
TUMOR_AREA = (0.002, 0.04)
NOISE_STD = 0.08

_PALETTE = [0, 0, 0, 255, 255, 0, 255, 0, 0] + [0] * (768 - 9)


@dataclass
class SampleRecord:
    image: np.ndarray  # float32 [1, H, W], multiples of 1/255
    label: np.ndarray  # uint8 [H, W] over {0, 1, 2}
    sample_id: str
    seed: int

    def content_hash(self):
        h = hashlib.sha256()
        h.update(self.sample_id.encode())
        h.update(image_to_uint8(self.image).tobytes())
        h.update(np.ascontiguousarray(self.label, dtype=np.uint8).tobytes())
        return h.hexdigest()


@dataclass
class DatasetManifest:
    ids: list
    split: dict  # id -> "train" | "val" | "test"
    labeled: dict  # id -> bool, train ids only
    seed: int
    height: int
    width: int
    sample_hashes: dict = field(default_factory=dict)

    @property
    def hash(self):
        payload = json.dumps(
            {
                "ids": self.ids,
                "split": [self.split.get(i) for i in self.ids],
                "labeled": [bool(self.labeled.get(i, False)) for i in self.ids],
                "seed": self.seed,
                "size": [self.height, self.width],
                "samples": [self.sample_hashes.get(i) for i in self.ids],
            },
            sort_keys=True,
        )
        return hashlib.sha256(payload.encode()).hexdigest()

    def ids_in(self, split):
        return [i for i in self.ids if self.split.get(i) == split]

    def labeled_ids(self):
        return [i for i in self.ids_in("train") if self.labeled.get(i, False)]

    def unlabeled_ids(self):
        return [i for i in self.ids_in("train") if not self.labeled.get(i, False)]

    def to_json(self):
        return {
            "ids": self.ids,
            "split": self.split,
            "labeled": self.labeled,
            "seed": self.seed,
            "height": self.height,
            "width": self.width,
            "sample_hashes": self.sample_hashes,
            "hash": self.hash,
        }

    @classmethod
    def from_json(cls, d):
        m = cls(
            ids=list(d["ids"]),
            split=dict(d["split"]),
            labeled={k: bool(v) for k, v in d["labeled"].items()},
            seed=int(d["seed"]),
            height=int(d["height"]),
            width=int(d["width"]),
            sample_hashes=dict(d.get("sample_hashes", {})),
        )
        if "hash" in d and d["hash"] != m.hash:
            raise DataError("manifest hash does not match its content")
        return m

    def copy(self, **changes):
        fields = dict(
            ids=list(self.ids), split=dict(self.split), labeled=dict(self.labeled), seed=self.seed,
            height=self.height, width=self.width, sample_hashes=dict(self.sample_hashes),
        )
        fields.update(changes)
        return DatasetManifest(**fields)


def image_to_uint8(image):
    return np.clip(np.rint(np.asarray(image)[0] * 255.0), 0, 255).astype(np.uint8)


def _ellipse(shape, cy, cx, ay, ax, theta):
    yy, xx = np.mgrid[: shape[0], : shape[1]].astype(np.float64)
    dy, dx = yy - cy, xx - cx
    c, s = math.cos(theta), math.sin(theta)
    u = c * dx + s * dy
    v = -s * dx + c * dy
    return (u / ax) ** 2 + (v / ay) ** 2 <= 1.0


def _organ(rng, h, w):
    for _ in range(100):
        frac = rng.uniform(*ORGAN_AREA)
        ratio = rng.uniform(0.75, 1.0)
        ax = math.sqrt(frac * h * w / (math.pi * ratio))
        ay = ax * ratio
        ext = max(ax, ay) + 1
        cy = rng.uniform(min(ext, h / 2), max(h - ext, h / 2))
        cx = rng.uniform(min(ext, w / 2), max(w - ext, w / 2))
        mask = _ellipse((h, w), cy, cx, ay, ax, rng.uniform(0, math.pi))
        if ORGAN_AREA[0] <= mask.mean() <= ORGAN_AREA[1]:
            return mask
    raise RuntimeError("could not place an organ")


def _tumors(rng, organ):
    h, w = organ.shape
    depth = ndimage.distance_transform_edt(organ)
    for _ in range(100):
        n_blobs = int(rng.integers(1, 3))
        # log-uniform total area keeps most tumors small
        total = math.exp(rng.uniform(math.log(TUMOR_AREA[0]), math.log(TUMOR_AREA[1])))
        tumor = np.zeros_like(organ)
        for part in rng.dirichlet(np.ones(n_blobs)) if n_blobs > 1 else [1.0]:
            area = max(part * total * h * w, 3.0)
            ratio = rng.uniform(0.6, 1.0)
            ax = math.sqrt(area / (math.pi * ratio))
            ay = ax * ratio
            room = np.argwhere(depth > max(ax, ay) + 1)
            if len(room) == 0:
                break
            cy, cx = room[rng.integers(len(room))]
            tumor |= _ellipse(organ.shape, cy, cx, ay, ax, rng.uniform(0, math.pi))
        tumor &= organ
        frac = tumor.mean()
        if tumor.any() and frac <= TUMOR_AREA[1] and tumor.sum() < organ.sum():
            return tumor
    raise RuntimeError("could not place a tumor")


def make_sample(h, w, seed, index):
    rng = np.random.default_rng([seed, index])
    organ = _organ(rng, h, w)
    tumor = _tumors(rng, organ)
    label = np.zeros((h, w), dtype=np.uint8)
    label[organ] = ORGAN
    label[tumor] = TUMOR

    bg = rng.uniform(0.05, 0.25)
    organ_level = bg + rng.uniform(0.3, 0.45)
    tumor_level = organ_level + rng.choice([-1.0, 1.0]) * rng.uniform(0.12, 0.25)
    img = np.full((h, w), bg)
    img[organ] = organ_level
    img[tumor] = tumor_level
    img = img + rng.normal(0.0, NOISE_STD, size=(h, w))
    img = image_to_uint8(img[None]).astype(np.float32) / 255.0
    return SampleRecord(image=img[None], label=label, sample_id=f"s{index:05d}", seed=seed)


def generate_dataset(n, h, w=None, seed=0):
    """Generate ``n`` samples, split 80/15/5 with every train sample labeled."""
    w = h if w is None else w
    if n < 20:
        raise ConfigError(f"need at least 20 samples, got {n}")
    if h < 32 or w < 32 or h != w:
        raise ConfigError(f"images must be square with side >= 32, got {h}x{w}")
    records = [make_sample(h, w, seed, i) for i in range(n)]
    manifest = DatasetManifest(
        ids=[r.sample_id for r in records], split={}, labeled={}, seed=seed, height=h, width=w,
        sample_hashes={r.sample_id: r.content_hash() for r in records},
    )
    return records, split_dataset(manifest, DEFAULT_RATIOS)


def _split_sizes(n, ratios):
    raw = [n * r for r in ratios]
    sizes = [int(math.floor(x)) for x in raw]
    # largest remainder
    order = sorted(range(len(ratios)), key=lambda k: raw[k] - sizes[k], reverse=True)
    for k in order[: n - sum(sizes)]:
        sizes[k] += 1
    return sizes


def split_dataset(manifest, ratios=DEFAULT_RATIOS, seed=None):
    """Seeded train/val/test partition; resets every train sample to labeled."""
    ratios = tuple(float(r) for r in ratios)
    if len(ratios) != 3 or any(r < 0 for r in ratios) or abs(sum(ratios) - 1.0) > 1e-9:
        raise ConfigError(f"split ratios must be three non-negative numbers summing to 1, got {ratios}")
    seed = manifest.seed if seed is None else seed
    rng = np.random.default_rng([seed, 0x5B1])
    order = [manifest.ids[k] for k in rng.permutation(len(manifest.ids))]
    sizes = _split_sizes(len(order), ratios)
    split, start = {}, 0
    for name, size in zip(SPLITS, sizes):
        for i in order[start : start + size]:
            split[i] = name
        start += size
    labeled = {i: True for i in manifest.ids if split[i] == "train"}
    return manifest.copy(split=split, labeled=labeled)


def mark_labeled_fraction(manifest, fraction, seed=None):
    """Keep labels on floor(fraction * |train|) train samples, chosen uniformly."""
    if not 0 < fraction <= 1:
        raise ConfigError(f"labeled fraction must lie in (0, 1], got {fraction}")
    seed = manifest.seed if seed is None else seed
    train = manifest.ids_in("train")
    k = int(math.floor(fraction * len(train) + 1e-9))
    rng = np.random.default_rng([seed, 0x1AB])
    chosen = {train[j] for j in rng.permutation(len(train))[:k]}
    return manifest.copy(labeled={i: i in chosen for i in train})


# -- directory format ---------------------------------------------------------

def save_dataset(path, records, manifest):
    os.makedirs(os.path.join(path, "images"), exist_ok=True)
    os.makedirs(os.path.join(path, "masks"), exist_ok=True)
    for r in records:
        Image.fromarray(image_to_uint8(r.image), mode="L").save(os.path.join(path, "images", f"{r.sample_id}.png"))
        m = Image.fromarray(np.ascontiguousarray(r.label, dtype=np.uint8), mode="P")
        m.putpalette(_PALETTE)
        m.save(os.path.join(path, "masks", f"{r.sample_id}.png"))
    save_manifest(path, manifest)


def save_manifest(path, manifest):
    with open(os.path.join(path, "manifest.json"), "w") as f:
        json.dump(manifest.to_json(), f, indent=1, sort_keys=True)


def load_dataset(path):
    """Load any directory laid out as images/, masks/ and manifest.json."""
    mpath = os.path.join(path, "manifest.json")
    if not os.path.isfile(mpath):
        raise DataError(f"no manifest.json under {path!r}")
    with open(mpath) as f:
        manifest = DatasetManifest.from_json(json.load(f))
    records = []
    for i in manifest.ids:
        try:
            img = np.array(Image.open(os.path.join(path, "images", f"{i}.png")).convert("L"))
            mask = np.array(Image.open(os.path.join(path, "masks", f"{i}.png")))
        except FileNotFoundError as e:
            raise DataError(f"missing file for sample {i}: {e.filename}") from None
        if mask.ndim != 2 or img.shape != mask.shape:
            raise DataError(f"sample {i}: image {img.shape} and mask {mask.shape} disagree")
        records.append(SampleRecord(
            image=(img.astype(np.float32) / 255.0)[None], label=mask.astype(np.uint8), sample_id=i, seed=manifest.seed,
        ))
    return records, manifest


class ArrayDataset:
    """Records stacked into arrays, addressable by sample id."""

    def __init__(self, records):
        self.ids = [r.sample_id for r in records]
        self.index = {i: k for k, i in enumerate(self.ids)}
        self.images = np.stack([r.image for r in records]).astype(np.float32)
        self.labels = np.stack([r.label for r in records]).astype(np.int64)

    def take(self, ids):
        rows = [self.index[i] for i in ids]
        return self.images[rows], self.labels[rows]

    def images_of(self, ids):
        return self.images[[self.index[i] for i in ids]]
