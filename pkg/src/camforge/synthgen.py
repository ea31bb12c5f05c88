"""Synthetic lesion images with exact ground truth.

Every random draw comes from a generator keyed by (seed, index, field tag),
so a sample depends only on its own index and samples can be produced in
any order.
"""

import hashlib
import json
import math
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from . import tensor as T
from .io import atomic_write_text, dump_json
from .metrics import GroundTruth

FORMAT_VERSION = 1

_TAG_BACKGROUND = 1
_TAG_LESIONS = 2
_TAG_NOISE = 3

# per-channel gain of the lesion signal (reddish-yellow spots)
LESION_TINT = (1.0, 0.75, 0.45)
BACKGROUND_LEVEL = (0.05, 0.0, -0.05)


@dataclass(frozen=True)
class SynthSpec:
    height: int = 64
    width: int = 64
    channels: int = 3
    lesions_min: int = 1
    lesions_max: int = 3
    radius_min: float = 4.0
    radius_max: float = 7.0
    lesion_amplitude: tuple = (0.45, 0.65)
    texture_amplitude: float = 0.06
    noise_sigma: float = 0.04
    balance: float = 0.5
    seed: int = 0
    stride: int = 4

    def __post_init__(self):
        if self.channels != 3:
            raise ValueError("synthetic images have 3 channels")
        if self.height % self.stride or self.width % self.stride:
            raise ValueError(f"image dims must be divisible by the feature stride {self.stride}")
        if not 0 < self.radius_min <= self.radius_max < min(self.height, self.width) / 4:
            raise ValueError("lesion radius must satisfy 0 < r_min <= r_max < min(h, w) / 4")
        if not 1 <= self.lesions_min <= self.lesions_max:
            raise ValueError("need 1 <= lesions_min <= lesions_max")
        if not 0.0 <= self.balance <= 1.0:
            raise ValueError("balance must lie in [0, 1]")
        lo, hi = self.lesion_amplitude
        if not 0 < lo <= hi:
            raise ValueError("lesion amplitude range must be positive")

    def to_dict(self):
        d = asdict(self)
        d["lesion_amplitude"] = list(self.lesion_amplitude)
        return d

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        d["lesion_amplitude"] = tuple(d["lesion_amplitude"])
        return cls(**d)


@dataclass
class Sample:
    index: int
    image: np.ndarray  # (1, 3, H, W) float32
    label: int
    gt: GroundTruth


def _rng(spec, index, tag):
    return np.random.Generator(np.random.Philox(np.random.SeedSequence([spec.seed, index, tag])))


def label_for(spec, index):
    """Exact-balance label assignment: positives in any prefix of n equal floor(n * balance)."""
    return int(math.floor((index + 1) * spec.balance) - math.floor(index * spec.balance))


def _background(spec, rng):
    h, w = spec.height, spec.width
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    tex = np.zeros((h, w))
    for _ in range(3):
        fy, fx = rng.uniform(0.5, 2.5, size=2)
        phase = rng.uniform(0, 2 * np.pi, size=2)
        tex += np.sin(2 * np.pi * fy * yy / h + phase[0]) * np.cos(2 * np.pi * fx * xx / w + phase[1])
    tex *= spec.texture_amplitude / 3
    return np.stack([lvl + tex * (1 - 0.2 * i) for i, lvl in enumerate(BACKGROUND_LEVEL)])


def _blob(spec, cy, cx, r):
    """Cosine-tapered disk: flat core, smooth falloff to zero at radius r."""
    yy, xx = np.mgrid[0:spec.height, 0:spec.width].astype(np.float64)
    d = np.hypot(yy + 0.5 - cy, xx + 0.5 - cx)
    core = 0.5 * r
    profile = np.where(d <= core, 1.0, 0.5 * (1 + np.cos(np.pi * (d - core) / (r - core))))
    return np.where(d < r, profile, 0.0)


def generate_sample(spec, index):
    label = label_for(spec, index)
    image = _background(spec, _rng(spec, index, _TAG_BACKGROUND))
    mask = np.zeros((spec.height, spec.width), dtype=np.uint8)
    boxes = []
    if label == 1:
        rng = _rng(spec, index, _TAG_LESIONS)
        count = int(rng.integers(spec.lesions_min, spec.lesions_max + 1))
        min_area = math.pi * spec.radius_min ** 2
        for _ in range(count):
            r = float(rng.uniform(spec.radius_min, spec.radius_max))
            amp = float(rng.uniform(*spec.lesion_amplitude))
            # small discrete disks can fall short of pi * r_min^2 pixels; move the centre until not
            while True:
                cy = float(rng.uniform(r, spec.height - r))
                cx = float(rng.uniform(r, spec.width - r))
                blob = _blob(spec, cy, cx, r)
                support = blob > 0
                if support.sum() >= min_area:
                    break
            image = image + amp * blob[None] * np.asarray(LESION_TINT)[:, None, None]
            mask |= support.astype(np.uint8)
            rows = np.flatnonzero(support.any(axis=1))
            cols = np.flatnonzero(support.any(axis=0))
            boxes.append((int(rows[0]), int(cols[0]), int(rows[-1]) + 1, int(cols[-1]) + 1))
    noise = _rng(spec, index, _TAG_NOISE).normal(0.0, spec.noise_sigma, size=image.shape)
    image = (image + noise).astype(T.DTYPE)[None]
    return Sample(index, image, label, GroundTruth(mask, tuple(boxes)))


def split_assignment(spec, n):
    """70/15/15 train/val/test split, ordered by a hash of (seed, index)."""
    def key(i):
        return hashlib.sha256(f"{spec.seed}:{i}".encode()).hexdigest()

    order = sorted(range(n), key=key)
    n_train = round(0.70 * n)
    n_val = round(0.15 * n)
    split = [None] * n
    for rank, i in enumerate(order):
        split[i] = "train" if rank < n_train else "val" if rank < n_train + n_val else "test"
    return split


def _name(index):
    return f"{index:05d}"


def generate_corpus(spec, n, out_dir):
    """Write ``n`` samples plus ``manifest.json`` under ``out_dir``; return the manifest."""
    if n < 2:
        raise ValueError(f"corpus needs at least 2 samples, got {n}")
    out = Path(out_dir)
    split = split_assignment(spec, n)
    entries = []
    for i in range(n):
        s = generate_sample(spec, i)
        stem = _name(i)
        T.write_t4f(out / "images" / f"{stem}.t4f", s.image)
        T.write_t4f(out / "masks" / f"{stem}.t4f", s.gt.mask[None, None].astype(T.DTYPE))
        atomic_write_text(out / "boxes" / f"{stem}.json",
                          dump_json({"boxes": [list(b) for b in s.gt.boxes]}))
        entries.append({
            "index": i,
            "label": s.label,
            "split": split[i],
            "image": f"images/{stem}.t4f",
            "mask": f"masks/{stem}.t4f",
            "boxes": f"boxes/{stem}.json",
        })
    manifest = {"format_version": FORMAT_VERSION, "spec": spec.to_dict(), "n": n, "samples": entries}
    atomic_write_text(out / "manifest.json", dump_json(manifest))
    return manifest


class Corpus:
    """Read access to a corpus directory written by ``generate_corpus``."""

    def __init__(self, root):
        self.root = Path(root)
        self.manifest = json.loads((self.root / "manifest.json").read_text())
        if self.manifest.get("format_version") != FORMAT_VERSION:
            raise ValueError(f"unsupported corpus format {self.manifest.get('format_version')}")
        self.spec = SynthSpec.from_dict(self.manifest["spec"])
        self.samples = self.manifest["samples"]

    def indices(self, split=None):
        if split in (None, "all"):
            return [s["index"] for s in self.samples]
        return [s["index"] for s in self.samples if s["split"] == split]

    def label(self, index):
        return self.samples[index]["label"]

    def image(self, index):
        return T.read_t4f(self.root / self.samples[index]["image"])

    def ground_truth(self, index):
        entry = self.samples[index]
        mask = T.read_t4f(self.root / entry["mask"])[0, 0].astype(np.uint8)
        boxes = json.loads((self.root / entry["boxes"]).read_text())["boxes"]
        return GroundTruth(mask, tuple(tuple(b) for b in boxes))

    def arrays(self, split=None):
        idx = self.indices(split)
        images = np.concatenate([self.image(i) for i in idx])
        labels = np.array([self.label(i) for i in idx], dtype=np.intp)
        return images, labels

    def channel_means(self, split="train"):
        images, _ = self.arrays(split)
        return images.mean(axis=(0, 2, 3), dtype=np.float64).astype(T.DTYPE)
