"""Synthetic denoising benchmark.

Ground-truth labels are corrupted by a nearest-neighbour downsample, random
class flips in the low-resolution grid and a nearest-neighbour upsample. The
corrupted labels become confident unary logits which the CRF has to clean up.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
from PIL import Image

from .errors import ConfigurationError, DataError, InvalidArgumentError
from .tensor import make_rng, read_ctf, write_ctf

IGNORE_INDEX = 255

# Standard PASCAL VOC label colour palette, index -> RGB.
VOC_PALETTE = np.array(
    [
        [0, 0, 0], [128, 0, 0], [0, 128, 0], [128, 128, 0], [0, 0, 128],
        [128, 0, 128], [0, 128, 128], [128, 128, 128], [64, 0, 0], [192, 0, 0],
        [64, 128, 0], [192, 128, 0], [64, 0, 128], [192, 0, 128], [64, 128, 128],
        [192, 128, 128], [0, 64, 0], [128, 64, 0], [0, 192, 0], [128, 192, 0],
        [0, 64, 128],
    ],
    dtype=np.uint8,
)  # fmt: skip


@dataclass
class NoiseConfig:
    down_factor: int = 8
    flip_prob: float = 0.1
    num_classes: int = 21
    seed: int = 0

    def __post_init__(self):
        if self.down_factor < 1:
            raise ConfigurationError(f"down_factor must be >= 1, got {self.down_factor}")
        if not 0.0 <= self.flip_prob <= 1.0:
            raise ConfigurationError(f"flip_prob must lie in [0, 1], got {self.flip_prob}")
        if self.num_classes < 2 and self.flip_prob > 0:
            raise ConfigurationError("flipping labels needs at least two classes")


def _check_labels(labels, num_classes):
    labels = np.asarray(labels)
    if labels.ndim != 3:
        raise DataError(f"label maps are (bs, h, w), got shape {labels.shape}")
    bad = (labels != IGNORE_INDEX) & ((labels < 0) | (labels >= num_classes))
    if np.any(bad):
        raise DataError(f"labels outside [0, {num_classes}) found: {np.unique(labels[bad])[:5]}")
    return labels.astype(np.int64)


def corrupt_labels(gt, nc, rng=None):
    """Blocky, randomly flipped copy of ``gt``; ignore pixels are preserved.

    Each low-resolution cell takes the label of its top-left pixel and, with
    probability ``flip_prob``, is replaced by a uniformly drawn *different*
    class. Returns the corrupted map; pass ``rng`` to continue a stream.
    """
    if nc.num_classes < 2 and nc.flip_prob > 0:
        raise ConfigurationError("flipping labels needs at least two classes")
    gt = _check_labels(gt, nc.num_classes)
    f = nc.down_factor
    bs, h, w = gt.shape
    if h < f or w < f:
        raise InvalidArgumentError(f"label map {h}x{w} is smaller than down_factor {f}")
    rng = make_rng(nc.seed) if rng is None else rng
    low = gt[:, ::f, ::f].copy()
    flip = rng.random(low.shape) < nc.flip_prob
    shift = rng.integers(1, max(nc.num_classes, 2), size=low.shape)
    flip &= low != IGNORE_INDEX
    low[flip] = (low[flip] + shift[flip]) % nc.num_classes
    out = np.repeat(np.repeat(low, f, axis=1), f, axis=2)[:, :h, :w]
    # blocks sampled from an ignore pixel carry no label; keep the clean one
    out = np.where(out == IGNORE_INDEX, gt, out)
    out[gt == IGNORE_INDEX] = IGNORE_INDEX
    return out


def labels_to_unary(labels, confidence, num_classes):
    """Logits whose softmax puts ``confidence`` on the label, the rest spread evenly.

    Ignore pixels receive uniform (all-zero) logits.
    """
    if not 0.5 < confidence < 1.0:
        raise InvalidArgumentError(f"confidence must lie in (0.5, 1), got {confidence}")
    labels = _check_labels(labels, num_classes)
    bs, h, w = labels.shape
    on = np.log(confidence)
    off = np.log((1.0 - confidence) / (num_classes - 1))
    logits = np.full((bs, num_classes, h, w), off, dtype=np.float64)
    valid = labels != IGNORE_INDEX
    b, x, y = np.nonzero(valid)
    logits[b, labels[valid], x, y] = on
    logits = np.where(valid[:, None], logits, 0.0)
    return logits.astype(np.float32)


# ---------------------------------------------------------------------------
# toy scenes


def _class_colors(num_classes, rng):
    # Well separated base colours, fixed per dataset seed.
    colors = rng.integers(20, 236, size=(num_classes, 3)).astype(np.float64)
    for _ in range(200):
        d = np.linalg.norm(colors[:, None] - colors[None], axis=-1) + np.eye(num_classes) * 1e9
        if d.min() > 60:
            break
        i = np.unravel_index(np.argmin(d), d.shape)[0]
        colors[i] = rng.integers(20, 236, size=3)
    return colors


def make_toy_dataset(n, h, w, c, seed, noise_std=12.0):
    """``n`` scenes of coloured rectangles/ellipses on a background.

    Returns a list of ``(image (1, 3, h, w) float32 in 0..255, labels (1, h, w) int64)``.
    Class 0 is the background; each class has its own base colour plus
    per-pixel Gaussian noise, so colour is informative but not perfect. Images
    hold integer values so they survive an 8-bit PNG round trip.
    """
    if c < 2:
        raise InvalidArgumentError("toy scenes need at least two classes")
    colors = _class_colors(c, make_rng(seed))
    xs, ys = np.meshgrid(np.arange(h), np.arange(w), indexing="ij")
    samples = []
    for i in range(n):
        rng = make_rng(seed + 1 + i)
        labels = np.zeros((h, w), dtype=np.int64)
        n_shapes = int(rng.integers(2, 5))
        for _ in range(n_shapes):
            cls = int(rng.integers(1, c))
            sh, sw = rng.integers(max(h // 5, 2), max(h // 2, 3)), rng.integers(max(w // 5, 2), max(w // 2, 3))
            cx, cy = rng.integers(0, h), rng.integers(0, w)
            if rng.random() < 0.5:
                mask = (np.abs(xs - cx) <= sh / 2) & (np.abs(ys - cy) <= sw / 2)
            else:
                mask = ((xs - cx) / (sh / 2)) ** 2 + ((ys - cy) / (sw / 2)) ** 2 <= 1.0
            labels[mask] = cls
        if np.all(labels == labels.flat[0]):
            labels[: max(h // 4, 1), : max(w // 4, 1)] = 1 if labels.flat[0] == 0 else 0
        image = colors[labels] + rng.normal(0.0, noise_std, size=(h, w, 3))
        image = np.clip(np.rint(image), 0, 255).transpose(2, 0, 1)[None].astype(np.float32)
        samples.append((image, labels[None]))
    return samples


# ---------------------------------------------------------------------------
# dataset directory layout


def write_label_png(path, labels):
    labels = np.asarray(labels)
    if labels.ndim == 3:
        labels = labels[0]
    Image.fromarray(labels.astype(np.uint8), mode="L").save(path)


def read_label_png(path):
    return np.asarray(Image.open(path), dtype=np.int64)[None]


def write_image_png(path, image):
    image = np.asarray(image)
    if image.ndim == 4:
        image = image[0]
    Image.fromarray(np.clip(np.rint(image), 0, 255).astype(np.uint8).transpose(1, 2, 0), mode="RGB").save(path)


def read_image_png(path):
    return np.asarray(Image.open(path).convert("RGB"), dtype=np.float32).transpose(2, 0, 1)[None].copy()


def synthesize_dataset(out_dir, n, h, w, nc, confidence=0.9, seed=None):
    """Write toy scenes, clean labels and noisy unaries; manifest is written last.

    Returns the manifest dictionary, which records the measured flip rate in
    the low-resolution grid next to the configured one.
    """
    out = Path(out_dir)
    for sub in ("images", "labels", "unary"):
        (out / sub).mkdir(parents=True, exist_ok=True)
    seed = nc.seed if seed is None else seed
    samples = make_toy_dataset(n, h, w, nc.num_classes, seed)
    flipped = cells = 0
    for i, (image, labels) in enumerate(samples):
        noisy = corrupt_labels(labels, nc, rng=make_rng(seed * 1_000_003 + i))
        f = nc.down_factor
        flipped += int(np.sum(noisy[:, ::f, ::f] != labels[:, ::f, ::f]))
        cells += labels[:, ::f, ::f].size
        stem = f"{i:04d}"
        write_image_png(out / "images" / f"{stem}.png", image)
        write_label_png(out / "labels" / f"{stem}.png", labels)
        write_ctf(out / "unary" / f"{stem}.ctf", labels_to_unary(noisy, confidence, nc.num_classes))
    manifest = {
        "count": n,
        "num_classes": nc.num_classes,
        "height": h,
        "width": w,
        "seed": seed,
        "confidence": confidence,
        "noise": asdict(nc),
        "measured_flip_rate": flipped / max(cells, 1),
    }
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True))
    return manifest


def load_dataset(directory):
    """Return ``(manifest, [(stem, image, labels, unary), ...])``.

    ``labels`` is None when the ``labels/`` file for a sample is absent.
    """
    directory = Path(directory)
    manifest_path = directory / "manifest.json"
    if not manifest_path.exists():
        raise DataError(f"{directory}: missing manifest.json (incomplete or not a dataset)")
    manifest = json.loads(manifest_path.read_text())
    items = []
    for unary_path in sorted((directory / "unary").glob("*.ctf")):
        stem = unary_path.stem
        image = read_image_png(directory / "images" / f"{stem}.png")
        label_path = directory / "labels" / f"{stem}.png"
        labels = read_label_png(label_path) if label_path.exists() else None
        items.append((stem, image, labels, read_ctf(unary_path)))
    return manifest, items


def load_voc_split(root, split="val", limit=None):
    """Yield ``(stem, image, labels)`` from a VOC2012-style directory.

    Expects ``ImageSets/Segmentation/<split>.txt``, ``JPEGImages/`` and
    palette-indexed ``SegmentationClass/`` PNGs (border pixels are 255).
    """
    root = Path(root)
    listing = root / "ImageSets" / "Segmentation" / f"{split}.txt"
    if not listing.exists():
        raise DataError(f"{root}: missing {listing.relative_to(root)}")
    stems = [s for s in listing.read_text().split() if s]
    for stem in stems[:limit]:
        image = read_image_png(root / "JPEGImages" / f"{stem}.jpg")
        labels = np.asarray(Image.open(root / "SegmentationClass" / f"{stem}.png"), dtype=np.int64)
        if labels.ndim != 2:
            raise DataError(f"{stem}: expected a palette-indexed label PNG")
        yield stem, image, labels[None]
