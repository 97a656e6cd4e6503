"""Dataset generation, netpbm image IO, and the split manifest.

The synthetic task is shapes on a colored background: each image gets
1..3 shapes (circle=1, square=2, triangle=3) over a random background
color, plus Gaussian pixel noise. Masks hold raw class indices.

Images are binary PPM (P6), masks binary PGM (P5), both maxval 255.
Files are written with a fixed quantization (floor(v * 255 + 0.5)) and
a canonical header so regenerating a dataset reproduces it byte for
byte. The manifest is a TSV with a `#classes: N` header and columns
index, image path, mask path, split (labeled / unlabeled / val).
Unlabeled masks exist on disk but loaders must never open them; the
loader here only touches masks for labeled and val rows.
"""

from __future__ import annotations

import os
from dataclasses import dataclass

import numpy as np

from .errors import DomainError, FormatError, InvalidShape

SPLITS = ("labeled", "unlabeled", "val")
NUM_CLASSES = 4  # background + circle + square + triangle


# ------------------------------------------------------------------ netpbm

def _quantize(v: np.ndarray) -> np.ndarray:
    return np.floor(np.clip(v, 0.0, 1.0) * 255.0 + 0.5).astype(np.uint8)


def write_ppm(path, image: np.ndarray) -> None:
    """image: (3, H, W) floats in [0, 1]."""
    image = np.asarray(image, dtype=np.float64)
    if image.ndim != 3 or image.shape[0] != 3:
        raise InvalidShape(f"expected (3, H, W), got {image.shape}")
    _, h, w = image.shape
    raw = _quantize(image).transpose(1, 2, 0).tobytes()
    with open(path, "wb") as fh:
        fh.write(f"P6\n{w} {h}\n255\n".encode("ascii") + raw)


def write_pgm(path, mask: np.ndarray) -> None:
    """mask: (H, W) ints in [0, 255], stored as raw bytes."""
    mask = np.asarray(mask)
    if mask.ndim != 2:
        raise InvalidShape(f"expected (H, W), got {mask.shape}")
    if mask.min() < 0 or mask.max() > 255:
        raise DomainError("mask values must fit a byte")
    h, w = mask.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n255\n".encode("ascii") + mask.astype(np.uint8).tobytes())


class _HeaderScanner:
    """Tokenizes a netpbm header: whitespace-separated fields, # comments."""

    def __init__(self, blob: bytes):
        self.blob = blob
        self.pos = 0

    def _skip_filler(self):
        while self.pos < len(self.blob):
            ch = self.blob[self.pos:self.pos + 1]
            if ch.isspace():
                self.pos += 1
            elif ch == b"#":
                while self.pos < len(self.blob) and self.blob[self.pos:self.pos + 1] != b"\n":
                    self.pos += 1
            else:
                return

    def token(self, what: str) -> bytes:
        self._skip_filler()
        start = self.pos
        while self.pos < len(self.blob):
            ch = self.blob[self.pos:self.pos + 1]
            if ch.isspace() or ch == b"#":
                break
            self.pos += 1
        if self.pos == start:
            raise FormatError(f"missing {what}", offset=start)
        return self.blob[start:self.pos]

    def int_token(self, what: str) -> int:
        start = self.pos
        tok = self.token(what)
        try:
            return int(tok)
        except ValueError:
            raise FormatError(f"{what} is not an integer: {tok!r}", offset=start)


def _read_netpbm(path, magic: bytes, channels: int):
    with open(path, "rb") as fh:
        blob = fh.read()
    sc = _HeaderScanner(blob)
    if sc.token("magic") != magic:
        raise FormatError(f"not a {magic.decode()} file", offset=0)
    w = sc.int_token("width")
    h = sc.int_token("height")
    maxval = sc.int_token("maxval")
    if w < 1 or h < 1:
        raise FormatError(f"bad dimensions {w}x{h}", offset=2)
    if not 1 <= maxval <= 255:
        raise FormatError(f"maxval {maxval} out of range", offset=sc.pos)
    # exactly one whitespace byte separates header from raster
    if sc.pos >= len(blob) or not blob[sc.pos:sc.pos + 1].isspace():
        raise FormatError("missing raster separator", offset=sc.pos)
    sc.pos += 1
    need = w * h * channels
    data = blob[sc.pos:]
    if len(data) < need:
        raise FormatError(
            f"raster truncated: need {need} bytes, have {len(data)}",
            offset=sc.pos + len(data),
        )
    if len(data) > need:
        raise FormatError("trailing bytes after raster", offset=sc.pos + need)
    arr = np.frombuffer(data, dtype=np.uint8)
    return arr, w, h, maxval


def read_ppm(path) -> np.ndarray:
    """Returns (3, H, W) floats in [0, 1] (bytes divided by maxval)."""
    arr, w, h, maxval = _read_netpbm(path, b"P6", 3)
    return arr.reshape(h, w, 3).transpose(2, 0, 1).astype(np.float64) / maxval


def read_pgm(path) -> np.ndarray:
    """Returns (H, W) uint8, raw values."""
    arr, w, h, _ = _read_netpbm(path, b"P5", 1)
    return arr.reshape(h, w).copy()


# ---------------------------------------------------------------- manifest

@dataclass
class ManifestRow:
    index: int
    image: str
    mask: str
    split: str


def write_manifest(path, rows: list[ManifestRow], num_classes: int) -> None:
    lines = [f"#classes: {num_classes}"]
    for r in rows:
        lines.append(f"{r.index}\t{r.image}\t{r.mask}\t{r.split}")
    with open(path, "w", newline="\n") as fh:
        fh.write("\n".join(lines) + "\n")


def read_manifest(path) -> tuple[list[ManifestRow], int]:
    with open(path, "r") as fh:
        lines = fh.read().splitlines()
    if not lines or not lines[0].startswith("#classes:"):
        raise FormatError("manifest must start with a '#classes: N' header")
    try:
        num_classes = int(lines[0].split(":", 1)[1].strip())
    except ValueError:
        raise FormatError(f"bad classes header: {lines[0]!r}")
    if num_classes < 2:
        raise FormatError(f"classes must be >= 2, got {num_classes}")
    rows = []
    seen = set()
    for ln, line in enumerate(lines[1:], start=2):
        if not line.strip():
            continue
        parts = line.split("\t")
        if len(parts) != 4:
            raise FormatError(f"line {ln}: expected 4 tab-separated fields, got {len(parts)}")
        try:
            idx = int(parts[0])
        except ValueError:
            raise FormatError(f"line {ln}: bad index {parts[0]!r}")
        if idx in seen:
            raise FormatError(f"line {ln}: duplicate index {idx}")
        seen.add(idx)
        if parts[3] not in SPLITS:
            raise FormatError(f"line {ln}: unknown split {parts[3]!r}")
        rows.append(ManifestRow(idx, parts[1], parts[2], parts[3]))
    return rows, num_classes


def split_manifest(n: int, labeled_fraction: float, val_count: int, seed: int) -> list[str]:
    """Assign one split name per index.

    val_count images go to val; of the rest, round(labeled_fraction *
    (n - val_count)) are labeled and the remainder unlabeled. Assignment
    follows a seeded permutation, so it is stable for a given seed.
    """
    if n < 2:
        raise DomainError(f"need at least 2 images, got {n}")
    if not 0.0 < labeled_fraction <= 1.0:
        raise DomainError(f"labeled_fraction must be in (0, 1], got {labeled_fraction}")
    if not 1 <= val_count < n:
        raise DomainError(f"val_count must be in [1, {n}), got {val_count}")
    n_lab = int(round(labeled_fraction * (n - val_count)))
    if n_lab < 1:
        raise DomainError(
            f"labeled_fraction {labeled_fraction} yields no labeled images for n={n}"
        )
    perm = np.random.default_rng((seed, 17)).permutation(n)
    out = ["unlabeled"] * n
    for i in perm[:val_count]:
        out[i] = "val"
    for i in perm[val_count:val_count + n_lab]:
        out[i] = "labeled"
    return out


# -------------------------------------------------------------- generation

def _shape_region(rng, cls, size, min_frac, max_frac) -> np.ndarray:
    """Boolean inside-mask for a randomly placed shape of class cls."""
    frac = rng.uniform(min_frac, max_frac)
    px = frac * size
    ys, xs = np.mgrid[0:size, 0:size]
    cy_pix = ys + 0.5
    cx_pix = xs + 0.5
    if cls == 1:  # circle
        r = max(px / 2.0, 1.0)
        cy = rng.uniform(r, size - r)
        cx = rng.uniform(r, size - r)
        return (cx_pix - cx) ** 2 + (cy_pix - cy) ** 2 <= r * r
    if cls == 2:  # square
        side = max(int(round(px)), 2)
        y0 = int(rng.integers(0, size - side + 1))
        x0 = int(rng.integers(0, size - side + 1))
        return (ys >= y0) & (ys < y0 + side) & (xs >= x0) & (xs < x0 + side)
    # triangle, apex up
    wdt = max(px, 3.0)
    hgt = max(px, 3.0)
    ax = rng.uniform(wdt / 2.0, size - wdt / 2.0)
    y0 = rng.uniform(0.0, size - hgt)
    rel = (cy_pix - y0) / hgt
    return (rel >= 0) & (rel <= 1) & (np.abs(cx_pix - ax) <= rel * wdt / 2.0)


def _draw_shape(rng, img, mask, cls, size, min_frac, max_frac, contrast, bg):
    """Paint one shape, avoiding pixels already claimed by earlier shapes.

    Placement is rejection-sampled so shapes do not overlap; after 20
    failed tries the shape is dropped (the image keeps fewer shapes
    rather than fragmented ones).
    """
    color = rng.random(3)
    while np.linalg.norm(color - bg) < contrast:
        color = rng.random(3)
    occupied = mask > 0
    for _ in range(20):
        inside = _shape_region(rng, cls, size, min_frac, max_frac)
        if not (inside & occupied).any():
            img[:, inside] = color[:, None]
            mask[inside] = cls
            return


def generate_shapes(out_dir, n_images: int, size: int = 32, seed: int = 0,
                    labeled_fraction: float = 0.1, val_count: int = 128,
                    noise_std: float = 0.08, min_frac: float = 0.3,
                    max_frac: float = 0.7, contrast: float = 0.35) -> list[ManifestRow]:
    """Write a full dataset (images, masks, manifest.tsv) under out_dir.

    Deterministic in all arguments: per-image rng streams are keyed
    (seed, index), so the dataset is identical across reruns and does
    not depend on generation order.
    """
    if size < 8 or size % 4:
        raise DomainError(f"size must be >= 8 and divisible by 4, got {size}")
    if n_images < 2:
        raise DomainError(f"n_images must be >= 2, got {n_images}")
    os.makedirs(os.path.join(out_dir, "images"), exist_ok=True)
    os.makedirs(os.path.join(out_dir, "masks"), exist_ok=True)
    splits = split_manifest(n_images, labeled_fraction, val_count, seed)
    width = len(str(n_images - 1))
    rows = []
    for i in range(n_images):
        rng = np.random.default_rng((seed, i))
        bg = rng.random(3)
        img = np.empty((3, size, size))
        img[:] = bg[:, None, None]
        mask = np.zeros((size, size), dtype=np.uint8)
        for _ in range(int(rng.integers(1, 4))):
            cls = int(rng.integers(1, NUM_CLASSES))
            _draw_shape(rng, img, mask, cls, size, min_frac, max_frac, contrast, bg)
        img = np.clip(img + rng.normal(0.0, noise_std, img.shape), 0.0, 1.0)
        name = str(i).zfill(width)
        image_rel = f"images/{name}.ppm"
        mask_rel = f"masks/{name}.pgm"
        write_ppm(os.path.join(out_dir, image_rel), img)
        write_pgm(os.path.join(out_dir, mask_rel), mask)
        rows.append(ManifestRow(i, image_rel, mask_rel, splits[i]))
    write_manifest(os.path.join(out_dir, "manifest.tsv"), rows, NUM_CLASSES)
    return rows


# ----------------------------------------------------------------- loading

@dataclass
class Sample:
    index: int
    image: np.ndarray            # (3, H, W) float64
    mask: np.ndarray | None      # (H, W) uint8, None for unlabeled rows


def load_split(root, rows: list[ManifestRow], split: str) -> list[Sample]:
    """Load all samples of one split into memory.

    Masks are read only for labeled and val rows; unlabeled masks are
    quarantined and never opened.
    """
    if split not in SPLITS:
        raise DomainError(f"unknown split {split!r}")
    out = []
    for r in rows:
        if r.split != split:
            continue
        img = read_ppm(os.path.join(root, r.image))
        mask = None
        if split != "unlabeled":
            mask = read_pgm(os.path.join(root, r.mask))
        out.append(Sample(r.index, img, mask))
    return out
