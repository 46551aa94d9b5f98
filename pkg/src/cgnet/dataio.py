"""Netpbm I/O, dataset manifests and the synthetic shapes dataset."""

import os
from dataclasses import dataclass, field

import numpy as np

from .errors import FormatError
from .tensor import Pcg32

IGNORE = 255

# Background is class 0; shape classes take the following colours.
PALETTE = np.array([
    (110, 110, 110),
    (225, 45, 45),
    (45, 200, 60),
    (50, 70, 230),
    (230, 220, 40),
    (215, 50, 215),
    (40, 215, 225),
    (245, 150, 30),
], dtype=np.float64)


def _read_header(data, magic, path):
    """Parse ``magic width height maxval`` and return ``(w, h, maxval, offset)``."""
    if data[:2] != magic:
        found = data[:2].decode("latin-1")
        if found in ("P1", "P2", "P3", "P4", "P5", "P6") and found != magic.decode():
            kind = "ASCII " if found in ("P1", "P2", "P3") else ""
            raise FormatError(f"{path}: unsupported {kind}netpbm format {found} at offset 0 (need {magic.decode()})")
        raise FormatError(f"{path}: bad magic {data[:2]!r} at offset 0 (need {magic.decode()})")
    pos = 2
    values = []
    while len(values) < 3:
        while pos < len(data) and data[pos:pos + 1].isspace():
            pos += 1
        if pos < len(data) and data[pos:pos + 1] == b"#":
            while pos < len(data) and data[pos:pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < len(data) and data[pos:pos + 1].isdigit():
            pos += 1
        if start == pos:
            raise FormatError(f"{path}: expected a header integer at offset {start}")
        values.append(int(data[start:pos]))
    if pos >= len(data) or not data[pos:pos + 1].isspace():
        raise FormatError(f"{path}: missing whitespace after header at offset {pos}")
    w, h, maxval = values
    if w < 1 or h < 1:
        raise FormatError(f"{path}: empty image {w}x{h}")
    if maxval != 255:
        raise FormatError(f"{path}: maxval {maxval} unsupported (need 255)")
    return w, h, maxval, pos + 1


def _payload(data, offset, n, path):
    if len(data) - offset < n:
        raise FormatError(f"{path}: truncated payload at offset {len(data)}: "
                          f"need {n} bytes from offset {offset}")
    if len(data) - offset > n:
        raise FormatError(f"{path}: {len(data) - offset - n} trailing bytes at offset {offset + n}")
    return np.frombuffer(data, dtype=np.uint8, count=n, offset=offset)


def read_ppm(path):
    """Binary P6 -> float32 [3,H,W]."""
    with open(path, "rb") as f:
        data = f.read()
    w, h, _, off = _read_header(data, b"P6", path)
    px = _payload(data, off, 3 * w * h, path)
    return px.reshape(h, w, 3).transpose(2, 0, 1).astype(np.float32)


def write_ppm(path, image):
    image = np.asarray(image)
    if image.ndim != 3 or image.shape[0] != 3:
        raise ValueError(f"expected [3,H,W], got {image.shape}")
    px = np.clip(np.rint(image), 0, 255).astype(np.uint8).transpose(1, 2, 0)
    _, h, w = image.shape
    with open(path, "wb") as f:
        f.write(f"P6\n{w} {h}\n255\n".encode())
        f.write(np.ascontiguousarray(px).tobytes())


def read_pgm(path):
    """Binary P5 -> int32 [H,W] label map (255 = ignore)."""
    with open(path, "rb") as f:
        data = f.read()
    w, h, _, off = _read_header(data, b"P5", path)
    return _payload(data, off, w * h, path).reshape(h, w).astype(np.int32)


def write_pgm(path, labels):
    labels = np.asarray(labels)
    if labels.ndim != 2:
        raise ValueError(f"expected [H,W], got {labels.shape}")
    if labels.min() < 0 or labels.max() > 255:
        raise ValueError("label values must lie in 0..255")
    h, w = labels.shape
    with open(path, "wb") as f:
        f.write(f"P5\n{w} {h}\n255\n".encode())
        f.write(labels.astype(np.uint8).tobytes())


@dataclass
class Sample:
    image: np.ndarray
    labels: np.ndarray
    name: str = ""

    def __post_init__(self):
        if self.image.shape[1:] != self.labels.shape:
            raise ValueError(f"image {self.image.shape} and labels {self.labels.shape} differ in size")


@dataclass
class Manifest:
    pairs: list
    num_classes: int
    categories: dict = field(default=None)

    def load(self, validate=True):
        out = []
        for img_path, lab_path in self.pairs:
            s = Sample(read_ppm(img_path), read_pgm(lab_path), os.path.basename(img_path))
            if validate:
                bad = (s.labels != IGNORE) & (s.labels >= self.num_classes)
                if bad.any():
                    raise FormatError(f"{lab_path}: label {int(s.labels[bad][0])} >= {self.num_classes} classes")
            out.append(s)
        return out


def read_manifest(path, categories_path=None):
    """Parse ``classes=K`` then ``image<TAB>label`` lines; paths resolve relative to the manifest."""
    base = os.path.dirname(os.path.abspath(path))
    k = None
    pairs = []
    with open(path, encoding="utf-8") as f:
        for lineno, raw in enumerate(f, start=1):
            line = raw.strip()
            if not line or line.startswith("#"):
                continue
            if k is None:
                if not line.startswith("classes="):
                    raise FormatError(f"{path}:{lineno}: expected 'classes=K' header")
                k = int(line.split("=", 1)[1])
                continue
            parts = line.split("\t")
            if len(parts) != 2:
                raise FormatError(f"{path}:{lineno}: expected 'image<TAB>label'")
            img, lab = (p if os.path.isabs(p) else os.path.join(base, p) for p in parts)
            for p in (img, lab):
                if not os.path.exists(p):
                    raise FormatError(f"{path}:{lineno}: missing file {p}")
            pairs.append((img, lab))
    if k is None:
        raise FormatError(f"{path}: no 'classes=K' header")
    if k < 2:
        raise FormatError(f"{path}: need at least 2 classes, got {k}")
    cats = read_category_map(categories_path) if categories_path else None
    return Manifest(pairs, k, cats)


def write_manifest(path, pairs, num_classes):
    base = os.path.dirname(os.path.abspath(path))
    with open(path, "w", encoding="utf-8") as f:
        f.write(f"classes={num_classes}\n")
        for img, lab in pairs:
            f.write(f"{os.path.relpath(img, base)}\t{os.path.relpath(lab, base)}\n")


def read_category_map(path):
    out = {}
    with open(path, encoding="utf-8") as f:
        for lineno, raw in enumerate(f, start=1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            try:
                cls, cat = (int(v) for v in line.split())
            except ValueError:
                raise FormatError(f"{path}:{lineno}: expected 'class_id category_id'") from None
            out[cls] = cat
    return out


def compute_means(manifest):
    """Per-channel pixel mean over the whole manifest, one pass, float64 sums."""
    if not manifest.pairs:
        raise ValueError("cannot compute means of an empty manifest")
    total = np.zeros(3)
    count = 0
    for img_path, _ in manifest.pairs:
        img = read_ppm(img_path)
        total += img.sum(axis=(1, 2), dtype=np.float64)
        count += img.shape[1] * img.shape[2]
    return total / count


def _shape_mask(kind, size, rng):
    """Mask and bounding box (y0, x0, y1, x1) for one rectangle or disc."""
    if kind == "rect":
        h = rng.randint(size // 4, size // 2 + 1)
        w = rng.randint(size // 4, size // 2 + 1)
        y0 = rng.randint(0, size - h + 1)
        x0 = rng.randint(0, size - w + 1)
        mask = np.zeros((size, size), dtype=bool)
        mask[y0:y0 + h, x0:x0 + w] = True
        return mask, (y0, x0, y0 + h, x0 + w)
    r = rng.randint(size // 8, size // 4 + 1)
    cy = rng.randint(r, size - r)
    cx = rng.randint(r, size - r)
    yy, xx = np.mgrid[0:size, 0:size]
    mask = (yy - cy) ** 2 + (xx - cx) ** 2 <= r * r
    return mask, (cy - r, cx - r, cy + r + 1, cx + r + 1)


def _boxes_clear(a, b, gap=2):
    return a[2] + gap <= b[0] or b[2] + gap <= a[0] or a[3] + gap <= b[1] or b[3] + gap <= a[1]


def _outline(mask):
    inner = mask.copy()
    inner[1:, :] &= mask[:-1, :]
    inner[:-1, :] &= mask[1:, :]
    inner[:, 1:] &= mask[:, :-1]
    inner[:, :-1] &= mask[:, 1:]
    return mask & ~inner


def synth_sample(seed, index, size, num_classes):
    """One synthetic (image, labels) pair; image as uint8 [3,H,W]."""
    for attempt in range(256):
        rng = Pcg32(seed, (index << 8) | attempt)
        n_shapes = rng.randint(2, 6)
        placed = []
        for _ in range(n_shapes):
            for _try in range(100):
                kind = "rect" if rng.uniform() < 0.5 else "disc"
                mask, box = _shape_mask(kind, size, rng)
                if all(_boxes_clear(box, other[1]) for other in placed):
                    placed.append((mask, box, rng.randint(1, num_classes)))
                    break
            else:
                break
        else:
            return _render(rng, size, placed)
    raise RuntimeError(f"could not place shapes for image {index}")


def _render(rng, size, placed):
    yy, xx = np.mgrid[0:size, 0:size]
    phase = rng.uniform() * 2 * np.pi
    period = 6 + 6 * rng.uniform()
    texture = 12.0 * np.sin(2 * np.pi * (yy + xx) / period + phase)
    base = np.empty((3, size, size))
    labels = np.zeros((size, size), dtype=np.int32)
    base[:] = PALETTE[0][:, None, None] + texture
    for mask, _, cls in placed:
        base[:, mask] = PALETTE[cls][:, None]
        labels[mask] = cls
    for mask, _, _ in placed:
        labels[_outline(mask)] = IGNORE
    noise = rng.u32(3 * size * size).astype(np.float64) / 4294967296.0
    image = base + (noise.reshape(3, size, size) * 40.0 - 20.0)
    return np.clip(np.rint(image), 0, 255).astype(np.uint8), labels


def gen_synthetic(out_dir, seed, count, size, num_classes):
    """Write ``count`` PPM/PGM pairs plus ``manifest.txt``; returns the manifest path."""
    if not 3 <= num_classes <= len(PALETTE):
        raise ValueError(f"synthetic data supports 3..{len(PALETTE)} classes, got {num_classes}")
    if size < 8 or size % 8:
        raise ValueError(f"size must be a positive multiple of 8, got {size}")
    if count < 1:
        raise ValueError(f"count must be >= 1, got {count}")
    os.makedirs(os.path.join(out_dir, "images"), exist_ok=True)
    os.makedirs(os.path.join(out_dir, "labels"), exist_ok=True)
    pairs = []
    for i in range(count):
        image, labels = synth_sample(seed, i, size, num_classes)
        img_path = os.path.join(out_dir, "images", f"{i:05d}.ppm")
        lab_path = os.path.join(out_dir, "labels", f"{i:05d}.pgm")
        write_ppm(img_path, image)
        write_pgm(lab_path, labels)
        pairs.append((img_path, lab_path))
    manifest = os.path.join(out_dir, "manifest.txt")
    write_manifest(manifest, pairs, num_classes)
    return manifest
