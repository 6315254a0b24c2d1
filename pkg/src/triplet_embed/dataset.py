"""Image ingestion, standardization, split construction and synthetic data.

Images are grayscale with intensities in [0, 1]. Binary PGM (``P5``) is the
on-disk format; a corpus is a directory with one subdirectory per class.

Splits are drawn with the ``SPLIT`` stream of :func:`triplet_embed.rng.make_rng`
(PCG64 seeded with ``[stream, seed]``). Classes are visited in ascending
class id order and each class consumes exactly one ``permutation`` call, so
a manifest can be regenerated from the corpus and seed alone.
"""

import os
from dataclasses import dataclass, field

import numpy as np

from .errors import DatasetError, ParseError, StructuralError
from .rng import SPLIT, SYNTH, make_rng

DEFAULT_SIZE = 32
FULL_SIZE = 299
DEFAULT_PAD = 1.0

SPLIT_NAMES = ("train", "val", "test", "unseen")


@dataclass(frozen=True)
class Image:
    width: int
    height: int
    pixels: np.ndarray  # (height, width), row-major

    def __post_init__(self):
        px = np.asarray(self.pixels, dtype=np.float64)
        if self.width < 1 or self.height < 1:
            raise StructuralError(f"image dimensions must be positive, got {self.width}x{self.height}")
        if px.size != self.width * self.height:
            raise StructuralError(
                f"{px.size} pixels do not fill a {self.width}x{self.height} image")
        px = px.reshape(self.height, self.width)
        if not np.all((px >= 0.0) & (px <= 1.0)):
            raise StructuralError("pixel intensities must lie in [0, 1]")
        px.setflags(write=False)
        object.__setattr__(self, "pixels", px)

    @classmethod
    def from_array(cls, arr):
        arr = np.asarray(arr, dtype=np.float64)
        return cls(arr.shape[1], arr.shape[0], arr)


@dataclass(frozen=True)
class Sample:
    image: Image
    class_id: int
    source_path: str = ""


@dataclass(frozen=True)
class SplitSpec:
    target_size: int = DEFAULT_SIZE
    per_class_val: int = 100
    per_class_test: int = 100
    min_abundance: int = 500
    seed: int = 0

    def __post_init__(self):
        if self.per_class_val < 0 or self.per_class_test < 0:
            raise StructuralError("per-class split sizes must be nonnegative")
        if self.min_abundance < self.per_class_val + self.per_class_test:
            raise StructuralError("min_abundance must cover the validation and test quotas")
        if self.target_size < 8:
            raise StructuralError("target_size must be at least 8")


@dataclass
class Splits:
    """Per-class sample index lists. Keys are class ids into ``class_names``."""

    train: dict
    val: dict
    test: dict
    unseen_test: dict
    class_names: list = field(default_factory=list)

    @property
    def seen_classes(self):
        return sorted(self.train)

    @property
    def unseen_classes(self):
        return sorted(self.unseen_test)

    def indices(self, split):
        table = {"train": self.train, "val": self.val, "test": self.test,
                 "unseen": self.unseen_test}[split]
        return {c: list(v) for c, v in table.items()}


# ---------------------------------------------------------------------------
# PGM


def _skip_space(data, pos):
    while pos < len(data):
        ch = data[pos:pos + 1]
        if ch == b"#":
            while pos < len(data) and data[pos:pos + 1] not in (b"\n", b"\r"):
                pos += 1
        elif ch.isspace():
            pos += 1
        else:
            break
    return pos


def _read_int(data, pos, what):
    pos = _skip_space(data, pos)
    start = pos
    while pos < len(data) and data[pos:pos + 1].isdigit():
        pos += 1
    if pos == start:
        raise ParseError(f"expected {what}", start)
    return int(data[start:pos]), pos


def load_pgm(data):
    """Parse a binary (P5) PGM byte string into an :class:`Image`."""
    data = bytes(data)
    if data[:2] != b"P5":
        raise ParseError("bad magic, expected P5", 0)
    pos = 2
    if pos >= len(data) or not data[pos:pos + 1].isspace():
        raise ParseError("expected whitespace after magic", pos)
    width, pos = _read_int(data, pos, "width")
    height, pos = _read_int(data, pos, "height")
    maxval_at = _skip_space(data, pos)
    maxval, pos = _read_int(data, pos, "maxval")
    if width < 1 or height < 1:
        raise ParseError("width and height must be positive", maxval_at)
    if maxval == 0 or maxval > 65535:
        raise ParseError(f"maxval {maxval} outside 1..65535", maxval_at)
    if pos >= len(data) or not data[pos:pos + 1].isspace():
        raise ParseError("expected single whitespace before raster", pos)
    pos += 1
    depth = 1 if maxval < 256 else 2
    need = width * height * depth
    if len(data) - pos < need:
        raise ParseError(f"truncated raster: need {need} bytes, have {len(data) - pos}", len(data))
    dtype = np.uint8 if depth == 1 else np.dtype(">u2")
    raw = np.frombuffer(data, dtype=dtype, count=width * height, offset=pos)
    if raw.max(initial=0) > maxval:
        bad = int(np.argmax(raw > maxval))
        raise ParseError(f"sample exceeds maxval {maxval}", pos + bad * depth)
    return Image(width, height, raw.astype(np.float64).reshape(height, width) / maxval)


def encode_pgm(img, maxval=255):
    """Serialize an :class:`Image` as binary PGM, rounding to ``maxval`` levels."""
    if not 1 <= maxval <= 65535:
        raise StructuralError("maxval must be in 1..65535")
    q = np.rint(np.asarray(img.pixels) * maxval)
    raster = q.astype(np.uint8 if maxval < 256 else ">u2").tobytes()
    return f"P5\n{img.width} {img.height}\n{maxval}\n".encode("ascii") + raster


def read_pgm(path):
    with open(path, "rb") as fh:
        return load_pgm(fh.read())


def write_pgm(path, img, maxval=255):
    with open(path, "wb") as fh:
        fh.write(encode_pgm(img, maxval))


# ---------------------------------------------------------------------------
# Standardization


def _box_weights(n_src, n_dst):
    """(n_dst, n_src) matrix of area overlaps, rows normalized to sum 1."""
    edges = np.arange(n_dst + 1) * (n_src / n_dst)
    lo = np.maximum(edges[:-1, None], np.arange(n_src)[None, :])
    hi = np.minimum(edges[1:, None], np.arange(1, n_src + 1)[None, :])
    w = np.clip(hi - lo, 0.0, None)
    return w / w.sum(axis=1, keepdims=True)


def standardize(img, size=DEFAULT_SIZE, pad=DEFAULT_PAD):
    """Fit ``img`` into a ``size`` x ``size`` array.

    Images larger than ``size`` on either side are shrunk with a box filter
    so the longer side equals ``size``. The result is centered on a ``pad``
    background; an odd remainder goes to the bottom/right.
    """
    if size < 8:
        raise StructuralError("target size must be at least 8")
    px = np.asarray(img.pixels, dtype=np.float64)
    h, w = px.shape
    if max(h, w) > size:
        scale = size / max(h, w)
        nh = min(size, max(1, int(round(h * scale))))
        nw = min(size, max(1, int(round(w * scale))))
        px = _box_weights(h, nh) @ px @ _box_weights(w, nw).T
        px = np.clip(px, 0.0, 1.0)
        h, w = nh, nw
    out = np.full((size, size), float(pad))
    top = (size - h) // 2
    left = (size - w) // 2
    out[top:top + h, left:left + w] = px
    return out


# ---------------------------------------------------------------------------
# Splits


def _group_by_class(samples):
    groups = {}
    for i, s in enumerate(samples):
        groups.setdefault(s.class_id, []).append(i)
    return groups


def make_splits(samples, spec, class_names=None):
    if not samples:
        raise DatasetError("no samples to split")
    groups = _group_by_class(samples)
    n_classes = max(groups) + 1
    if class_names is None:
        class_names = [str(c) for c in range(n_classes)]
    class_names = list(class_names)
    if len(class_names) < n_classes or min(groups) < 0:
        raise StructuralError("sample class ids fall outside the class table")

    rng = make_rng(spec.seed, SPLIT)
    train, val, test, unseen = {}, {}, {}, {}
    nv, nt = spec.per_class_val, spec.per_class_test
    for c in range(len(class_names)):
        idx = groups.get(c, [])
        if not idx:
            unseen[c] = []
            continue
        order = [idx[j] for j in rng.permutation(len(idx))]
        if len(idx) >= spec.min_abundance:
            if len(idx) < nv + nt:
                raise AssertionError(f"seen class {class_names[c]} below val+test quota")
            val[c] = order[:nv]
            test[c] = order[nv:nv + nt]
            train[c] = order[nv + nt:]
        else:
            unseen[c] = order[:min(len(order), nt)]
    return Splits(train, val, test, unseen, class_names)


# ---------------------------------------------------------------------------
# Synthetic shapes

# ordered so that any prefix is a set of mutually distinct shapes
SHAPE_FAMILIES = (
    "ellipse", "ring", "cross", "bar", "triad", "crescent",
    "square", "dumbbell", "triangle", "chevron", "disc", "comb",
)


def _seg_dist(u, v, ax, ay, bx, by):
    dx, dy = bx - ax, by - ay
    t = np.clip(((u - ax) * dx + (v - ay) * dy) / (dx * dx + dy * dy), 0.0, 1.0)
    return np.hypot(u - ax - t * dx, v - ay - t * dy)


def _box_sd(u, v, hx, hy):
    qx, qy = np.abs(u) - hx, np.abs(v) - hy
    outside = np.hypot(np.maximum(qx, 0.0), np.maximum(qy, 0.0))
    return outside + np.minimum(np.maximum(qx, qy), 0.0)


def _shape_sd(family, u, v, thick):
    """Signed distance (negative inside) of a unit-scale shape."""
    r = np.hypot(u, v)
    if family == "ellipse":
        return (np.hypot(u / 0.75, v / 0.38) - 1.0) * 0.38
    if family == "ring":
        return np.abs(r - 0.6) - 0.07 * thick
    if family == "cross":
        return np.minimum(_box_sd(u, v, 0.75, 0.13 * thick), _box_sd(u, v, 0.13 * thick, 0.75))
    if family == "bar":
        return _box_sd(u, v, 0.85, 0.16 * thick)
    if family == "triangle":
        d = -np.inf
        for k in range(3):
            a = np.pi / 2 + 2 * np.pi * k / 3
            d = np.maximum(d, u * np.cos(a) + v * np.sin(a) - 0.35)
        return d
    if family == "square":
        return np.abs(_box_sd(u, v, 0.5, 0.5)) - 0.17 * thick
    if family == "dumbbell":
        return np.minimum(np.hypot(u - 0.5, v), np.hypot(u + 0.5, v)) - 0.28
    if family == "crescent":
        return np.maximum(r - 0.65, 0.5 - np.hypot(u - 0.3, v))
    if family == "triad":
        d = np.inf
        for k in range(3):
            a = 2 * np.pi * k / 3
            d = np.minimum(d, np.hypot(u - 0.55 * np.cos(a), v - 0.55 * np.sin(a)) - 0.2)
        return d
    if family == "chevron":
        return np.minimum(_seg_dist(u, v, -0.6, 0.5, 0.0, -0.4),
                          _seg_dist(u, v, 0.0, -0.4, 0.6, 0.5)) - 0.12 * thick
    if family == "disc":
        return r - 0.3
    if family == "comb":
        d = _seg_dist(u, v, -0.7, -0.4, 0.7, -0.4)
        for x in (-0.7, 0.0, 0.7):
            d = np.minimum(d, _seg_dist(u, v, x, -0.4, x, 0.5))
        return d - 0.1 * thick
    raise KeyError(family)


def synthetic_class_names(n_classes):
    names = []
    for c in range(n_classes):
        fam = SHAPE_FAMILIES[c % len(SHAPE_FAMILIES)]
        variant = c // len(SHAPE_FAMILIES)
        names.append(f"{c:02d}_{fam}" + (f"_v{variant}" if variant else ""))
    return names


def render_shape(family, size, rng, thick=1.0, noise=0.05):
    """Draw one dark shape on a light background at a random pose."""
    angle = rng.uniform(0.0, 2 * np.pi)
    scale = rng.uniform(0.7, 1.0)
    cx, cy = rng.uniform(-0.12, 0.12, size=2)
    contrast = rng.uniform(0.6, 0.9)
    coords = (np.arange(size) + 0.5) / (size / 2) - 1.0
    x, y = np.meshgrid(coords, coords)
    x, y = (x - cx) / scale, (y - cy) / scale
    ca, sa = np.cos(angle), np.sin(angle)
    u, v = ca * x + sa * y, -sa * x + ca * y
    sd = _shape_sd(family, u, v, thick) * scale
    ink = np.clip(0.5 - sd * (size / 2), 0.0, 1.0)
    img = 1.0 - contrast * ink + rng.normal(0.0, noise, size=(size, size))
    return np.clip(img, 0.0, 1.0)


def generate_synthetic(n_classes, per_class, size=DEFAULT_SIZE, seed=0):
    """Deterministic shape dataset, ``per_class`` samples of each class in class order."""
    if n_classes < 2 or per_class < 4:
        raise DatasetError("need at least 2 classes of 4 samples")
    rng = make_rng(seed, SYNTH)
    names = synthetic_class_names(n_classes)
    samples = []
    for c in range(n_classes):
        fam = SHAPE_FAMILIES[c % len(SHAPE_FAMILIES)]
        thick = 1.0 + 0.8 * (c // len(SHAPE_FAMILIES))
        for i in range(per_class):
            px = render_shape(fam, size, rng, thick=thick)
            samples.append(Sample(Image.from_array(px), c, f"{names[c]}/{i:05d}.pgm"))
    return samples


# ---------------------------------------------------------------------------
# Corpus and manifest files


def load_corpus(root):
    """Read ``root/<class>/*.pgm``. Returns (samples, class_names)."""
    class_names = sorted(d for d in os.listdir(root) if os.path.isdir(os.path.join(root, d)))
    if not class_names:
        raise DatasetError(f"no class directories under {root}")
    samples = []
    for c, name in enumerate(class_names):
        cdir = os.path.join(root, name)
        for fn in sorted(os.listdir(cdir)):
            if fn.lower().endswith(".pgm"):
                path = os.path.join(cdir, fn)
                samples.append(Sample(read_pgm(path), c, path))
    if not samples:
        raise DatasetError(f"no PGM files under {root}")
    return samples, class_names


def write_corpus(root, samples, class_names, maxval=255):
    for s in samples:
        path = os.path.join(root, s.source_path)
        os.makedirs(os.path.dirname(path), exist_ok=True)
        write_pgm(path, s.image, maxval)
    for name in class_names:
        os.makedirs(os.path.join(root, name), exist_ok=True)


def manifest_lines(splits, samples, base_dir):
    tables = (("train", splits.train), ("val", splits.val), ("test", splits.test),
              ("unseen", splits.unseen_test))
    lines = []
    for c, name in enumerate(splits.class_names):
        for split, table in tables:
            for i in table.get(c, ()):
                rel = os.path.relpath(samples[i].source_path, base_dir).replace(os.sep, "/")
                lines.append(f"{split}\t{name}\t{rel}\n")
    return lines


def write_manifest(path, splits, samples):
    """Write ``split<TAB>class<TAB>path`` lines, paths relative to the manifest's directory."""
    base = os.path.dirname(os.path.abspath(path))
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.writelines(manifest_lines(splits, samples, base))


def read_manifest(path):
    """Return a list of (split, class_name, absolute_path, relative_path)."""
    base = os.path.dirname(os.path.abspath(path))
    entries = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.rstrip("\n")
            if not line:
                continue
            parts = line.split("\t")
            if len(parts) != 3 or parts[0] not in SPLIT_NAMES:
                raise DatasetError(f"{path}:{lineno}: malformed manifest line")
            split, name, rel = parts
            entries.append((split, name, os.path.normpath(os.path.join(base, rel)), rel))
    if not entries:
        raise DatasetError(f"{path}: empty manifest")
    return entries


@dataclass
class LoadedData:
    """Standardized images for every manifest entry plus their split membership."""

    images: np.ndarray  # (N, S, S)
    labels: np.ndarray  # (N,) class ids into splits.class_names
    paths: list  # as written in the manifest
    split_of: list
    splits: Splits


def load_manifest(path, size=DEFAULT_SIZE, pad=DEFAULT_PAD):
    entries = read_manifest(path)
    class_names = sorted({e[1] for e in entries})
    cid = {n: i for i, n in enumerate(class_names)}
    tables = {s: {} for s in SPLIT_NAMES}
    images = np.empty((len(entries), size, size))
    labels = np.empty(len(entries), dtype=np.int64)
    for i, (split, name, p, _) in enumerate(entries):
        images[i] = standardize(read_pgm(p), size, pad)
        labels[i] = cid[name]
        tables[split].setdefault(cid[name], []).append(i)
    seen = set(tables["train"]) | set(tables["val"]) | set(tables["test"])
    if seen & set(tables["unseen"]):
        raise DatasetError(f"{path}: a class appears in both seen and unseen splits")
    for c in seen:
        for s in ("train", "val", "test"):
            tables[s].setdefault(c, [])
    splits = Splits(tables["train"], tables["val"], tables["test"], tables["unseen"], class_names)
    return LoadedData(images, labels, [e[3] for e in entries], [e[0] for e in entries], splits)
