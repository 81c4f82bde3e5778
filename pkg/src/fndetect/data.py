"""Annotations, images, augmentation, splits and the synthetic blob set.

Boxes are normalized ``(cx, cy, w, h)``. Images are float arrays of shape
``(1, 3, h, w)`` with values in [0, 1]. On disk a dataset is
``images/<id>.ppm`` with a sibling ``labels/<id>.txt``.
"""

import os
from dataclasses import dataclass, field, replace

import numpy as np

from .errors import ParseError

MIN_VISIBLE = 0.2


@dataclass(frozen=True)
class GroundTruth:
    class_id: int
    cx: float
    cy: float
    w: float
    h: float

    def __post_init__(self):
        object.__setattr__(self, "class_id", int(self.class_id))
        for name in ("cx", "cy", "w", "h"):
            object.__setattr__(self, name, float(getattr(self, name)))
        if not (0.0 <= self.cx <= 1.0 and 0.0 <= self.cy <= 1.0):
            raise ValueError(f"center ({self.cx}, {self.cy}) outside [0, 1]")
        if not (0.0 < self.w <= 1.0 and 0.0 < self.h <= 1.0):
            raise ValueError(f"size ({self.w}, {self.h}) outside (0, 1]")

    @property
    def box(self):
        return (self.cx, self.cy, self.w, self.h)

    def xyxy(self, image_size=(1, 1)):
        h, w = image_size
        return ((self.cx - self.w / 2) * w, (self.cy - self.h / 2) * h,
                (self.cx + self.w / 2) * w, (self.cy + self.h / 2) * h)


@dataclass
class Sample:
    image: np.ndarray
    gts: list = field(default_factory=list)
    id: str = ""

    @property
    def size(self):
        return self.image.shape[2], self.image.shape[3]


# -- YOLO txt -------------------------------------------------------------------

def parse_yolo_txt(text, path=None):
    gts = []
    for lineno, raw in enumerate(text.splitlines(), 1):
        parts = raw.split()
        if not parts:
            continue
        if len(parts) != 5:
            raise ParseError(f"expected 5 fields 'class cx cy w h', got {len(parts)}", path, lineno)
        try:
            cls = int(parts[0])
            cx, cy, w, h = (float(v) for v in parts[1:])
        except ValueError:
            raise ParseError(f"non-numeric field in {raw!r}", path, lineno) from None
        if cls < 0:
            raise ParseError(f"negative class id {cls}", path, lineno)
        try:
            gts.append(GroundTruth(cls, cx, cy, w, h))
        except ValueError as exc:
            raise ParseError(str(exc), path, lineno) from None
    return gts


def load_yolo_txt(path):
    with open(path) as fh:
        return parse_yolo_txt(fh.read(), path)


def format_yolo_txt(gts):
    return "".join(f"{g.class_id} {float(g.cx)!r} {float(g.cy)!r} {float(g.w)!r} {float(g.h)!r}\n" for g in gts)


def write_yolo_txt(path, gts):
    with open(path, "w") as fh:
        fh.write(format_yolo_txt(gts))


# -- PPM ------------------------------------------------------------------------

def write_ppm(path, image):
    """Write a ``(1, 3, h, w)`` or ``(3, h, w)`` float image as binary P6."""
    img = np.asarray(image)
    if img.ndim == 4:
        img = img[0]
    if img.shape[0] != 3:
        raise ValueError(f"expected 3 channels, got shape {img.shape}")
    _, h, w = img.shape
    pix = np.round(np.clip(img, 0.0, 1.0) * 255.0).astype(np.uint8).transpose(1, 2, 0)
    with open(path, "wb") as fh:
        fh.write(f"P6\n{w} {h}\n255\n".encode("ascii"))
        fh.write(pix.tobytes())


def _ppm_tokens(buf):
    """Yield header tokens and the offset just past the last one."""
    pos, tokens = 0, []
    while len(tokens) < 4:
        while pos < len(buf) and buf[pos : pos + 1].isspace():
            pos += 1
        if buf[pos : pos + 1] == b"#":
            while pos < len(buf) and buf[pos : pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < len(buf) and not buf[pos : pos + 1].isspace():
            pos += 1
        if start == pos:
            break
        tokens.append(buf[start:pos])
    return tokens, pos + 1


def read_ppm(path):
    with open(path, "rb") as fh:
        buf = fh.read()
    tokens, offset = _ppm_tokens(buf)
    if len(tokens) != 4 or tokens[0] != b"P6":
        raise ParseError("not a binary P6 PPM file", path)
    try:
        w, h, maxval = (int(t) for t in tokens[1:])
    except ValueError:
        raise ParseError("malformed PPM header", path) from None
    if maxval != 255:
        raise ParseError(f"only 8-bit PPM supported (maxval {maxval})", path)
    data = buf[offset : offset + 3 * w * h]
    if len(data) != 3 * w * h:
        raise ParseError(f"truncated pixel data ({len(data)} of {3 * w * h} bytes)", path)
    pix = np.frombuffer(data, dtype=np.uint8).reshape(h, w, 3).transpose(2, 0, 1)
    return (pix.astype(np.float64) / 255.0)[None]


# -- augmentation -----------------------------------------------------------------

def _clip_boxes(boxes_xyxy, classes):
    """Clip normalized xyxy boxes to the frame, dropping ones left with <20% area."""
    out = []
    for (x1, y1, x2, y2), cls in zip(boxes_xyxy, classes):
        area = (x2 - x1) * (y2 - y1)
        cx1, cy1 = max(x1, 0.0), max(y1, 0.0)
        cx2, cy2 = min(x2, 1.0), min(y2, 1.0)
        if cx2 <= cx1 or cy2 <= cy1 or area <= 0:
            continue
        if (cx2 - cx1) * (cy2 - cy1) < MIN_VISIBLE * area:
            continue
        out.append(GroundTruth(int(cls), (cx1 + cx2) / 2, (cy1 + cy2) / 2, cx2 - cx1, cy2 - cy1))
    return out


def _affine_boxes(gts, sx, sy, tx, ty):
    """Map normalized boxes through ``x -> sx * x + tx``, ``y -> sy * y + ty``."""
    boxes = [(sx * (g.cx - g.w / 2) + tx, sy * (g.cy - g.h / 2) + ty,
              sx * (g.cx + g.w / 2) + tx, sy * (g.cy + g.h / 2) + ty) for g in gts]
    return _clip_boxes(boxes, [g.class_id for g in gts])


def _resample(image, sx, sy, tx, ty):
    """Bilinear warp where output normalized coord ``u`` samples input at ``(u - t) / s``.

    Outside the source frame reads as zero.
    """
    _, c, h, w = image.shape
    u = (np.arange(w) + 0.5) / w
    v = (np.arange(h) + 0.5) / h
    src_x = ((u - tx) / sx) * w - 0.5
    src_y = ((v - ty) / sy) * h - 0.5
    x0 = np.floor(src_x).astype(int)
    y0 = np.floor(src_y).astype(int)
    fx = src_x - x0
    fy = src_y - y0
    padded = np.pad(image[0], ((0, 0), (1, 1), (1, 1)))
    out = np.zeros((c, h, w))
    for dy, wy in ((0, 1 - fy), (1, fy)):
        yi = np.clip(y0 + dy + 1, 0, h + 1)
        for dx, wx in ((0, 1 - fx), (1, fx)):
            xi = np.clip(x0 + dx + 1, 0, w + 1)
            out += padded[:, yi][:, :, xi] * (wy[:, None] * wx[None, :])
    return np.clip(out, 0.0, 1.0)[None]


AUG_OPS = ("hflip", "vflip", "scale", "translate", "crop")


def augment(sample, op, param=None, seed=0):
    """Apply one augmentation to pixels and boxes together.

    ``param`` per op: ``scale`` a zoom factor about the image centre;
    ``translate`` a ``(dx, dy)`` shift as a fraction of the frame, rounded to
    whole pixels; ``crop`` a normalized ``(x0, y0, x1, y1)`` region that is
    cut out and resized back to the full frame. When ``param`` is omitted it
    is drawn from ``seed``. Boxes leaving the frame are clipped and dropped if
    less than 20% of their area survives.
    """
    rng = np.random.default_rng(seed)
    img = sample.image
    _, _, h, w = img.shape
    if op == "hflip":
        return replace(sample, image=img[..., ::-1].copy(),
                       gts=[replace(g, cx=1.0 - g.cx) for g in sample.gts])
    if op == "vflip":
        return replace(sample, image=img[:, :, ::-1].copy(),
                       gts=[replace(g, cy=1.0 - g.cy) for g in sample.gts])
    if op == "scale":
        f = float(param) if param is not None else rng.uniform(0.75, 1.25)
        if f <= 0:
            raise ValueError("scale factor must be positive")
        t = 0.5 * (1.0 - f)
        return replace(sample, image=_resample(img, f, f, t, t), gts=_affine_boxes(sample.gts, f, f, t, t))
    if op == "translate":
        dx, dy = param if param is not None else rng.uniform(-0.1, 0.1, size=2)
        px, py = int(round(dx * w)), int(round(dy * h))
        out = np.zeros_like(img)
        src = img[:, :, max(0, -py) : h - max(0, py), max(0, -px) : w - max(0, px)]
        out[:, :, max(0, py) : max(0, py) + src.shape[2], max(0, px) : max(0, px) + src.shape[3]] = src
        return replace(sample, image=out, gts=_affine_boxes(sample.gts, 1.0, 1.0, px / w, py / h))
    if op == "crop":
        if param is None:
            frac = rng.uniform(0.6, 1.0)
            x0, y0 = rng.uniform(0, 1 - frac, size=2)
            param = (x0, y0, x0 + frac, y0 + frac)
        x0, y0, x1, y1 = (float(v) for v in param)
        if not (0 <= x0 < x1 <= 1 and 0 <= y0 < y1 <= 1):
            raise ValueError(f"crop region {param} invalid")
        sx, sy = 1.0 / (x1 - x0), 1.0 / (y1 - y0)
        tx, ty = -x0 * sx, -y0 * sy
        return replace(sample, image=_resample(img, sx, sy, tx, ty), gts=_affine_boxes(sample.gts, sx, sy, tx, ty))
    raise ValueError(f"unknown augmentation {op!r}; choose from {AUG_OPS}")


def random_augment(sample, rng, prob=0.5, ops=AUG_OPS):
    """Apply each op independently with probability ``prob``."""
    for op in ops:
        if rng.random() < prob:
            sample = augment(sample, op, seed=int(rng.integers(2**31)))
    return sample


# -- splits ----------------------------------------------------------------------

DEFAULT_SPLIT = (600, 200, 250)


def split(ids, ratios=DEFAULT_SPLIT, seed=0):
    """Deterministic shuffled partition into train / val / test.

    Sizes follow ``ratios`` (any nonnegative weights) with largest-remainder
    rounding.
    """
    ids = list(ids)
    r = np.asarray(ratios, dtype=np.float64)
    if r.shape != (3,) or np.any(r < 0) or r.sum() <= 0:
        raise ValueError(f"ratios must be three nonnegative weights, got {ratios}")
    exact = r / r.sum() * len(ids)
    sizes = np.floor(exact).astype(int)
    for i in np.argsort(-(exact - sizes), kind="stable")[: len(ids) - sizes.sum()]:
        sizes[i] += 1
    order = np.random.default_rng(seed).permutation(len(ids))
    shuffled = [ids[i] for i in order]
    a, b = sizes[0], sizes[0] + sizes[1]
    return shuffled[:a], shuffled[a:b], shuffled[b:]


# -- synthetic blobs ----------------------------------------------------------------

def synth_blobs(n_images, size=64, max_objects=3, seed=0, min_objects=1):
    """Bright ellipses on a dark noisy background; boxes are the ellipses' pixel extents."""
    rng = np.random.default_rng(seed)
    samples = []
    for idx in range(n_images):
        img = 0.05 + rng.uniform(0.0, 0.15, size=(3, size, size))
        img += rng.uniform(0.0, 0.05, size=(3, 1, 1))
        n_obj = 0 if max_objects == 0 else int(rng.integers(min(min_objects, max_objects), max_objects + 1))
        yy, xx = np.mgrid[0:size, 0:size] + 0.5
        boxes, gts = [], []
        tries = 0
        while len(gts) < n_obj and tries < 100:
            tries += 1
            a = rng.uniform(size / 20, size / 5)
            b = rng.uniform(size / 20, size / 5)
            cx = rng.uniform(a + 1, size - a - 1)
            cy = rng.uniform(b + 1, size - b - 1)
            mask = ((xx - cx) / a) ** 2 + ((yy - cy) / b) ** 2 <= 1.0
            if mask.sum() < 4:
                continue
            rows, cols = np.nonzero(mask)
            box = (cols.min(), rows.min(), cols.max() + 1, rows.max() + 1)
            if any(_overlap(box, o) > 0.05 for o in boxes):
                continue
            colour = rng.uniform(0.7, 1.0, size=3)
            img[:, mask] = colour[:, None]
            boxes.append(box)
            x1, y1, x2, y2 = box
            gts.append(GroundTruth(0, (x1 + x2) / 2 / size, (y1 + y2) / 2 / size,
                                   (x2 - x1) / size, (y2 - y1) / size))
        samples.append(Sample(np.clip(img, 0, 1)[None], gts, f"blob_{seed}_{idx:05d}"))
    return samples


def _overlap(a, b):
    ix = min(a[2], b[2]) - max(a[0], b[0])
    iy = min(a[3], b[3]) - max(a[1], b[1])
    if ix <= 0 or iy <= 0:
        return 0.0
    inter = ix * iy
    return inter / ((a[2] - a[0]) * (a[3] - a[1]) + (b[2] - b[0]) * (b[3] - b[1]) - inter)


# -- on-disk layout ---------------------------------------------------------------

def save_dataset(root, samples, splits=None):
    os.makedirs(os.path.join(root, "images"), exist_ok=True)
    os.makedirs(os.path.join(root, "labels"), exist_ok=True)
    for s in samples:
        write_ppm(os.path.join(root, "images", s.id + ".ppm"), s.image)
        write_yolo_txt(os.path.join(root, "labels", s.id + ".txt"), s.gts)
    for name, ids in (splits or {}).items():
        write_manifest(os.path.join(root, name + ".txt"), ids)


def write_manifest(path, ids):
    with open(path, "w") as fh:
        fh.writelines(i + "\n" for i in ids)


def read_manifest(path):
    with open(path) as fh:
        return [line.strip() for line in fh if line.strip()]


def list_ids(root):
    names = sorted(os.listdir(os.path.join(root, "images")))
    return [n[:-4] for n in names if n.endswith(".ppm")]


def load_sample(root, sample_id):
    image = read_ppm(os.path.join(root, "images", sample_id + ".ppm"))
    label = os.path.join(root, "labels", sample_id + ".txt")
    gts = load_yolo_txt(label) if os.path.exists(label) else []
    return Sample(image, gts, sample_id)


def load_dataset(root, subset=None):
    """Load all samples, or those listed in ``<root>/<subset>.txt``."""
    if subset:
        manifest = os.path.join(root, subset + ".txt")
        ids = read_manifest(manifest) if os.path.exists(manifest) else list_ids(root)
    else:
        ids = list_ids(root)
    return [load_sample(root, i) for i in ids]
