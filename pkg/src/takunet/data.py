"""
Dataset indexing, image decoding, resizing, augmentation and batching.

Two directory layouts are understood:

* ``aider``: ``root/<class>/*.ppm|*.tktn``; a seeded per-class split puts
  ``ceil(n * test_pct / 100)`` files in ``test`` and the rest in ``train``.
  The "normal" class uses a larger test share.
* ``aiderv2``: ``root/{train,val,test}/<class>/...``; membership is taken
  from the directories as-is.

Images are float arrays shaped (3, H, W) with values in [0, 1].
"""

from __future__ import annotations

import csv
import math
import os
from dataclasses import dataclass, field, replace
from typing import Dict, Iterator, List, Optional, Sequence, Tuple

import numpy as np
from scipy import ndimage

from .tensor import TENSOR_MAGIC, load_tensor, save_tensor

IMAGE_EXTENSIONS = (".ppm", ".tktn")
SPLITS = ("train", "val", "test")


# -- indexing ---------------------------------------------------------------------

@dataclass(frozen=True)
class Record:
    path: str
    label: int
    split: str


@dataclass
class DatasetIndex:
    root: str
    classes: List[str]
    records: List[Record]

    def split(self, name: str) -> List[Record]:
        return [r for r in self.records if r.split == name]

    def counts(self) -> Dict[str, Dict[str, int]]:
        """``counts()[class][split]``."""
        out = {c: {s: 0 for s in SPLITS} for c in self.classes}
        for r in self.records:
            out[self.classes[r.label]][r.split] += 1
        return out

    def split_totals(self) -> Dict[str, int]:
        return {s: sum(1 for r in self.records if r.split == s) for s in SPLITS}

    def abspath(self, rec: Record) -> str:
        return rec.path if os.path.isabs(rec.path) else os.path.join(self.root, rec.path)

    def subset(self, split: str, positions: Sequence[int], new_split: Optional[str] = None) -> List[Record]:
        recs = self.split(split)
        return [replace(recs[i], split=new_split or split) for i in positions]


def _image_files(directory: str) -> List[str]:
    return sorted(
        f for f in os.listdir(directory)
        if f.lower().endswith(IMAGE_EXTENSIONS) and os.path.isfile(os.path.join(directory, f))
    )


def _class_dirs(directory: str) -> List[str]:
    return sorted(d for d in os.listdir(directory) if os.path.isdir(os.path.join(directory, d)))


def n_test_for(n: int, test_pct: int) -> int:
    """Test share of a class of ``n`` files: ``ceil(n * test_pct / 100)`` in integers."""
    return -(-n * test_pct // 100)


def index_dataset(
    root: str,
    mode: str = "aider",
    seed: int = 0,
    test_pct: int = 30,
    normal_test_pct: int = 35,
    normal_class: str = "normal",
    case_sensitive: bool = False,
) -> DatasetIndex:
    root = os.fspath(root)
    if mode == "aider":
        classes = _class_dirs(root)
        if not classes:
            raise ValueError(f"{root}: no class directories found")
        records: List[Record] = []
        for cid, cname in enumerate(classes):
            files = _image_files(os.path.join(root, cname))
            if not files:
                raise ValueError(f"{os.path.join(root, cname)}: empty class directory")
            is_normal = cname == normal_class if case_sensitive else cname.lower() == normal_class.lower()
            n_test = n_test_for(len(files), normal_test_pct if is_normal else test_pct)
            order = np.random.default_rng(np.random.SeedSequence([seed, cid])).permutation(len(files))
            test_pos = set(order[:n_test].tolist())
            for i, f in enumerate(files):
                records.append(Record(os.path.join(cname, f), cid, "test" if i in test_pos else "train"))
        return DatasetIndex(root, classes, records)
    if mode == "aiderv2":
        present = [s for s in SPLITS if os.path.isdir(os.path.join(root, s))]
        if "train" not in present:
            raise ValueError(f"{root}: aiderv2 layout needs a train/ directory")
        classes = sorted({c for s in present for c in _class_dirs(os.path.join(root, s))})
        records = []
        for s in present:
            for cname in _class_dirs(os.path.join(root, s)):
                files = _image_files(os.path.join(root, s, cname))
                if not files:
                    raise ValueError(f"{os.path.join(root, s, cname)}: empty class directory")
                cid = classes.index(cname)
                records.extend(Record(os.path.join(s, cname, f), cid, s) for f in files)
        return DatasetIndex(root, classes, records)
    raise ValueError(f"unknown split mode {mode!r} (expected 'aider' or 'aiderv2')")


def write_manifest(index: DatasetIndex) -> str:
    """CSV text ``path,class,split`` with paths relative to the dataset root."""
    lines = ["path,class,split"]
    for r in index.records:
        lines.append(f"{r.path},{index.classes[r.label]},{r.split}")
    return "\n".join(lines) + "\n"


def read_manifest(path: str, root: Optional[str] = None) -> DatasetIndex:
    with open(path, newline="", encoding="utf-8") as f:
        rows = list(csv.DictReader(f))
    if rows and set(rows[0]) != {"path", "class", "split"}:
        raise ValueError(f"{path}: expected columns path,class,split")
    classes = sorted({r["class"] for r in rows})
    for r in rows:
        if r["split"] not in SPLITS:
            raise ValueError(f"{path}: unknown split {r['split']!r}")
    records = [Record(r["path"], classes.index(r["class"]), r["split"]) for r in rows]
    return DatasetIndex(root if root is not None else os.path.dirname(os.path.abspath(path)), classes, records)


# -- decoding -------------------------------------------------------------------

def _ppm_tokens(data: bytes, count: int) -> Tuple[List[bytes], int]:
    tokens: List[bytes] = []
    pos = 0
    while len(tokens) < count:
        while pos < len(data) and data[pos:pos + 1].isspace():
            pos += 1
        if pos < len(data) and data[pos:pos + 1] == b"#":
            while pos < len(data) and data[pos:pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < len(data) and not data[pos:pos + 1].isspace() and data[pos:pos + 1] != b"#":
            pos += 1
        if start == pos:
            raise ValueError("truncated PPM header")
        tokens.append(data[start:pos])
    return tokens, pos + 1  # exactly one whitespace byte follows maxval


def decode_ppm(data: bytes) -> np.ndarray:
    tokens, offset = _ppm_tokens(data, 4)
    if tokens[0] != b"P6":
        raise ValueError(f"unsupported PPM variant {tokens[0]!r}")
    w, h, maxval = (int(t) for t in tokens[1:])
    if w < 1 or h < 1 or not 0 < maxval < 65536:
        raise ValueError(f"bad PPM header: {w}x{h} maxval {maxval}")
    dt = np.dtype(">u2") if maxval > 255 else np.dtype(np.uint8)
    need = w * h * 3 * dt.itemsize
    body = data[offset:offset + need]
    if len(body) != need:
        raise EOFError(f"truncated PPM data: wanted {need} bytes, got {len(body)}")
    px = np.frombuffer(body, dtype=dt).reshape(h, w, 3)
    return (px.astype(np.float32) / np.float32(maxval)).transpose(2, 0, 1).copy()


def encode_ppm(img: np.ndarray) -> bytes:
    """(3, H, W) floats in [0, 1] or (H, W, 3) uint8 -> binary P6 bytes."""
    arr = np.asarray(img)
    if arr.dtype != np.uint8:
        arr = np.clip(np.rint(arr * 255.0), 0, 255).astype(np.uint8).transpose(1, 2, 0)
    h, w, _ = arr.shape
    return b"P6\n%d %d\n255\n" % (w, h) + np.ascontiguousarray(arr).tobytes()


def decode_image(path: str) -> np.ndarray:
    with open(path, "rb") as f:
        head = f.read(4)
    if head[:2] == b"P6":
        with open(path, "rb") as f:
            return decode_ppm(f.read())
    if head == TENSOR_MAGIC:
        x = load_tensor(path)
        if x.ndim == 4 and x.shape[0] == 1:
            x = x[0]
        if x.ndim != 3 or x.shape[0] != 3:
            raise ValueError(f"{path}: raw image tensor must be (3, H, W), got {x.shape}")
        return x
    raise ValueError(f"{path}: unsupported image format (expected binary PPM or TKTN)")


def save_image(path: str, img: np.ndarray) -> None:
    if path.lower().endswith(".tktn"):
        save_tensor(path, img)
    else:
        with open(path, "wb") as f:
            f.write(encode_ppm(img))


# -- resizing -------------------------------------------------------------------

def _axis_weights(n_in: int, n_out: int):
    src = (np.arange(n_out, dtype=np.float64) + 0.5) * (n_in / n_out) - 0.5
    src = np.clip(src, 0.0, n_in - 1)
    lo = np.floor(src).astype(np.int64)
    hi = np.minimum(lo + 1, n_in - 1)
    return lo, hi, src - lo


def resize_bilinear(img: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Bilinear resize of a (C, H, W) image with half-pixel centers (align_corners=False)."""
    if out_h < 1 or out_w < 1:
        raise ValueError("output extents must be positive")
    c, h, w = img.shape
    if (h, w) == (out_h, out_w):
        return img.copy()
    x = img.astype(np.float64)
    y0, y1, fy = _axis_weights(h, out_h)
    x0, x1, fx = _axis_weights(w, out_w)
    rows = x[:, y0, :] * (1 - fy)[None, :, None] + x[:, y1, :] * fy[None, :, None]
    out = rows[:, :, x0] * (1 - fx) + rows[:, :, x1] * fx
    return out.astype(img.dtype)


# -- augmentation -----------------------------------------------------------------

TRANSFORMS = (
    "color_shift", "blur", "translation", "rotation", "mirror",
    "crop", "sharpen", "shadow", "illumination", "zoom",
)


@dataclass
class AugmentationPolicy:
    p_low: float = 0.05
    p_high: float = 0.5
    color_shift: float = 0.1
    blur_size: int = 3
    translation: float = 0.1
    rotation_deg: float = 15.0
    crop_min: float = 0.85
    sharpen_amount: Tuple[float, float] = (0.5, 1.5)
    shadow_range: Tuple[float, float] = (0.7, 1.3)
    illumination_range: Tuple[float, float] = (0.7, 1.3)
    zoom_range: Tuple[float, float] = (0.9, 1.1)
    forced: Dict[str, float] = field(default_factory=dict)
    seed: int = 0

    def probabilities(self, rng: np.random.Generator) -> Dict[str, float]:
        draws = rng.uniform(self.p_low, self.p_high, size=len(TRANSFORMS))
        probs = dict(zip(TRANSFORMS, draws.tolist()))
        unknown = set(self.forced) - set(TRANSFORMS)
        if unknown:
            raise KeyError(f"unknown transforms: {sorted(unknown)}")
        probs.update(self.forced)
        return probs

    @classmethod
    def disabled(cls) -> "AugmentationPolicy":
        return cls(forced={t: 0.0 for t in TRANSFORMS})


def _warp(img: np.ndarray, matrix: np.ndarray, offset: np.ndarray) -> np.ndarray:
    """Sample ``img`` at ``matrix @ out_coord + offset`` (row, col); zero outside."""
    _, h, w = img.shape
    rr, cc = np.meshgrid(np.arange(h, dtype=np.float64), np.arange(w, dtype=np.float64), indexing="ij")
    coords = np.stack([rr, cc]).reshape(2, -1)
    src = matrix @ coords + offset[:, None]
    out = np.empty_like(img)
    for ch in range(img.shape[0]):
        out[ch] = ndimage.map_coordinates(img[ch], src, order=1, mode="constant", cval=0.0).reshape(h, w)
    return out


def _about_center(img: np.ndarray, matrix: np.ndarray, shift=(0.0, 0.0)) -> np.ndarray:
    _, h, w = img.shape
    center = np.array([(h - 1) / 2.0, (w - 1) / 2.0])
    offset = center - matrix @ center - np.asarray(shift)
    return _warp(img, matrix, offset)


def _box_blur(img: np.ndarray, size: int) -> np.ndarray:
    return ndimage.uniform_filter(img, size=(1, size, size), mode="nearest")


def augment(img: np.ndarray, policy: AugmentationPolicy, rng: np.random.Generator) -> np.ndarray:
    """Apply each transform independently with a per-image probability.

    Every transform draws its random parameters whether or not it fires, so
    the stream consumed from ``rng`` does not depend on which ones fired.
    """
    dtype = img.dtype
    x = img.astype(np.float64)
    _, h, w = x.shape
    probs = policy.probabilities(rng)
    for name in TRANSFORMS:
        fire = rng.random() < probs[name]
        if name == "color_shift":
            shift = rng.uniform(-policy.color_shift, policy.color_shift, size=(x.shape[0], 1, 1))
            if fire:
                x = x + shift
        elif name == "blur":
            if fire:
                x = _box_blur(x, policy.blur_size)
        elif name == "translation":
            dy, dx = rng.uniform(-policy.translation, policy.translation, size=2) * (h, w)
            if fire:
                x = _warp(x, np.eye(2), np.array([-dy, -dx]))
        elif name == "rotation":
            theta = math.radians(rng.uniform(-policy.rotation_deg, policy.rotation_deg))
            if fire:
                c, s = math.cos(theta), math.sin(theta)
                x = _about_center(x, np.array([[c, -s], [s, c]]))
        elif name == "mirror":
            if fire:
                x = x[:, :, ::-1]
        elif name == "crop":
            frac = rng.uniform(policy.crop_min, 1.0)
            u = rng.random(2)
            if fire:
                ch_, cw_ = max(1, int(round(h * frac))), max(1, int(round(w * frac)))
                top, left = int(u[0] * (h - ch_)), int(u[1] * (w - cw_))
                x = resize_bilinear(x[:, top:top + ch_, left:left + cw_], h, w)
        elif name == "sharpen":
            amount = rng.uniform(*policy.sharpen_amount)
            if fire:
                x = x + amount * (x - _box_blur(x, 3))
        elif name == "shadow":
            factor = rng.uniform(*policy.shadow_range)
            box = np.sort(rng.random((2, 2)), axis=1)
            if fire:
                r0, r1 = (box[0] * h).astype(int)
                c0, c1 = (box[1] * w).astype(int)
                x = x.copy()
                x[:, r0:r1 + 1, c0:c1 + 1] *= factor
        elif name == "illumination":
            factor = rng.uniform(*policy.illumination_range)
            if fire:
                x = x * factor
        elif name == "zoom":
            z = rng.uniform(*policy.zoom_range)
            if fire:
                x = _about_center(x, np.eye(2) / z)
        x = np.clip(x, 0.0, 1.0)
    return np.ascontiguousarray(x).astype(dtype)


# -- batching -----------------------------------------------------------------------

def sample_rng(seed: int, epoch: int, position: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([seed, epoch, position]))


class ImageCache:
    """Decoded images keyed by path; decoding is pure so caching is safe."""

    def __init__(self):
        self._store: Dict[str, np.ndarray] = {}

    def get(self, path: str) -> np.ndarray:
        img = self._store.get(path)
        if img is None:
            try:
                img = decode_image(path)
            except (OSError, ValueError, EOFError) as exc:
                raise type(exc)(f"{path}: {exc}") from exc
            self._store[path] = img
        return img


def load_sample(index: DatasetIndex, rec: Record, input_size, policy=None, rng=None, cache=None) -> np.ndarray:
    path = index.abspath(rec)
    img = cache.get(path) if cache is not None else decode_image(path)
    if policy is not None:
        img = augment(img, policy, rng)
    return resize_bilinear(img, *input_size)


def batch_iterator(
    index: DatasetIndex,
    split,
    batch_size: int,
    shuffle_seed: Optional[int] = None,
    policy: Optional[AugmentationPolicy] = None,
    input_size: Tuple[int, int] = (240, 240),
    epoch: int = 0,
    dtype=np.float32,
    cache: Optional[ImageCache] = None,
) -> Iterator[Tuple[np.ndarray, np.ndarray]]:
    """Yield ``(x, labels)`` batches; the last partial batch is kept.

    ``split`` is a split name or an explicit record list. With a shuffle seed
    the order is a permutation drawn from ``(seed, epoch)``; augmentation is
    applied only when ``split == "train"`` (or a record list is passed with a
    policy), each sample drawing from its own ``(seed, epoch, position)`` stream.
    """
    if batch_size < 1:
        raise ValueError("batch_size must be >= 1")
    if isinstance(split, str):
        records = index.split(split)
        if split != "train":
            policy = None
    else:
        records = list(split)
    seed = 0 if shuffle_seed is None else shuffle_seed
    order = np.arange(len(records))
    if shuffle_seed is not None:
        order = np.random.default_rng(np.random.SeedSequence([shuffle_seed, epoch])).permutation(len(records))
    for start in range(0, len(order), batch_size):
        chunk = order[start:start + batch_size]
        xs, ys = [], []
        for pos in chunk:
            rec = records[pos]
            rng = sample_rng(seed, epoch, int(pos)) if policy is not None else None
            xs.append(load_sample(index, rec, input_size, policy, rng, cache))
            ys.append(rec.label)
        yield np.stack(xs).astype(dtype, copy=False), np.asarray(ys, dtype=np.int64)


# -- synthetic data -------------------------------------------------------------------

CLASS_COLORS = np.array([
    [0.85, 0.25, 0.20], [0.20, 0.70, 0.25], [0.20, 0.35, 0.85],
    [0.85, 0.80, 0.20], [0.70, 0.30, 0.80], [0.25, 0.80, 0.80],
    [0.55, 0.55, 0.55], [0.95, 0.55, 0.15],
])


def synthetic_image(label: int, size: Tuple[int, int], rng: np.random.Generator) -> np.ndarray:
    """Class-colored structured noise: a class tint, class-specific stripes, pixel noise."""
    h, w = size
    color = CLASS_COLORS[label % len(CLASS_COLORS)]
    yy, xx = np.mgrid[0:h, 0:w] / max(h, w)
    angle = math.pi * label / 5.0 + rng.normal(0, 0.1)
    freq = 6.0 + 2.0 * label
    phase = rng.uniform(0, 2 * math.pi)
    stripes = 0.5 + 0.5 * np.sin(2 * math.pi * freq * (xx * math.cos(angle) + yy * math.sin(angle)) + phase)
    blobs = ndimage.gaussian_filter(rng.random((h, w)), sigma=max(h, w) / 40.0)
    blobs = (blobs - blobs.min()) / (np.ptp(blobs) + 1e-12)
    base = 0.55 * color[:, None, None] + 0.25 * stripes[None] * color[:, None, None] + 0.1 * blobs[None]
    img = base + rng.normal(0, 0.05, size=(3, h, w))
    return np.clip(img, 0.0, 1.0).astype(np.float32)


def make_synthetic_dataset(
    root: str,
    per_class,
    num_classes: int = 5,
    size: Tuple[int, int] = (240, 240),
    seed: int = 0,
    fmt: str = "ppm",
    class_names: Optional[Sequence[str]] = None,
) -> List[str]:
    """Write an AIDER-layout tree of synthetic images; returns the class names.

    ``per_class`` is one count for every class or a count per class.
    """
    names = list(class_names) if class_names is not None else [f"class{i}" for i in range(num_classes)]
    counts = [per_class] * len(names) if isinstance(per_class, int) else list(per_class)
    if len(counts) != len(names):
        raise ValueError("need one count per class")
    for label, (name, n) in enumerate(zip(names, counts)):
        d = os.path.join(root, name)
        os.makedirs(d, exist_ok=True)
        for i in range(n):
            rng = np.random.default_rng(np.random.SeedSequence([seed, label, i]))
            img = synthetic_image(label, size, rng)
            save_image(os.path.join(d, f"{i:05d}.{fmt}"), img)
    return names


_PLACEHOLDER_PPM = b"P6\n1 1\n255\n\x00\x00\x00"


def make_placeholder_tree(root: str, counts: Dict[str, Dict[str, int]] | Dict[str, int]) -> None:
    """Create 1x1 PPM files in either layout; used to check split bookkeeping.

    ``counts`` maps class -> total (aider layout) or split -> class -> count
    (aiderv2 layout).
    """
    for key, value in counts.items():
        if isinstance(value, dict):
            for cname, n in value.items():
                _placeholders(os.path.join(root, key, cname), n)
        else:
            _placeholders(os.path.join(root, key), value)


def _placeholders(directory: str, n: int) -> None:
    os.makedirs(directory, exist_ok=True)
    for i in range(n):
        with open(os.path.join(directory, f"{i:05d}.ppm"), "wb") as f:
            f.write(_PLACEHOLDER_PPM)
