"""Dataset ingestion (IDX files, synthetic shapes) and stratified attack pair plans."""
from __future__ import annotations

import gzip
import hashlib
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, Iterator, List, Optional, Tuple

import numpy as np

IMAGE_MAGIC = 0x00000803
LABEL_MAGIC = 0x00000801


class IdxFormatError(ValueError):
    pass


class IdxMagicError(IdxFormatError):
    pass


class IdxTruncatedError(IdxFormatError):
    pass


class IdxCountMismatchError(IdxFormatError):
    pass


class InsufficientClassMembers(ValueError):
    pass


@dataclass
class DatasetSplit:
    images: np.ndarray  # (N, C, H, W) in [0, 1], or (N, 2) for point data
    labels: np.ndarray
    split: str = "train"
    provenance: Dict[str, str] = field(default_factory=dict)

    def __post_init__(self):
        self.images = np.asarray(self.images, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if len(self.images) != len(self.labels):
            raise ValueError(f"{len(self.images)} images but {len(self.labels)} labels")
        if self.images.size and (self.images.min() < 0 or self.images.max() > 1):
            raise ValueError("pixel values must lie in [0, 1]")

    def __len__(self) -> int:
        return len(self.labels)

    def subset(self, idx, split: Optional[str] = None) -> "DatasetSplit":
        idx = np.asarray(idx)
        return DatasetSplit(self.images[idx], self.labels[idx], split or self.split, dict(self.provenance))

    @property
    def classes(self) -> np.ndarray:
        return np.unique(self.labels)


def _read_bytes(path) -> bytes:
    raw = Path(path).read_bytes()
    return gzip.decompress(raw) if raw[:2] == b"\x1f\x8b" else raw


def _parse_idx(raw: bytes, magic: int, path) -> np.ndarray:
    if len(raw) < 4:
        raise IdxTruncatedError(f"{path}: file too short for an IDX header ({len(raw)} bytes)")
    got = int.from_bytes(raw[:4], "big")
    if got != magic:
        raise IdxMagicError(f"{path}: magic 0x{got:08x}, expected 0x{magic:08x}")
    ndim = raw[3]
    header = 4 + 4 * ndim
    if len(raw) < header:
        raise IdxTruncatedError(f"{path}: truncated dimension header")
    dims = tuple(int.from_bytes(raw[4 + 4 * i: 8 + 4 * i], "big") for i in range(ndim))
    count = int(np.prod(dims))
    if len(raw) < header + count:
        raise IdxTruncatedError(f"{path}: payload has {len(raw) - header} bytes, header promises {count}")
    return np.frombuffer(raw, dtype=np.uint8, count=count, offset=header).reshape(dims)


def load_idx(images_path, labels_path, split: str = "test") -> DatasetSplit:
    """Read an IDX image/label pair (optionally gzipped); pixels rescaled by 1/255."""
    img_raw, lab_raw = _read_bytes(images_path), _read_bytes(labels_path)
    images = _parse_idx(img_raw, IMAGE_MAGIC, images_path)
    labels = _parse_idx(lab_raw, LABEL_MAGIC, labels_path)
    if len(images) != len(labels):
        raise IdxCountMismatchError(f"{len(images)} images vs {len(labels)} labels")
    provenance = {
        "images": str(images_path), "labels": str(labels_path),
        "images_sha256": hashlib.sha256(img_raw).hexdigest(),
        "labels_sha256": hashlib.sha256(lab_raw).hexdigest(),
    }
    return DatasetSplit(images[:, None].astype(np.float64) / 255.0, labels, split, provenance)


def write_idx(path, array: np.ndarray, magic: int) -> Path:
    """Inverse of the parser, for fixtures and exports."""
    array = np.asarray(array, dtype=np.uint8)
    header = magic.to_bytes(4, "big") + b"".join(int(d).to_bytes(4, "big") for d in array.shape)
    path = Path(path)
    path.write_bytes(header + array.tobytes())
    return path


# synthetic data ---------------------------------------------------------------

def _shape_mask(kind: int, yy, xx, size: float, thick: float) -> np.ndarray:
    """Signed-distance-like field, positive inside; coordinates centred on the shape."""
    ay, ax = np.abs(yy), np.abs(xx)
    r = np.hypot(yy, xx)
    if kind == 0:  # filled square
        return size - np.maximum(ay, ax)
    if kind == 1:  # ring
        return thick - np.abs(r - size)
    if kind == 2:  # disk
        return size - r
    if kind == 3:  # upward triangle
        return np.minimum(size * 0.8 - yy, (yy + size * 0.8) * 0.5 - ax)
    if kind == 4:  # plus
        return np.maximum(np.minimum(thick - ay, size - ax), np.minimum(thick - ax, size - ay))
    if kind == 5:  # horizontal bars
        return np.minimum(size - ax, thick - np.abs(np.abs(yy) - size * 0.6))
    if kind == 6:  # vertical bars
        return np.minimum(size - ay, thick - np.abs(np.abs(xx) - size * 0.6))
    if kind == 7:  # diagonal cross
        d1, d2 = np.abs(yy - xx) / np.sqrt(2), np.abs(yy + xx) / np.sqrt(2)
        return np.minimum(size - np.maximum(ay, ax), thick - np.minimum(d1, d2))
    if kind == 8:  # hollow square
        return thick - np.abs(np.maximum(ay, ax) - size)
    # T shape
    top = np.minimum(size - ax, thick - np.abs(yy + size * 0.7))
    stem = np.minimum(thick - ax, np.minimum(size - yy, yy + size * 0.7))
    return np.maximum(top, stem)


SYNTHETIC_KINDS = ("shapes", "points2d")


def make_synthetic(kind: str = "shapes", n: int = 1000, seed: int = 0, n_classes: int = 10,
                   size: int = 28, split: str = "train") -> DatasetSplit:
    """Deterministic labelled data with exactly balanced classes.

    ``shapes``: anti-aliased geometric figures (one class per figure) with
    random position, scale, stroke width and intensity. ``points2d``: 2-D
    Gaussian clusters in the unit square.
    """
    if kind not in SYNTHETIC_KINDS:
        raise ValueError(f"unknown synthetic dataset kind {kind!r}; choose from {SYNTHETIC_KINDS}")
    if n < 1:
        raise ValueError("n must be >= 1")
    if not 1 <= n_classes <= 10:
        raise ValueError("n_classes must lie in [1, 10]")
    rng = np.random.default_rng(seed)
    labels = rng.permutation(np.arange(n) % n_classes)
    prov = {"synthetic": kind, "seed": str(seed), "n": str(n)}
    if kind == "points2d":
        centres = 0.2 + 0.6 * np.random.default_rng((seed, 1)).uniform(size=(n_classes, 2))
        pts = np.clip(centres[labels] + 0.05 * rng.standard_normal((n, 2)), 0.0, 1.0)
        return DatasetSplit(pts, labels, split, prov)
    grid = np.arange(size, dtype=float) - (size - 1) / 2
    images = np.empty((n, 1, size, size))
    for i, lab in enumerate(labels):
        cy, cx = rng.uniform(-2.5, 2.5, size=2)
        scale = rng.uniform(0.55, 0.85) * size / 2.8
        thick = rng.uniform(1.2, 2.2)
        intensity = rng.uniform(0.6, 1.0)
        yy, xx = np.meshgrid(grid - cy, grid - cx, indexing="ij")
        field_ = _shape_mask(int(lab), yy, xx, scale, thick)
        images[i, 0] = intensity / (1.0 + np.exp(-2.5 * field_))
    images[images < 1e-3] = 0.0
    return DatasetSplit(images, labels, split, prov)


# pair selection -----------------------------------------------------------------

@dataclass
class PairSelection:
    ref_ids: List[int]
    target_ids: List[int] = field(default_factory=list)
    inits: int = 0
    stratification: Dict[int, int] = field(default_factory=dict)

    @property
    def mode(self) -> str:
        return "supervised" if self.target_ids else "unsupervised"

    def items(self) -> List[Tuple[int, Optional[int], int]]:
        """Plan as (ref_id, target_id or None, init) triples."""
        if self.target_ids:
            return [(r, t, 0) for r in self.ref_ids for t in self.target_ids]
        return [(r, None, k) for r in self.ref_ids for k in range(self.inits)]

    def __iter__(self) -> Iterator[Tuple[int, Optional[int], int]]:
        return iter(self.items())

    def __len__(self) -> int:
        return len(self.items())


def _stratified(labels, pool, n, rng) -> Tuple[List[int], Dict[int, int]]:
    classes = np.unique(labels)
    if n == 0:
        return [], {}
    base, extra = divmod(n, len(classes))
    bonus = set(rng.permutation(classes)[:extra].tolist())
    chosen, counts = [], {}
    for c in classes:
        want = base + (1 if int(c) in bonus else 0)
        members = pool[labels[pool] == c]
        if len(members) < want:
            raise InsufficientClassMembers(f"class {int(c)} has {len(members)} eligible points, need {want}")
        picked = rng.choice(members, size=want, replace=False)
        chosen.extend(int(i) for i in picked)
        counts[int(c)] = want
    return sorted(chosen), counts


def select_pairs(split: DatasetSplit, n_refs: int, n_targets: int = 0, inits: int = 0,
                 seed: int = 0) -> PairSelection:
    """Class-stratified references; supervised plans cross them with stratified targets."""
    if n_targets and inits:
        raise ValueError("give either n_targets (supervised) or inits (unsupervised), not both")
    rng = np.random.default_rng(seed)
    pool = np.arange(len(split))
    refs, counts = _stratified(split.labels, pool, n_refs, rng)
    targets: List[int] = []
    if n_targets and refs:
        rest = np.setdiff1d(pool, refs)
        targets, _ = _stratified(split.labels, rest, n_targets, rng)
    return PairSelection(refs, targets, inits if not n_targets else 0, counts)
