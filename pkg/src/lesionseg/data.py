"""Synthetic lesion images, PGM/manifest I/O, k-fold splits and augmentation."""

from __future__ import annotations

import csv
import re
import zlib
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
from scipy import ndimage

from .errors import ContractError, FormatError

MANIFEST_FIELDS = ("id", "image_path", "mask_path", "has_lesion")


@dataclass(frozen=True, eq=False)
class Sample:
    id: str
    image: np.ndarray  # (H, W) float64 in [0, 1]
    mask: np.ndarray  # (H, W) uint8 in {0, 1}
    has_lesion: bool

    def __post_init__(self):
        if self.image.shape != self.mask.shape or self.image.ndim != 2:
            raise ContractError(f"sample {self.id}: image {self.image.shape} and mask {self.mask.shape} must match")
        if bool(self.mask.any()) != bool(self.has_lesion):
            raise ContractError(f"sample {self.id}: has_lesion={self.has_lesion} disagrees with its mask")


def sample_rng(seed: int, sample_id: str) -> np.random.Generator:
    return np.random.default_rng([int(seed), zlib.crc32(sample_id.encode("utf-8"))])


# ---------------------------------------------------------------------------
# Generation


def _value_noise(rng: np.random.Generator, h: int, w: int, cell: int = 16) -> np.ndarray:
    gh, gw = h // cell + 2, w // cell + 2
    grid = rng.random((gh, gw))
    rows = np.linspace(0.0, gh - 1.0, h)
    cols = np.linspace(0.0, gw - 1.0, w)
    rr, cc = np.meshgrid(rows, cols, indexing="ij")
    return ndimage.map_coordinates(grid, [rr, cc], order=1)


def _ellipse(rng: np.random.Generator, h: int, w: int) -> np.ndarray:
    """One random filled ellipse as a {0, 1} float array."""
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    a, b = rng.uniform(0.06, 0.15, size=2) * min(h, w)
    cy = rng.uniform(a + 1, h - a - 1)
    cx = rng.uniform(a + 1, w - a - 1)
    theta = rng.uniform(0.0, np.pi)
    dy, dx = yy - cy, xx - cx
    u = dx * np.cos(theta) + dy * np.sin(theta)
    v = -dx * np.sin(theta) + dy * np.cos(theta)
    return ((u / a) ** 2 + (v / b) ** 2 <= 1.0).astype(np.float64)


def _soft(support: np.ndarray) -> np.ndarray:
    return ndimage.gaussian_filter(support, sigma=1.0)


def _background(rng: np.random.Generator, h: int, w: int) -> np.ndarray:
    """Smooth value noise plus 0-2 unlabeled faint ellipses.

    The ellipses have the lesions' shape but a contrast range that only
    partly overlaps theirs, so a faint structure is ambiguous on its own.
    """
    level = rng.uniform(0.15, 0.35)
    bg = level + 0.25 * _value_noise(rng, h, w)
    for _ in range(int(rng.integers(0, 3))):
        bg += rng.uniform(0.05, 0.2) * _soft(_soft(_ellipse(rng, h, w)))
    return bg


def _blobs(rng: np.random.Generator, h: int, w: int) -> np.ndarray:
    """Union of 1-3 random filled ellipses as a {0, 1} float array."""
    support = np.zeros((h, w))
    for _ in range(int(rng.integers(1, 4))):
        support = np.maximum(support, _ellipse(rng, h, w))
    return support


def make_sample(sample_id: str, lesion: bool, size: tuple[int, int], seed: int) -> Sample:
    h, w = size
    rng = sample_rng(seed, sample_id)
    image = _background(rng, h, w)
    mask = np.zeros((h, w), dtype=np.uint8)
    if lesion:
        while not mask.any():
            profile = _soft(_blobs(rng, h, w))
            mask = (profile >= 0.5).astype(np.uint8)
        offset = rng.uniform(0.15, 0.4)
        image = image + offset * _soft(profile)
    image = image + rng.normal(0.0, 0.03, size=(h, w))
    return Sample(sample_id, np.clip(image, 0.0, 1.0), mask, lesion)


def generate_dataset(
    n_lesion: int,
    n_clean: int,
    size: tuple[int, int] = (64, 64),
    seed: int = 0,
    prefix: str = "",
) -> list[Sample]:
    """Deterministic synthetic set: ``n_lesion`` images with lesions, then ``n_clean`` without.

    Each sample draws from its own stream keyed by (seed, id), so any sample
    can be regenerated on its own.
    """
    if n_lesion < 0 or n_clean < 0:
        raise ContractError("sample counts must be nonnegative")
    out = [make_sample(f"{prefix}lesion_{i:04d}", True, size, seed) for i in range(n_lesion)]
    out += [make_sample(f"{prefix}clean_{i:04d}", False, size, seed) for i in range(n_clean)]
    return out


# ---------------------------------------------------------------------------
# PGM (P5, 8-bit)

_HEADER_TOKEN = re.compile(rb"(?:\s|#[^\n]*\n)*(\S+)")


def write_pgm(path, array: np.ndarray) -> None:
    """Write a binary PGM.

    Float arrays are images in [0, 1], stored as round(255 * v).  Integer or
    boolean arrays are masks in {0, 1}, stored as {0, 255}.
    """
    arr = np.asarray(array)
    if arr.ndim != 2:
        raise ContractError(f"PGM needs a 2-D array, got shape {arr.shape}")
    if arr.dtype.kind == "f":
        if np.any(arr < 0.0) or np.any(arr > 1.0) or np.any(np.isnan(arr)):
            raise ContractError("image values must lie in [0, 1]")
        payload = np.round(arr * 255.0).astype(np.uint8)
    else:
        if not np.all((arr == 0) | (arr == 1)):
            raise ContractError("mask values must be 0 or 1")
        payload = arr.astype(np.uint8) * 255
    h, w = arr.shape
    Path(path).write_bytes(b"P5\n%d %d\n255\n" % (w, h) + payload.tobytes())


def read_pgm(path, mask: bool = False) -> np.ndarray:
    """Read a P5 PGM as a float image in [0, 1] or, with ``mask``, a uint8 {0, 1} mask."""
    raw = Path(path).read_bytes()
    if raw[:2] != b"P5":
        raise FormatError(f"{path}: not a binary PGM (magic {raw[:2]!r})")
    pos = 2
    fields = []
    for _ in range(3):
        m = _HEADER_TOKEN.match(raw, pos)
        if m is None or not m.group(1).isdigit():
            raise FormatError(f"{path}: malformed PGM header")
        fields.append(int(m.group(1)))
        pos = m.end()
    width, height, maxval = fields
    if not 0 < maxval < 256 or width < 1 or height < 1:
        raise FormatError(f"{path}: unsupported PGM geometry {width}x{height}, maxval {maxval}")
    if pos >= len(raw) or not raw[pos : pos + 1].isspace():
        raise FormatError(f"{path}: missing whitespace after PGM header")
    payload = raw[pos + 1 :]
    if len(payload) != width * height:
        raise FormatError(f"{path}: expected {width * height} pixel bytes, found {len(payload)}")
    values = np.frombuffer(payload, dtype=np.uint8).reshape(height, width)
    if mask:
        if not np.all((values == 0) | (values == maxval)):
            raise FormatError(f"{path}: mask contains values other than 0 and {maxval}")
        return (values == maxval).astype(np.uint8)
    return values.astype(np.float64) / maxval


# ---------------------------------------------------------------------------
# Manifests


@dataclass(frozen=True)
class ManifestRow:
    id: str
    image_path: str
    mask_path: str
    has_lesion: bool


def write_dataset(samples: Sequence[Sample], out_dir) -> Path:
    """Write images/, masks/ and manifest.csv under ``out_dir``; returns the manifest path."""
    out = Path(out_dir)
    (out / "images").mkdir(parents=True, exist_ok=True)
    (out / "masks").mkdir(parents=True, exist_ok=True)
    rows = []
    for s in samples:
        img_rel, mask_rel = f"images/{s.id}.pgm", f"masks/{s.id}.pgm"
        write_pgm(out / img_rel, s.image)
        write_pgm(out / mask_rel, s.mask)
        rows.append(ManifestRow(s.id, img_rel, mask_rel, s.has_lesion))
    manifest = out / "manifest.csv"
    write_manifest(rows, manifest)
    return manifest


def write_manifest(rows: Iterable[ManifestRow], path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(MANIFEST_FIELDS)
        for r in rows:
            writer.writerow([r.id, r.image_path, r.mask_path, int(r.has_lesion)])


def read_manifest(path) -> list[ManifestRow]:
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or tuple(header) != MANIFEST_FIELDS:
            raise FormatError(f"{path}: manifest header must be {','.join(MANIFEST_FIELDS)}")
        rows = []
        for lineno, rec in enumerate(reader, start=2):
            if len(rec) != len(MANIFEST_FIELDS) or rec[3] not in ("0", "1"):
                raise FormatError(f"{path}:{lineno}: malformed manifest row {rec}")
            rows.append(ManifestRow(rec[0], rec[1], rec[2], rec[3] == "1"))
    ids = [r.id for r in rows]
    if len(set(ids)) != len(ids):
        raise FormatError(f"{path}: duplicate sample ids")
    return rows


def load_samples(manifest_path) -> list[Sample]:
    """Load every manifest row, checking files exist, parse, and agree with has_lesion."""
    manifest_path = Path(manifest_path)
    base = manifest_path.parent
    samples = []
    for row in read_manifest(manifest_path):
        img_path, mask_path = base / row.image_path, base / row.mask_path
        for p in (img_path, mask_path):
            if not p.is_file():
                raise FormatError(f"{manifest_path}: missing file {p} for sample {row.id}")
        image = read_pgm(img_path)
        mask = read_pgm(mask_path, mask=True)
        try:
            samples.append(Sample(row.id, image, mask, row.has_lesion))
        except ContractError as exc:
            raise FormatError(f"{manifest_path}: {exc}") from exc
    return samples


# ---------------------------------------------------------------------------
# Folds


@dataclass(frozen=True)
class FoldSplit:
    assignments: dict[str, int]
    k: int

    def val_ids(self, fold: int) -> list[str]:
        return sorted(i for i, f in self.assignments.items() if f == fold)

    def train_ids(self, fold: int) -> list[str]:
        return sorted(i for i, f in self.assignments.items() if f != fold)


def make_folds(ids: Sequence[str], k: int = 5, seed: int = 0) -> FoldSplit:
    """Seeded shuffle then round-robin: fold sizes differ by at most one."""
    ids = list(ids)
    if len(set(ids)) != len(ids):
        raise ContractError("fold ids must be unique")
    if k < 2 or len(ids) < k:
        raise ContractError(f"need k >= 2 and at least k ids, got k={k} with {len(ids)} ids")
    order = sorted(ids)
    perm = np.random.default_rng(seed).permutation(len(order))
    return FoldSplit({order[p]: pos % k for pos, p in enumerate(perm)}, k)


# ---------------------------------------------------------------------------
# Augmentation


def augment(sample: Sample, rng: np.random.Generator) -> Sample:
    """Random flips, a multiple-of-90 rotation and a brightness shift.

    Draw order is fixed (h-flip, v-flip, rotation, brightness) so a stub
    generator can force any combination.  Geometric transforms are pixel
    permutations applied identically to image and mask.
    """
    image, mask = sample.image, sample.mask
    if rng.random() < 0.5:
        image, mask = image[:, ::-1], mask[:, ::-1]
    if rng.random() < 0.5:
        image, mask = image[::-1, :], mask[::-1, :]
    k = int(rng.integers(0, 4))
    if image.shape[0] != image.shape[1]:
        k -= k % 2  # quarter turns would change the shape of a non-square image
    if k:
        image, mask = np.rot90(image, k), np.rot90(mask, k)
    shift = float(rng.uniform(-0.1, 0.1))
    image = np.clip(image + shift, 0.0, 1.0) if shift else image
    mask = np.ascontiguousarray(mask)
    return Sample(sample.id, np.ascontiguousarray(image), mask, bool(mask.any()))


def stack(samples: Sequence[Sample]) -> tuple[np.ndarray, np.ndarray]:
    """(N, 1, H, W) float image and mask batches."""
    images = np.stack([s.image for s in samples])[:, None].astype(np.float64)
    masks = np.stack([s.mask for s in samples])[:, None].astype(np.float64)
    return images, masks
