"""Synthetic segmentation tasks, PGM ingestion, preprocessing and splits.

Two generators are provided.  The *stripe* task puts a short bright cue near
the left edge and labels the whole row containing it, so pixels far from the
cue can only be segmented by a network whose receptive field reaches the
cue.  The *blob* task is local (soft ellipses) and serves as a control where
plain convolutions already succeed.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np

from .errors import ConfigError, DataError

CUE_LENGTH = 5
NOISE_MAX = 0.3


@dataclass(frozen=True)
class Sample:
    image: np.ndarray  # [C, H, W] float32 in [0, 1]
    mask: np.ndarray  # [H, W] int64 labels
    group_id: str


@dataclass(frozen=True)
class Dataset:
    samples: tuple[Sample, ...]
    num_classes: int = 2

    def __len__(self) -> int:
        return len(self.samples)

    def __iter__(self) -> Iterator[Sample]:
        return iter(self.samples)

    def __getitem__(self, i) -> Sample:
        return self.samples[i]

    def images(self, idx: Sequence[int] | None = None) -> np.ndarray:
        src = self.samples if idx is None else [self.samples[i] for i in idx]
        return np.stack([s.image for s in src]).astype(np.float32)

    def masks(self, idx: Sequence[int] | None = None) -> np.ndarray:
        src = self.samples if idx is None else [self.samples[i] for i in idx]
        return np.stack([s.mask for s in src]).astype(np.int64)


# ---------------------------------------------------------------- generators


def gen_stripe_task(n: int, H: int = 64, W: int = 64, seed: int = 0) -> Dataset:
    """Noise images with a length-5 cue near the left edge; the cue's row is the mask."""
    if H < 16 or W < 16:
        raise ConfigError(f"stripe task needs H, W >= 16, got {H}x{W}")
    rng = np.random.default_rng(seed)
    samples = []
    for i in range(n):
        img = rng.uniform(0.0, NOISE_MAX, size=(1, H, W)).astype(np.float32)
        row = int(rng.integers(0, H))
        col = int(rng.integers(0, 4))
        img[0, row, col:col + CUE_LENGTH] = 1.0
        mask = np.zeros((H, W), dtype=np.int64)
        mask[row] = 1
        samples.append(Sample(img, mask, f"stripe-{i:05d}"))
    return Dataset(tuple(samples))


def stripe_oracle(image: np.ndarray) -> np.ndarray:
    """Analytic segmenter for the stripe task: label the row holding the cue."""
    img = image[0] if image.ndim == 3 else image
    row = int(np.argmax((img >= 1.0).sum(axis=1)))
    mask = np.zeros(img.shape, dtype=np.int64)
    mask[row] = 1
    return mask


def gen_blob_task(n: int, H: int = 64, W: int = 64, seed: int = 0) -> Dataset:
    """Soft-edged bright ellipses on noise; the mask is the ellipse interior."""
    if H < 8 or W < 8:
        raise ConfigError(f"blob task needs H, W >= 8, got {H}x{W}")
    rng = np.random.default_rng(seed)
    yy, xx = np.mgrid[0:H, 0:W].astype(np.float64)
    samples = []
    for i in range(n):
        cy, cx = rng.uniform(0.25, 0.75) * H, rng.uniform(0.25, 0.75) * W
        ry, rx = rng.uniform(0.1, 0.25) * H, rng.uniform(0.1, 0.25) * W
        theta = rng.uniform(0, math.pi)
        dy, dx = yy - cy, xx - cx
        u = (dx * math.cos(theta) + dy * math.sin(theta)) / rx
        v = (-dx * math.sin(theta) + dy * math.cos(theta)) / ry
        r = np.sqrt(u * u + v * v)
        blob = 1.0 / (1.0 + np.exp((r - 1.0) * 8.0))
        noise = rng.uniform(0.0, NOISE_MAX, size=(H, W))
        img = np.clip(0.6 * blob + noise, 0.0, 1.0).astype(np.float32)[None]
        samples.append(Sample(img, (r <= 1.0).astype(np.int64), f"blob-{i:05d}"))
    return Dataset(tuple(samples))


TASKS = {"stripe": gen_stripe_task, "blob": gen_blob_task}


def generate(task: str, n: int, H: int = 64, W: int = 64, seed: int = 0) -> Dataset:
    try:
        fn = TASKS[task]
    except KeyError:
        raise ConfigError(f"unknown task {task!r}; expected one of {sorted(TASKS)}") from None
    return fn(n, H, W, seed)


# ---------------------------------------------------------------- preprocessing


def clip_rescale(x, lo: float, hi: float) -> np.ndarray:
    """Clamp to ``[lo, hi]`` and map that interval onto ``[0, 1]``."""
    x = np.asarray(x, dtype=np.float64)
    if hi < lo:
        raise ConfigError(f"clip_rescale: hi ({hi}) < lo ({lo})")
    if hi == lo:
        return np.zeros_like(x, dtype=np.float32)
    return ((np.clip(x, lo, hi) - lo) / (hi - lo)).astype(np.float32)


# ---------------------------------------------------------------- PGM


def _pgm_token(buf: bytes, pos: int) -> tuple[bytes, int]:
    """Next whitespace-delimited header token, skipping ``#`` comments."""
    n = len(buf)
    while pos < n:
        c = buf[pos:pos + 1]
        if c == b"#":
            while pos < n and buf[pos:pos + 1] not in (b"\n", b"\r"):
                pos += 1
        elif c.isspace():
            pos += 1
        else:
            break
    start = pos
    while pos < n and not buf[pos:pos + 1].isspace() and buf[pos:pos + 1] != b"#":
        pos += 1
    if start == pos:
        raise DataError("PGM header ended early", pos)
    return buf[start:pos], pos


def parse_pgm(buf: bytes) -> np.ndarray:
    """Decode a binary (P5) 8-bit PGM into a ``uint8`` array ``[H, W]``."""
    magic, pos = _pgm_token(buf, 0)
    if magic != b"P5":
        raise DataError(f"not a binary PGM (magic {magic!r})", 0)
    fields = []
    for _ in range(3):
        start = pos
        tok, pos = _pgm_token(buf, pos)
        if not tok.isdigit():
            raise DataError(f"bad PGM header field {tok!r}", start)
        fields.append(int(tok))
    width, height, maxval = fields
    if maxval != 255:
        raise DataError(f"only maxval 255 is supported, got {maxval}", pos)
    if width < 1 or height < 1:
        raise DataError(f"bad PGM size {width}x{height}", pos)
    if pos >= len(buf) or not buf[pos:pos + 1].isspace():
        raise DataError("missing whitespace after PGM header", pos)
    pos += 1
    need = width * height
    if len(buf) - pos < need:
        raise DataError(f"truncated PGM payload: need {need} bytes, have {len(buf) - pos}", len(buf))
    return np.frombuffer(buf, dtype=np.uint8, count=need, offset=pos).reshape(height, width).copy()


def encode_pgm(arr: np.ndarray) -> bytes:
    arr = np.asarray(arr)
    if arr.ndim != 2:
        raise DataError(f"PGM needs a 2-D array, got shape {arr.shape}", 0)
    h, w = arr.shape
    return f"P5\n{w} {h}\n255\n".encode("ascii") + np.ascontiguousarray(arr, dtype=np.uint8).tobytes()


def load_pgm_bytes(path) -> np.ndarray:
    return parse_pgm(Path(path).read_bytes())


def load_pgm(path) -> np.ndarray:
    """Image as float32 ``[1, H, W]`` scaled to ``[0, 1]``."""
    return (load_pgm_bytes(path).astype(np.float32) / 255.0)[None]


def load_mask_pgm(path) -> np.ndarray:
    """Label map: 0 stays class 0, other grey levels become 1, 2, ... in increasing order."""
    raw = load_pgm_bytes(path)
    levels = np.unique(raw)
    levels = levels[levels > 0]
    labels = np.zeros(raw.shape, dtype=np.int64)
    for cls, v in enumerate(levels, start=1):
        labels[raw == v] = cls
    return labels


def save_pgm(path, arr) -> None:
    """Write uint8 data (or floats in [0,1], scaled by 255 and rounded)."""
    arr = np.asarray(arr)
    if arr.ndim == 3 and arr.shape[0] == 1:
        arr = arr[0]
    if arr.dtype.kind == "f":
        arr = np.rint(np.clip(arr, 0.0, 1.0) * 255.0)
    Path(path).write_bytes(encode_pgm(arr.astype(np.uint8)))


def mask_to_pgm(mask: np.ndarray, num_classes: int = 2) -> np.ndarray:
    """Spread labels over grey levels so they survive :func:`load_mask_pgm`."""
    step = 255 // max(num_classes - 1, 1)
    return (np.asarray(mask) * step).astype(np.uint8)


# ---------------------------------------------------------------- splits


@dataclass(frozen=True)
class SplitSpec:
    train: float = 0.8
    val: float = 0.1
    test: float = 0.1
    group_aware: bool = True

    def __post_init__(self):
        fr = (self.train, self.val, self.test)
        if any(f < 0 for f in fr) or abs(sum(fr) - 1.0) > 1e-9:
            raise ConfigError(f"split fractions must be >= 0 and sum to 1, got {fr}")

    def to_dict(self) -> dict:
        return {"train": self.train, "val": self.val, "test": self.test, "group_aware": self.group_aware}


def largest_remainder(n: int, fractions: Sequence[float]) -> list[int]:
    """Integer counts summing to ``n`` proportional to ``fractions``."""
    quotas = [f * n for f in fractions]
    counts = [math.floor(q) for q in quotas]
    order = sorted(range(len(quotas)), key=lambda i: (-(quotas[i] - counts[i]), i))
    for i in order[: n - sum(counts)]:
        counts[i] += 1
    return counts


def split(dataset: Dataset, spec: SplitSpec, seed: int = 0) -> tuple[Dataset, Dataset, Dataset]:
    """Shuffle and partition into train/val/test.

    With ``group_aware`` whole groups are assigned, so no ``group_id`` spans
    two partitions.  Each non-zero fraction must receive at least one unit.
    """
    if spec.group_aware:
        groups: dict[str, list[int]] = {}
        for i, s in enumerate(dataset.samples):
            groups.setdefault(s.group_id, []).append(i)
        units = list(groups.values())
    else:
        units = [[i] for i in range(len(dataset))]
    fractions = (spec.train, spec.val, spec.test)
    wanted = sum(1 for f in fractions if f > 0)
    if len(units) < wanted:
        raise ConfigError(f"{len(units)} groups cannot fill {wanted} partitions")
    counts = largest_remainder(len(units), fractions)
    for i, f in enumerate(fractions):
        if f > 0 and counts[i] == 0:
            raise ConfigError(f"partition {i} would be empty with {len(units)} groups")
    perm = np.random.default_rng(seed).permutation(len(units))
    parts, start = [], 0
    for c in counts:
        idx = sorted(j for u in perm[start:start + c] for j in units[u])
        parts.append(Dataset(tuple(dataset.samples[j] for j in idx), dataset.num_classes))
        start += c
    return parts[0], parts[1], parts[2]


# ---------------------------------------------------------------- manifests


def load_manifest(path, num_classes: int = 2) -> Dataset:
    """Read ``[{image_path, mask_path, group_id}, ...]``; paths are relative to the manifest."""
    path = Path(path)
    try:
        entries = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise DataError(f"manifest is not valid JSON: {exc.msg}", exc.pos) from None
    if not isinstance(entries, list):
        raise DataError("manifest must be a JSON list", 0)
    samples = []
    for e in entries:
        if not isinstance(e, dict) or set(e) != {"image_path", "mask_path", "group_id"}:
            raise DataError(f"bad manifest entry {e!r}", 0)
        img = load_pgm(path.parent / e["image_path"])
        mask = load_mask_pgm(path.parent / e["mask_path"])
        if mask.shape != img.shape[1:]:
            raise DataError(f"mask {e['mask_path']} shape {mask.shape} != image {img.shape[1:]}", 0)
        if mask.max(initial=0) >= num_classes:
            raise DataError(f"mask {e['mask_path']} has {mask.max() + 1} classes, expected {num_classes}", 0)
        samples.append(Sample(img, mask, str(e["group_id"])))
    return Dataset(tuple(samples), num_classes)


def write_dataset(dataset: Dataset, out_dir) -> Path:
    """Write images/masks as PGM plus ``manifest.json``; returns the manifest path."""
    out = Path(out_dir)
    (out / "images").mkdir(parents=True, exist_ok=True)
    (out / "masks").mkdir(parents=True, exist_ok=True)
    entries = []
    for i, s in enumerate(dataset.samples):
        img, msk = f"images/{i:05d}.pgm", f"masks/{i:05d}.pgm"
        save_pgm(out / img, s.image[0])
        save_pgm(out / msk, mask_to_pgm(s.mask, dataset.num_classes))
        entries.append({"image_path": img, "mask_path": msk, "group_id": s.group_id})
    manifest = out / "manifest.json"
    manifest.write_text(json.dumps(entries, indent=1) + "\n")
    return manifest
