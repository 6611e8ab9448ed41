"""Dataset plumbing: the binary tensor file format, synthetic elliptical
phantoms with exact analytic masks, mask-safe augmentation, and manifests.

Tensor file layout: magic "ACMT" | u8 version=1 | u8 dtype code (0 = f32) |
u8 rank | u32 dims (little-endian) x rank | raw little-endian f32 payload in
row-major order.
"""

from __future__ import annotations

import os
import struct

import numpy as np

from .engine import EngineError, Tensor

TENSOR_MAGIC = b"ACMT"
TENSOR_VERSION = 1


class FormatError(EngineError):
    pass


class BadMagic(FormatError):
    pass


class BadVersion(FormatError):
    pass


class LengthMismatch(FormatError):
    pass


def write_tensor(path, t) -> None:
    arr = t.data if isinstance(t, Tensor) else np.asarray(t)
    if arr.dtype != np.float32:
        raise FormatError(f"tensor files store f32, got {arr.dtype}")
    header = TENSOR_MAGIC + struct.pack("BBB", TENSOR_VERSION, 0, arr.ndim)
    header += struct.pack(f"<{arr.ndim}I", *arr.shape)
    with open(path, "wb") as f:
        f.write(header + np.ascontiguousarray(arr).astype("<f4").tobytes())


def read_tensor(path) -> Tensor:
    with open(path, "rb") as f:
        buf = f.read()
    if len(buf) < 7:
        raise LengthMismatch(f"{path}: truncated header")
    if buf[:4] != TENSOR_MAGIC:
        raise BadMagic(f"{path}: bad magic {buf[:4]!r}")
    version, code, rank = struct.unpack("BBB", buf[4:7])
    if version != TENSOR_VERSION:
        raise BadVersion(f"{path}: unsupported version {version}")
    if code != 0:
        raise FormatError(f"{path}: unknown dtype code {code}")
    head_end = 7 + 4 * rank
    if len(buf) < head_end:
        raise LengthMismatch(f"{path}: truncated dims")
    dims = struct.unpack(f"<{rank}I", buf[7:head_end])
    size = int(np.prod(dims)) if rank else 1
    if len(buf) != head_end + 4 * size:
        raise LengthMismatch(
            f"{path}: payload is {len(buf) - head_end} bytes, need {4 * size}")
    data = np.frombuffer(buf[head_end:], dtype="<f4").reshape(dims)
    return Tensor(np.ascontiguousarray(data))


# ---------------------------------------------------------------------------
# Synthetic phantoms


def _ellipse_membership(size, cy, cx, ry, rx, theta) -> np.ndarray:
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    dy = yy - cy
    dx = xx - cx
    u = dx * np.cos(theta) + dy * np.sin(theta)
    v = -dx * np.sin(theta) + dy * np.cos(theta)
    return (u / rx) ** 2 + (v / ry) ** 2 <= 1.0


def sample_phantom(rng: np.random.Generator, size: int, num_classes: int):
    """One phantom: noisy dark background plus one ellipse per foreground
    class at a class-specific intensity. Returns (image [3,h,w] f32,
    mask [h,w] f32, ellipse list of (cls, cy, cx, ry, rx, theta))."""
    base = rng.normal(0.2, 0.05, (size, size))
    mask = np.zeros((size, size), np.int64)
    ellipses = []
    for cls in range(1, num_classes):
        member = None
        shrink = 1.0
        for _ in range(200):
            cy, cx = rng.uniform(0.22 * size, 0.78 * size, 2)
            ry, rx = rng.uniform(0.08 * size, 0.18 * size, 2) * shrink
            theta = rng.uniform(0.0, np.pi)
            cand = _ellipse_membership(size, cy, cx, ry, rx, theta)
            if cand.sum() >= 9 and not (mask[cand] != 0).any():
                member = cand
                break
            shrink = max(0.5, shrink * 0.97)
        if member is None:
            # Crowded draw; leave this class out of the image.
            continue
        k = num_classes - 1
        level = 0.45 + (0.5 * (cls - 1) / (k - 1) if k > 1 else 0.0)
        base[member] = level + rng.normal(0.0, 0.03, int(member.sum()))
        mask[member] = cls
        ellipses.append((cls, float(cy), float(cx), float(ry), float(rx),
                         float(theta)))
    img = np.clip(base, 0.0, 1.0).astype(np.float32)
    image = np.repeat(img[None], 3, axis=0)
    return image, mask.astype(np.float32), ellipses


def gen_phantoms(seed: int, count: int, size: int, num_classes: int,
                 out_dir) -> str:
    """Write a deterministic phantom dataset tree; returns the manifest path.

    Index-based split: the first 70% of items are train, the next 10% val,
    the remainder test.
    """
    if size % 16 != 0:
        raise EngineError(f"size must be a multiple of 16, got {size}")
    if num_classes < 2:
        raise EngineError("num_classes must be >= 2")
    rng = np.random.default_rng(seed)
    img_dir = os.path.join(out_dir, "images")
    mask_dir = os.path.join(out_dir, "masks")
    os.makedirs(img_dir, exist_ok=True)
    os.makedirs(mask_dir, exist_ok=True)
    n_train = int(round(0.7 * count))
    n_val = int(round(0.1 * count))
    lines = []
    for i in range(count):
        image, mask, _ = sample_phantom(rng, size, num_classes)
        img_rel = f"images/img_{i:04d}.tns"
        mask_rel = f"masks/mask_{i:04d}.tns"
        write_tensor(os.path.join(out_dir, img_rel), image)
        write_tensor(os.path.join(out_dir, mask_rel), mask)
        split = ("train" if i < n_train else
                 "val" if i < n_train + n_val else "test")
        lines.append(f"{img_rel}\t{mask_rel}\t{split}")
    manifest = os.path.join(out_dir, "manifest.tsv")
    with open(manifest, "w") as f:
        f.write("\n".join(lines) + "\n")
    return manifest


# ---------------------------------------------------------------------------
# Augmentation

AUGMENT_FLAGS = ("hflip", "vflip", "rot90", "noise")


def flip_h(image: np.ndarray, mask: np.ndarray):
    return image[:, :, ::-1].copy(), mask[:, ::-1].copy()


def flip_v(image: np.ndarray, mask: np.ndarray):
    return image[:, ::-1, :].copy(), mask[::-1, :].copy()


def rot90k(image: np.ndarray, mask: np.ndarray, k: int):
    return (np.rot90(image, k, axes=(1, 2)).copy(),
            np.rot90(mask, k, axes=(0, 1)).copy())


def augment(image: np.ndarray, mask: np.ndarray, rng: np.random.Generator,
            flags=AUGMENT_FLAGS):
    """Random mask-safe transform; geometry is a pixel permutation applied to
    both arrays, noise touches the image only."""
    for flag in flags:
        if flag not in AUGMENT_FLAGS:
            raise EngineError(f"unknown augment flag '{flag}'")
    if "hflip" in flags and rng.random() < 0.5:
        image, mask = flip_h(image, mask)
    if "vflip" in flags and rng.random() < 0.5:
        image, mask = flip_v(image, mask)
    if "rot90" in flags:
        image, mask = rot90k(image, mask, int(rng.integers(0, 4)))
    if "noise" in flags:
        image = np.clip(image + rng.normal(0.0, 0.02, image.shape),
                        0.0, 1.0).astype(np.float32)
    return np.ascontiguousarray(image, np.float32), np.ascontiguousarray(mask, np.float32)


# ---------------------------------------------------------------------------
# Manifests


class ManifestError(EngineError):
    pass


def load_manifest(path) -> list:
    """[(image_path, mask_path, split)] with paths resolved to the manifest dir."""
    root = os.path.dirname(os.path.abspath(path))
    entries = []
    with open(path) as f:
        for ln, line in enumerate(f, 1):
            line = line.rstrip("\n")
            if not line:
                continue
            parts = line.split("\t")
            if len(parts) != 3 or parts[2] not in ("train", "val", "test"):
                raise ManifestError(f"{path}:{ln}: bad manifest line {line!r}")
            entries.append((os.path.join(root, parts[0]),
                            os.path.join(root, parts[1]), parts[2]))
    return entries


def load_split(manifest_path, split: str, num_classes: int | None = None):
    """Load one split as [(image [3,h,w], mask [h,w])] with validation."""
    items = []
    shape = None
    for img_path, mask_path, s in load_manifest(manifest_path):
        if s != split:
            continue
        if not os.path.exists(img_path) or not os.path.exists(mask_path):
            raise ManifestError(f"missing file for entry {img_path}")
        image = read_tensor(img_path).data
        mask = read_tensor(mask_path).data
        if image.ndim != 3 or image.shape[0] != 3 or mask.shape != image.shape[1:]:
            raise ManifestError(
                f"bad shapes {image.shape} / {mask.shape} for {img_path}")
        if shape is None:
            shape = image.shape
        elif image.shape != shape:
            raise ManifestError(f"inconsistent shapes in {split} split")
        if num_classes is not None:
            labels = np.rint(mask)
            if (labels != mask).any() or labels.min() < 0 or \
                    labels.max() >= num_classes:
                raise ManifestError(f"mask labels out of range in {mask_path}")
        items.append((image, mask))
    return items
