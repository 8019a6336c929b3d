"""Patch extraction, content-based pairing and batch serving.

Large source rasters are cut into non-overlapping square tiles, input-stain
tiles are matched to reference-stain tiles by deep-feature content similarity,
and the resulting paired dataset is served as seeded, reproducible batches.
"""

import json
import re
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
from PIL import Image

TRAIN_TILE_SIZE = 512


class ImageTooSmallError(ValueError):
    pass


class ChannelMismatchError(ValueError):
    pass


@dataclass(frozen=True)
class Patch:
    """An RGB patch with float pixels in [0, 1], shape (H, W, 3)."""

    pixels: np.ndarray
    source_id: str
    tile_coords: tuple = (0, 0)

    def __post_init__(self):
        px = self.pixels
        if px.ndim != 3 or px.shape[2] != 3:
            raise ChannelMismatchError(f"expected HxWx3 RGB array, got shape {px.shape}")
        if not np.isfinite(px).all():
            raise ValueError("patch contains non-finite pixels")
        if px.min() < 0.0 or px.max() > 1.0:
            raise ValueError("patch pixels must lie in [0, 1]")

    @property
    def height(self):
        return self.pixels.shape[0]

    @property
    def width(self):
        return self.pixels.shape[1]

    def to_tensor(self):
        """Return a (3, H, W) float32 torch tensor."""
        return torch.from_numpy(np.ascontiguousarray(self.pixels.transpose(2, 0, 1))).float()


def patch_from_tensor(t, source_id, tile_coords=(0, 0), clamp=True):
    """Build a Patch from a (3, H, W) torch tensor, optionally clamping to [0, 1]."""
    arr = t.detach().cpu().numpy().transpose(1, 2, 0)
    if clamp:
        arr = np.clip(arr, 0.0, 1.0)
    return Patch(arr.astype(np.float32), source_id=source_id, tile_coords=tile_coords)


def tile_image(image, tile_size, source_id="image", magnification_note=""):
    """Cut an RGB raster into non-overlapping tiles in row-major order.

    `image` is an (H, W, 3) array, either uint8 or float in [0, 1]. Border
    remainders that do not fill a whole tile are discarded; no padding is
    applied. `magnification_note` is carried through to manifests only, the
    pipeline never resamples.
    """
    if tile_size <= 0:
        raise ValueError("tile_size must be positive")
    image = np.asarray(image)
    if image.ndim != 3 or image.shape[2] != 3:
        raise ChannelMismatchError(f"expected HxWx3 RGB raster, got shape {image.shape}")
    h, w = image.shape[:2]
    if h < tile_size or w < tile_size:
        raise ImageTooSmallError(
            f"image {h}x{w} too small for tile size {tile_size}"
        )
    if image.dtype == np.uint8:
        image = image.astype(np.float32) / 255.0
    else:
        image = image.astype(np.float32)
    patches = []
    for row in range(h // tile_size):
        for col in range(w // tile_size):
            block = image[
                row * tile_size : (row + 1) * tile_size,
                col * tile_size : (col + 1) * tile_size,
            ]
            patches.append(Patch(block.copy(), source_id=source_id, tile_coords=(row, col)))
    return patches


def load_image(path):
    """Load a PNG/TIFF raster as an (H, W, 3) uint8 array."""
    with Image.open(path) as im:
        if im.mode != "RGB":
            im = im.convert("RGB")
        return np.asarray(im)


def load_patch(path):
    """Load a saved patch PNG back as a Patch.

    Filenames in the `{source_id}_r{row}_c{col}.png` convention round-trip
    their tile coordinates; anything else gets coordinates (0, 0).
    """
    arr = load_image(path).astype(np.float32) / 255.0
    stem = Path(path).stem
    m = re.fullmatch(r"(.+)_r(\d+)_c(\d+)", stem)
    if m:
        return Patch(arr, source_id=m.group(1), tile_coords=(int(m.group(2)), int(m.group(3))))
    return Patch(arr, source_id=stem)


def patch_filename(patch):
    row, col = patch.tile_coords
    return f"{patch.source_id}_r{row}_c{col}.png"


def save_patch(patch, out_dir):
    """Write a patch as 8-bit PNG named {source_id}_r{row}_c{col}.png; returns the path."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    path = out_dir / patch_filename(patch)
    arr = np.clip(np.rint(patch.pixels * 255.0), 0, 255).astype(np.uint8)
    Image.fromarray(arr, mode="RGB").save(path)
    return path


def content_similarity(a, b, backbone):
    """Cosine similarity of spatially average-pooled content-layer features.

    Symmetric in its arguments and robust to global color shifts, which is what
    makes it usable for matching tissue content across stains.
    """
    if a.pixels.shape != b.pixels.shape:
        raise ValueError(
            f"dimension mismatch: {a.pixels.shape} vs {b.pixels.shape}"
        )
    with torch.no_grad():
        batch = torch.stack([a.to_tensor(), b.to_tensor()])
        stack = backbone.extract_features(batch, [backbone.content_layer])
        feats = stack.layers[backbone.content_layer]  # (2, N, M)
        pooled = feats.mean(dim=2)
    va, vb = pooled[0], pooled[1]
    denom = va.norm() * vb.norm()
    if denom == 0:
        return 0.0
    return float(torch.dot(va, vb) / denom)


@dataclass(frozen=True)
class PairedDataset:
    """Content-matched (input, reference) patch pairs with their match scores."""

    pairs: tuple = field(default_factory=tuple)
    pairing_scores: tuple = field(default_factory=tuple)

    def __post_init__(self):
        if len(self.pairs) < 1:
            raise ValueError("paired dataset must contain at least one pair")
        if len(self.pairs) != len(self.pairing_scores):
            raise ValueError("pairs and pairing_scores lengths differ")
        shape = self.pairs[0][0].pixels.shape
        for p, r in self.pairs:
            if p.pixels.shape != shape or r.pixels.shape != shape:
                raise ValueError("all patches in a dataset must share dimensions")

    def __len__(self):
        return len(self.pairs)


def build_pairs(inputs, references, k, backbone):
    """Pair k input patches with their most content-similar reference patches.

    Each candidate input is scored against every reference; the k inputs with
    the strongest best-match scores are kept (score ties broken by input index,
    reference ties by lowest reference index). Deterministic for fixed inputs.
    """
    if not inputs or not references:
        raise ValueError("inputs and references must be non-empty")
    if k < 1 or k > len(inputs):
        raise ValueError(f"k must be in [1, {len(inputs)}], got {k}")
    best = []
    for i, p in enumerate(inputs):
        scores = np.array([content_similarity(p, r, backbone) for r in references])
        j = int(np.argmax(scores))  # argmax takes the lowest index on ties
        best.append((i, j, float(scores[j])))
    best.sort(key=lambda t: (-t[2], t[0]))
    chosen = sorted(best[:k], key=lambda t: t[0])
    pairs = tuple((inputs[i], references[j]) for i, j, _ in chosen)
    scores = tuple(s for _, _, s in chosen)
    return PairedDataset(pairs=pairs, pairing_scores=scores)


def write_pair_manifest(path, dataset, input_dir, reference_dir):
    """Write the pairing manifest as a JSON array of {input_path, reference_path, score}."""
    rows = [
        {
            "input_path": str(Path(input_dir) / patch_filename(p)),
            "reference_path": str(Path(reference_dir) / patch_filename(r)),
            "score": score,
        }
        for (p, r), score in zip(dataset.pairs, dataset.pairing_scores)
    ]
    Path(path).write_text(json.dumps(rows, indent=2) + "\n")


def read_pair_manifest(path):
    """Load a pairing manifest back into a PairedDataset."""
    rows = json.loads(Path(path).read_text())
    if not isinstance(rows, list) or not rows:
        raise ValueError(f"{path}: manifest must be a non-empty JSON array")
    pairs = []
    scores = []
    for row in rows:
        pairs.append((load_patch(row["input_path"]), load_patch(row["reference_path"])))
        scores.append(float(row["score"]))
    return PairedDataset(pairs=tuple(pairs), pairing_scores=tuple(scores))


def epoch_batches(dataset, batch_size, seed, epoch=0):
    """Yield one epoch of shuffled batches of (input, reference) pairs.

    The permutation is a pure function of (seed, epoch), so any epoch's batch
    order can be reproduced without replaying earlier epochs. The final partial
    batch is kept.
    """
    if batch_size < 1:
        raise ValueError("batch_size must be >= 1")
    rng = np.random.default_rng([seed, epoch])
    order = rng.permutation(len(dataset))
    for start in range(0, len(order), batch_size):
        idx = order[start : start + batch_size]
        yield [dataset.pairs[i] for i in idx]


def make_batches(dataset, batch_size, seed):
    """Single-epoch batch iterator (see `epoch_batches`)."""
    return epoch_batches(dataset, batch_size, seed, epoch=0)
