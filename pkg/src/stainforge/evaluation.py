"""Transfer quality metrics and the evaluation report writer.

Three complementary measurements: a deep-feature perceptual distance between
two images, a Gram-statistics distance from a transformed image to the
reference stain domain, and the content distance of a transformed image to its
input. `evaluate_run` applies a generator checkpoint to test tiles and writes a
JSON report, a per-tile CSV and a side-by-side comparison figure.
"""

import csv
import json
from pathlib import Path

import numpy as np
import torch

from .backbone import gram
from .generator import load_generator
from .losses import content_loss, style_layer_loss
from .patches import patch_from_tensor


def _single_stack(patch, backbone, layers):
    with torch.no_grad():
        return backbone.extract_features(patch.to_tensor().unsqueeze(0), list(layers))


def perceptual_distance(a, b, backbone):
    """Mean squared difference of channel-unit-normalized style-layer activations.

    An unweighted cousin of learned deep perceptual metrics: each spatial
    position's channel vector is normalized to unit length before comparison,
    then squared differences are averaged within and across layers. Symmetric,
    non-negative, zero on identical inputs.
    """
    if a.pixels.shape != b.pixels.shape:
        raise ValueError(f"dimension mismatch: {a.pixels.shape} vs {b.pixels.shape}")
    layers = backbone.style_layers
    fa = _single_stack(a, backbone, layers)
    fb = _single_stack(b, backbone, layers)
    dists = []
    for name in layers:
        xa, xb = fa.layers[name][0], fb.layers[name][0]  # (N, M)
        na = xa / (xa.norm(dim=0, keepdim=True) + 1e-10)
        nb = xb / (xb.norm(dim=0, keepdim=True) + 1e-10)
        dists.append(((na - nb) ** 2).mean())
    return float(torch.stack(dists).mean())


def _mean_reference_grams(ref_stacks, layers):
    out = {}
    for name in layers:
        grams = [gram(stack.single(name), name) for stack in ref_stacks]
        mean_values = torch.stack([g.values for g in grams]).mean(dim=0)
        g0 = grams[0]
        out[name] = type(g0)(
            values=mean_values, layer_name=name, n_maps=g0.n_maps, spatial_size=g0.spatial_size
        )
    return out


def style_distance_from_stacks(t_stack, ref_stacks, layers):
    """Mean per-layer style distance between t's Grams and the mean reference Grams."""
    mean_grams = _mean_reference_grams(ref_stacks, layers)
    dists = []
    for name in layers:
        g_t = gram(t_stack.single(name), name)
        dists.append(style_layer_loss(mean_grams[name], g_t))
    return float(torch.stack(dists).mean())


def style_distance_to_domain(t, refs, backbone):
    """Gram-statistics distance from a patch to a set of reference-stain patches."""
    if not refs:
        raise ValueError("reference set must be non-empty")
    layers = backbone.style_layers
    with torch.no_grad():
        t_stack = _single_stack(t, backbone, layers)
        ref_stacks = [_single_stack(r, backbone, layers) for r in refs]
        return style_distance_from_stacks(t_stack, ref_stacks, layers)


def content_distance(a, b, backbone):
    """Content-layer squared-difference distance between two patches."""
    if a.pixels.shape != b.pixels.shape:
        raise ValueError(f"dimension mismatch: {a.pixels.shape} vs {b.pixels.shape}")
    layer = backbone.content_layer
    fa = _single_stack(a, backbone, [layer]).single(layer)
    fb = _single_stack(b, backbone, [layer]).single(layer)
    return float(content_loss(fa, fb))


def _aggregate(values):
    arr = np.asarray(values, dtype=np.float64)
    return {"mean": float(arr.mean()), "std": float(arr.std())}


def _comparison_figure(rows_images, path):
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    n = len(rows_images)
    fig, axes = plt.subplots(n, 3, figsize=(9, 3 * n), squeeze=False)
    titles = ("input", "transformed", "nearest reference")
    for i, images in enumerate(rows_images):
        for j, (img, title) in enumerate(zip(images, titles)):
            ax = axes[i][j]
            ax.imshow(img.pixels)
            ax.set_axis_off()
            if i == 0:
                ax.set_title(title)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def evaluate_run(checkpoint_path, tiles, refs, out_dir, backbone):
    """Apply a generator checkpoint to test tiles and write the evaluation report.

    Writes report.json, per_tile.csv and comparison_grid.png into `out_dir`;
    returns the report dict.
    """
    if not tiles:
        raise ValueError("no test tiles to evaluate")
    if not refs:
        raise ValueError("reference set must be non-empty")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)

    gen = load_generator(checkpoint_path)
    gen.eval()

    per_tile = []
    figure_rows = []
    for tile in tiles:
        with torch.no_grad():
            t = gen(tile.to_tensor().unsqueeze(0)).transformed[0]
        transformed = patch_from_tensor(t, source_id=tile.source_id, tile_coords=tile.tile_coords)
        perceptual = [perceptual_distance(transformed, r, backbone) for r in refs]
        nearest = refs[int(np.argmin(perceptual))]
        per_tile.append(
            {
                "tile": tile.source_id,
                "perceptual_to_ref_domain": float(np.mean(perceptual)),
                "style_distance": style_distance_to_domain(transformed, refs, backbone),
                "content_distance_to_input": content_distance(transformed, tile, backbone),
            }
        )
        figure_rows.append((tile, transformed, nearest))

    metrics = ("perceptual_to_ref_domain", "style_distance", "content_distance_to_input")
    report = {
        "per_tile": per_tile,
        "aggregates": {m: _aggregate([row[m] for row in per_tile]) for m in metrics},
    }
    (out_dir / "report.json").write_text(json.dumps(report, indent=2) + "\n")
    with open(out_dir / "per_tile.csv", "w", newline="") as f:
        writer = csv.DictWriter(f, fieldnames=("tile",) + metrics)
        writer.writeheader()
        writer.writerows(per_tile)
    _comparison_figure(figure_rows, out_dir / "comparison_grid.png")
    return report
