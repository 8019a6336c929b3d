"""Command-line interface: tile -> pair -> train -> infer -> evaluate -> baseline.

Exit codes: 0 success, 1 runtime failure, 2 usage error. The perceptual
backbone weight file is taken from --weights or the STAINFORGE_WEIGHTS
environment variable.
"""

import json
import sys
from pathlib import Path

import click
import numpy as np
import torch

from . import evaluation, patches, reinhard, training
from .backbone import PerceptualBackbone
from .generator import load_generator, save_generator
from .patches import (
    build_pairs,
    load_image,
    load_patch,
    patch_from_tensor,
    read_pair_manifest,
    save_patch,
    tile_image,
    write_pair_manifest,
)

IMAGE_SUFFIXES = (".png", ".tif", ".tiff", ".jpg", ".jpeg")


def _image_files(directory):
    return sorted(
        p for p in Path(directory).iterdir() if p.suffix.lower() in IMAGE_SUFFIXES
    )


def _load_backbone(weights, expected_sha256=None):
    if weights is None:
        raise click.UsageError(
            "no backbone weights: pass --weights or set STAINFORGE_WEIGHTS"
        )
    try:
        return PerceptualBackbone(weights, expected_sha256=expected_sha256)
    except Exception as e:
        raise click.ClickException(str(e))


weights_option = click.option(
    "--weights",
    envvar="STAINFORGE_WEIGHTS",
    type=click.Path(),
    help="Backbone weight file (defaults to $STAINFORGE_WEIGHTS).",
)


@click.group()
def main():
    """Stain transfer toolkit."""


@main.command()
@click.option("--input", "input_dir", required=True, type=click.Path(exists=True, file_okay=False))
@click.option("--out", "out_dir", required=True, type=click.Path())
@click.option("--size", default=512, show_default=True)
def tile(input_dir, out_dir, size):
    """Cut every raster in --input into non-overlapping tiles."""
    files = _image_files(input_dir)
    if not files:
        click.echo("no input images", err=True)
        sys.exit(2)
    manifest = []
    failures = []
    for path in files:
        try:
            image = load_image(path)
            tiles = tile_image(image, size, source_id=path.stem)
        except Exception as e:
            failures.append(path)
            click.echo(f"skipping {path}: {e}", err=True)
            continue
        for t in tiles:
            out_path = save_patch(t, out_dir)
            manifest.append(
                {
                    "source": str(path),
                    "tile": str(out_path),
                    "row": t.tile_coords[0],
                    "col": t.tile_coords[1],
                }
            )
    (Path(out_dir) / "tiles.json").write_text(json.dumps(manifest, indent=2) + "\n")
    click.echo(f"wrote {len(manifest)} tiles from {len(files) - len(failures)} images")
    if len(failures) == len(files):
        raise click.ClickException("all input images failed")


@main.command()
@click.option("--inputs", "inputs_dir", required=True, type=click.Path(exists=True, file_okay=False))
@click.option("--refs", "refs_dir", required=True, type=click.Path(exists=True, file_okay=False))
@click.option("--k", default=20, show_default=True)
@click.option("--out", "out_path", required=True, type=click.Path())
@weights_option
def pair(inputs_dir, refs_dir, k, out_path, weights):
    """Pair input tiles with their most content-similar reference tiles."""
    backbone = _load_backbone(weights)
    input_patches = [load_patch(p) for p in _image_files(inputs_dir)]
    ref_patches = [load_patch(p) for p in _image_files(refs_dir)]
    try:
        dataset = build_pairs(input_patches, ref_patches, k, backbone)
    except ValueError as e:
        raise click.ClickException(str(e))
    write_pair_manifest(out_path, dataset, inputs_dir, refs_dir)
    click.echo(f"wrote {len(dataset)} pairs to {out_path}")


@main.command()
@click.option("--pairs", "pairs_path", required=True, type=click.Path(exists=True, dir_okay=False))
@click.option("--config", "config_path", type=click.Path(exists=True, dir_okay=False))
@click.option("--out", "run_dir", required=True, type=click.Path())
@click.option("--resume", is_flag=True, help="Continue from the latest checkpoint in --out.")
@weights_option
def train(pairs_path, config_path, run_dir, resume, weights):
    """Train the stain transfer generator on a pairing manifest."""
    backbone = _load_backbone(weights)
    config = training.load_config(config_path) if config_path else training.TrainConfig()
    dataset = read_pair_manifest(pairs_path)
    resume_from = None
    if resume:
        candidates = sorted(Path(run_dir, "checkpoints").glob("step_*.stfg"))
        if not candidates:
            raise click.ClickException(f"--resume given but no checkpoints in {run_dir}")
        resume_from = candidates[-1]
    try:
        trainer = training.fit(
            config, dataset, backbone, run_dir=run_dir, resume_from=resume_from
        )
    except training.DivergenceError as e:
        raise click.ClickException(str(e))
    save_generator(trainer.generator, Path(run_dir) / "generator.stfg")
    click.echo(f"trained {trainer.step} steps; run artifacts in {run_dir}")


@main.command()
@click.option("--checkpoint", required=True, type=click.Path(exists=True, dir_okay=False))
@click.option("--input", "input_dir", required=True, type=click.Path(exists=True, file_okay=False))
@click.option("--out", "out_dir", required=True, type=click.Path())
def infer(checkpoint, input_dir, out_dir):
    """Apply a trained generator to every tile in --input."""
    gen = load_generator(checkpoint)
    gen.eval()
    files = _image_files(input_dir)
    if not files:
        click.echo("no input images", err=True)
        sys.exit(2)
    failures = 0
    for path in files:
        p = load_patch(path)
        try:
            with torch.no_grad():
                t = gen(p.to_tensor().unsqueeze(0)).transformed[0]
        except ValueError as e:
            failures += 1
            click.echo(f"skipping {path}: {e}", err=True)
            continue
        out = patch_from_tensor(t, source_id=p.source_id, tile_coords=p.tile_coords)
        arr = np.clip(np.rint(out.pixels * 255.0), 0, 255).astype(np.uint8)
        Path(out_dir).mkdir(parents=True, exist_ok=True)
        from PIL import Image

        Image.fromarray(arr, mode="RGB").save(Path(out_dir) / path.name)
    if failures == len(files):
        raise click.ClickException("all tiles failed")
    click.echo(f"transformed {len(files) - failures} tiles into {out_dir}")


@main.command()
@click.option("--checkpoint", required=True, type=click.Path(exists=True, dir_okay=False))
@click.option("--tiles", "tiles_dir", required=True, type=click.Path(exists=True, file_okay=False))
@click.option("--refs", "refs_dir", required=True, type=click.Path(exists=True, file_okay=False))
@click.option("--out", "out_dir", required=True, type=click.Path())
@weights_option
def evaluate(checkpoint, tiles_dir, refs_dir, out_dir, weights):
    """Evaluate a generator checkpoint against reference tiles."""
    backbone = _load_backbone(weights)
    tiles = [load_patch(p) for p in _image_files(tiles_dir)]
    refs = [load_patch(p) for p in _image_files(refs_dir)]
    try:
        report = evaluation.evaluate_run(checkpoint, tiles, refs, out_dir, backbone)
    except ValueError as e:
        raise click.ClickException(str(e))
    click.echo(json.dumps(report["aggregates"], indent=2))


@main.command("baseline-reinhard")
@click.option("--input", "input_dir", required=True, type=click.Path(exists=True, file_okay=False))
@click.option("--refs", "refs_dir", required=True, type=click.Path(exists=True, file_okay=False))
@click.option("--out", "out_dir", required=True, type=click.Path())
def baseline_reinhard(input_dir, refs_dir, out_dir):
    """Reinhard LAB mean/std color transfer of input tiles toward the references."""
    ref_files = _image_files(refs_dir)
    if not ref_files:
        raise click.ClickException("no reference images")
    files = _image_files(input_dir)
    if not files:
        click.echo("no input images", err=True)
        sys.exit(2)
    # pooled statistics over all reference tiles
    labs = [reinhard.rgb_to_lab(load_patch(p).pixels).reshape(-1, 3) for p in ref_files]
    all_lab = np.concatenate(labs, axis=0)
    stats = reinhard.LabStats(mean=all_lab.mean(axis=0), std=all_lab.std(axis=0))
    Path(out_dir).mkdir(parents=True, exist_ok=True)
    from PIL import Image

    for path in files:
        out = reinhard.reinhard_transfer(load_patch(path), stats)
        arr = np.clip(np.rint(out.pixels * 255.0), 0, 255).astype(np.uint8)
        Image.fromarray(arr, mode="RGB").save(Path(out_dir) / path.name)
    click.echo(f"transferred {len(files)} tiles into {out_dir}")


if __name__ == "__main__":
    main()
