"""Command-line surface: ipm, finetune, generate, evaluate, run, ablate."""

from __future__ import annotations

import json
import sys
from pathlib import Path

import click

from . import pipeline as pl
from .backends import make_backend
from .checkpoint import load_checkpoint
from .domain import build_target_prompt, read_png, write_png
from .homography import IPMConfig, compute_ipm
from .metrics import best_of_k, default_providers, evaluate_dataset
from .sampler import guided_sample, write_trace_csv


def _fail(exc: Exception) -> None:
    payload = {"error": str(exc), "kind": type(exc).__name__}
    click.echo(json.dumps(payload), err=True)
    sys.exit(1)


_common = [
    click.option("--backend", type=click.Choice(["toy", "pretrained"]), default=None),
    click.option("--seed", type=int, default=None),
    click.option("--config", "config_file", type=click.Path(exists=True), default=None),
    click.option("--trace", is_flag=True, default=None),
]


def common_options(fn):
    for opt in reversed(_common):
        fn = opt(fn)
    return fn


@click.group()
def main():
    """Single-image aerial-view synthesis and evaluation."""


@main.command()
@click.option("--in", "in_path", required=True, type=click.Path(exists=True))
@click.option("--out", "out_path", required=True, type=click.Path())
@click.option("--strength", type=float, default=0.3, show_default=True)
@click.option("--fill", type=click.Choice(["white", "edge"]), default="white", show_default=True)
def ipm(in_path, out_path, strength, fill):
    """Write the perspective remap of an image."""
    try:
        img = read_png(in_path)
        out = compute_ipm(img, IPMConfig(strength=strength, fill=fill))
        write_png(out, out_path)
    except Exception as exc:
        _fail(exc)


@main.command()
@click.option("--image", required=True, type=click.Path(exists=True))
@click.option("--caption", required=True)
@click.option("--out-dir", required=True, type=click.Path())
@common_options
def finetune(image, caption, out_dir, backend, seed, config_file, trace):
    """Two-stage finetune on one image; writes the run-directory artifacts."""
    try:
        config = pl.resolve_config(config_file, {"backend": backend, "seed": seed, "trace": trace})
        be = make_backend(config.backend, seed=config.seed)
        img = pl.preprocess_image(read_png(image), be.image_size)
        result = pl.two_stage_finetune(be, img, caption, config.ipm, config.schedule)
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        write_png(img, out / "input.png")
        files = ["input.png"] + pl.save_finetune_artifacts(out, result, be.adapter_layer_names())
        meta = {"caption": caption, "backend": config.backend, "seed": config.seed,
                "config": pl.config_snapshot(config), "files": files}
        (out / "run.json").write_text(json.dumps(meta, sort_keys=True, indent=2) + "\n")
        click.echo(f"finetune artifacts written to {out}")
    except Exception as exc:
        _fail(exc)


@main.command()
@click.option("--run-dir", required=True, type=click.Path(exists=True))
@click.option("--view-label", default="aerial view", show_default=True)
@click.option("--steps", type=int, default=None)
@click.option("--candidates", type=int, default=None)
@common_options
def generate(run_dir, view_label, steps, candidates, backend, seed, config_file, trace):
    """Sample candidates from a finetuned run directory and select the best."""
    try:
        run_dir = Path(run_dir)
        meta = json.loads((run_dir / "run.json").read_text())
        config = pl.resolve_config(config_file, {
            "backend": backend or meta.get("backend"),
            "seed": seed if seed is not None else meta.get("seed"),
            "steps": steps, "candidates": candidates, "trace": trace})
        be = make_backend(config.backend, seed=config.seed)
        adapter, _ = load_checkpoint(run_dir / "adapter.ckpt")
        be.set_adapter_params(adapter)
        img = read_png(run_dir / "input.png")
        z_source = be.encode_image(img)
        e_target = be.encode_text(build_target_prompt(view_label, meta["caption"]))
        (run_dir / "candidates").mkdir(exist_ok=True)
        cands = []
        for k in range(config.candidates):
            tr = [] if config.trace else None
            z = guided_sample(be, e_target, z_source, config.steps, config.guidance,
                              cfg_scale=config.cfg_scale,
                              seed=config.seed * 1000 + k, trace=tr)
            cand = be.decode_latents(z)
            cands.append(cand)
            write_png(cand, run_dir / f"candidates/cand_{k}.png")
            if tr is not None:
                write_trace_csv(tr, run_dir / f"candidates/cand_{k}_trace.csv")
        best = best_of_k(cands, img, meta["caption"], default_providers(),
                         view_label=view_label)
        write_png(cands[best], run_dir / "selected.png")
        click.echo(f"selected candidate {best} of {config.candidates}")
    except Exception as exc:
        _fail(exc)


@main.command()
@click.option("--manifest", required=True, type=click.Path(exists=True))
@click.option("--generated-dir", required=True, type=click.Path(exists=True))
@click.option("--out", "out_path", required=True, type=click.Path())
def evaluate(manifest, generated_dir, out_path):
    """Metric report for generated images named <row id>.png."""
    try:
        rows = pl.load_manifest(manifest)
        report = evaluate_dataset(rows, generated_dir, default_providers())
        report.to_csv(out_path)
        click.echo(f"wrote {out_path} ({len(report.rows)} rows)")
    except Exception as exc:
        _fail(exc)


def _run_impl(manifest, out_root, arm, backend, seed, config_file, trace):
    config = pl.resolve_config(config_file, {"backend": backend, "seed": seed,
                                             "arm": arm, "trace": trace})
    rows = pl.load_manifest(manifest)
    records = pl.run_manifest(rows, config, out_root)
    for rec in records:
        click.echo(f"{rec.run_id}: selected candidate {rec.selected_index}")


@main.command()
@click.option("--manifest", required=True, type=click.Path(exists=True))
@click.option("--out-root", required=True, type=click.Path())
@common_options
def run(manifest, out_root, backend, seed, config_file, trace):
    """Full pipeline over a manifest: finetune, generate, select, evaluate."""
    try:
        _run_impl(manifest, out_root, None, backend, seed, config_file, trace)
    except Exception as exc:
        _fail(exc)


@main.command()
@click.option("--manifest", required=True, type=click.Path(exists=True))
@click.option("--out-root", required=True, type=click.Path())
@click.option("--arm", required=True,
              type=click.Choice(["no_ipm", "no_guidance", "rotation_augment"]))
@common_options
def ablate(manifest, out_root, arm, backend, seed, config_file, trace):
    """Full pipeline with one ablation arm applied and recorded."""
    try:
        _run_impl(manifest, out_root, arm, backend, seed, config_file, trace)
    except Exception as exc:
        _fail(exc)


if __name__ == "__main__":
    main()
