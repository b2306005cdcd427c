"""Command-line entry point for every pipeline stage.

Global flags: --config (JSON file of per-command option defaults), --seed,
--scale (desk-scale divisor for both networks), --out-dir, --deterministic
(single-threaded bit-exact mode). Per-command flags override the config file,
which overrides built-in defaults.
"""

from __future__ import annotations

import dataclasses
import json
from pathlib import Path

import click

from .adaptation import AdaptConfig, DistillConfig, adapt, distill
from .benchmark import load_benchmark_config, normalize_cohort, run_benchmark
from .checkpoint import file_checksum, load_checkpoint, save_checkpoint, state_checksum
from .cohort import DOMAINS, FAMILIES, gen_cohort, load_cohort, save_cohort
from .harness import emit_loss_scatter, evaluate_model, run_ablation_grid, write_reports
from .mlm import MlmConfig, MlmTrainConfig, finetune_mlm, train_mlm
from .segnet import SegConfig, SegTrainConfig, train_source
from .trainutil import single_thread_determinism, write_loss_csv
from .volio import load_volume, read_nifti, save_volume
from .volume import LabelMask, crop_to_bbox, normalize_intensity, resample, resize_to


@click.group()
@click.option("--config", "config_path", type=click.Path(exists=True), default=None,
              help="JSON file of per-command option defaults.")
@click.option("--seed", type=int, default=0, show_default=True)
@click.option("--scale", type=int, default=1, show_default=True,
              help="Desk-scale divisor applied to both network configs.")
@click.option("--out-dir", type=click.Path(), default="out", show_default=True)
@click.option("--deterministic/--no-deterministic", default=False,
              help="Single-threaded bit-exact mode.")
@click.pass_context
def main(ctx, config_path, seed, scale, out_dir, deterministic):
    """Shape-completion driven domain adaptation pipeline."""
    cfg = json.loads(Path(config_path).read_text()) if config_path else {}
    if deterministic:
        single_thread_determinism(True)
    ctx.obj = {
        "config": cfg,
        "seed": cfg.get("seed", seed),
        "scale": cfg.get("scale", scale),
        "out": Path(out_dir),
        "deterministic": deterministic,
    }
    ctx.obj["out"].mkdir(parents=True, exist_ok=True)


def _opt(ctx, command: str, key: str, cli_value, default):
    """CLI flag > config-file entry > default."""
    if cli_value is not None:
        return cli_value
    return ctx.obj["config"].get(command, {}).get(key, default)


def _write_manifest(ctx, stage: str, inputs: dict, cfg, outputs: dict):
    manifest = {
        "stage": stage,
        "inputs": inputs,
        "config": dataclasses.asdict(cfg) if dataclasses.is_dataclass(cfg) else cfg,
        "seed": ctx.obj["seed"],
        "deterministic": ctx.obj["deterministic"],
        "outputs": outputs,
    }
    path = ctx.obj["out"] / f"{stage}.manifest.json"
    path.write_text(json.dumps(manifest, indent=1) + "\n")


@main.command("gen-cohort")
@click.option("--family", type=click.Choice(sorted(FAMILIES)), required=True)
@click.option("--domain", type=click.Choice(sorted(DOMAINS)), required=True)
@click.option("-n", "--num-cases", type=int, default=None)
@click.option("--name", default=None, help="Output subdirectory (default family_domain).")
@click.pass_context
def gen_cohort_cmd(ctx, family, domain, num_cases, name):
    """Generate a synthetic labeled cohort in the native volume format."""
    n = _opt(ctx, "gen-cohort", "n", num_cases, 8)
    scale = ctx.obj["scale"]
    shape = tuple(s // scale for s in (128, 128, 128))
    cohort = gen_cohort(FAMILIES[family], DOMAINS[domain], n, ctx.obj["seed"], shape=shape)
    dest = ctx.obj["out"] / (name or f"{family}_{domain}")
    save_cohort(cohort, dest)
    click.echo(f"wrote {n} cases to {dest}")


@main.command("preprocess")
@click.option("--image", "image_path", type=click.Path(exists=True), required=True)
@click.option("--mask", "mask_path", type=click.Path(exists=True), default=None)
@click.option("--target-spacing", default=None, help="e.g. 1,1,1 (mm); skip to keep spacing.")
@click.option("--lo", type=float, default=None)
@click.option("--hi", type=float, default=None)
@click.option("--crop-pad", type=int, default=None, help="Cube-crop padding; needs --mask.")
@click.option("--shape", default=None, help="Final H,W,D (e.g. 128,128,128).")
@click.option("--name", default="preprocessed")
@click.pass_context
def preprocess_cmd(ctx, image_path, mask_path, target_spacing, lo, hi, crop_pad, shape, name):
    """Resample, window-normalize, optionally cube-crop, and resize a case."""
    img = load_volume(image_path)
    msk = load_volume(mask_path) if mask_path else None
    if target_spacing:
        sp = tuple(float(x) for x in target_spacing.split(","))
        img = resample(img, sp)
        if msk is not None:
            msk = resample(msk, sp)
    img = normalize_intensity(
        img, _opt(ctx, "preprocess", "lo", lo, -200.0), _opt(ctx, "preprocess", "hi", hi, 400.0)
    )
    if crop_pad is not None:
        if msk is None:
            raise click.UsageError("--crop-pad requires --mask")
        img, msk = crop_to_bbox(img, msk, crop_pad)
    if shape:
        target = tuple(int(x) for x in shape.split(","))
        img = resize_to(img, target)
        if msk is not None:
            msk = resize_to(msk, target)
    out = ctx.obj["out"]
    paths = {"image": str(save_volume(img, out / f"{name}_img"))}
    if msk is not None:
        paths["mask"] = str(save_volume(msk, out / f"{name}_msk"))
    click.echo(json.dumps(paths))


def _load_masks(cohort_dir):
    return load_cohort(cohort_dir).masks


@main.command("train-mlm")
@click.option("--cohort", "cohort_dir", type=click.Path(exists=True), required=True,
              help="Cohort directory; only the label masks are used.")
@click.option("--iters", type=int, default=None)
@click.option("--batch", type=int, default=None)
@click.option("--lr", type=float, default=None)
@click.pass_context
def train_mlm_cmd(ctx, cohort_dir, iters, batch, lr):
    """Pretrain the label-mask in-painter."""
    cfg = MlmConfig().scaled(ctx.obj["scale"])
    hyper = MlmTrainConfig(
        iters=_opt(ctx, "train-mlm", "iters", iters, 200),
        batch=_opt(ctx, "train-mlm", "batch", batch, 4),
        lr=_opt(ctx, "train-mlm", "lr", lr, 1.5e-4),
        seed=ctx.obj["seed"],
    )
    state, losses = train_mlm(_load_masks(cohort_dir), cfg, hyper)
    out = ctx.obj["out"]
    ckpt = save_checkpoint(state, out / "mlm.ckpt")
    write_loss_csv(out / "mlm_loss.csv", list(enumerate(losses)), ("iter", "loss"))
    _write_manifest(ctx, "train-mlm", {"cohort": str(cohort_dir)}, hyper,
                    {"mlm.ckpt": state_checksum(state)})
    click.echo(f"trained in-painter -> {ckpt} (final loss {losses[-1]:.5f})")


@main.command("train-seg")
@click.option("--cohort", "cohort_dir", type=click.Path(exists=True), required=True)
@click.option("--iters", type=int, default=None)
@click.option("--batch", type=int, default=None)
@click.option("--lr", type=float, default=None)
@click.option("--normalize/--no-normalize", default=True,
              help="Window-normalize cohort images before training.")
@click.pass_context
def train_seg_cmd(ctx, cohort_dir, iters, batch, lr, normalize):
    """Train the source segmentation network (supervised Dice)."""
    cfg = SegConfig().scaled(ctx.obj["scale"])
    hyper = SegTrainConfig(
        iters=_opt(ctx, "train-seg", "iters", iters, 300),
        batch=_opt(ctx, "train-seg", "batch", batch, 2),
        lr=_opt(ctx, "train-seg", "lr", lr, 1e-3),
        seed=ctx.obj["seed"],
    )
    cohort = load_cohort(cohort_dir)
    if normalize:
        cohort = normalize_cohort(cohort)
    state, losses = train_source(cohort.cases(), cfg, hyper)
    out = ctx.obj["out"]
    ckpt = save_checkpoint(state, out / "source.ckpt")
    write_loss_csv(out / "seg_loss.csv", list(enumerate(losses)), ("iter", "dice_loss"))
    _write_manifest(ctx, "train-seg", {"cohort": str(cohort_dir)}, hyper,
                    {"source.ckpt": state_checksum(state)})
    click.echo(f"trained segmenter -> {ckpt} (final dice loss {losses[-1]:.4f})")


@main.command("distill")
@click.option("--source", "source_ckpt", type=click.Path(exists=True), required=True)
@click.option("--mlm", "mlm_ckpt", type=click.Path(exists=True), required=True)
@click.option("--targets", "target_dir", type=click.Path(exists=True), required=True)
@click.option("--iters", type=int, default=None)
@click.option("--batch", type=int, default=None)
@click.option("--lr", type=float, default=None)
@click.pass_context
def distill_cmd(ctx, source_ckpt, mlm_ckpt, target_dir, iters, batch, lr):
    """Stage 2: shape distillation into the pseudo model."""
    cfg = DistillConfig(
        iters=_opt(ctx, "distill", "iters", iters, 100),
        batch=_opt(ctx, "distill", "batch", batch, 2),
        lr=_opt(ctx, "distill", "lr", lr, 3e-4),
        seed=ctx.obj["seed"],
    )
    source = load_checkpoint(source_ckpt)
    mlm = load_checkpoint(mlm_ckpt)
    targets = normalize_cohort(load_cohort(target_dir)).images
    state, losses = distill(source, mlm, targets, cfg)
    out = ctx.obj["out"]
    ckpt = save_checkpoint(state, out / "pseudo.ckpt")
    write_loss_csv(out / "distill_loss.csv", list(enumerate(losses)), ("iter", "distill_loss"))
    _write_manifest(ctx, "distill",
                    {"source": file_checksum(source_ckpt), "mlm": file_checksum(mlm_ckpt),
                     "targets": str(target_dir)},
                    cfg, {"pseudo.ckpt": state_checksum(state)})
    click.echo(f"distilled pseudo model -> {ckpt}")


@main.command("adapt")
@click.option("--pseudo", "pseudo_ckpt", type=click.Path(exists=True), required=True)
@click.option("--mlm", "mlm_ckpt", type=click.Path(exists=True), required=True)
@click.option("--targets", "target_dir", type=click.Path(exists=True), required=True)
@click.option("--iters", type=int, default=None)
@click.option("--batch", type=int, default=None)
@click.option("--lr", type=float, default=None)
@click.option("--lambda-pseudo", type=float, default=None)
@click.option("--beta", type=float, default=None)
@click.option("--ema-interval", type=int, default=None)
@click.pass_context
def adapt_cmd(ctx, pseudo_ckpt, mlm_ckpt, target_dir, iters, batch, lr, lambda_pseudo,
              beta, ema_interval):
    """Stage 3: dual-loss optimization of the target model."""
    cfg = AdaptConfig(
        iters=_opt(ctx, "adapt", "iters", iters, 200),
        batch=_opt(ctx, "adapt", "batch", batch, 2),
        lr=_opt(ctx, "adapt", "lr", lr, 3e-4),
        lambda_pseudo=_opt(ctx, "adapt", "lambda_pseudo", lambda_pseudo, 1.0),
        beta=_opt(ctx, "adapt", "beta", beta, 0.99),
        ema_interval=_opt(ctx, "adapt", "ema_interval", ema_interval, 100),
        seed=ctx.obj["seed"],
    )
    pseudo = load_checkpoint(pseudo_ckpt)
    mlm = load_checkpoint(mlm_ckpt)
    targets = normalize_cohort(load_cohort(target_dir)).images
    state, log = adapt(pseudo, mlm, targets, cfg)
    out = ctx.obj["out"]
    ckpt = save_checkpoint(state, out / "target.ckpt")
    rows = [(int(r[0]), f"{r[1]:.6f}", f"{r[2]:.6f}", f"{r[3]:.6f}") for r in log]
    write_loss_csv(out / "adapt_loss.csv", rows, ("iter", "l_pseudo", "l_recon", "l_total"))
    _write_manifest(ctx, "adapt",
                    {"pseudo": file_checksum(pseudo_ckpt), "mlm": file_checksum(mlm_ckpt),
                     "targets": str(target_dir)},
                    cfg, {"target.ckpt": state_checksum(state)})
    click.echo(f"adapted target model -> {ckpt}")


@main.command("finetune-mlm")
@click.option("--mlm", "mlm_ckpt", type=click.Path(exists=True), required=True)
@click.option("--support", "support_path", type=click.Path(exists=True), required=True,
              help="Native-format label mask of the new organ family.")
@click.option("--iters", type=int, default=None)
@click.pass_context
def finetune_mlm_cmd(ctx, mlm_ckpt, support_path, iters):
    """One-shot fine-tune of the in-painter on a new organ's label mask."""
    mlm = load_checkpoint(mlm_ckpt)
    support = load_volume(support_path)
    if not isinstance(support, LabelMask):
        raise click.UsageError("--support must be a label mask (kind=mask, dtype=u8)")
    n_iters = _opt(ctx, "finetune-mlm", "iters", iters, 40)
    state, losses = finetune_mlm(
        mlm, [support], n_iters, MlmTrainConfig(batch=1, seed=ctx.obj["seed"])
    )
    out = ctx.obj["out"]
    ckpt = save_checkpoint(state, out / "mlm_tuned.ckpt")
    write_loss_csv(out / "finetune_loss.csv", list(enumerate(losses)), ("iter", "loss"))
    _write_manifest(ctx, "finetune-mlm",
                    {"mlm": file_checksum(mlm_ckpt), "support": str(support_path)},
                    {"iters": n_iters}, {"mlm_tuned.ckpt": state_checksum(state)})
    click.echo(f"fine-tuned in-painter -> {ckpt}")


@main.command("eval")
@click.option("--model", "model_ckpt", type=click.Path(exists=True), required=True)
@click.option("--cohort", "cohort_dir", type=click.Path(exists=True), required=True)
@click.option("--condition", default="direct_test")
@click.pass_context
def eval_cmd(ctx, model_ckpt, cohort_dir, condition):
    """Per-case Dice of a segmentation checkpoint on a labeled cohort."""
    state = load_checkpoint(model_ckpt)
    cohort = normalize_cohort(load_cohort(cohort_dir))
    report = evaluate_model(state, cohort, condition, file_checksum(model_ckpt)[:16])
    out = ctx.obj["out"]
    write_reports({condition: report}, out / f"report_{condition}.json",
                  out / f"report_{condition}.md")
    click.echo(f"{condition}: mean dice {report.mean:.4f} over {report.n} cases")


@main.command("ablate")
@click.option("--source", "source_ckpt", type=click.Path(exists=True), required=True)
@click.option("--mlm", "mlm_ckpt", type=click.Path(exists=True), required=True)
@click.option("--target-train", type=click.Path(exists=True), required=True)
@click.option("--target-test", type=click.Path(exists=True), required=True)
@click.option("--distill-iters", type=int, default=None)
@click.option("--adapt-iters", type=int, default=None)
@click.pass_context
def ablate_cmd(ctx, source_ckpt, mlm_ckpt, target_train, target_test, distill_iters, adapt_iters):
    """Run the 8-row component ablation grid."""
    source = load_checkpoint(source_ckpt)
    mlm = load_checkpoint(mlm_ckpt)
    train_c = normalize_cohort(load_cohort(target_train))
    test_c = normalize_cohort(load_cohort(target_test))
    dcfg = DistillConfig(iters=_opt(ctx, "ablate", "distill_iters", distill_iters, 60),
                         seed=ctx.obj["seed"])
    acfg = AdaptConfig(iters=_opt(ctx, "ablate", "adapt_iters", adapt_iters, 120),
                       ema_interval=20, beta=0.95, seed=ctx.obj["seed"])
    grid = run_ablation_grid(source, mlm, train_c, test_c, dcfg, acfg)
    out = ctx.obj["out"]
    write_reports(grid, out / "ablation.json", out / "ablation.md")
    for label, rep in grid.items():
        click.echo(f"{label:15s} {rep.mean:.4f}")


@main.command("scatter")
@click.option("--target", "target_ckpt", type=click.Path(exists=True), required=True)
@click.option("--pseudo", "pseudo_ckpt", type=click.Path(exists=True), required=True)
@click.option("--mlm", "mlm_ckpt", type=click.Path(exists=True), required=True)
@click.option("--cohort", "cohort_dir", type=click.Path(exists=True), required=True)
@click.pass_context
def scatter_cmd(ctx, target_ckpt, pseudo_ckpt, mlm_ckpt, cohort_dir):
    """Loss-distribution scatter (pseudo label vs prediction vs ground truth)."""
    scatter = emit_loss_scatter(
        load_checkpoint(target_ckpt), load_checkpoint(pseudo_ckpt), load_checkpoint(mlm_ckpt),
        normalize_cohort(load_cohort(cohort_dir)),
        csv_path=ctx.obj["out"] / "loss_scatter.csv", seed=ctx.obj["seed"],
    )
    for cond in scatter.CONDITIONS:
        lp, lr = scatter.centroid(cond)
        click.echo(f"{cond:13s} centroid: l_pseudo {lp:.4f}, l_recon {lr:.4f}")


@main.command("ingest-nifti")
@click.option("--in", "in_path", type=click.Path(exists=True), required=True)
@click.option("--kind", type=click.Choice(["image", "mask"]), default="image", show_default=True)
@click.option("--name", default=None)
@click.pass_context
def ingest_nifti_cmd(ctx, in_path, kind, name):
    """Convert a .nii/.nii.gz file into the native volume format (read-only adapter)."""
    vol = read_nifti(in_path, kind=kind)
    stem = name or Path(in_path).name.replace(".nii.gz", "").replace(".nii", "")
    path = save_volume(vol, ctx.obj["out"] / stem)
    click.echo(f"wrote {path} (shape {vol.shape}, spacing {vol.spacing})")


@main.command("benchmark")
@click.option("--bench-config", type=click.Path(exists=True), default=None,
              help="Override the committed desk benchmark config.")
@click.pass_context
def benchmark_cmd(ctx, bench_config):
    """Run the committed desk-scale benchmark end to end."""
    cfg = load_benchmark_config(bench_config)
    results = run_benchmark(cfg, ctx.obj["out"], log=click.echo)
    means = {k: f"{v['mean']:.4f}" for k, v in results["reports"].items()}
    click.echo(json.dumps(means, indent=1))


if __name__ == "__main__":
    main()
