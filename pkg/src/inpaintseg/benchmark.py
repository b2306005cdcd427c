"""The committed desk-scale benchmark: one end-to-end run that exercises every
pipeline stage on synthetic cohorts and dumps the reports, scatter data,
checkpoints and provenance manifests the acceptance suite asserts on.

The canonical configuration ships as package data (configs/desk_benchmark.json);
its knobs (cohort sizes, iteration budgets, domain shift magnitudes) were tuned
once and frozen.
"""

from __future__ import annotations

import dataclasses
import json
import time
from importlib import resources
from pathlib import Path

import numpy as np

from .adaptation import (
    AdaptConfig,
    DistillConfig,
    PipelineConfig,
    adapt,
    distill,
    unseen_organ_pipeline,
)
from .checkpoint import save_checkpoint, state_checksum
from .cohort import DOMAINS, FAMILIES, Cohort, gen_case, gen_cohort
from .harness import (
    ExperimentReport,
    emit_loss_scatter,
    evaluate_model,
    run_ablation_grid,
    run_direct_test,
    run_upper_bound,
    write_reports,
)
from .losses import dice_score, mlm_mse_loss
from .mlm import (
    MlmConfig,
    MlmTrainConfig,
    finetune_mlm,
    mlm_forward,
    reconstruct_mask,
    train_mlm,
)
from .patching import plan_mask, zero_corruption_plan
from .segnet import SegConfig, SegTrainConfig, seg_forward, train_source
from .volume import normalize_intensity


def load_benchmark_config(path: str | Path | None = None) -> dict:
    """The committed benchmark config, or a user override JSON."""
    if path is not None:
        return json.loads(Path(path).read_text())
    with resources.files("inpaintseg.configs").joinpath("desk_benchmark.json").open() as f:
        return json.load(f)


def normalize_cohort(cohort: Cohort, lo: float = -200.0, hi: float = 400.0) -> Cohort:
    imgs = [normalize_intensity(v, lo, hi) for v in cohort.images]
    return Cohort(imgs, cohort.masks, cohort.manifest)


def _write_manifest(out_dir: Path, stage: str, inputs: dict, cfg, outputs: dict, seed) -> None:
    manifest = {
        "stage": stage,
        "inputs": inputs,
        "config": dataclasses.asdict(cfg) if dataclasses.is_dataclass(cfg) else cfg,
        "seed": seed,
        "outputs": outputs,
    }
    (out_dir / f"{stage}.manifest.json").write_text(json.dumps(manifest, indent=1) + "\n")


def _mean_recon_dice(mlm_state, masks, ratio: float, seed: int) -> float:
    """Mean hard Dice of corrupt-and-complete reconstructions against the inputs."""
    scores = []
    for i, m in enumerate(masks):
        recon = reconstruct_mask(mlm_state, m, ratio=ratio, seed=seed + i)
        scores.append(dice_score(recon.binarize(), m))
    return float(np.mean(scores))


def _fg_volume_drift(state_a, state_b, cohort: Cohort) -> float:
    """Mean absolute foreground-volume gap between two models' predictions."""
    gaps = []
    for img in cohort.images:
        va = int(seg_forward(state_a, img).binarize().data.sum())
        vb = int(seg_forward(state_b, img).binarize().data.sum())
        gaps.append(abs(va - vb))
    return float(np.mean(gaps))


def run_benchmark(cfg: dict | None = None, out_dir: str | Path = "bench_out", log=print) -> dict:
    """Execute the full benchmark and return (and persist) the results bundle."""
    cfg = cfg or load_benchmark_config()
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    t_start = time.perf_counter()
    scale = int(cfg["scale"])
    seed = int(cfg["seed"])
    shape = tuple(s // scale for s in (128, 128, 128))

    mlm_cfg = MlmConfig().scaled(scale)
    seg_cfg = SegConfig().scaled(scale)
    fam_src = FAMILIES[cfg["families"]["source"]]
    fam_new = FAMILIES[cfg["families"]["unseen"]]
    dom_src = DOMAINS[cfg["domains"]["source"]]
    dom_shift = DOMAINS[cfg["domains"]["shifted"]]
    dom_inv = DOMAINS[cfg["domains"]["inverted"]]

    sizes = cfg["cohorts"]

    def cohort(family, domain, n, salt):
        c = gen_cohort(family, domain, n, seed + salt, shape=shape)
        return normalize_cohort(c)

    log("[bench] generating cohorts")
    source_train = cohort(fam_src, dom_src, sizes["source_train"], 11)
    source_test = cohort(fam_src, dom_src, sizes["source_test"], 12)
    target_train = cohort(fam_src, dom_shift, sizes["target_train"], 21)
    target_test = cohort(fam_src, dom_shift, sizes["target_test"], 22)
    inv_train = cohort(fam_src, dom_inv, sizes["inverted_train"], 31)
    inv_test = cohort(fam_src, dom_inv, sizes["inverted_test"], 32)
    organb_train = cohort(fam_new, dom_shift, sizes["organb_train"], 41)
    organb_test = cohort(fam_new, dom_shift, sizes["organb_test"], 42)
    _, support_mask = gen_case(fam_new, dom_src, (seed + 43, 0), shape=shape)

    reports: dict[str, ExperimentReport] = {}
    metrics: dict[str, float | str] = {}

    log("[bench] stage 1a: training the in-painter on source masks")
    mlm_hyper = MlmTrainConfig(seed=seed, **cfg["mlm"])
    mlm_state, mlm_curve = train_mlm(source_train.masks, mlm_cfg, mlm_hyper)
    save_checkpoint(mlm_state, out / "mlm.ckpt")
    metrics["mlm_loss_initial"] = float(mlm_curve[0])
    metrics["mlm_loss_final"] = float(np.mean(mlm_curve[-10:]))
    _write_manifest(out, "train-mlm", {"masks": len(source_train)}, mlm_hyper,
                    {"mlm.ckpt": state_checksum(mlm_state)}, seed)

    log("[bench] stage 1b: training the source segmenter")
    seg_hyper = SegTrainConfig(seed=seed + 1, **cfg["seg"])
    source_state, seg_curve = train_source(source_train.cases(), seg_cfg, seg_hyper)
    save_checkpoint(source_state, out / "source.ckpt")
    metrics["seg_loss_initial"] = float(seg_curve[0])
    metrics["seg_loss_final"] = float(np.mean(seg_curve[-10:]))
    _write_manifest(out, "train-seg", {"cases": len(source_train)}, seg_hyper,
                    {"source.ckpt": state_checksum(source_state)}, seed + 1)

    reports["source_train_eval"] = evaluate_model(source_state, source_train, "source_train_eval")
    reports["source_test_eval"] = evaluate_model(source_state, source_test, "source_test_eval")
    reports["direct_test"] = run_direct_test(source_state, target_test)
    log(f"[bench] source self-test {reports['source_test_eval'].mean:.4f}, "
        f"direct test on shifted target {reports['direct_test'].mean:.4f}")

    mlm_sum_0 = state_checksum(mlm_state)

    log("[bench] stage 2: shape distillation on shifted target")
    distill_cfg = DistillConfig(seed=seed + 2, **cfg["distill"])
    pseudo_state, distill_curve = distill(source_state, mlm_state, target_train.images, distill_cfg)
    save_checkpoint(pseudo_state, out / "pseudo.ckpt")
    _write_manifest(out, "distill", {"source.ckpt": state_checksum(source_state),
                                     "mlm.ckpt": mlm_sum_0}, distill_cfg,
                    {"pseudo.ckpt": state_checksum(pseudo_state)}, seed + 2)
    reports["distill_only"] = evaluate_model(pseudo_state, target_test, "distill_only")
    metrics["mlm_checksum_before_distill"] = mlm_sum_0
    metrics["mlm_checksum_after_distill"] = state_checksum(mlm_state)

    log("[bench] stage 3: dual-loss adaptation on shifted target")
    adapt_cfg = AdaptConfig(seed=seed + 3, **cfg["adapt"])
    target_state, adapt_log = adapt(pseudo_state, mlm_state, target_train.images, adapt_cfg)
    save_checkpoint(target_state, out / "target.ckpt")
    np.savetxt(out / "adapt_log.csv", adapt_log, delimiter=",",
               header="iter,l_pseudo,l_recon,l_total", comments="")
    _write_manifest(out, "adapt", {"pseudo.ckpt": state_checksum(pseudo_state),
                                   "mlm.ckpt": mlm_sum_0}, adapt_cfg,
                    {"target.ckpt": state_checksum(target_state)}, seed + 3)
    reports["full"] = evaluate_model(target_state, target_test, "full")
    metrics["mlm_checksum_after_adapt"] = state_checksum(mlm_state)
    log(f"[bench] distill_only {reports['distill_only'].mean:.4f}, "
        f"full {reports['full'].mean:.4f}")

    log("[bench] upper bound: supervised fine-tune on target labels")
    upper_hyper = SegTrainConfig(seed=seed + 4, **cfg["upper"])
    upper_report, upper_state = run_upper_bound(
        source_state, target_train, upper_hyper, eval_cohort=target_test
    )
    save_checkpoint(upper_state, out / "upper.ckpt")
    reports["upper_bound"] = upper_report
    reports["upper_bound_train"] = evaluate_model(upper_state, target_train, "upper_bound_train")

    log("[bench] ablation grid (8 rows)")
    grid = run_ablation_grid(
        source_state, mlm_state, target_train, target_test, distill_cfg, adapt_cfg,
        pseudo_state=pseudo_state,
    )
    reports.update({f"ablation/{k}": v for k, v in grid.items()})

    log("[bench] unseen-domain run (inverted contrast)")
    reports["inverted_direct"] = evaluate_model(source_state, inv_test, "inverted_direct")
    inv_distill_cfg = DistillConfig(seed=seed + 5, **cfg.get("distill_inverted", cfg["distill"]))
    inv_pseudo, _ = distill(source_state, mlm_state, inv_train.images, inv_distill_cfg)
    inv_target, _ = adapt(inv_pseudo, mlm_state, inv_train.images,
                          dataclasses.replace(adapt_cfg, seed=seed + 6))
    reports["inverted_full"] = evaluate_model(inv_target, inv_test, "inverted_full")
    log(f"[bench] inverted direct {reports['inverted_direct'].mean:.4f}, "
        f"full {reports['inverted_full'].mean:.4f}")

    log("[bench] unseen-organ run (one-shot support)")
    reports["organb_direct"] = evaluate_model(source_state, organb_test, "organb_direct")
    pipe_cfg = PipelineConfig(
        finetune_iters=int(cfg["finetune_iters"]),
        finetune=MlmTrainConfig(batch=1, seed=seed + 7,
                                lr=float(cfg.get("finetune_lr", 3e-4))),
        distill=dataclasses.replace(distill_cfg, seed=seed + 8),
        adapt=dataclasses.replace(adapt_cfg, seed=seed + 9),
    )
    organb_target, tuned_mlm = unseen_organ_pipeline(
        support_mask, organb_train.images, source_state, mlm_state, pipe_cfg
    )
    save_checkpoint(tuned_mlm, out / "mlm_tuned.ckpt")
    save_checkpoint(organb_target, out / "organb_target.ckpt")
    reports["organb_pipeline"] = evaluate_model(organb_target, organb_test, "organb_pipeline")
    nofinetune_target, _ = unseen_organ_pipeline(
        support_mask, organb_train.images, source_state, mlm_state,
        dataclasses.replace(pipe_cfg, skip_finetune=True),
    )
    reports["organb_nofinetune"] = evaluate_model(nofinetune_target, organb_test, "organb_nofinetune")

    # control: a source-family support mask should reduce the one-shot pipeline
    # to in-domain behavior (same stage seeds as the main shifted-domain run)
    _, inround_support = gen_case(fam_src, dom_src, (seed + 44, 0), shape=shape)
    inround_cfg = dataclasses.replace(
        pipe_cfg,
        distill=dataclasses.replace(distill_cfg, seed=seed + 2),
        adapt=dataclasses.replace(adapt_cfg, seed=seed + 3),
    )
    inround_target, _ = unseen_organ_pipeline(
        inround_support, target_train.images, source_state, mlm_state, inround_cfg
    )
    reports["inround_support"] = evaluate_model(inround_target, target_test, "inround_support")

    metrics["recon_dice_pre_finetune"] = _mean_recon_dice(
        mlm_state, source_test.masks, mlm_cfg.mask_ratio, seed + 100
    )
    metrics["recon_dice_post_finetune"] = _mean_recon_dice(
        tuned_mlm, source_test.masks, mlm_cfg.mask_ratio, seed + 100
    )
    log(f"[bench] organ-B direct {reports['organb_direct'].mean:.4f}, "
        f"pipeline {reports['organb_pipeline'].mean:.4f}; source-family recon dice "
        f"{metrics['recon_dice_pre_finetune']:.4f} -> {metrics['recon_dice_post_finetune']:.4f}")

    log("[bench] collapse probe (lambda_pseudo 0 vs 1)")
    probe_iters = int(cfg.get("collapse_iters", cfg["adapt"]["iters"]))
    base_probe = dataclasses.replace(adapt_cfg, iters=probe_iters, seed=seed + 10)
    anchored, _ = adapt(pseudo_state, mlm_state, target_train.images,
                        dataclasses.replace(base_probe, lambda_pseudo=1.0))
    collapsed, _ = adapt(pseudo_state, mlm_state, target_train.images,
                         dataclasses.replace(base_probe, lambda_pseudo=0.0))
    metrics["collapse_drift_lambda1"] = _fg_volume_drift(anchored, pseudo_state, target_train)
    metrics["collapse_drift_lambda0"] = _fg_volume_drift(collapsed, pseudo_state, target_train)
    log(f"[bench] fg-volume drift lambda=1 {metrics['collapse_drift_lambda1']:.1f}, "
        f"lambda=0 {metrics['collapse_drift_lambda0']:.1f}")

    log("[bench] loss scatter")
    scatter = emit_loss_scatter(
        target_state, pseudo_state, mlm_state, target_test, csv_path=out / "loss_scatter.csv",
        seed=seed + 11,
    )
    metrics["scatter_pred_to_gt"] = scatter.centroid_distance("prediction", "ground_truth")
    metrics["scatter_pseudo_to_gt"] = scatter.centroid_distance("pseudo_label", "ground_truth")

    log("[bench] reconstruction quality: zero-corruption vs training ratio")
    mse_r0, mse_r75 = [], []
    for i, m in enumerate(source_test.masks):
        grid0 = mlm_state.config.grid
        full_plan = zero_corruption_plan(grid0)
        plan = plan_mask(m, grid0, mlm_cfg.mask_ratio, seed + 200 + i)
        mse_r0.append(mlm_mse_loss(m, mlm_forward(mlm_state, m, full_plan)))
        mse_r75.append(mlm_mse_loss(m, mlm_forward(mlm_state, m, plan)))
    metrics["mse_r0"] = float(np.mean(mse_r0))
    metrics["mse_r_train"] = float(np.mean(mse_r75))

    metrics["runtime_s"] = time.perf_counter() - t_start
    results = {
        "config": cfg,
        "reports": {k: r.to_dict() for k, r in reports.items()},
        "metrics": metrics,
    }
    (out / "results.json").write_text(json.dumps(results, indent=1) + "\n")
    write_reports(reports, out / "reports.json", out / "reports.md")
    log(f"[bench] done in {metrics['runtime_s']:.0f}s -> {out}")
    return results
