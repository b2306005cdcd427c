"""Experiment runners and report types: direct test, supervised upper bound,
the 8-row component ablation grid, and the loss-scatter analysis."""

from __future__ import annotations

import dataclasses
import hashlib
import json
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .adaptation import AdaptConfig, DistillConfig, adapt, distill, finetune_supervised
from .cohort import Cohort
from .losses import dice_loss, dice_score
from .mlm import MlmState, reconstruct_mask
from .segnet import SegState, SegTrainConfig, seg_forward


def config_hash(*objects) -> str:
    """Stable short hash of a bundle of config-ish values."""
    blob = json.dumps(objects, sort_keys=True, default=str).encode()
    return hashlib.sha256(blob).hexdigest()[:16]


@dataclass
class ExperimentReport:
    condition: str
    per_case: list[float]
    config_hash: str = ""
    runtime_s: float = 0.0

    @property
    def n(self) -> int:
        return len(self.per_case)

    @property
    def mean(self) -> float:
        return float(np.mean(self.per_case))

    @property
    def std(self) -> float:
        return float(np.std(self.per_case))

    def to_dict(self) -> dict:
        return {
            "condition": self.condition,
            "n": self.n,
            "mean": self.mean,
            "std": self.std,
            "per_case": self.per_case,
            "config_hash": self.config_hash,
            "runtime_s": self.runtime_s,
        }

    @staticmethod
    def from_dict(d: dict) -> "ExperimentReport":
        return ExperimentReport(
            condition=d["condition"],
            per_case=[float(x) for x in d["per_case"]],
            config_hash=d.get("config_hash", ""),
            runtime_s=float(d.get("runtime_s", 0.0)),
        )


def evaluate_model(state: SegState, cohort: Cohort, condition: str, chash: str = "") -> ExperimentReport:
    """Per-case hard Dice of binarized predictions against held-out labels.

    Cohort images must already be normalized to the model's input convention.
    """
    t0 = time.perf_counter()
    scores = []
    for img, msk in zip(cohort.images, cohort.masks):
        pred = seg_forward(state, img).binarize()
        scores.append(dice_score(pred, msk))
    return ExperimentReport(condition, scores, chash, time.perf_counter() - t0)


def run_direct_test(state: SegState, cohort: Cohort) -> ExperimentReport:
    """Evaluate the unadapted model on a labeled cohort (the baseline row)."""
    return evaluate_model(state, cohort, "direct_test", config_hash(state.role, state.seed))


def run_upper_bound(
    base: SegState, train_cohort: Cohort, hyper: SegTrainConfig, eval_cohort: Cohort | None = None
) -> tuple[ExperimentReport, SegState]:
    """Supervised fine-tune on target labels; the adaptation ceiling."""
    t0 = time.perf_counter()
    state, _ = finetune_supervised(base, train_cohort.cases(), hyper)
    report = evaluate_model(
        state, eval_cohort or train_cohort, "upper_bound", config_hash("upper", hyper)
    )
    report.runtime_s = time.perf_counter() - t0
    return report, state


ABLATION_LABELS = {
    (0, 0, 0): "none",
    (0, 0, 1): "recon_only",
    (0, 1, 0): "pseudo_only",
    (0, 1, 1): "pseudo+recon",
    (1, 0, 0): "distill_only",
    (1, 0, 1): "distill+recon",
    (1, 1, 0): "distill+pseudo",
    (1, 1, 1): "full",
}


def run_ablation_grid(
    source: SegState,
    mlm: MlmState,
    target_train: Cohort,
    eval_cohort: Cohort,
    distill_cfg: DistillConfig,
    adapt_cfg: AdaptConfig,
    pseudo_state: SegState | None = None,
) -> dict[str, ExperimentReport]:
    """All 8 on/off combinations of (distillation, pseudo term, recon term).

    The all-off row is by construction the direct test. A precomputed
    distillation output can be passed to avoid repeating stage 2.
    """
    unlabeled = target_train.images
    rows: dict[str, ExperimentReport] = {}
    for use_distill in (0, 1):
        if use_distill:
            base = pseudo_state or distill(source, mlm, unlabeled, distill_cfg)[0]
        else:
            base = source
        for use_pseudo in (0, 1):
            for use_recon in (0, 1):
                label = ABLATION_LABELS[(use_distill, use_pseudo, use_recon)]
                if use_pseudo or use_recon:
                    cfg = dataclasses.replace(
                        adapt_cfg,
                        lambda_pseudo=adapt_cfg.lambda_pseudo if use_pseudo else 0.0,
                        use_recon=bool(use_recon),
                    )
                    state, _ = adapt(base, mlm, unlabeled, cfg)
                else:
                    state = base
                chash = config_hash(label, distill_cfg if use_distill else None,
                                    adapt_cfg if (use_pseudo or use_recon) else None)
                rows[label] = evaluate_model(state, eval_cohort, label, chash)
    return rows


@dataclass
class LossScatter:
    """Per-case (pseudo term, recon term) pairs for three mask conditions."""

    rows: list[tuple[int, str, float, float]] = field(default_factory=list)

    CONDITIONS = ("pseudo_label", "prediction", "ground_truth")

    def centroid(self, condition: str) -> tuple[float, float]:
        pts = [(lp, lr) for _, c, lp, lr in self.rows if c == condition]
        if not pts:
            raise ValueError(f"no rows for condition {condition!r}")
        arr = np.asarray(pts)
        return float(arr[:, 0].mean()), float(arr[:, 1].mean())

    def centroid_distance(self, a: str, b: str) -> float:
        ca, cb = np.asarray(self.centroid(a)), np.asarray(self.centroid(b))
        return float(np.linalg.norm(ca - cb))

    def write_csv(self, path: str | Path) -> Path:
        p = Path(path)
        p.parent.mkdir(parents=True, exist_ok=True)
        lines = ["case,condition,l_pseudo,l_recon"]
        lines += [f"{i},{c},{lp:.8f},{lr:.8f}" for i, c, lp, lr in self.rows]
        p.write_text("\n".join(lines) + "\n")
        return p


def emit_loss_scatter(
    target: SegState,
    pseudo: SegState,
    mlm: MlmState,
    cohort: Cohort,
    csv_path: str | Path | None = None,
    mask_ratio: float | None = None,
    seed: int = 0,
) -> LossScatter:
    """For every case, score pseudo label / adapted prediction / ground truth
    against (a) its own in-painted completion and (b) the pseudo label."""
    scatter = LossScatter()
    for i, (img, gt) in enumerate(zip(cohort.images, cohort.masks)):
        y_pseudo = seg_forward(pseudo, img)
        y_pred = seg_forward(target, img)
        for cond, m in zip(LossScatter.CONDITIONS, (y_pseudo, y_pred, gt)):
            recon = reconstruct_mask(mlm, m, ratio=mask_ratio, seed=seed + 31 * i)
            l_recon = dice_loss(m, recon)
            l_pseudo = dice_loss(m, y_pseudo)
            scatter.rows.append((i, cond, l_pseudo, l_recon))
    if csv_path is not None:
        scatter.write_csv(csv_path)
    return scatter


def write_reports(
    reports: dict[str, ExperimentReport], json_path: str | Path, md_path: str | Path | None = None
) -> None:
    """Emit machine (JSON) and human (markdown table) report files."""
    jp = Path(json_path)
    jp.parent.mkdir(parents=True, exist_ok=True)
    jp.write_text(json.dumps({k: r.to_dict() for k, r in reports.items()}, indent=1) + "\n")
    if md_path is not None:
        lines = [
            "| condition | n | mean dice | std | runtime (s) |",
            "|---|---|---|---|---|",
        ]
        for k, r in reports.items():
            lines.append(f"| {k} | {r.n} | {r.mean:.4f} | {r.std:.4f} | {r.runtime_s:.1f} |")
        Path(md_path).write_text("\n".join(lines) + "\n")
