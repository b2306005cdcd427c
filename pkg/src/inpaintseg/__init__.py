"""Shape-completion driven domain adaptation for 3D organ segmentation.

The pipeline has three stages: (1) pretrain a label-mask in-painting
transformer and a 3D U-Net segmenter on a labeled source domain, (2) refine a
copy of the segmenter on unlabeled targets by distilling its predictions
toward their in-painted completions, and (3) train a target model against
both pseudo labels and completions, with the pseudo model tracking it by EMA.
"""

from .volume import (
    EmptyMaskError,
    LatticeMismatchError,
    LabelMask,
    SoftMask,
    Volume,
    augment,
    crop_to_bbox,
    normalize_intensity,
    resample,
    resize_to,
)
from .volio import load_volume, read_nifti, save_volume
from .patching import MaskPlan, PatchGrid, apply_plan, patchify, plan_mask, unpatchify
from .losses import dice_loss, dice_score, mlm_mse_loss
from .mlm import MlmConfig, MlmState, MlmTrainConfig, finetune_mlm, mlm_forward, train_mlm
from .segnet import SegConfig, SegState, SegTrainConfig, seg_forward, train_source
from .adaptation import (
    AdaptConfig,
    DistillConfig,
    PipelineConfig,
    adapt,
    distill,
    ema_update,
    pseudo_loss,
    recon_loss,
    total_loss,
    unseen_organ_pipeline,
)
from .cohort import DomainProfile, ShapeFamily, gen_case, gen_cohort
from .harness import (
    ExperimentReport,
    LossScatter,
    emit_loss_scatter,
    run_ablation_grid,
    run_direct_test,
    run_upper_bound,
)
from .checkpoint import load_checkpoint, save_checkpoint, state_checksum

__all__ = [
    "Volume", "LabelMask", "SoftMask", "EmptyMaskError", "LatticeMismatchError",
    "resample", "normalize_intensity", "crop_to_bbox", "resize_to", "augment",
    "save_volume", "load_volume", "read_nifti",
    "PatchGrid", "MaskPlan", "patchify", "unpatchify", "plan_mask", "apply_plan",
    "dice_loss", "dice_score", "mlm_mse_loss",
    "MlmConfig", "MlmState", "MlmTrainConfig", "train_mlm", "finetune_mlm", "mlm_forward",
    "SegConfig", "SegState", "SegTrainConfig", "seg_forward", "train_source",
    "DistillConfig", "AdaptConfig", "PipelineConfig", "distill", "adapt", "ema_update",
    "pseudo_loss", "recon_loss", "total_loss", "unseen_organ_pipeline",
    "ShapeFamily", "DomainProfile", "gen_case", "gen_cohort",
    "ExperimentReport", "LossScatter", "run_direct_test", "run_upper_bound",
    "run_ablation_grid", "emit_loss_scatter",
    "save_checkpoint", "load_checkpoint", "state_checksum",
]
