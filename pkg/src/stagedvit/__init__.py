"""Small-scale staged vision training: masked-patch pre-training, optional
intermediate classification, and tri-map segmentation fine-tuning, with a
resumable experiment grid runner."""

from .backbone import ModelConfig, VisionEncoder, count_parameters, patchify, unpatchify
from .checkpoint import Checkpoint, load_checkpoint, save_checkpoint
from .data import DatasetSpec, Sample, load_dataset, load_folder, split_holdout, subsample, synth_generate
from .grid import GridData, emit_plot, emit_table, evaluate, run_cell, run_grid
from .metrics import AggregateStat, ConfusionCounts, MetricsReport, accumulate, aggregate, miou
from .objectives import (
    ClsHead,
    MaskPattern,
    ReconHead,
    SegHead,
    assemble_patch_grid,
    classify_loss,
    disassemble_patch_grid,
    mim_loss,
    predict_trimap,
    sample_mask,
    segment_logits,
    segment_loss,
    stack_masks,
)
from .optim import MilestoneSchedule, OptimConfig, PhaseConfig, adamw_step, default_phase_config, lr_at_epoch, train_phase
from .plan import CellKey, ExperimentPlan, cell_seeds, config_hash, derive_seed, load_plan, parse_plan
from .store import RunRecord, RunStore

__version__ = "0.1.0"

__all__ = [
    "AggregateStat", "CellKey", "Checkpoint", "ClsHead", "ConfusionCounts",
    "DatasetSpec", "ExperimentPlan", "GridData", "MaskPattern", "MetricsReport",
    "MilestoneSchedule", "ModelConfig", "OptimConfig", "PhaseConfig", "ReconHead",
    "RunRecord", "RunStore", "Sample", "SegHead", "VisionEncoder", "accumulate",
    "adamw_step", "aggregate", "assemble_patch_grid", "cell_seeds", "classify_loss",
    "config_hash", "count_parameters", "default_phase_config", "derive_seed",
    "disassemble_patch_grid", "emit_plot", "emit_table", "evaluate",
    "load_checkpoint", "load_dataset", "load_folder", "load_plan", "lr_at_epoch",
    "mim_loss", "miou", "parse_plan", "patchify", "predict_trimap", "run_cell",
    "run_grid", "sample_mask", "save_checkpoint", "segment_logits", "segment_loss",
    "split_holdout", "stack_masks", "subsample", "synth_generate", "train_phase",
    "unpatchify",
]
