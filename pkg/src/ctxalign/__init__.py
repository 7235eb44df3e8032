"""Dual-scale context-alignment for time-series modeling with a toy LM backbone."""

from .numerics import Tensor, backward, finite_diff_gradient, no_grad
from .tsembed import (
    DEFAULT_FORECAST_PROMPT,
    PatchEmbedder,
    SequenceLayout,
    SeriesWindow,
    build_sequence,
    instance_normalize,
    patchify,
    split_parts,
    tokenize_prompt,
)
from .graphspec import (
    GraphSpec,
    build_fsca_class_spec,
    build_fsca_forecast_spec,
    build_vca_spec,
    compute_edge_weights,
    normalize_adjacency,
)
from .dscagnn import DscaParams, DualScaleState, coarse_project, dsca_block, gcn_forward, interaction
from .backbone import BackboneConfig, Model, ModelConfig, compute_loss, sample_loss
from .data import MultivariateSeries, WindowSample, chrono_split, few_shot_subset, load_csv, make_windows, synth_generate
from .metrics import MetricReport, accuracy, m4_metrics, naive2, point_metrics
from .harness import AblationPlan, DataConfig, TrainConfig, lr_schedule, run_ablation, run_training

__version__ = "0.1.0"
