"""Style-agnostic training by separating style from content in CNN features.

Submodules:

- ``numcore``      numpy reverse-mode autodiff, SGD and gradient checking
- ``stylestats``   channel statistics, style and content randomization
- ``network``      staged CNN split into feature extractor, content and style heads
- ``training``     losses and the three-phase optimization step
- ``synthdata``    synthetic multi-domain shape/texture benchmark
- ``evaluation``   shape/texture bias, accuracy, proxy A-distance
- ``experiments``  plans, resumable runs, records and summaries
"""

from .evaluation import bias_metrics, cross_domain_accuracy, proxy_a_distance, source_target_discrepancy
from .experiments import ExperimentPlan, MetricsRecord, load_records, run_cell, run_plan, summarize
from .network import StageCNNConfig, build_model, load_checkpoint, predict, save_checkpoint
from .stylestats import adain, channel_stats, content_randomize, style_randomize
from .synthdata import StyleShiftSpec, generate_cue_conflict, generate_dataset
from .training import TrainConfig, Trainer, train

__version__ = "0.1.0"

__all__ = [
    "ExperimentPlan",
    "MetricsRecord",
    "StageCNNConfig",
    "StyleShiftSpec",
    "TrainConfig",
    "Trainer",
    "adain",
    "bias_metrics",
    "build_model",
    "channel_stats",
    "content_randomize",
    "cross_domain_accuracy",
    "generate_cue_conflict",
    "generate_dataset",
    "load_checkpoint",
    "load_records",
    "predict",
    "proxy_a_distance",
    "run_cell",
    "run_plan",
    "save_checkpoint",
    "source_target_discrepancy",
    "style_randomize",
    "summarize",
    "train",
]
