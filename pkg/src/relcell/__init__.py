"""Relational transformer for multi-table databases.

Pipeline: load a relational database (`relational_store`), sample
temporally-safe context windows around seed rows (`context_sampler`),
encode cells into tokens (`cell_codec`), run the four-mask transformer
(`relational_attention`, `rt_model`), train with masked token
prediction (`trainer`), and score or ablate the result (`eval_bench`).
The `relcell` command wires it all together (`cli`).
"""

from .errors import ConfigError, DataError, NumericError, RelcellError
from .relational_store import (
    RelationalDatabase,
    RowRef,
    SchemaDescriptor,
    TaskSpec,
    TaskTable,
    load_database,
    load_task,
    parse_schema,
)
from .context_sampler import (
    CellToken,
    ContextWindow,
    SamplerConfig,
    autocomplete_seeds,
    sample_context,
    seed_rows_for_task,
)
from .cell_codec import NgramHashEmbedder, NormStats, fit_norm_stats
from .relational_attention import ATTENTION_KINDS, MaskSet, build_masks
from .rt_model import ModelConfig, RTModel, build_model
from .checkpoints import Checkpoint, load_checkpoint, save_checkpoint
from .trainer import TrainConfig, fine_tune_config, gradient_check, train
from .eval_bench import (
    AblationSpec,
    EvalReport,
    auroc,
    entity_mean_baseline,
    evaluate,
    evaluate_entity_mean,
    matched_ablation_configs,
    r2,
)
from .synth_data import SyntheticSpec, generate_synthetic, write_dataset

__version__ = "0.1.0"

__all__ = [
    "ATTENTION_KINDS",
    "AblationSpec",
    "CellToken",
    "Checkpoint",
    "ConfigError",
    "ContextWindow",
    "DataError",
    "EvalReport",
    "MaskSet",
    "ModelConfig",
    "NgramHashEmbedder",
    "NormStats",
    "NumericError",
    "RTModel",
    "RelationalDatabase",
    "RelcellError",
    "RowRef",
    "SamplerConfig",
    "SchemaDescriptor",
    "SyntheticSpec",
    "TaskSpec",
    "TaskTable",
    "TrainConfig",
    "auroc",
    "autocomplete_seeds",
    "build_masks",
    "build_model",
    "entity_mean_baseline",
    "evaluate",
    "evaluate_entity_mean",
    "fine_tune_config",
    "fit_norm_stats",
    "generate_synthetic",
    "gradient_check",
    "load_checkpoint",
    "load_database",
    "load_task",
    "matched_ablation_configs",
    "parse_schema",
    "r2",
    "sample_context",
    "save_checkpoint",
    "seed_rows_for_task",
    "train",
    "write_dataset",
]
