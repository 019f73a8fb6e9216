"""Point-cloud transformer with parameter-efficient fine-tuning."""

from ._core import (
    ArgumentError,
    BackboneConfig,
    ConfigError,
    ContractError,
    DataError,
    DimensionError,
    Error,
    FreezeViolation,
    InfeasibleError,
    Model,
    NumericError,
    PeftConfig,
    PointCloud,
    RangeError,
    TrainConfig,
    budget_fit,
    cli,
    confusion_metrics,
    count_ops,
    count_params,
    evaluate,
    finetune,
    generate_dataset,
    generate_scene,
    js_divergence,
    latent_attention,
    methods,
    pretrain,
)

__all__ = [name for name in dir() if not name.startswith("_")]
