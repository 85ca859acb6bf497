"""Latent diffusion drug-target affinity model.

The heavy lifting happens in the compiled ``_codiff`` extension; this package
re-exports it.
"""

from ._codiff import (
    concordance_index,
    evaluate,
    evaluate_model,
    export_embeddings,
    forward_noise,
    ingest,
    kd_to_pkd,
    mae,
    mse,
    noise_schedule,
    predict,
    reconstruct_z0,
    report,
    rm2,
    split,
    train,
)

__all__ = [
    "concordance_index",
    "evaluate",
    "evaluate_model",
    "export_embeddings",
    "forward_noise",
    "ingest",
    "kd_to_pkd",
    "mae",
    "mse",
    "noise_schedule",
    "predict",
    "reconstruct_z0",
    "report",
    "rm2",
    "split",
    "train",
]
