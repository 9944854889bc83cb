"""A minutes-free configuration that still exercises every pipeline stage."""

from artifact.config import ExperimentConfig

TINY = {
    "data.patients": 40, "data.split": (0.4, 0.2, 0.4),
    "encoder.positives": 100, "encoder.negatives": 100, "encoder.epochs": 1,
    "detector.epochs": 2, "detector.val_every": 1,
    "classifier.epochs": 1,
    "meta.iterations": 2, "meta.n_tr": 2, "meta.n_val": 2,
    "finetune.epochs": 1,
    "saliency.epochs": 1,
}


def tiny_config(seed: int = 0) -> ExperimentConfig:
    return ExperimentConfig.default().with_overrides(**TINY, **{"run.seed": seed})


def write_tiny(path, seed: int = 0):
    path.write_text(tiny_config(seed).to_ini())
    return path
