"""Ablation rows and sweep axes expressed as config rewrites."""

from __future__ import annotations

import logging
from dataclasses import replace

from .train import RunResult, TrainConfig, train

logger = logging.getLogger(__name__)

# (label, balanced, inter, intra, nfl); the ensemble row reuses the "full" run
ABLATION_ROWS = (
    ("ce", False, False, False, False),
    ("bil", True, False, False, False),
    ("bil+nfl", True, False, False, True),
    ("bil+inter", True, True, False, False),
    ("bil+intra", True, False, True, False),
    ("bil+inter+intra", True, True, True, False),
    ("full", True, True, True, True),
)
ENSEMBLE_ROW = "full+ensemble"
ROW_LABELS = tuple(r[0] for r in ABLATION_ROWS) + (ENSEMBLE_ROW,)
SWEEP_AXES = ("beta", "lambda", "copies", "experts")


def with_copies(config: TrainConfig, copies: int) -> TrainConfig:
    return replace(
        config,
        loss=replace(config.loss, copies=copies),
        augmentation=replace(config.augmentation, copies=copies),
    )


def row_config(base: TrainConfig, label: str) -> TrainConfig:
    """Config for one ablation row.

    The cross-entropy row is a single expert on the original samples. Every
    other row keeps the base expert count and augmented-copy count, so rows
    differ only in which loss terms are switched on.
    """
    spec = {r[0]: r[1:] for r in ABLATION_ROWS}
    if label == ENSEMBLE_ROW:
        label = "full"
    if label not in spec:
        raise KeyError(label)
    balanced, inter, intra, nfl = spec[label]
    loss = replace(
        base.loss,
        use_balanced=balanced,
        use_inter=inter,
        use_intra=intra,
        use_nfl=nfl,
    )
    cfg = replace(base, loss=loss)
    if label == "ce":
        cfg = with_copies(replace(cfg, loss=replace(loss, num_experts=1)), 1)
    return cfg


def random_selection_config(config: TrainConfig) -> TrainConfig:
    """Same run, but partial views use uniformly random negatives."""
    return replace(config, loss=replace(config.loss, selection="random"))


def sweep_config(base: TrainConfig, axis: str, value) -> TrainConfig:
    if axis == "beta":
        return replace(base, loss=replace(base.loss, beta=float(value)))
    if axis == "lambda":
        return replace(base, loss=replace(base.loss, lam=float(value)))
    if axis == "copies":
        return with_copies(base, int(value))
    if axis == "experts":
        k = int(value)
        loss = replace(base.loss, num_experts=k)
        if k == 1 and loss.use_inter:
            logger.info("experts=1: inter-expert distillation has no pairs and is disabled")
            loss = replace(loss, use_inter=False)
        return replace(base, loss=loss)
    raise KeyError(axis)


def run_rows(base: TrainConfig, seed: int, labels=ROW_LABELS) -> dict[str, tuple[float, float, RunResult]]:
    """Train each requested row once; returns ``label -> (single acc, ensemble acc, result)``."""
    out = {}
    cache: dict[str, RunResult] = {}
    for label in labels:
        key = "full" if label == ENSEMBLE_ROW else label
        if key not in cache:
            logger.info("seed %d: training row %s", seed, key)
            cache[key] = train(row_config(base, key).with_seed(seed))
        res = cache[key]
        single = res.final.ensemble_accuracy if label == ENSEMBLE_ROW else res.final.single_accuracy
        out[label] = (single, res.final.ensemble_accuracy, res)
    return out

