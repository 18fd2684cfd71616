"""Training loop: SGD with momentum, step schedule, periodic evaluation."""

from __future__ import annotations

import logging
import time
from dataclasses import asdict, dataclass, field, fields, replace
from typing import Any

import numpy as np

from . import diffcore as dc
from .data import (
    AugmentationPolicy,
    ClassPrior,
    Dataset,
    LongTailSpec,
    augment_features,
    build_longtail_counts,
    generate_dataset,
    split_categories,
)
from .errors import ConfigError, ShapeError
from .losses import LossBreakdown, LossConfig, total_loss
from .metrics import KLReport, kl_report
from .model import ArchConfig, MultiExpert

logger = logging.getLogger(__name__)

SPLITS = ("many", "medium", "few")


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 100
    batch_size: int = 128
    lr: float = 0.1
    momentum: float = 0.9
    weight_decay: float = 2e-4
    lr_decay_epochs: tuple[int, ...] = (60, 85)
    lr_decay_factor: float = 0.1
    seed: int = 1
    eval_every: int = 10
    hidden_dims: tuple[int, ...] = (64, 64)
    many_threshold: int = 100
    few_threshold: int = 20
    loss: LossConfig = field(default_factory=LossConfig)
    dataset: LongTailSpec = field(default_factory=LongTailSpec)
    augmentation: AugmentationPolicy = field(default_factory=AugmentationPolicy)

    def __post_init__(self):
        object.__setattr__(self, "lr_decay_epochs", tuple(int(e) for e in self.lr_decay_epochs))
        object.__setattr__(self, "hidden_dims", tuple(int(h) for h in self.hidden_dims))
        if self.epochs < 0:
            raise ConfigError("epochs must be >= 0", "epochs")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1", "batch_size")
        if self.lr <= 0:
            raise ConfigError("lr must be > 0", "lr")
        if not 0 <= self.momentum < 1:
            raise ConfigError("momentum must lie in [0, 1)", "momentum")
        if self.weight_decay < 0:
            raise ConfigError("weight_decay must be >= 0", "weight_decay")
        if not 0 < self.lr_decay_factor <= 1:
            raise ConfigError("lr_decay_factor must lie in (0, 1]", "lr_decay_factor")
        if self.eval_every < 1:
            raise ConfigError("eval_every must be >= 1", "eval_every")
        if self.augmentation.copies != self.loss.copies:
            raise ConfigError("augmentation.copies must equal loss.copies", "copies")

    def to_dict(self) -> dict:
        out = asdict(self)
        out["loss"]["lambda"] = out["loss"].pop("lam")
        return out

    @classmethod
    def from_dict(cls, raw: dict[str, Any]) -> TrainConfig:
        """Build from a (possibly partial) JSON mapping; unknown keys are errors."""
        raw = dict(raw)
        nested = {"loss": LossConfig, "dataset": LongTailSpec, "augmentation": AugmentationPolicy}
        kwargs: dict[str, Any] = {}
        known = {f.name for f in fields(cls)}
        for key, value in raw.items():
            if key not in known:
                raise ConfigError(f"unknown config key {key!r}", key)
            if key in nested:
                sub = dict(value)
                if key == "loss" and "lambda" in sub:
                    sub["lam"] = sub.pop("lambda")
                sub_known = {f.name for f in fields(nested[key])}
                for sk in sub:
                    if sk not in sub_known:
                        shown = "lambda" if sk == "lam" else sk
                        raise ConfigError(f"unknown config key {key}.{shown!r}", f"{key}.{shown}")
                try:
                    kwargs[key] = nested[key](**sub)
                except ConfigError as err:
                    raise ConfigError(str(err), f"{key}.{err.key}") from None
                except TypeError as err:
                    raise ConfigError(str(err), key) from None
            else:
                kwargs[key] = value
        copies = kwargs.get("loss", LossConfig()).copies
        if "augmentation" not in kwargs:
            kwargs["augmentation"] = AugmentationPolicy(copies=copies)
        return cls(**kwargs)

    def with_seed(self, seed: int) -> TrainConfig:
        return replace(self, seed=int(seed))


@dataclass
class OptimizerState:
    velocities: list[np.ndarray]

    @classmethod
    def zeros_like(cls, params) -> OptimizerState:
        return cls([np.zeros_like(p.values) for p in params])


@dataclass
class EvalReport:
    expert_accuracy: list[float]
    single_accuracy: float
    ensemble_accuracy: float
    split_accuracy: dict[str, float | None]
    ensemble_split_accuracy: dict[str, float | None]
    expert_predictions: np.ndarray = field(repr=False)
    ensemble_predictions: np.ndarray = field(repr=False)

    def to_dict(self) -> dict:
        return {
            "expert_accuracy": self.expert_accuracy,
            "single_accuracy": self.single_accuracy,
            "ensemble_accuracy": self.ensemble_accuracy,
            "split_accuracy": self.split_accuracy,
            "ensemble_split_accuracy": self.ensemble_split_accuracy,
        }


@dataclass
class RunResult:
    config: TrainConfig
    seed: int
    final: EvalReport
    history: list[dict]
    kl: KLReport
    wall_clock_s: float = 0.0
    model: MultiExpert | None = field(default=None, repr=False)
    prior: ClassPrior | None = field(default=None, repr=False)
    test: Dataset | None = field(default=None, repr=False)

    def to_dict(self) -> dict:
        """JSON payload; excludes wall-clock so replays compare byte-for-byte."""
        return {
            "seed": self.seed,
            "config": self.config.to_dict(),
            "final": self.final.to_dict(),
            "history": self.history,
            "kl": self.kl.to_dict(),
        }


def sgd_step(params, grads, state: OptimizerState, lr: float, momentum: float, weight_decay: float) -> None:
    """``v <- momentum*v + grad + weight_decay*param``; ``param <- param - lr*v``."""
    if not len(params) == len(grads) == len(state.velocities):
        raise ShapeError("params, grads and velocities must align")
    for p, g, v in zip(params, grads, state.velocities):
        if g is None:
            g = np.zeros_like(p.values)
        if g.shape != p.values.shape or v.shape != p.values.shape:
            raise ShapeError(f"gradient {g.shape} does not match parameter {p.values.shape}")
        v *= momentum
        v += g
        if weight_decay:
            v += weight_decay * p.values
        p.values = p.values - lr * v


def lr_at(epoch: int, config: TrainConfig) -> float:
    decays = sum(1 for e in config.lr_decay_epochs if e <= epoch)
    return config.lr * config.lr_decay_factor**decays


def _accuracy_on(pred: np.ndarray, labels: np.ndarray, classes: set[int]) -> float | None:
    sel = np.isin(labels, sorted(classes))
    if not sel.any():
        return None
    return float((pred[sel] == labels[sel]).mean())


def evaluate(model, test: Dataset, prior: ClassPrior, splits: tuple[set, set, set]) -> EvalReport:
    """Top-1 accuracy from raw logits, per expert and for the averaged ensemble."""
    logits = model.predict(test.features)
    preds = logits.argmax(axis=-1)
    ens_pred = logits.mean(axis=0).argmax(axis=-1)
    y = test.labels
    expert_acc = [float((p == y).mean()) for p in preds]
    split_acc: dict[str, float | None] = {}
    ens_split: dict[str, float | None] = {}
    for name, classes in zip(SPLITS, splits):
        per = [_accuracy_on(p, y, classes) for p in preds]
        split_acc[name] = None if per[0] is None else float(np.mean(per))
        ens_split[name] = _accuracy_on(ens_pred, y, classes)
    return EvalReport(
        expert_accuracy=expert_acc,
        single_accuracy=float(np.mean(expert_acc)),
        ensemble_accuracy=float((ens_pred == y).mean()),
        split_accuracy=split_acc,
        ensemble_split_accuracy=ens_split,
        expert_predictions=preds,
        ensemble_predictions=ens_pred,
    )


def _stream(seed: int, purpose: int) -> np.random.Generator:
    return np.random.Generator(np.random.Philox(np.random.SeedSequence([seed, purpose])))


def _mean_breakdown(rows: list[LossBreakdown], weights: list[int]) -> dict[str, float]:
    w = np.asarray(weights, dtype=np.float64) / sum(weights)
    names = (*LossBreakdown.COMPONENTS, "total")
    vals = np.array([[r.values()[n] for n in names] for r in rows])
    return dict(zip(names, (w @ vals).tolist()))


def train(config: TrainConfig, data: tuple[ClassPrior, Dataset, Dataset] | None = None) -> RunResult:
    started = time.perf_counter()
    if data is None:
        prior = build_longtail_counts(config.dataset)
        train_set, test_set = generate_dataset(config.dataset, prior)
    else:
        prior, train_set, test_set = data
    splits = split_categories(prior, config.many_threshold, config.few_threshold)

    lc = config.loss
    arch = ArchConfig(config.dataset.feature_dim, config.hidden_dims, prior.num_classes)
    model = MultiExpert.build(arch, lc.num_experts, base_seed=config.seed)
    params = model.parameters()
    state = OptimizerState.zeros_like(params)
    order_rng = _stream(config.seed, 1)
    select_rng = _stream(config.seed, 2)
    # the run seed and the configured augmentation seed both shape the views
    aug_seed = np.random.SeedSequence([config.seed, 3, config.augmentation.seed]).generate_state(1)[0]
    policy = replace(config.augmentation, seed=int(aug_seed))

    X, Y, U = train_set.features, train_set.labels, train_set.uids
    n = len(train_set)
    history: list[dict] = []
    for epoch in range(config.epochs):
        lr = lr_at(epoch, config)
        perm = order_rng.permutation(n)
        rows, sizes = [], []
        for start in range(0, n, config.batch_size):
            idx = perm[start : start + config.batch_size]
            views = np.stack(
                [augment_features(X[idx], U[idx], policy, t, epoch) for t in range(lc.copies)]
            )
            grid = model.forward_stacked(views)
            breakdown = total_loss(grid, Y[idx], prior, lc, rng=select_rng)
            dc.zero_grad(params)
            dc.backward(breakdown.total)
            sgd_step(params, [p.grad for p in params], state, lr, config.momentum, config.weight_decay)
            rows.append(breakdown)
            sizes.append(len(idx))
        record = {"epoch": epoch, "lr": lr, **_mean_breakdown(rows, sizes)}
        if (epoch + 1) % config.eval_every == 0 or epoch + 1 == config.epochs:
            report = evaluate(model, test_set, prior, splits)
            record["single_accuracy"] = report.single_accuracy
            record["ensemble_accuracy"] = report.ensemble_accuracy
            logger.info(
                "epoch %d lr %.4g loss %.4f acc %.4f ens %.4f",
                epoch, lr, record["total"], report.single_accuracy, report.ensemble_accuracy,
            )
        history.append(record)

    final = evaluate(model, test_set, prior, splits)
    kl = kl_report(model, test_set, prior, config.augmentation if config.augmentation.copies >= 2
                   else replace(config.augmentation, copies=2))
    return RunResult(
        config=config,
        seed=config.seed,
        final=final,
        history=history,
        kl=kl,
        wall_clock_s=time.perf_counter() - started,
        model=model,
        prior=prior,
        test=test_set,
    )
