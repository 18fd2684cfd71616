"""Balanced individual learning, balanced online distillation and their
hard-category (partial) counterparts.

Logit grids are handled as one tensor of shape ``(K, T, B, C)``: experts,
augmented views, batch, classes. A nested ``[k][t]`` list of ``(B, C)``
tensors is accepted anywhere a grid is expected and stacked on entry.

Distillation terms compare ordered pairs (teacher, student). Pairs are formed
by broadcasting a teacher axis against a student axis and masking the
diagonal, so every term is a handful of array operations regardless of K or T.
Partial-view terms restrict both distributions to the teacher's mined
category set and renormalize with the class counts.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import diffcore as dc
from .data import ClassPrior
from .diffcore import Tensor
from .errors import ConfigError, DomainError, ShapeError

SELECTIONS = ("hard", "random")


@dataclass(frozen=True)
class LossConfig:
    lam: float = 0.6
    beta: float = 0.3
    detach_teacher: bool = True
    num_experts: int = 2
    copies: int = 4
    use_balanced: bool = True
    use_inter: bool = True
    use_intra: bool = True
    use_nfl: bool = True
    selection: str = "hard"

    def __post_init__(self):
        if self.lam < 0:
            raise ConfigError("lambda must be >= 0", "lambda")
        if not 0 < self.beta <= 1:
            raise ConfigError("beta must lie in (0, 1]", "beta")
        if self.num_experts < 1:
            raise ConfigError("num_experts must be >= 1", "num_experts")
        if self.copies < 1:
            raise ConfigError("copies must be >= 1", "copies")
        if self.selection not in SELECTIONS:
            raise ConfigError(f"selection must be one of {SELECTIONS}", "selection")

    def c_hard(self, num_classes: int) -> int:
        """Number of mined negatives: ``round(beta * C)`` clamped to ``[1, C-1]``."""
        return min(max(1, math.floor(self.beta * num_classes + 0.5)), num_classes - 1)


@dataclass(frozen=True)
class HardCategorySet:
    label: int
    indices: tuple[int, ...]

    def __contains__(self, j: int) -> bool:
        return j in self.indices

    def __len__(self) -> int:
        return len(self.indices)


@dataclass
class LossBreakdown:
    bil_g: Tensor
    bil_p: Tensor
    inter_g: Tensor
    inter_p: Tensor
    intra_g: Tensor
    intra_p: Tensor
    total: Tensor

    COMPONENTS = ("bil_g", "bil_p", "inter_g", "inter_p", "intra_g", "intra_p")

    def values(self) -> dict[str, float]:
        names = (*self.COMPONENTS, "total")
        return {name: getattr(self, name).item() for name in names}

    def to_record(self, step: int) -> dict:
        return {"step": step, **self.values()}


# ------------------------------------------------------------------ helpers


def _zero() -> Tensor:
    return Tensor(0.0)


def as_grid(logits) -> Tensor:
    """Normalize a logit grid to a ``(K, T, B, C)`` tensor."""
    if isinstance(logits, Tensor):
        if logits.ndim != 4:
            raise ShapeError(f"logit grid must be 4-D (K, T, B, C), got {logits.shape}")
        return logits
    rows = [dc.stack(list(row), axis=0) for row in logits]
    grid = dc.stack(rows, axis=0)
    if grid.ndim != 4:
        raise ShapeError(f"logit grid entries must be (B, C), got grid {grid.shape}")
    return grid


def _log_prior(prior: ClassPrior | None, num_classes: int, balanced: bool = True) -> np.ndarray:
    if prior is None or not balanced:
        return np.zeros(num_classes)
    if prior.num_classes != num_classes:
        raise ShapeError(f"prior has {prior.num_classes} classes, logits have {num_classes}")
    return prior.log_counts()


def _check_labels(labels, num_classes: int, batch: int) -> np.ndarray:
    y = np.asarray(labels, dtype=np.int64).reshape(-1)
    if y.shape[0] != batch:
        raise ShapeError(f"{y.shape[0]} labels for batch of {batch}")
    if y.size and (y.min() < 0 or y.max() >= num_classes):
        raise IndexError("label out of range")
    return y


def _one_hot(y: np.ndarray, num_classes: int) -> np.ndarray:
    out = np.zeros((y.shape[0], num_classes))
    out[np.arange(y.shape[0]), y] = 1.0
    return out


def _log_prob(z: Tensor, log_n: np.ndarray) -> Tensor:
    """Log of the count-weighted softmax over the last axis."""
    s = z + log_n
    return s - dc.logsumexp(s, axis=-1)


def _partial_log_prob(z: Tensor, log_n: np.ndarray, mask: np.ndarray) -> Tensor:
    """Count-weighted log-softmax renormalized over ``mask``.

    Entries outside the mask are finite but meaningless; callers mask them out.
    """
    s = z + log_n
    return s - dc.logsumexp(s, axis=-1, mask=mask)


def _pair_kl(logp: Tensor, axis: int, detach: bool) -> Tensor:
    """Sum of KL(p_a || p_b) over ordered pairs a != b along ``axis``.

    Uses ``sum_{a!=b} p_a.(l_a - l_b) = (N-1) sum_a p_a.l_a - (sum_a p_a).(sum_b l_b)
    + sum_a p_a.l_a`` with the teacher factors optionally detached, so the
    cost is linear in N.
    """
    n = logp.shape[axis]
    teacher = dc.detach(logp) if detach else logp
    p = dc.exp(teacher)
    own = (p * teacher).sum()
    cross = (p.sum(axis=axis, keepdims=True) * logp.sum(axis=axis, keepdims=True)).sum()
    return own * (n - 1) - cross + (p * logp).sum()


# axis letters for the (K, T, B, C) grid; the pair axis is doubled in the output
_PAIR_SPECS = {0: "ktbc,qtbc->kqtb", 1: "ktbc,kubc->ktub"}


def _pair_partial_kl(grid: Tensor, log_n: np.ndarray, mask: np.ndarray, axis: int, detach: bool) -> Tensor:
    """Ordered-pair KL sum on each teacher's mined support.

    For teacher a with support S_a and student b,
    ``KL = p*_a.l*_a - p*_a.s_b + log sum_{j in S_a} exp(s_bj)``, where ``s`` are
    count-shifted logits and ``p*_a`` vanishes off S_a. Only the last term is
    genuinely pairwise; it is a single contraction over classes.
    """
    n = grid.shape[axis]
    keep = mask.astype(np.float64)
    s = grid + log_n
    own_logp = s - dc.logsumexp(s, axis=-1, mask=mask)
    teacher = dc.detach(own_logp) if detach else own_logp
    p = dc.exp(teacher * keep) * keep
    own = (p * teacher).sum()
    cross = (p.sum(axis=axis, keepdims=True) * s.sum(axis=axis, keepdims=True)).sum() - (p * s).sum()
    shift = s.values.max(axis=-1, keepdims=True)
    mass = dc.einsum(_PAIR_SPECS[axis], keep, dc.exp(s - shift))
    off = 1.0 - np.eye(n)
    off = off[:, :, None, None] if axis == 0 else off[None, :, :, None]
    norm = (dc.log(mass) * off).sum() + (n - 1) * float(shift.sum())
    return own * (n - 1) - cross + norm


# ------------------------------------------------------------ probabilities


def softmax_prob(z) -> Tensor:
    z = dc.as_tensor(z)
    return dc.exp(_log_prob(z, np.zeros(z.shape[-1])))


def balanced_prob(z, prior: ClassPrior) -> Tensor:
    z = dc.as_tensor(z)
    return dc.exp(_log_prob(z, _log_prior(prior, z.shape[-1])))


def hard_category_mask(z: np.ndarray, labels, c_hard: int) -> np.ndarray:
    """Boolean mask over the last axis: the ``c_hard`` highest-logit negatives plus the label.

    ``labels`` broadcasts against ``z.shape[:-1]``. Ties go to the lower index.
    """
    z = np.asarray(z, dtype=np.float64)
    C = z.shape[-1]
    if not 1 <= c_hard <= C - 1:
        raise ConfigError(f"c_hard must lie in [1, {C - 1}]", "beta")
    y = np.broadcast_to(np.asarray(labels, dtype=np.int64), z.shape[:-1])[..., None]
    key = -z.copy()
    np.put_along_axis(key, y, np.inf, axis=-1)
    order = np.argsort(key, axis=-1, kind="stable")
    mask = np.zeros(z.shape, dtype=bool)
    np.put_along_axis(mask, order[..., :c_hard], True, axis=-1)
    np.put_along_axis(mask, y, True, axis=-1)
    return mask


def random_category_mask(shape, labels, c_hard: int, rng: np.random.Generator) -> np.ndarray:
    """Like :func:`hard_category_mask` but the negatives are drawn uniformly."""
    C = shape[-1]
    if not 1 <= c_hard <= C - 1:
        raise ConfigError(f"c_hard must lie in [1, {C - 1}]", "beta")
    y = np.broadcast_to(np.asarray(labels, dtype=np.int64), shape[:-1])[..., None]
    key = rng.random(shape)
    np.put_along_axis(key, y, np.inf, axis=-1)
    order = np.argsort(key, axis=-1, kind="stable")
    mask = np.zeros(shape, dtype=bool)
    np.put_along_axis(mask, order[..., :c_hard], True, axis=-1)
    np.put_along_axis(mask, y, True, axis=-1)
    return mask


def hard_category_mine(z_row, y: int, c_hard: int) -> HardCategorySet:
    values = z_row.values if isinstance(z_row, Tensor) else np.asarray(z_row, dtype=np.float64)
    if not 0 <= y < values.shape[-1]:
        raise IndexError("label out of range")
    mask = hard_category_mask(values.reshape(1, -1), np.array([y]), c_hard)[0]
    return HardCategorySet(int(y), tuple(int(j) for j in np.flatnonzero(mask)))


def partial_balanced_prob(z_row, psi: HardCategorySet, prior: ClassPrior) -> Tensor:
    """Balanced probabilities over ``psi.indices`` (in that order)."""
    if len(psi.indices) == 0:
        raise ConfigError("empty category set", "beta")
    z_row = dc.as_tensor(z_row)
    log_n = _log_prior(prior, z_row.shape[-1])[list(psi.indices)]
    return dc.exp(_log_prob(dc.gather(z_row, psi.indices), log_n))


def kl_div(p, q) -> Tensor:
    """KL(p || q) for probability vectors; ``0 log 0 = 0`` and q is floored at 1e-12."""
    p, q = dc.as_tensor(p), dc.as_tensor(q)
    if p.shape != q.shape:
        raise ShapeError(f"kl_div: shapes {p.shape} and {q.shape} differ")
    for name, t in (("p", p), ("q", q)):
        if np.any(t.values < 0) or abs(t.values.sum() - 1.0) > 1e-6:
            raise DomainError(f"kl_div: {name} is not a probability vector")
    nz = (p.values > 0).astype(np.float64)
    p_safe = p * nz + (1.0 - nz)
    floor = (q.values >= 1e-12).astype(np.float64)
    q_safe = q * floor + 1e-12 * (1.0 - floor)
    return (p * (dc.log(p_safe) - dc.log(q_safe))).sum()


# --------------------------------------------------------------- the losses


def mine_masks(
    grid: Tensor,
    labels,
    config: LossConfig,
    rng: np.random.Generator | None = None,
) -> np.ndarray:
    """Category masks of shape ``(K, T, B, C)``, one per expert/view/sample."""
    C = grid.shape[-1]
    c_hard = config.c_hard(C)
    if config.selection == "random":
        if rng is None:
            raise ConfigError("random selection needs an rng", "selection")
        return random_category_mask(grid.shape, labels, c_hard, rng)
    return hard_category_mask(grid.values, labels, c_hard)


def ce_loss(logits, labels) -> Tensor:
    """Mean cross-entropy on plain softmax probabilities.

    Accepts a ``(B, C)`` tensor or a grid; grids sum over experts and average
    over views like :func:`bil_global_loss`.
    """
    z = as_grid(logits) if isinstance(logits, (list, tuple)) else dc.as_tensor(logits)
    if z.ndim == 2:
        z = z.reshape(1, 1, *z.shape)
    return bil_global_loss(z, labels, None)


def bil_global_loss(logits, labels, prior: ClassPrior | None) -> Tensor:
    grid = as_grid(logits)
    _, T, B, C = grid.shape
    y = _check_labels(labels, C, B)
    logp = _log_prob(grid, _log_prior(prior, C))
    return (logp * _one_hot(y, C)).sum() * (-1.0 / (T * B))


def bil_partial_loss(
    logits,
    labels,
    prior: ClassPrior | None,
    config: LossConfig,
    masks: np.ndarray | None = None,
    rng: np.random.Generator | None = None,
) -> Tensor:
    grid = as_grid(logits)
    _, T, B, C = grid.shape
    y = _check_labels(labels, C, B)
    if masks is None:
        masks = mine_masks(grid, y, config, rng)
    logp = _partial_log_prob(grid, _log_prior(prior, C), masks)
    return (logp * _one_hot(y, C)).sum() * (-1.0 / (T * B))


def inter_global_loss(logits, prior: ClassPrior | None, config: LossConfig) -> Tensor:
    grid = as_grid(logits)
    K, T, B, C = grid.shape
    if K < 2:
        return _zero()
    logp = _log_prob(grid, _log_prior(prior, C))
    total = _pair_kl(logp, 0, config.detach_teacher)
    return total * (2.0 / (K * (K - 1)) / (T * B))


def inter_partial_loss(
    logits,
    labels,
    prior: ClassPrior | None,
    config: LossConfig,
    masks: np.ndarray | None = None,
    rng: np.random.Generator | None = None,
) -> Tensor:
    grid = as_grid(logits)
    K, T, B, C = grid.shape
    if K < 2:
        return _zero()
    y = _check_labels(labels, C, B)
    if masks is None:
        masks = mine_masks(grid, y, config, rng)
    total = _pair_partial_kl(grid, _log_prior(prior, C), masks, 0, config.detach_teacher)
    return total * (2.0 / (K * (K - 1)) / (T * B))


def intra_losses(
    logits,
    labels,
    prior: ClassPrior | None,
    config: LossConfig,
    masks: np.ndarray | None = None,
    rng: np.random.Generator | None = None,
    partial: bool = True,
) -> tuple[Tensor, Tensor]:
    """(global, partial) consistency between views inside each expert."""
    grid = as_grid(logits)
    K, T, B, C = grid.shape
    if T < 2:
        return _zero(), _zero()
    log_n = _log_prior(prior, C)
    norm = 2.0 / (T * (T - 1)) / B
    g = _pair_kl(_log_prob(grid, log_n), 1, config.detach_teacher) * norm
    if not partial:
        return g, _zero()
    y = _check_labels(labels, C, B)
    if masks is None:
        masks = mine_masks(grid, y, config, rng)
    p = _pair_partial_kl(grid, log_n, masks, 1, config.detach_teacher) * norm
    return g, p


def aggregate(parts: dict[str, Tensor], config: LossConfig) -> LossBreakdown:
    """Weighted total; components switched off by ``config`` become exact zeros."""
    on = {
        "bil_g": True,
        "bil_p": config.use_nfl,
        "inter_g": config.use_inter,
        "inter_p": config.use_inter and config.use_nfl,
        "intra_g": config.use_intra,
        "intra_p": config.use_intra and config.use_nfl,
    }
    comp = {name: (dc.as_tensor(parts[name]) if on[name] else _zero()) for name in LossBreakdown.COMPONENTS}
    total = comp["bil_g"]
    if config.use_nfl:
        total = total + comp["bil_p"]
    if config.use_intra:
        total = total + (comp["intra_g"] + comp["intra_p"]) * config.lam
    if config.use_inter:
        total = total + (comp["inter_g"] + comp["inter_p"]) * config.lam
    return LossBreakdown(total=total, **comp)


def total_loss(
    logits,
    labels,
    prior: ClassPrior | None,
    config: LossConfig,
    rng: np.random.Generator | None = None,
) -> LossBreakdown:
    grid = as_grid(logits)
    K, T, B, C = grid.shape
    if K != config.num_experts or T != config.copies:
        raise ShapeError(f"grid {K}x{T} does not match config {config.num_experts}x{config.copies}")
    y = _check_labels(labels, C, B)
    prior = prior if config.use_balanced else None
    zero = _zero()
    parts = dict.fromkeys(LossBreakdown.COMPONENTS, zero)
    parts["bil_g"] = bil_global_loss(grid, y, prior)

    masks = None
    if config.use_nfl:
        masks = mine_masks(grid, y, config, rng)
        parts["bil_p"] = bil_partial_loss(grid, y, prior, config, masks)
    if config.use_inter and K > 1:
        parts["inter_g"] = inter_global_loss(grid, prior, config)
        if config.use_nfl:
            parts["inter_p"] = inter_partial_loss(grid, y, prior, config, masks)
    if config.use_intra and T > 1:
        parts["intra_g"], parts["intra_p"] = intra_losses(
            grid, y, prior, config, masks, partial=config.use_nfl
        )
    return aggregate(parts, config)

