"""Post-hoc diagnostics on a frozen model.

Analysis functions only need ``model.predict(features) -> (K, N, C)`` logit
values and ``model.num_experts``, so hand-built stubs work as well as trained
:class:`~nestlab.model.MultiExpert` instances.
"""

from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import asdict, dataclass, field

import numpy as np

from .data import AugmentationPolicy, ClassPrior, Dataset, augment_features
from .errors import ConfigError

# key offset that keeps analysis views disjoint from training views
ANALYSIS_EPOCH = -1


@dataclass
class KLReport:
    inter_per_class: list[float] = field(default_factory=list)
    intra_per_class: list[float] = field(default_factory=list)
    inter_overall: float | None = None
    intra_overall: float | None = None
    inter_directional: dict[str, float] = field(default_factory=dict)
    class_sizes: list[int] = field(default_factory=list)

    def to_dict(self) -> dict:
        return _json_safe(asdict(self))


@dataclass
class ScoreHistogram:
    edges: list[float]
    counts: list[int]

    @classmethod
    def from_scores(cls, scores: np.ndarray, bins: int = 20) -> ScoreHistogram:
        counts, edges = np.histogram(np.clip(scores, 0.0, 1.0), bins=bins, range=(0.0, 1.0))
        return cls(edges.tolist(), counts.astype(int).tolist())

    @property
    def total(self) -> int:
        return int(sum(self.counts))

    def to_dict(self) -> dict:
        return asdict(self)


def _json_safe(obj):
    if isinstance(obj, float) and math.isnan(obj):
        return None
    if isinstance(obj, dict):
        return {k: _json_safe(v) for k, v in obj.items()}
    if isinstance(obj, list):
        return [_json_safe(v) for v in obj]
    return obj


def log_softmax(z: np.ndarray, log_n: np.ndarray | None = None) -> np.ndarray:
    s = z if log_n is None else z + log_n
    s = s - s.max(axis=-1, keepdims=True)
    return s - np.log(np.exp(s).sum(axis=-1, keepdims=True))


def balanced_probs(logits: np.ndarray, prior: ClassPrior) -> np.ndarray:
    return np.exp(log_softmax(logits, prior.log_counts()))


def kl_rows(p: np.ndarray, q: np.ndarray) -> np.ndarray:
    """Row-wise KL(p || q) with the same conventions as ``losses.kl_div``."""
    q = np.maximum(q, 1e-12)
    with np.errstate(divide="ignore", invalid="ignore"):
        terms = np.where(p > 0, p * (np.log(p) - np.log(q)), 0.0)
    return terms.sum(axis=-1)


def per_class_accuracy(predictions, labels, num_classes: int) -> list[float]:
    """Accuracy within each class; NaN marks classes absent from ``labels``."""
    pred = np.asarray(predictions)
    y = np.asarray(labels)
    out = []
    for j in range(num_classes):
        sel = y == j
        out.append(float((pred[sel] == j).mean()) if sel.any() else float("nan"))
    return out


def _per_class_mean(values: np.ndarray, labels: np.ndarray, num_classes: int) -> list[float]:
    sums = np.bincount(labels, weights=values, minlength=num_classes)
    counts = np.bincount(labels, minlength=num_classes)
    return [float(s / c) if c else float("nan") for s, c in zip(sums, counts)]


def inter_expert_kl(model, test: Dataset, prior: ClassPrior) -> KLReport:
    """Mean KL over ordered expert pairs (so symmetric), per true class."""
    K = model.num_experts
    if K < 2:
        raise ConfigError("inter-expert KL needs at least two experts", "num_experts")
    probs = balanced_probs(model.predict(test.features), prior)
    C = probs.shape[-1]
    per_sample = np.zeros(len(test))
    directional = {}
    for k in range(K):
        for q in range(K):
            if k == q:
                continue
            d = kl_rows(probs[k], probs[q])
            directional[f"{k}->{q}"] = float(d.mean())
            per_sample += d
    per_sample /= K * (K - 1)
    return KLReport(
        inter_per_class=_per_class_mean(per_sample, test.labels, C),
        inter_overall=float(per_sample.mean()),
        inter_directional=directional,
        class_sizes=np.bincount(test.labels, minlength=C).astype(int).tolist(),
    )


def intra_expert_kl(
    model, test: Dataset, prior: ClassPrior, policy: AugmentationPolicy, pairs: int = 1
) -> KLReport:
    """Symmetrized KL between two augmented views per sample, averaged over experts."""
    if policy.copies < 2:
        raise ConfigError("intra-expert KL needs an augmentation policy with copies >= 2", "copies")
    per_sample = np.zeros(len(test))
    for r in range(pairs):
        # draws >= 1 so both views are augmented
        va = augment_features(test.features, test.uids, policy, 2 * r + 1, ANALYSIS_EPOCH)
        vb = augment_features(test.features, test.uids, policy, 2 * r + 2, ANALYSIS_EPOCH)
        pa = balanced_probs(model.predict(va), prior)
        pb = balanced_probs(model.predict(vb), prior)
        sym = 0.5 * (kl_rows(pa, pb) + kl_rows(pb, pa))
        per_sample += sym.mean(axis=0)
    per_sample /= pairs
    C = prior.num_classes
    return KLReport(
        intra_per_class=_per_class_mean(per_sample, test.labels, C),
        intra_overall=float(per_sample.mean()),
        class_sizes=np.bincount(test.labels, minlength=C).astype(int).tolist(),
    )


def kl_report(model, test: Dataset, prior: ClassPrior, policy: AugmentationPolicy, pairs: int = 1) -> KLReport:
    """Both KL views in one report; the inter part is left empty for K = 1."""
    report = KLReport(class_sizes=np.bincount(test.labels, minlength=prior.num_classes).astype(int).tolist())
    if model.num_experts >= 2:
        inter = inter_expert_kl(model, test, prior)
        report.inter_per_class = inter.inter_per_class
        report.inter_overall = inter.inter_overall
        report.inter_directional = inter.inter_directional
    if policy.copies >= 2:
        intra = intra_expert_kl(model, test, prior, policy, pairs)
        report.intra_per_class = intra.intra_per_class
        report.intra_overall = intra.intra_overall
    return report


def hardest_negative_scores(model, test: Dataset, expert: int | None = 0) -> tuple[np.ndarray, ScoreHistogram]:
    """Top softmax probability among wrong classes, per test sample.

    ``expert=None`` scores the logit-averaged ensemble.
    """
    logits = model.predict(test.features)
    z = logits.mean(axis=0) if expert is None else logits[expert]
    probs = np.exp(log_softmax(z))
    probs[np.arange(len(test)), test.labels] = -np.inf
    scores = probs.max(axis=-1)
    return scores, ScoreHistogram.from_scores(scores)


def per_class_csv(prior: ClassPrior, accuracy: list[float], report: KLReport) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["class_id", "n_j", "accuracy", "inter_kl", "intra_kl"])
    for j, n in enumerate(prior.counts):
        inter = report.inter_per_class[j] if report.inter_per_class else float("nan")
        intra = report.intra_per_class[j] if report.intra_per_class else float("nan")
        writer.writerow([j, n, _fmt(accuracy[j]), _fmt(inter), _fmt(intra)])
    return buf.getvalue()


def _fmt(x: float) -> str:
    return "" if math.isnan(x) else repr(float(x))


def dump_json(obj, path) -> None:
    with open(path, "w") as fh:
        json.dump(_json_safe(obj), fh, indent=2, sort_keys=True)
        fh.write("\n")
