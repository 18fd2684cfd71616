"""MLP experts and the multi-expert container."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import diffcore as dc
from .diffcore import Tensor
from .errors import ConfigError, ShapeError


@dataclass(frozen=True)
class ArchConfig:
    feature_dim: int = 16
    hidden_dims: tuple[int, ...] = (64, 64)
    num_classes: int = 20

    def __post_init__(self):
        object.__setattr__(self, "hidden_dims", tuple(int(h) for h in self.hidden_dims))
        if self.feature_dim < 1 or self.num_classes < 2 or any(h < 1 for h in self.hidden_dims):
            raise ConfigError("architecture dimensions must be positive (num_classes >= 2)", "hidden_dims")

    @property
    def widths(self) -> list[int]:
        return [self.feature_dim, *self.hidden_dims, self.num_classes]


class ExpertNet:
    """Fully connected ReLU network ending in a linear classifier."""

    def __init__(self, arch: ArchConfig, seed: int = 0):
        self.arch = arch
        self.seed = seed
        gen = np.random.Generator(np.random.Philox(seed))
        self.layers: list[tuple[Tensor, Tensor]] = []
        widths = arch.widths
        for fan_in, fan_out in zip(widths[:-1], widths[1:]):
            bound = 1.0 / np.sqrt(fan_in)
            w = gen.uniform(-bound, bound, size=(fan_in, fan_out))
            b = gen.uniform(-bound, bound, size=fan_out)
            self.layers.append((dc.parameter(w), dc.parameter(b)))

    def parameters(self) -> list[Tensor]:
        return [p for layer in self.layers for p in layer]

    def num_parameters(self) -> int:
        return sum(p.size for p in self.parameters())

    def forward(self, batch) -> Tensor:
        x = dc.as_tensor(batch)
        if x.ndim != 2 or x.shape[1] != self.arch.feature_dim:
            raise ShapeError(f"expected batch of width {self.arch.feature_dim}, got {x.shape}")
        last = len(self.layers) - 1
        for i, (w, b) in enumerate(self.layers):
            x = x @ w + b
            if i < last:
                x = dc.relu(x)
        return x

    __call__ = forward

    def predict(self, features: np.ndarray) -> np.ndarray:
        """Logit values without recording a graph."""
        x = np.asarray(features, dtype=np.float64)
        last = len(self.layers) - 1
        for i, (w, b) in enumerate(self.layers):
            x = x @ w.values + b.values
            if i < last:
                x = np.maximum(x, 0.0)
        return x


@dataclass
class MultiExpert:
    arch: ArchConfig
    seeds: list[int] = field(default_factory=lambda: [0, 1])

    def __post_init__(self):
        if len(self.seeds) < 1:
            raise ConfigError("need at least one expert", "num_experts")
        if len(set(self.seeds)) != len(self.seeds):
            raise ConfigError("expert init seeds must be distinct", "seeds")
        self.experts = [ExpertNet(self.arch, s) for s in self.seeds]

    @classmethod
    def build(cls, arch: ArchConfig, num_experts: int, base_seed: int = 0) -> MultiExpert:
        ss = np.random.SeedSequence(base_seed)
        seeds = [int(s.generate_state(1, dtype=np.uint32)[0]) for s in ss.spawn(num_experts)]
        return cls(arch, seeds)

    @property
    def num_experts(self) -> int:
        return len(self.experts)

    def parameters(self) -> list[Tensor]:
        return [p for e in self.experts for p in e.parameters()]

    def forward_all(self, batches: Sequence) -> list[list[Tensor]]:
        """Logit grid ``[k][t]`` for every expert and every view."""
        if len(batches) == 0:
            raise ConfigError("forward_all needs at least one batch", "copies")
        shapes = {np.shape(b.values if isinstance(b, Tensor) else b) for b in batches}
        if len(shapes) != 1:
            raise ShapeError(f"all batches must share a shape, got {sorted(shapes)}")
        return [[e.forward(b) for b in batches] for e in self.experts]

    def forward_stacked(self, views: np.ndarray) -> Tensor:
        """Logits of shape ``(K, T, B, C)`` from feature views of shape ``(T, B, d)``.

        Each expert sees all views in a single matrix product.
        """
        views = np.asarray(views, dtype=np.float64)
        T, B, d = views.shape
        flat = views.reshape(T * B, d)
        per_expert = [e.forward(flat).reshape(T, B, self.arch.num_classes) for e in self.experts]
        return dc.stack(per_expert, axis=0)

    def predict(self, features: np.ndarray) -> np.ndarray:
        """Logit values ``(K, N, C)`` without recording a graph."""
        return np.stack([e.predict(features) for e in self.experts])

    # ------------------------------------------------------------ checkpoint

    def to_dict(self) -> dict:
        return {
            "arch": asdict(self.arch),
            "seeds": list(self.seeds),
            "experts": [
                [{"weight": w.values.tolist(), "bias": b.values.tolist()} for w, b in e.layers]
                for e in self.experts
            ],
        }

    @classmethod
    def from_dict(cls, payload: dict) -> MultiExpert:
        arch = ArchConfig(**payload["arch"])
        model = cls(arch, list(payload["seeds"]))
        for expert, layers in zip(model.experts, payload["experts"]):
            for (w, b), saved in zip(expert.layers, layers):
                w.values = np.array(saved["weight"], dtype=np.float64).reshape(w.shape)
                b.values = np.array(saved["bias"], dtype=np.float64).reshape(b.shape)
        return model

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_dict()))

    @classmethod
    def load(cls, path: str | Path) -> MultiExpert:
        return cls.from_dict(json.loads(Path(path).read_text()))


def ensemble_logits(logits_per_expert: Sequence) -> Tensor:
    """Arithmetic mean of expert logits."""
    if len(logits_per_expert) == 0:
        raise ConfigError("need at least one expert", "num_experts")
    stacked = dc.stack(logits_per_expert, axis=0)
    return stacked.mean(axis=0)
