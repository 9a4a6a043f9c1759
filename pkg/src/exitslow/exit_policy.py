"""Early-exit decision rules: entropy threshold and patience counter."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .autodiff import DomainError, entropy_np, softmax_np


@dataclass(frozen=True)
class ExitPolicy:
    kind: str
    entropy_threshold: float | None = None
    patience_t: int | None = None

    def __post_init__(self):
        if self.kind == "entropy":
            if self.entropy_threshold is None or self.patience_t is not None:
                raise ValueError("entropy policy takes exactly entropy_threshold")
            if self.entropy_threshold < 0:
                raise ValueError("entropy threshold must be nonnegative")
        elif self.kind == "patience":
            if self.patience_t is None or self.entropy_threshold is not None:
                raise ValueError("patience policy takes exactly patience_t")
            if int(self.patience_t) != self.patience_t or self.patience_t < 1:
                raise ValueError("patience_t must be a positive integer")
        else:
            raise ValueError(f"unknown policy kind {self.kind!r}")

    @classmethod
    def entropy(cls, threshold: float) -> "ExitPolicy":
        return cls("entropy", entropy_threshold=float(threshold))

    @classmethod
    def patience(cls, t: int) -> "ExitPolicy":
        return cls("patience", patience_t=int(t))

    def to_dict(self) -> dict:
        if self.kind == "entropy":
            return {"kind": "entropy", "entropy_threshold": self.entropy_threshold}
        return {"kind": "patience", "patience_t": self.patience_t}

    @classmethod
    def from_dict(cls, d: dict) -> "ExitPolicy":
        return cls(d["kind"], entropy_threshold=d.get("entropy_threshold"), patience_t=d.get("patience_t"))

    def describe(self) -> str:
        if self.kind == "entropy":
            return f"entropy<{self.entropy_threshold:.4g}"
        return f"patience={self.patience_t}"


@dataclass
class ExitDecision:
    exit_layer: int  # 1-based
    prediction: int
    per_layer_preds: list[int] = field(default_factory=list)
    per_layer_entropy: list[float] = field(default_factory=list)


def entropy(dist) -> float:
    p = np.asarray(dist, dtype=np.float64)
    if np.any(p < 0):
        raise DomainError("probability vector has a negative component")
    if abs(p.sum() - 1.0) > 1e-6:
        raise DomainError("probability vector does not sum to 1")
    return float(entropy_np(p))


def _check_patience(policy: ExitPolicy, n_layers: int) -> None:
    if policy.kind == "patience" and policy.patience_t >= n_layers:
        raise DomainError(f"patience_t={policy.patience_t} must be below n_layers={n_layers}")


def decide(policy: ExitPolicy, layer_logits: Sequence) -> ExitDecision:
    """Walk the layers in order and stop where the policy's criterion fires."""
    logits = [np.asarray(l, dtype=np.float64) for l in layer_logits]
    if not logits:
        raise DomainError("no layer logits given")
    n = len(logits)
    _check_patience(policy, n)
    preds = [int(np.argmax(l)) for l in logits]
    ents = [float(entropy_np(softmax_np(l, -1))) for l in logits]
    exit_layer = n
    if policy.kind == "entropy":
        for i in range(n):
            if ents[i] < policy.entropy_threshold:
                exit_layer = i + 1
                break
    else:
        counter = 0
        for i in range(1, n):
            counter = counter + 1 if preds[i] == preds[i - 1] else 0
            if counter == policy.patience_t:
                exit_layer = i + 1
                break
    return ExitDecision(exit_layer, preds[exit_layer - 1], preds, ents)


def decide_batch(policy: ExitPolicy, logits: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Vectorised :func:`decide` for logits shaped (n_layers, batch, K).

    Returns (exit_layers, predictions), exit layers 1-based.
    """
    logits = np.asarray(logits, dtype=np.float64)
    n, b, _ = logits.shape
    _check_patience(policy, n)
    preds = logits.argmax(axis=-1)  # (n, b)
    if policy.kind == "entropy":
        ents = entropy_np(softmax_np(logits, -1))
        fired = ents < policy.entropy_threshold
    else:
        fired = np.zeros((n, b), dtype=bool)
        counter = np.zeros(b, dtype=np.int64)
        for i in range(1, n):
            counter = np.where(preds[i] == preds[i - 1], counter + 1, 0)
            fired[i] = counter == policy.patience_t
    any_fired = fired.any(axis=0)
    first = np.where(any_fired, fired.argmax(axis=0), n - 1)
    return first + 1, preds[first, np.arange(b)]
