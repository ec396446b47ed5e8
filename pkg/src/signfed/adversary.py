"""Byzantine vote generators injected at the aggregation barrier."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .privacy import deterministic_sign

ADVERSARY_KINDS = ("random", "negative")


@dataclass(frozen=True)
class AdversaryConfig:
    """Byzantine population: ``count`` attackers of one kind, on top of the
    normal parties."""

    kind: str
    count: int

    def __post_init__(self) -> None:
        if self.kind not in ADVERSARY_KINDS:
            raise ValueError(f"unknown adversary kind {self.kind!r}; choose from {ADVERSARY_KINDS}")
        if self.count < 0:
            raise ValueError(f"adversary count must be nonnegative, got {self.count}")


def random_adversary(d: int, rng: np.random.Generator) -> np.ndarray:
    """Coin-flip vote: each coordinate independently +1 or -1 with probability 1/2."""
    if d < 1:
        raise ValueError(f"dimension must be >= 1, got {d}")
    return np.where(rng.random(d) < 0.5, 1.0, -1.0)


def negative_adversary(normal_grads) -> np.ndarray:
    """Negated sign of the normal parties' average gradient.

    Models an attacker that observes the honest parties' shared gradients;
    a zero mean coordinate signs to +1 and therefore negates to -1. Every
    attacker of this kind emits the same vector.
    """
    if len(normal_grads) == 0:
        raise ValueError("negative adversary needs at least one normal gradient")
    mean = np.mean(np.asarray(normal_grads, dtype=np.float64), axis=0)
    return -deterministic_sign(mean)
