"""Round-based orchestration of parties and server.

Implements four aggregation rules behind one synchronous round loop:

* ``dp-signsgd``     — parties send privatised sign votes, server majority-votes
* ``ef-dp-signsgd``  — same votes, server adds an error-feedback residual
* ``signsgd``        — plain sign votes, majority vote
* ``fedavg``         — full-precision gradients, arithmetic mean

Every random draw comes from a substream keyed by (master seed, domain tag,
party id, round), so parties may run in any order or concurrently without
changing results.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .adversary import AdversaryConfig, negative_adversary, random_adversary
from .data import Dataset
from .model import (
    EpochSampler,
    evaluate,
    local_gradient,
    model_from_flat,
)
from .privacy import PrivacyParams, deterministic_sign, dpsign, sign_wire_bytes

ALGORITHMS = ("dp-signsgd", "ef-dp-signsgd", "signsgd", "fedavg")
SIGN_ALGORITHMS = ("dp-signsgd", "ef-dp-signsgd", "signsgd")

# Bytes per float in the FedAvg wire model (32-bit floats).
FEDAVG_BYTES_PER_COORD = 4

# Substream domain tags; cli reuses TAG_INIT and TAG_PARTITION.
TAG_INIT = 0
TAG_PARTITION = 1
TAG_SAMPLER = 2
TAG_COMPRESS = 3
TAG_ADVERSARY = 4


def substream(master_seed: int, *key: int) -> np.random.Generator:
    """Independent random stream keyed by (master seed, *key)."""
    return np.random.default_rng(np.random.SeedSequence((master_seed, *key)))


@dataclass
class ServerState:
    """Global weights plus the error-feedback residual and step hyperparameters."""

    weights: np.ndarray
    residual: np.ndarray
    decay: float
    eta: float
    round: int = 0

    def __post_init__(self) -> None:
        self.weights = np.asarray(self.weights, dtype=np.float64)
        self.residual = np.asarray(self.residual, dtype=np.float64)
        if self.residual.shape != self.weights.shape:
            raise ValueError("residual must have the same length as the weights")
        if not np.all(np.isfinite(self.residual)):
            raise ValueError("residual must be finite")
        if not 0.0 <= self.decay <= 1.0:
            raise ValueError(f"decay must lie in [0, 1], got {self.decay!r}")
        if self.eta < 0.0:
            raise ValueError(f"learning rate must be nonnegative, got {self.eta!r}")
        if self.round == 0 and np.any(self.residual != 0.0):
            raise ValueError("residual must be all-zero at round 0")

    @classmethod
    def initial(cls, weights: np.ndarray, decay: float, eta: float) -> "ServerState":
        weights = np.asarray(weights, dtype=np.float64)
        return cls(weights, np.zeros_like(weights), decay, eta, round=0)


@dataclass
class RoundMetrics:
    """One CSV row: evaluation results and wire bytes for a completed round."""

    round: int
    test_accuracy: float
    train_loss: float
    uplink_bytes: int
    downlink_bytes: int


class Party:
    """One federation participant: a data shard plus its persistent sampler.

    The sampler walks the shard in seeded epoch permutations so mini-batches
    are drawn without replacement and reshuffled once per epoch.
    """

    def __init__(self, party_id: int, data: Dataset, batch_size: int, master_seed: int):
        self.party_id = party_id
        self.data = data
        self.batch_size = batch_size
        self._sampler = EpochSampler(
            len(data), batch_size, substream(master_seed, TAG_SAMPLER, party_id)
        )

    def next_batch_indices(self) -> np.ndarray:
        return self._sampler.next_indices()


def _as_matrix(vectors, what: str) -> np.ndarray:
    if len(vectors) == 0:
        raise ValueError(f"need at least one {what}")
    mat = np.asarray(vectors, dtype=np.float64)
    if mat.ndim != 2:
        raise ValueError(f"all {what}s must have equal length")
    return mat


def majority_vote_aggregate(signs) -> np.ndarray:
    """Coordinate-wise sign of the mean vote; exact ties resolve to +1."""
    return deterministic_sign(_as_matrix(signs, "sign vector").mean(axis=0))


def ef_aggregate(signs, residual: np.ndarray, decay: float, *,
                 residual_scale: float | None = None):
    """Error-feedback aggregation.

    With s the mean of the incoming sign vectors and e the residual:

        g = sign(s + e)            (ties to +1)
        e' = decay*e + (1-decay)*(s - residual_scale*g)

    ``residual_scale`` defaults to 1/M, M the number of incoming vectors.
    Returns (g, e').
    """
    mat = _as_matrix(signs, "sign vector")
    residual = np.asarray(residual, dtype=np.float64)
    if residual.shape != mat.shape[1:]:
        raise ValueError("residual length must match the sign vectors")
    if not 0.0 <= decay <= 1.0:
        raise ValueError(f"decay must lie in [0, 1], got {decay!r}")
    if residual_scale is None:
        residual_scale = 1.0 / mat.shape[0]
    mean_vote = mat.mean(axis=0)
    g = deterministic_sign(mean_vote + residual)
    new_residual = decay * residual + (1.0 - decay) * (mean_vote - residual_scale * g)
    return g, new_residual


def fedavg_aggregate(grads) -> np.ndarray:
    """Arithmetic mean of full-precision gradients."""
    return _as_matrix(grads, "gradient").mean(axis=0)


def run_round(
    state: ServerState,
    parties: list[Party],
    algorithm: str,
    adversaries: AdversaryConfig | None = None,
    *,
    layer_dims: tuple[int, ...],
    test_data: Dataset,
    privacy: PrivacyParams | list[PrivacyParams] | None = None,
    clip_bound: float | None = None,
    master_seed: int = 0,
    residual_scale: float | None = None,
) -> tuple[ServerState, RoundMetrics]:
    """Advance one synchronous round; returns (new state, metrics).

    Every normal party computes its clipped mini-batch gradient at the
    current weights and sends it compressed per the algorithm; Byzantine
    parties inject their votes at the barrier; the server aggregates,
    updates the residual (error-feedback only) and applies
    w <- w - eta * direction. Metrics carry post-update test accuracy, the
    mean of party batch losses, and exact wire bytes (sign methods ship
    ceil(d/8) bytes per party per direction, FedAvg 4d).

    ``privacy`` may be a list with one entry per party, for sensitivity
    modes where noise scales with each party's actual batch size.
    """
    if algorithm not in ALGORITHMS:
        raise ValueError(f"unknown algorithm {algorithm!r}; choose from {ALGORITHMS}")
    if not parties:
        raise ValueError("need at least one party")
    n_adv = adversaries.count if adversaries is not None else 0
    if algorithm == "fedavg" and n_adv:
        raise ValueError("byzantine adversaries are only modelled for sign-based algorithms")
    if algorithm in ("dp-signsgd", "ef-dp-signsgd"):
        if privacy is None:
            raise ValueError(f"{algorithm} requires calibrated privacy parameters")
        if isinstance(privacy, list) and len(privacy) != len(parties):
            raise ValueError("need exactly one PrivacyParams per party")

    model = model_from_flat(layer_dims, state.weights)
    d = state.weights.size
    round_idx = state.round

    grads, losses = [], []
    for party in parties:
        grad, loss = local_gradient(
            model, party.data, party.batch_size, clip_bound,
            indices=party.next_batch_indices(), return_loss=True,
        )
        grads.append(grad)
        losses.append(loss)

    new_residual = state.residual
    if algorithm == "fedavg":
        direction = fedavg_aggregate(grads)
        bytes_per_sender = FEDAVG_BYTES_PER_COORD * d
    else:
        votes = []
        for i, (party, grad) in enumerate(zip(parties, grads)):
            if algorithm == "signsgd":
                votes.append(deterministic_sign(grad))
            else:
                params = privacy[i] if isinstance(privacy, list) else privacy
                rng = substream(master_seed, TAG_COMPRESS, party.party_id, round_idx)
                votes.append(dpsign(grad, params, rng))
        if n_adv:
            if adversaries.kind == "negative":
                votes.extend([negative_adversary(grads)] * n_adv)
            else:
                first_adv_id = len(parties)
                votes.extend(
                    random_adversary(d, substream(master_seed, TAG_ADVERSARY,
                                                  first_adv_id + j, round_idx))
                    for j in range(n_adv)
                )
        if algorithm == "ef-dp-signsgd":
            direction, new_residual = ef_aggregate(
                votes, state.residual, state.decay, residual_scale=residual_scale
            )
        else:
            direction = majority_vote_aggregate(votes)
        bytes_per_sender = sign_wire_bytes(d)

    new_state = ServerState(
        weights=state.weights - state.eta * direction,
        residual=new_residual,
        decay=state.decay,
        eta=state.eta,
        round=round_idx + 1,
    )
    participants = len(parties) + n_adv
    _, accuracy = evaluate(model_from_flat(layer_dims, new_state.weights), test_data)
    metrics = RoundMetrics(
        round=round_idx + 1,
        test_accuracy=accuracy,
        train_loss=float(np.mean(losses)),
        uplink_bytes=participants * bytes_per_sender,
        downlink_bytes=participants * bytes_per_sender,
    )
    return new_state, metrics
