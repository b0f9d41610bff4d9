"""Fair partition weighting and the global model update.

Weights are kept as exact rationals end to end: the auditor later replays
the very coefficients the server used, and the fairness weights must be
invariant under common rescaling of the data sizes.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass
from fractions import Fraction
from typing import Mapping, Sequence

import numpy as np

logger = logging.getLogger(__name__)


class CacheMissError(KeyError):
    """A non-visible partition has no cached models yet."""


@dataclass
class ModelVector:
    """Flat parameter vector with provenance."""

    values: np.ndarray
    owner: int | str = "global"
    round_produced: int = 0

    def __post_init__(self) -> None:
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.ndim != 1:
            raise ValueError("model values must be a flat vector")
        if not np.all(np.isfinite(self.values)):
            raise ValueError("model values must be finite")

    @property
    def dim(self) -> int:
        return self.values.shape[0]

    def copy(self) -> "ModelVector":
        return ModelVector(self.values.copy(), owner=self.owner, round_produced=self.round_produced)


@dataclass(frozen=True)
class AggregationWeights:
    """Per-partition fair weights for one round."""

    round_index: int
    beta: dict[int, Fraction]
    gamma: dict[int, Fraction]
    data_sizes: dict[int, int]
    total_data: int
    weight_starved: tuple[int, ...] = ()

    def __post_init__(self) -> None:
        if sum(self.beta.values(), start=Fraction(0)) != 1:
            raise ValueError("beta weights must sum to exactly 1")
        if any(b < 0 for b in self.beta.values()):
            raise ValueError("beta weights must be nonnegative")

    @property
    def partition_ids(self) -> tuple[int, ...]:
        return tuple(sorted(self.beta))

    def beta_float(self, partition_id: int) -> float:
        return float(self.beta[partition_id])


def compute_weights(
    selected: Sequence[int],
    frequencies: Mapping[int, int],
    partition_data_sizes: Mapping[int, int],
    round_index: int,
) -> AggregationWeights:
    """Fair weight of each selected partition from frequency and data share.

    gamma_G = (f_G / sum f) * (|D_G| / |D_selected|), beta_G = gamma_G /
    sum gamma. A zero frequency total (possible only before anyone has
    participated) falls back to pure data-size weights; a zero-frequency
    partition inside a nonzero total gets weight zero and is reported as
    weight-starved.
    """
    if not selected:
        raise ValueError("cannot weight an empty selection")
    sizes = {pid: int(partition_data_sizes[pid]) for pid in selected}
    if any(n < 0 for n in sizes.values()):
        raise ValueError("data sizes must be nonnegative")
    total_data = sum(sizes.values())
    if total_data == 0:
        raise ValueError("total data size of the selection is zero")

    freq_total = sum(int(frequencies[pid]) for pid in selected)
    gamma: dict[int, Fraction] = {}
    starved = []
    for pid in selected:
        size_share = Fraction(sizes[pid], total_data)
        if freq_total == 0:
            gamma[pid] = size_share
        else:
            f = int(frequencies[pid])
            gamma[pid] = Fraction(f, freq_total) * size_share
            if f == 0:
                starved.append(pid)
    gamma_total = sum(gamma.values(), start=Fraction(0))
    if gamma_total == 0:
        raise ValueError("all selected partitions have zero weight")
    beta = {pid: g / gamma_total for pid, g in gamma.items()}
    if starved:
        logger.warning(
            "round %d: partitions %s are weight-starved (zero frequency, zero weight)",
            round_index,
            starved,
        )
    return AggregationWeights(
        round_index=round_index,
        beta=beta,
        gamma=gamma,
        data_sizes=sizes,
        total_data=total_data,
        weight_starved=tuple(starved),
    )


def member_weights(member_ids: Sequence[int], member_sizes: Mapping[int, int]) -> dict[int, Fraction]:
    """Within-partition data weights |D_k| / |D_G|."""
    total = sum(int(member_sizes[k]) for k in member_ids)
    if total <= 0:
        raise ValueError("partition has zero total data")
    return {k: Fraction(int(member_sizes[k]), total) for k in member_ids}


def aggregate(
    weights: AggregationWeights,
    partition_models: Mapping[int, Mapping[int, ModelVector]],
    member_sizes: Mapping[int, int],
    partition_members: Mapping[int, Sequence[int]],
    mode: str = "normalized",
) -> ModelVector:
    """Combine partition member models into the next global model.

    ``normalized`` (default) weights each member by its within-partition data
    share so the result is a convex combination; ``literal`` applies the raw
    unnormalized inner sum for ablation. Partitions must arrive complete:
    a missing member would break the all-or-none privacy contract.
    """
    if mode not in ("normalized", "literal"):
        raise ValueError(f"unknown aggregation mode {mode!r}")
    dim: int | None = None
    accum: np.ndarray | None = None
    for pid in weights.partition_ids:
        expected = tuple(sorted(partition_members[pid]))
        got = partition_models.get(pid, {})
        missing = [k for k in expected if k not in got]
        if missing:
            raise ValueError(
                f"partition {pid} is incomplete (missing satellites {missing}); "
                "all-or-none participation is required"
            )
        if mode == "normalized":
            mw = member_weights(expected, member_sizes)
        inner: np.ndarray | None = None
        for k in expected:
            vec = got[k].values
            if dim is None:
                dim = vec.shape[0]
                accum = np.zeros(dim)
            if vec.shape[0] != dim:
                raise ValueError(
                    f"satellite {k} model dimension {vec.shape[0]} != expected {dim}"
                )
            scale = float(mw[k]) if mode == "normalized" else 1.0
            inner = scale * vec if inner is None else inner + scale * vec
        accum += weights.beta_float(pid) * inner
    return ModelVector(accum, owner="global", round_produced=weights.round_index)


class ModelCache:
    """Last aggregated member models per partition, stamped with their round."""

    def __init__(self) -> None:
        self._store: dict[int, tuple[dict[int, ModelVector], int]] = {}

    def __contains__(self, partition_id: int) -> bool:
        return partition_id in self._store

    def stamp(self, partition_id: int) -> int:
        return self._store[partition_id][1]

    def fetch_or_cache(
        self,
        partition_id: int,
        visible: bool,
        round_index: int,
        fresh_models: Mapping[int, ModelVector] | None = None,
    ) -> tuple[dict[int, ModelVector], int]:
        """Fresh models (age 0, cache refreshed) or cached ones with their age."""
        if visible:
            if fresh_models is None:
                raise ValueError("visible partition requires fresh models")
            stored = {k: m.copy() for k, m in fresh_models.items()}
            self._store[partition_id] = (stored, round_index)
            return dict(fresh_models), 0
        if partition_id not in self._store:
            raise CacheMissError(
                f"partition {partition_id} has never participated; no cached models"
            )
        models, stamp = self._store[partition_id]
        return {k: m.copy() for k, m in models.items()}, round_index - stamp
