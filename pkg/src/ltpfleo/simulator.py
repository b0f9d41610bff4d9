"""The round-driving engine.

Advances simulated time along visibility windows: each round anchors on the
earliest fully-visible partition, extends to window-overlapping peers,
filters them through the staleness band, trains the visible members, and
aggregates with the fair weights. Every decision lands in the event log
that the privacy auditor and the analysis tooling consume.

All randomness flows from the single root seed; subsystem generators are
derived with fixed tags: (seed, 1) data synthesis, (seed, 2) model init,
(seed, 3) round overheads, (seed, 5, round, satellite) local training.
"""
from __future__ import annotations

import hashlib
import json
import logging
import os
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, is_dataclass
from fractions import Fraction
from pathlib import Path

import numpy as np

from .aggregation import (
    AggregationWeights,
    CacheMissError,
    ModelCache,
    ModelVector,
    aggregate,
    compute_weights,
)
from .eventlog import EventLogHeader, RoundRecord, save_checkpoint, write_event_log
from .orbital import ConstellationSpec, ContactSchedule, GroundStation, compute_visibility
from .partitioning import PartitionSet, build_partitions, select_candidates
from .scheduling import FULL_FAIRNESS, ParticipationLog, record_round, staleness_filter
from .training import (
    Dataset,
    LossSpec,
    SgdConfig,
    global_accuracy,
    global_loss,
    load_csv,
    local_sgd,
    make_loss_model,
    split_holdout,
    synthesize_data,
)

logger = logging.getLogger(__name__)

THREADS_ENV = "LTP_FLEO_THREADS"


class SimulationError(RuntimeError):
    pass


@dataclass(frozen=True)
class DataSpec:
    """What data each satellite holds."""

    kind: str = "blobs"  # blobs | linear-regression | csv
    num_classes: int = 10
    feature_dim: int = 2
    samples_per_satellite: int | tuple[int, ...] = 40
    split: str = "iid"
    noise: float = 0.2
    heterogeneity: float = 0.0
    csv_dir: str | None = None

    def sizes(self, num_satellites: int) -> list[int]:
        if isinstance(self.samples_per_satellite, int):
            return [self.samples_per_satellite] * num_satellites
        sizes = list(self.samples_per_satellite)
        if len(sizes) != num_satellites:
            raise ValueError(
                f"{len(sizes)} per-satellite sizes given for {num_satellites} satellites"
            )
        return sizes


@dataclass(frozen=True)
class SimConfig:
    """Complete description of one run; hashable into the manifest."""

    constellation: ConstellationSpec
    station: GroundStation
    horizon_s: float
    data: DataSpec
    loss: LossSpec
    sgd: SgdConfig
    ltp_level: int = 2
    alpha: object = 3
    sample_step_s: float = 10.0
    rounds: int | None = None
    time_budget_s: float | None = None
    overhead_range_s: tuple[float, float] = (60.0, 180.0)
    aggregation_mode: str = "normalized"
    checkpoint_every: int = 0
    eval_fraction: float = 0.1
    init_scale: float = 0.01
    seed: int = 0

    def __post_init__(self) -> None:
        if (self.rounds is None) == (self.time_budget_s is None):
            raise ValueError("set exactly one of rounds / time_budget_s")
        if self.rounds is not None and self.rounds < 0:
            raise ValueError("rounds must be >= 0")
        lo, hi = self.overhead_range_s
        if not 0 < lo <= hi:
            raise ValueError("overhead range must be positive and ordered")
        if self.alpha != FULL_FAIRNESS and (not isinstance(self.alpha, int) or self.alpha < 1):
            raise ValueError("alpha must be an integer >= 1 or the 't' sentinel")
        if self.aggregation_mode not in ("normalized", "literal"):
            raise ValueError("aggregation_mode must be 'normalized' or 'literal'")


def _jsonable(obj):
    if is_dataclass(obj) and not isinstance(obj, type):
        return {k: _jsonable(v) for k, v in asdict(obj).items()}
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, (str, int, float, bool)) or obj is None:
        return obj
    return repr(obj)


def config_digest(config: SimConfig) -> str:
    """Stable hash over every result-affecting config field."""
    payload = json.dumps(_jsonable(config), sort_keys=True)
    return hashlib.sha256(payload.encode()).hexdigest()


def worker_count() -> int:
    raw = os.environ.get(THREADS_ENV, "1")
    try:
        return max(1, int(raw))
    except ValueError:
        logger.warning("ignoring non-integer %s=%r", THREADS_ENV, raw)
        return 1


def _train_batch(jobs, threads: int):
    """Run training jobs (callables returning (sat, model)) with optional
    thread fan-out; results are merged by satellite id so parallelism never
    changes the outcome."""
    if threads > 1 and len(jobs) > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            results = list(pool.map(lambda fn: fn(), jobs))
    else:
        results = [fn() for fn in jobs]
    return dict(sorted(results))


@dataclass
class SimulationResult:
    header: EventLogHeader
    records: list[RoundRecord]
    final_model: ModelVector
    participation_log: ParticipationLog
    partitions: PartitionSet
    schedule: ContactSchedule
    train_datasets: list[Dataset]
    holdout: Dataset | None
    sim_time_s: float

    @property
    def global_losses(self) -> list[float]:
        return [r.global_loss for r in self.records if not r.skipped]


class SimulationEngine:
    """Drives partitioned rounds over a prepared schedule and datasets."""

    def __init__(
        self,
        *,
        schedule: ContactSchedule,
        partitions: PartitionSet,
        datasets: list[Dataset],
        loss: LossSpec,
        sgd: SgdConfig,
        alpha,
        seed: int,
        rounds: int | None = None,
        time_budget_s: float | None = None,
        overhead_range_s: tuple[float, float] = (60.0, 180.0),
        aggregation_mode: str = "normalized",
        initial_model: np.ndarray | None = None,
        holdout: Dataset | None = None,
        config_hash: str = "",
        config_payload: dict | None = None,
        log_member_models: bool = True,
    ):
        if (rounds is None) == (time_budget_s is None):
            raise ValueError("set exactly one of rounds / time_budget_s")
        self.schedule = schedule
        self.partitions = partitions
        self.datasets = {ds.owner: ds for ds in datasets}
        if sorted(self.datasets) != partitions.satellites:
            raise ValueError("datasets must cover exactly the partitioned satellites")
        self.loss = loss
        self.sgd = sgd
        self.alpha = alpha
        self.seed = seed
        self.rounds = rounds
        self.time_budget_s = time_budget_s
        self.overhead_range_s = overhead_range_s
        self.aggregation_mode = aggregation_mode
        self.holdout = holdout
        self.config_hash = config_hash
        self.config_payload = config_payload or {}
        self.log_member_models = log_member_models

        feature_dim = datasets[0].feature_dim
        self.kernel_dim = make_loss_model(loss, feature_dim).dim
        if initial_model is None:
            initial_model = np.zeros(self.kernel_dim)
        if initial_model.shape != (self.kernel_dim,):
            raise ValueError("initial model dimension mismatch")
        self.initial_model = np.asarray(initial_model, dtype=float)

        self.member_sizes = {k: ds.size for k, ds in self.datasets.items()}
        self.partition_sizes = {
            p.id: sum(self.member_sizes[k] for k in p.members) for p in partitions.partitions
        }
        self.members_map = {p.id: p.members for p in partitions.partitions}

    def _header(self) -> EventLogHeader:
        return EventLogHeader(
            config_hash=self.config_hash,
            seed=self.seed,
            ltp_level=self.partitions.target_ltp,
            alpha=self.alpha,
            aggregation_mode=self.aggregation_mode,
            partitions=dict(self.members_map),
            data_sizes=dict(self.member_sizes),
            model_dim=self.kernel_dim,
            loss_kind=self.loss.kind,
            config=self.config_payload,
        )

    def _train_partition(self, members, global_model: ModelVector, round_index: int):
        threads = worker_count()
        offset = (round_index - 1) * self.sgd.local_steps

        def job(k):
            def run():
                rng = np.random.default_rng(np.random.SeedSequence((self.seed, 5, round_index, k)))
                model = local_sgd(
                    global_model,
                    self.datasets[k],
                    self.loss,
                    self.sgd,
                    rng=rng,
                    step_offset=offset,
                )
                return k, ModelVector(model.values, owner=k, round_produced=round_index)

            return run

        return _train_batch([job(k) for k in members], threads)

    def _snapshot(self, model: ModelVector) -> tuple[float, float | None]:
        loss_value = global_loss(model, list(self.datasets.values()), self.loss)
        accuracy = None
        if self.holdout is not None and self.loss.kind != "quadratic":
            accuracy = global_accuracy(model, self.holdout, self.loss)
        return loss_value, accuracy

    def run(self) -> SimulationResult:
        rng_overhead = np.random.default_rng(np.random.SeedSequence((self.seed, 3)))
        plog = ParticipationLog(self.partitions.ids)
        cache = ModelCache()
        sentinel = self.alpha == FULL_FAIRNESS
        model = ModelVector(self.initial_model.copy(), owner="global", round_produced=0)
        records: list[RoundRecord] = []
        warned_cache_miss: set[int] = set()
        now = 0.0
        t = 1
        exhausted = False

        def keep_going() -> bool:
            if self.rounds is not None:
                return t <= self.rounds
            return now < self.time_budget_s

        while keep_going():
            # Anchor the round on the earliest fully-visible partition whose
            # common window can hold the round overhead; retry past windows
            # that are too short.
            attempt_now = now
            anchor = None
            while True:
                cs = select_candidates(self.partitions, self.schedule, attempt_now)
                if cs.empty:
                    exhausted = True
                    break
                overhead = float(rng_overhead.uniform(*self.overhead_range_s))
                lo, hi = cs.common_windows[cs.best_id]
                candidate_anchor = max(attempt_now, lo)
                if hi - candidate_anchor >= overhead:
                    anchor = candidate_anchor
                    break
                attempt_now = hi + 1e-6
            if exhausted:
                break

            span_end = anchor + overhead
            fitting = [
                pid
                for pid in cs.partition_ids
                if cs.common_windows[pid][0] <= anchor and cs.common_windows[pid][1] >= span_end
            ]
            freqs = plog.frequencies(t)
            if sentinel:
                selected = staleness_filter(
                    fitting, freqs, t, FULL_FAIRNESS, all_partitions=self.partitions.ids
                )
            else:
                selected = staleness_filter(fitting, freqs, t, self.alpha)

            if not selected:
                record_round(plog, set(), t)
                records.append(
                    RoundRecord(
                        round_index=t,
                        t_start_s=anchor,
                        t_end_s=span_end,
                        skipped=True,
                        candidates=tuple(cs.partition_ids),
                        frequencies=freqs,
                    )
                )
                now = span_end
                t += 1
                continue

            fresh_set = set(fitting) if sentinel else set(selected)
            aggregating: dict[int, dict[int, ModelVector]] = {}
            cached_ages: dict[int, int] = {}
            excluded: list[int] = []
            for pid in selected:
                if pid in fresh_set:
                    fresh = self._train_partition(self.members_map[pid], model, t)
                    cache.fetch_or_cache(pid, True, t, fresh)
                    aggregating[pid] = fresh
                else:
                    try:
                        models, age = cache.fetch_or_cache(pid, False, t)
                    except CacheMissError:
                        excluded.append(pid)
                        if pid not in warned_cache_miss:
                            warned_cache_miss.add(pid)
                            warnings.warn(
                                f"partition {pid} admitted at round {t} but has no cached "
                                "models yet; excluded from aggregation",
                                stacklevel=2,
                            )
                        continue
                    aggregating[pid] = models
                    cached_ages[pid] = age

            weights = compute_weights(sorted(aggregating), freqs, self.partition_sizes, t)
            new_model = aggregate(
                weights,
                aggregating,
                self.member_sizes,
                self.members_map,
                mode=self.aggregation_mode,
            )
            if self.aggregation_mode == "normalized":
                max_norm = max(
                    float(np.linalg.norm(m.values))
                    for ms in aggregating.values()
                    for m in ms.values()
                )
                if float(np.linalg.norm(new_model.values)) > max_norm + 1e-9:
                    raise SimulationError(
                        f"round {t}: aggregate norm exceeds member maximum; "
                        "convexity violated"
                    )

            record_round(plog, selected, t)
            loss_value, accuracy = self._snapshot(new_model)
            member_payload = None
            if self.log_member_models:
                member_payload = {
                    k: m.values.tolist()
                    for ms in aggregating.values()
                    for k, m in sorted(ms.items())
                }
            records.append(
                RoundRecord(
                    round_index=t,
                    t_start_s=anchor,
                    t_end_s=span_end,
                    skipped=False,
                    candidates=tuple(cs.partition_ids),
                    selected=tuple(selected),
                    fresh=tuple(sorted(set(aggregating) - set(cached_ages))),
                    cached=cached_ages,
                    excluded=tuple(excluded),
                    frequencies=freqs,
                    beta=dict(weights.beta),
                    weight_starved=weights.weight_starved,
                    member_models=member_payload,
                    global_after=new_model.values.tolist(),
                    global_loss=loss_value,
                    accuracy=accuracy,
                )
            )
            model = new_model
            now = span_end
            t += 1

        if exhausted and not records:
            raise SimulationError(
                "no partition ever achieves common visibility within the schedule horizon"
            )
        if exhausted:
            logger.warning(
                "schedule exhausted after %d rounds (requested %s)", t - 1, self.rounds
            )
        return SimulationResult(
            header=self._header(),
            records=records,
            final_model=model,
            participation_log=plog,
            partitions=self.partitions,
            schedule=self.schedule,
            train_datasets=list(self.datasets.values()),
            holdout=self.holdout,
            sim_time_s=now,
        )


class BaselineEngine:
    """No-partition asynchronous baseline: every round aggregates whichever
    satellites are visible at the anchor with plain data-size weights."""

    def __init__(
        self,
        *,
        schedule: ContactSchedule,
        datasets: list[Dataset],
        loss: LossSpec,
        sgd: SgdConfig,
        seed: int,
        rounds: int | None = None,
        time_budget_s: float | None = None,
        overhead_range_s: tuple[float, float] = (60.0, 180.0),
        initial_model: np.ndarray | None = None,
        holdout: Dataset | None = None,
        config_hash: str = "",
        config_payload: dict | None = None,
        log_member_models: bool = True,
    ):
        if (rounds is None) == (time_budget_s is None):
            raise ValueError("set exactly one of rounds / time_budget_s")
        singles = build_partitions(schedule, 1)
        self._inner = SimulationEngine(
            schedule=schedule,
            partitions=singles,
            datasets=datasets,
            loss=loss,
            sgd=sgd,
            alpha=1,
            seed=seed,
            rounds=rounds,
            time_budget_s=time_budget_s,
            overhead_range_s=overhead_range_s,
            initial_model=initial_model,
            holdout=holdout,
            config_hash=config_hash,
            config_payload=config_payload,
            log_member_models=log_member_models,
        )
        self.schedule = schedule
        self.datasets = self._inner.datasets
        self.loss = loss
        self.sgd = sgd
        self.seed = seed
        self.rounds = rounds
        self.time_budget_s = time_budget_s
        self.overhead_range_s = overhead_range_s
        self.holdout = holdout
        self.log_member_models = log_member_models
        self.partitions = singles

    def run(self) -> SimulationResult:
        inner = self._inner
        rng_overhead = np.random.default_rng(np.random.SeedSequence((self.seed, 3)))
        plog = ParticipationLog(self.partitions.ids)
        model = ModelVector(inner.initial_model.copy(), owner="global", round_produced=0)
        records: list[RoundRecord] = []
        now = 0.0
        t = 1
        exhausted = False

        def keep_going() -> bool:
            if self.rounds is not None:
                return t <= self.rounds
            return now < self.time_budget_s

        while keep_going():
            contacts = [
                (self.schedule.next_contact_time(k, now), k) for k in self.schedule.satellites
            ]
            upcoming = [(max(c, now), k) for c, k in contacts if c is not None]
            if not upcoming:
                exhausted = True
                break
            anchor = min(c for c, _ in upcoming)
            participants = sorted(
                k for k in self.schedule.satellites if self.schedule.visible_at(k, anchor)
            )
            overhead = float(rng_overhead.uniform(*self.overhead_range_s))
            span_end = anchor + overhead

            trained = inner._train_partition(participants, model, t)
            total = sum(inner.member_sizes[k] for k in participants)
            beta = {k: Fraction(inner.member_sizes[k], total) for k in participants}
            weights = AggregationWeights(
                round_index=t,
                beta=beta,
                gamma=dict(beta),
                data_sizes={k: inner.member_sizes[k] for k in participants},
                total_data=total,
            )
            new_model = aggregate(
                weights,
                {k: {k: m} for k, m in trained.items()},
                inner.member_sizes,
                {k: (k,) for k in participants},
            )
            record_round(plog, set(participants), t)
            loss_value, accuracy = inner._snapshot(new_model)
            records.append(
                RoundRecord(
                    round_index=t,
                    t_start_s=anchor,
                    t_end_s=span_end,
                    skipped=False,
                    candidates=tuple(participants),
                    selected=tuple(participants),
                    fresh=tuple(participants),
                    frequencies=plog.frequencies(t),
                    beta=beta,
                    member_models=(
                        {k: m.values.tolist() for k, m in sorted(trained.items())}
                        if self.log_member_models
                        else None
                    ),
                    global_after=new_model.values.tolist(),
                    global_loss=loss_value,
                    accuracy=accuracy,
                )
            )
            model = new_model
            now = span_end
            t += 1

        if exhausted and not records:
            raise SimulationError("no satellite is ever visible within the schedule horizon")
        header = EventLogHeader(
            config_hash=inner.config_hash,
            seed=self.seed,
            ltp_level=1,
            alpha=1,
            aggregation_mode="baseline",
            partitions=dict(inner.members_map),
            data_sizes=dict(inner.member_sizes),
            model_dim=inner.kernel_dim,
            loss_kind=self.loss.kind,
            config=inner.config_payload,
        )
        return SimulationResult(
            header=header,
            records=records,
            final_model=model,
            participation_log=plog,
            partitions=self.partitions,
            schedule=self.schedule,
            train_datasets=list(self.datasets.values()),
            holdout=self.holdout,
            sim_time_s=now,
        )


# ---------------------------------------------------------------------------
# Config-level entry points

def build_datasets(config: SimConfig) -> list[Dataset]:
    k = config.constellation.num_satellites
    data = config.data
    if data.kind == "csv":
        if not data.csv_dir:
            raise ValueError("csv data kind needs csv_dir")
        out = []
        for sat in range(k):
            path = Path(data.csv_dir) / f"sat_{sat:03d}.csv"
            if not path.exists():
                raise FileNotFoundError(f"dataset file missing: {path}")
            out.append(load_csv(path, owner=sat))
        return out
    return synthesize_data(
        data.kind,
        data.num_classes,
        data.sizes(k),
        data.split,
        config.seed,
        feature_dim=data.feature_dim,
        noise=data.noise,
        num_orbits=config.constellation.num_orbits,
        heterogeneity=data.heterogeneity,
    )


def _prepare(config: SimConfig):
    schedule = compute_visibility(
        config.constellation, config.station, config.horizon_s, config.sample_step_s
    )
    datasets = build_datasets(config)
    train, holdout = split_holdout(datasets, config.eval_fraction, config.seed)
    rng_init = np.random.default_rng(np.random.SeedSequence((config.seed, 2)))
    dim = make_loss_model(config.loss, train[0].feature_dim).dim
    initial = config.init_scale * rng_init.normal(size=dim)
    return schedule, train, holdout, initial


def run(config: SimConfig, *, event_log_path=None, checkpoint_dir=None) -> SimulationResult:
    """Full partitioned run from a config; optionally persists artifacts."""
    schedule, train, holdout, initial = _prepare(config)
    partitions = build_partitions(schedule, config.ltp_level)
    engine = SimulationEngine(
        schedule=schedule,
        partitions=partitions,
        datasets=train,
        loss=config.loss,
        sgd=config.sgd,
        alpha=config.alpha,
        seed=config.seed,
        rounds=config.rounds,
        time_budget_s=config.time_budget_s,
        overhead_range_s=config.overhead_range_s,
        aggregation_mode=config.aggregation_mode,
        initial_model=initial,
        holdout=holdout,
        config_hash=config_digest(config),
        config_payload=_jsonable(config),
    )
    result = engine.run()
    _persist(result, config, event_log_path, checkpoint_dir)
    return result


def run_baseline(config: SimConfig, *, event_log_path=None, checkpoint_dir=None) -> SimulationResult:
    """Asynchronous no-partition baseline on the same configuration."""
    schedule, train, holdout, initial = _prepare(config)
    engine = BaselineEngine(
        schedule=schedule,
        datasets=train,
        loss=config.loss,
        sgd=config.sgd,
        seed=config.seed,
        rounds=config.rounds,
        time_budget_s=config.time_budget_s,
        overhead_range_s=config.overhead_range_s,
        initial_model=initial,
        holdout=holdout,
        config_hash=config_digest(config),
        config_payload=_jsonable(config),
    )
    result = engine.run()
    _persist(result, config, event_log_path, checkpoint_dir)
    return result


def _persist(result: SimulationResult, config: SimConfig, event_log_path, checkpoint_dir):
    if event_log_path is not None:
        write_event_log(event_log_path, result.header, result.records)
    if checkpoint_dir is not None and config.checkpoint_every > 0:
        ckpt = Path(checkpoint_dir)
        ckpt.mkdir(parents=True, exist_ok=True)
        for rec in result.records:
            if not rec.skipped and rec.round_index % config.checkpoint_every == 0:
                save_checkpoint(
                    ckpt / f"round_{rec.round_index:06d}.bin", np.asarray(rec.global_after)
                )
        save_checkpoint(ckpt / "final.bin", result.final_model.values)
