"""Exact-arithmetic audit of what the server can recover across rounds.

Every non-skipped round hands the honest-but-curious server one linear
equation over the (quasi-static) client models: the global update with the
coefficients the server itself computed. The auditor accumulates those rows
over a sliding window, takes the exact rational row space, and reports the
smallest client support of any recoverable combination. A minimum support
of at least the partition size certifies long-term privacy; a recoverable
unit vector is an individual exposure.

No floating point is used anywhere in the span tests: float rank decisions
can both fabricate and hide leaks.
"""
from __future__ import annotations

import heapq
import math
from dataclasses import dataclass, field
from fractions import Fraction
from typing import Mapping, Sequence

import numpy as np

from .eventlog import EventLogHeader, RoundRecord

MAX_AUDIT_COLUMNS = 64


# ---------------------------------------------------------------------------
# Exact linear algebra

def rref(rows: Sequence[Sequence[Fraction]]) -> list[list[Fraction]]:
    """Reduced row-echelon form over exact rationals; returns nonzero rows."""
    m = [[Fraction(v) for v in row] for row in rows]
    if not m:
        return []
    n_cols = len(m[0])
    pivot_row = 0
    for col in range(n_cols):
        pivot = next((r for r in range(pivot_row, len(m)) if m[r][col] != 0), None)
        if pivot is None:
            continue
        m[pivot_row], m[pivot] = m[pivot], m[pivot_row]
        inv = m[pivot_row][col]
        m[pivot_row] = [v / inv for v in m[pivot_row]]
        for r in range(len(m)):
            if r != pivot_row and m[r][col] != 0:
                factor = m[r][col]
                m[r] = [a - factor * b for a, b in zip(m[r], m[pivot_row])]
        pivot_row += 1
        if pivot_row == len(m):
            break
    return [row for row in m if any(v != 0 for v in row)]


def _integerize(rows: Sequence[Sequence[Fraction]]) -> list[list[int]]:
    """Scale each row to primitive integers (rank-preserving)."""
    out = []
    for row in rows:
        lcm = 1
        for v in row:
            lcm = lcm * v.denominator // math.gcd(lcm, v.denominator)
        ints = [int(v * lcm) for v in row]
        g = 0
        for v in ints:
            g = math.gcd(g, v)
        out.append([v // g for v in ints] if g > 1 else ints)
    return out


def _int_rank(rows: list[list[int]], cols: Sequence[int] | None = None) -> int:
    """Rank by exact integer elimination on the selected columns."""
    if cols is not None:
        rows = [[row[c] for c in cols] for row in rows]
    work = [row[:] for row in rows if any(row)]
    if not work:
        return 0
    n_cols = len(work[0])
    rank = 0
    for col in range(n_cols):
        pivot = next((r for r in range(rank, len(work)) if work[r][col] != 0), None)
        if pivot is None:
            continue
        work[rank], work[pivot] = work[pivot], work[rank]
        p = work[rank][col]
        for r in range(rank + 1, len(work)):
            q = work[r][col]
            if q == 0:
                continue
            row = [p * a - q * b for a, b in zip(work[r], work[rank])]
            g = 0
            for v in row:
                g = math.gcd(g, v)
            work[r] = [v // g for v in row] if g > 1 else row
        rank += 1
        if rank == len(work):
            break
    return rank


def _columns_proportional(u: Sequence[Fraction], v: Sequence[Fraction]) -> bool:
    """Exact proportionality of two nonzero columns (cross-multiplication)."""
    anchor = next((i for i in range(len(u)) if u[i] != 0 or v[i] != 0), None)
    if anchor is None:
        return True
    if u[anchor] == 0 or v[anchor] == 0:
        return False
    return all(u[i] * v[anchor] == v[i] * u[anchor] for i in range(len(u)))


# ---------------------------------------------------------------------------
# Observation model

@dataclass(frozen=True)
class ObservationRecord:
    """One round's linear view: exact coefficient per participating satellite."""

    round_index: int
    coefficients: dict[int, Fraction]
    global_model_id: str = ""


@dataclass
class ObservationMatrix:
    """Rows = rounds in the audit window, columns = satellites."""

    satellites: tuple[int, ...]
    rounds: tuple[int, ...]
    rows: list[list[Fraction]]
    partition_of: dict[int, int] = field(default_factory=dict)
    window: tuple[int, int] = (0, 0)

    def column(self, satellite_id: int) -> list[Fraction]:
        j = self.satellites.index(satellite_id)
        return [row[j] for row in self.rows]


def observation_records(
    header: EventLogHeader, records: Sequence[RoundRecord]
) -> list[ObservationRecord]:
    """Recompute each round's satellite coefficients from the logged weights.

    In the default data-weighted aggregation a member's coefficient is
    beta_G * |D_k| / |D_G|; the literal-sum ablation uses beta_G directly.
    Skipped rounds contribute nothing.
    """
    literal = header.aggregation_mode == "literal"
    out = []
    for rec in records:
        if rec.skipped:
            continue
        coeffs: dict[int, Fraction] = {}
        for pid, beta in rec.beta.items():
            if beta == 0:
                continue
            members = header.partitions[pid]
            total = sum(header.data_sizes[k] for k in members)
            for k in members:
                if literal:
                    coeffs[k] = beta
                else:
                    coeffs[k] = beta * Fraction(header.data_sizes[k], total)
        out.append(
            ObservationRecord(
                round_index=rec.round_index,
                coefficients=coeffs,
                global_model_id=f"w^{rec.round_index + 1}",
            )
        )
    return out


def build_observation_matrix(
    header: EventLogHeader,
    records: Sequence[RoundRecord],
    window: tuple[int, int],
    colluders: Sequence[int] = (),
) -> ObservationMatrix:
    """Assemble the server's accumulated view over a round interval.

    Colluding satellites' columns are zeroed: their models are known to the
    server, so their contributions can be subtracted exactly.
    """
    lo, hi = window
    in_window = [r for r in records if lo <= r.round_index <= hi]
    dims = {len(r.global_after) for r in in_window if r.global_after is not None}
    if len(dims) > 1:
        raise ValueError(f"window {window} mixes model dimensions {sorted(dims)}")
    satellites = tuple(header.satellites)
    colluders = set(colluders)
    obs = observation_records(header, in_window)
    rows = []
    rounds = []
    for rec in obs:
        row = [
            Fraction(0) if sat in colluders else rec.coefficients.get(sat, Fraction(0))
            for sat in satellites
        ]
        rows.append(row)
        rounds.append(rec.round_index)
    return ObservationMatrix(
        satellites=satellites,
        rounds=tuple(rounds),
        rows=rows,
        partition_of=header.partition_of(),
        window=window,
    )


def row_space_basis(matrix: ObservationMatrix) -> list[list[Fraction]]:
    """Reduced row-echelon basis of the server's recoverable combinations."""
    return rref(matrix.rows)


# ---------------------------------------------------------------------------
# Leakage analysis

@dataclass(frozen=True)
class LeakageReport:
    """Verdict for one audit window."""

    window: tuple[int, int]
    ltp_level: int
    rank: int
    basis: tuple[tuple[Fraction, ...], ...]
    min_support: int | None  # None: nothing recoverable at all
    individually_exposed: tuple[int, ...]
    verdict: str

    @property
    def passed(self) -> bool:
        return self.verdict.startswith("LTP-PASS")

    def to_jsonable(self) -> dict:
        return {
            "window": list(self.window),
            "ltp_level": self.ltp_level,
            "rank": self.rank,
            "min_support": self.min_support,
            "individually_exposed": list(self.individually_exposed),
            "verdict": self.verdict,
        }


def _proportional_blocks(matrix: ObservationMatrix) -> list[tuple[int, ...]]:
    """Group satellite columns into verified proportionality classes.

    Columns are only merged when they belong to the same declared partition
    AND are exactly proportional across all rows; a declared partition whose
    columns fail the check is split, which keeps the support analysis sound.
    Zero columns (satellites outside every recoverable combination) are
    dropped.
    """
    blocks: list[tuple[int, ...]] = []
    by_partition: dict[object, list[int]] = {}
    for sat in matrix.satellites:
        col = matrix.column(sat)
        if all(v == 0 for v in col):
            continue
        by_partition.setdefault(matrix.partition_of.get(sat, f"sat-{sat}"), []).append(sat)
    for sats in by_partition.values():
        classes: list[list[int]] = []
        for sat in sats:
            col = matrix.column(sat)
            for cls in classes:
                if _columns_proportional(col, matrix.column(cls[0])):
                    cls.append(sat)
                    break
            else:
                classes.append([sat])
        blocks.extend(tuple(cls) for cls in classes)
    return sorted(blocks)


def _enumerate_supports(
    basis_int: list[list[int]],
    blocks: list[tuple[int, ...]],
    rank: int,
    budget: int,
) -> int | None:
    """Smallest total satellite support over achievable block subsets.

    A subset S is achievable when some nonzero row-space vector lives
    entirely on S's columns, i.e. removing S's columns drops the rank.
    Subsets are visited in ascending total support, so the first hit is the
    minimum.
    """
    n = len(blocks)
    if n == 0 or rank == 0:
        return None
    sizes = [len(b) for b in blocks]
    heap: list[tuple[int, tuple[int, ...]]] = [(sizes[i], (i,)) for i in range(n)]
    heapq.heapify(heap)
    tested = 0
    while heap:
        total, idxs = heapq.heappop(heap)
        tested += 1
        if tested > budget:
            raise ValueError(
                "subset enumeration budget exceeded; shrink the audit window or "
                "reduce the constellation size"
            )
        chosen = set(idxs)
        complement = [i for i in range(n) if i not in chosen]
        if _int_rank(basis_int, complement) < rank:
            return total
        for nxt in range(idxs[-1] + 1, n):
            heapq.heappush(heap, (total + sizes[nxt], idxs + (nxt,)))
    return None


def min_support_leakage(
    matrix: ObservationMatrix,
    ltp_level: int,
    *,
    subset_budget: int = 200_000,
) -> LeakageReport:
    """Exact leakage verdict for one window.

    Satellites sharing a partition have proportional columns, so support is
    analysed over collapsed block columns; the verdict passes when every
    recoverable combination touches at least ``ltp_level`` satellites and no
    unit vector is recoverable.
    """
    active = [s for s in matrix.satellites if any(v != 0 for v in matrix.column(s))]
    if len(active) > MAX_AUDIT_COLUMNS:
        raise ValueError(
            f"{len(active)} active columns exceed the exact brute-force budget "
            f"({MAX_AUDIT_COLUMNS}); shrink the audit window"
        )
    basis = rref(matrix.rows)
    rank = len(basis)
    if rank == 0:
        return LeakageReport(
            window=matrix.window,
            ltp_level=ltp_level,
            rank=0,
            basis=(),
            min_support=None,
            individually_exposed=(),
            verdict=f"LTP-PASS({ltp_level})",
        )

    blocks = _proportional_blocks(matrix)
    sat_index = {s: i for i, s in enumerate(matrix.satellites)}
    # Collapsed matrix: one representative column per block.
    collapsed = [[row[sat_index[b[0]]] for b in blocks] for row in basis]
    collapsed_int = _integerize(collapsed)
    min_support = _enumerate_supports(collapsed_int, blocks, rank, subset_budget)

    basis_int = _integerize(basis)
    exposed = []
    for block in blocks:
        if len(block) != 1:
            continue  # a unit vector cannot hide inside a multi-member block
        sat = block[0]
        unit = [0] * len(matrix.satellites)
        unit[sat_index[sat]] = 1
        if _int_rank(basis_int + [unit]) == rank:
            exposed.append(sat)

    ok = (min_support is None or min_support >= ltp_level) and not exposed
    return LeakageReport(
        window=matrix.window,
        ltp_level=ltp_level,
        rank=rank,
        basis=tuple(tuple(row) for row in basis),
        min_support=min_support,
        individually_exposed=tuple(sorted(exposed)),
        verdict=f"LTP-PASS({ltp_level})" if ok else "LTP-FAIL",
    )


def direct_min_support(matrix: ObservationMatrix, *, subset_budget: int = 2_000_000) -> int | None:
    """Satellite-level brute force (no block collapsing); oracle for small K."""
    basis = rref(matrix.rows)
    rank = len(basis)
    if rank == 0:
        return None
    active = [s for s in matrix.satellites if any(v != 0 for v in matrix.column(s))]
    sat_index = {s: i for i, s in enumerate(matrix.satellites)}
    cols = [[row[sat_index[s]] for s in active] for row in basis]
    singleton_blocks = [(s,) for s in active]
    return _enumerate_supports(_integerize(cols), singleton_blocks, rank, subset_budget)


def check_partition_structure(matrix: ObservationMatrix, data_sizes: Mapping[int, int]) -> bool:
    """Verify the structural privacy argument on actual rows.

    Within each partition, every satellite's column must be the partition's
    round pattern scaled by that satellite's data size: then any recoverable
    vector restricted to the partition is a multiple of its data-weight
    vector and support is a union of whole partitions.
    """
    groups: dict[int, list[int]] = {}
    for sat in matrix.satellites:
        pid = matrix.partition_of.get(sat)
        if pid is None:
            continue
        groups.setdefault(pid, []).append(sat)
    for sats in groups.values():
        cols = {s: matrix.column(s) for s in sats}
        present = [s for s in sats if any(v != 0 for v in cols[s])]
        if len(present) < 2:
            continue
        ref = present[0]
        for s in present[1:]:
            # col_s * |D_ref| == col_ref * |D_s| componentwise
            if any(
                cols[s][r] * data_sizes[ref] != cols[ref][r] * data_sizes[s]
                for r in range(len(matrix.rows))
            ):
                return False
    return True


def ltp_verdict_over_run(
    header: EventLogHeader,
    records: Sequence[RoundRecord],
    ltp_level: int | None = None,
    window_rounds: int = 5,
    *,
    colluders: Sequence[int] = (),
    subset_budget: int = 200_000,
) -> list[LeakageReport]:
    """Audit every sliding window of consecutive rounds; pass iff all pass."""
    if window_rounds < 1:
        raise ValueError("window_rounds must be >= 1")
    level = header.ltp_level if ltp_level is None else ltp_level
    if not records:
        return []
    last = max(r.round_index for r in records)
    first = min(r.round_index for r in records)
    reports = []
    for start in range(first, max(first, last - window_rounds + 1) + 1):
        window = (start, start + window_rounds - 1)
        matrix = build_observation_matrix(header, records, window, colluders=colluders)
        reports.append(min_support_leakage(matrix, level, subset_budget=subset_budget))
    return reports


# ---------------------------------------------------------------------------
# Differencing attack

@dataclass(frozen=True)
class AttackResult:
    estimate: np.ndarray
    target_satellites: tuple[int, ...]
    target_weights: dict[int, Fraction]
    individual: bool
    residual: float | None

    @property
    def flagged(self) -> str:
        return "individual" if self.individual else "not individual"


def differencing_attack(
    global_before: np.ndarray,
    global_after: np.ndarray,
    coeff_before: Mapping[int, Fraction],
    coeff_after: Mapping[int, Fraction],
    *,
    partition_of: Mapping[int, int] | None = None,
    true_models: Mapping[int, np.ndarray] | None = None,
) -> AttackResult:
    """Cross-round differencing: isolate the contribution of the one block
    whose participation changed between two consecutive rounds.

    Requires the common participants' coefficients to be proportional across
    the two rounds (otherwise their terms cannot be cancelled exactly) and
    the participation delta to be a single satellite or a single whole
    partition. When the delta is a full partition the estimate is only the
    partition's weighted sum, flagged not-individual. Against quasi-static
    models the estimate is exact; between-round drift shows up as residual
    when ground-truth models are supplied.
    """
    w_before = np.asarray(global_before, dtype=float)
    w_after = np.asarray(global_after, dtype=float)
    sup_before = {k for k, c in coeff_before.items() if c != 0}
    sup_after = {k for k, c in coeff_after.items() if c != 0}
    added = sup_after - sup_before
    removed = sup_before - sup_after
    if added and removed:
        raise ValueError("participation delta must be one-sided (pure join or pure leave)")
    if not added and not removed:
        raise ValueError("participation sets are identical; nothing to difference")
    delta = added or removed

    if partition_of is not None:
        pids = {partition_of[k] for k in delta}
        if len(pids) != 1:
            raise ValueError(
                f"participation delta spans partitions {sorted(pids)}; the difference "
                "would be a sum over blocks, not an individual block"
            )
    elif len(delta) > 1:
        raise ValueError(
            "multi-satellite delta without partition information; cannot certify a single block"
        )

    common = sup_before & sup_after
    if common:
        ratios = {coeff_after[k] / coeff_before[k] for k in common}
        if len(ratios) != 1:
            raise ValueError(
                "common participants' coefficients are not proportional between rounds; "
                "their contributions cannot be cancelled"
            )
        rho = ratios.pop()
    else:
        rho = Fraction(0)

    if added:
        total = sum(coeff_after[k] for k in delta)
        estimate = (w_after - float(rho) * w_before) / float(total)
        weights = {k: coeff_after[k] / total for k in delta}
    else:
        if rho == 0:
            raise ValueError("leave-delta with no common participants is degenerate")
        total = sum(coeff_before[k] for k in delta)
        estimate = (w_before - w_after / float(rho)) / float(total)
        weights = {k: coeff_before[k] / total for k in delta}

    residual = None
    if true_models is not None:
        target = np.zeros_like(estimate)
        for k in sorted(delta):
            target = target + float(weights[k]) * np.asarray(true_models[k], dtype=float)
        residual = float(np.linalg.norm(estimate - target))

    return AttackResult(
        estimate=estimate,
        target_satellites=tuple(sorted(delta)),
        target_weights=weights,
        individual=len(delta) == 1,
        residual=residual,
    )
