"""Daily feature computation and the file-based offline feature store.

Three feature families are produced per (player, contest, day):

- player vector, 107 dims: three look-back windows of 3/7/30 days (32 stats
  each) plus 11 lifetime stats;
- contest vector, 11 dims: intrinsic template attributes;
- interaction vector, 9 dims: same-type / same-bucket join counts over
  1-day and 5-day windows plus a same-template count.

Windows end at the UTC midnight starting `as_of_day`, so no feature ever
sees a join with joining_time >= as_of_day 00:00 UTC. Count and monetary
dims are log1p-transformed, z-scored against training-partition statistics
and clipped to [-10, 10]; rate-valued dims and flags pass through raw.
"""

from __future__ import annotations

import datetime as dt
import json
import os
from dataclasses import dataclass, field
from typing import Iterable, Mapping, NamedTuple, Sequence

import numpy as np

from .domain import (
    ContestSpec,
    ContestType,
    JoinRecord,
    MatchRecord,
    day_of,
    day_start,
    epoch_day,
    money_units,
    parse_day,
    prize_stats,
    validate_contest,
)
from .errors import DataError, DimensionError, StoreError

SNAPSHOT_SCHEMA = "widir-snapshot-v1"

PLAYER_WINDOWS = (3, 7, 30)
INTERACTION_WINDOWS = (1, 5)
N_BUCKETS = 8
N_TYPES = 3
WINDOW_BLOCK = 13 + N_TYPES + 2 * N_BUCKETS  # 32
LIFETIME_BLOCK = 11
D_P = len(PLAYER_WINDOWS) * WINDOW_BLOCK + LIFETIME_BLOCK  # 107
D_C = 11
D_I = 2 * 4 + 1  # 9
DAYS_SINCE_CAP = 365.0

_TYPE_INDEX = {ContestType.PUBLIC: 0, ContestType.SPECIAL: 1, ContestType.MEGA: 2}

# Dims that are log1p + z-scored; the rest pass through raw.
_WIN_RATE_IN_BLOCK = 9
PLAYER_Z_MASK = np.ones(D_P, dtype=bool)
for _i, _k in enumerate(PLAYER_WINDOWS):
    PLAYER_Z_MASK[_i * WINDOW_BLOCK + _WIN_RATE_IN_BLOCK] = False
_LIFETIME_BASE = len(PLAYER_WINDOWS) * WINDOW_BLOCK
PLAYER_Z_MASK[_LIFETIME_BASE + 8] = False  # lifetime_win_rate
PLAYER_Z_MASK[_LIFETIME_BASE + 10] = False  # lifetime_multi_entry_rate

CONTEST_Z_MASK = np.zeros(D_C, dtype=bool)
CONTEST_Z_MASK[[0, 1, 2, 10]] = True  # fee, prize, size, prize/entry ratio

INTERACTION_Z_MASK = np.ones(D_I, dtype=bool)


@dataclass(frozen=True, slots=True)
class FeatureTriple:
    """The (player, contest, interaction) raw feature vectors."""

    player_vec: np.ndarray
    contest_vec: np.ndarray
    interaction_vec: np.ndarray

    def validate(self, dims: tuple[int, int, int] = (D_P, D_C, D_I)) -> None:
        names = ("player_vec", "contest_vec", "interaction_vec")
        vecs = (self.player_vec, self.contest_vec, self.interaction_vec)
        for name, vec, want in zip(names, vecs, dims):
            if vec.shape != (want,):
                raise DimensionError(f"{name} has shape {vec.shape}, expected ({want},)")
            if not np.all(np.isfinite(vec)):
                raise DataError(f"{name} contains non-finite entries")


class JoinEvent(NamedTuple):
    """A join enriched with its contest's template-level attributes."""

    time: int
    day: dt.date
    player_id: str
    match_id: str
    template_id: str
    contest_type: ContestType
    entry_fee: int
    prize_won: int
    contest_size: int
    prize_money: int
    guaranteed: bool
    multi_entry: bool


def enrich_joins(joins: Sequence[JoinRecord], contests_by_id: Mapping[str, ContestSpec]) -> list[JoinEvent]:
    """Join the log against the catalog; missing contests are a data error."""
    out = []
    for r in joins:
        spec = contests_by_id.get(r.contest_id)
        if spec is None:
            raise DataError(f"join references unknown contest {r.contest_id}")
        out.append(
            JoinEvent(
                time=r.joining_time,
                day=day_of(r.joining_time),
                player_id=r.player_id,
                match_id=r.match_id,
                template_id=spec.template_id,
                contest_type=spec.contest_type,
                entry_fee=r.entry_fee_paid,
                prize_won=r.prize_won,
                contest_size=spec.contest_size,
                prize_money=spec.prize_money,
                guaranteed=spec.guaranteed,
                multi_entry=spec.multi_entry,
            )
        )
    return out


# --- normalization stats -----------------------------------------------------


def bucket_of(value: float, edges: np.ndarray) -> int:
    """Index of the training-quantile bucket holding `value` (0..7)."""
    return int(np.searchsorted(edges[: N_BUCKETS - 1], value, side="left"))


def quantile_edges(values: Sequence[float]) -> np.ndarray:
    """8 strictly increasing edges at the k/8 quantiles of a training sample.

    Degenerate samples (fewer than 8 distinct quantiles) are padded upward in
    +1 steps; the padded buckets never fire.
    """
    arr = np.asarray(values, dtype=np.float64)
    if arr.size == 0:
        raise DataError("cannot fit bucket edges on an empty sample")
    qs = np.quantile(arr, [k / N_BUCKETS for k in range(1, N_BUCKETS + 1)])
    edges = [float(qs[0])]
    for q in qs[1:]:
        edges.append(float(q) if q > edges[-1] else edges[-1] + 1.0)
    return np.asarray(edges, dtype=np.float64)


@dataclass
class NormalizationStats:
    """Per-dim mean/std (of log1p values) and training-quantile bucket edges."""

    player_mean: np.ndarray
    player_std: np.ndarray
    contest_mean: np.ndarray
    contest_std: np.ndarray
    inter_mean: np.ndarray
    inter_std: np.ndarray
    fee_edges: np.ndarray
    size_edges: np.ndarray
    prize_edges: np.ndarray

    def fee_bucket(self, fee_cents: int) -> int:
        return bucket_of(fee_cents, self.fee_edges)

    def size_bucket(self, size: int) -> int:
        return bucket_of(size, self.size_edges)

    def prize_bucket(self, prize_cents: int) -> int:
        return bucket_of(prize_cents, self.prize_edges)

    def to_json_dict(self) -> dict:
        return {
            "player_mean": self.player_mean.tolist(),
            "player_std": self.player_std.tolist(),
            "contest_mean": self.contest_mean.tolist(),
            "contest_std": self.contest_std.tolist(),
            "inter_mean": self.inter_mean.tolist(),
            "inter_std": self.inter_std.tolist(),
            "fee_edges": self.fee_edges.tolist(),
            "size_edges": self.size_edges.tolist(),
            "prize_edges": self.prize_edges.tolist(),
        }

    @classmethod
    def from_json_dict(cls, d: dict) -> "NormalizationStats":
        return cls(**{k: np.asarray(d[k], dtype=np.float64) for k in (
            "player_mean", "player_std", "contest_mean", "contest_std",
            "inter_mean", "inter_std", "fee_edges", "size_edges", "prize_edges",
        )})


def _identity_stats() -> NormalizationStats:
    """Mean 0 / std 1 stats with unit edges; for raw-scale tests."""
    edges = np.arange(1.0, N_BUCKETS + 1)
    return NormalizationStats(
        player_mean=np.zeros(D_P), player_std=np.ones(D_P),
        contest_mean=np.zeros(D_C), contest_std=np.ones(D_C),
        inter_mean=np.zeros(D_I), inter_std=np.ones(D_I),
        fee_edges=edges.copy(), size_edges=edges.copy(), prize_edges=edges.copy(),
    )


def _normalize(raw: np.ndarray, mean: np.ndarray, std: np.ndarray, zmask: np.ndarray) -> np.ndarray:
    out = np.asarray(raw, dtype=np.float64).copy()
    out[zmask] = (np.log1p(out[zmask]) - mean[zmask]) / std[zmask]
    return np.clip(out, -10.0, 10.0)


# --- player features ---------------------------------------------------------


@dataclass
class _PlayerArrays:
    """A player's joins as sorted parallel arrays (ascending joining_time)."""

    day: np.ndarray        # epoch days, int64
    fee: np.ndarray        # units, float64
    prize: np.ndarray      # units, float64
    won: np.ndarray        # uint8
    multi: np.ndarray      # uint8
    guar: np.ndarray       # uint8
    type_idx: np.ndarray   # int8
    fee_cents: np.ndarray  # int64 (distinct-fee counting)
    size: np.ndarray       # int64 (distinct-size counting)
    fee_b: np.ndarray      # int8 bucket
    size_b: np.ndarray     # int8 bucket
    match_code: np.ndarray  # int64 codes, per-player
    first_of_match: np.ndarray  # uint8: 1 on the first join of each match


def _arrays_from_events(events: Sequence[JoinEvent], stats: NormalizationStats) -> _PlayerArrays:
    ordered = sorted(events, key=lambda e: (e.time, e.template_id))
    n = len(ordered)
    match_codes: dict[str, int] = {}
    first = np.zeros(n, dtype=np.uint8)
    mcode = np.empty(n, dtype=np.int64)
    for i, e in enumerate(ordered):
        if e.match_id not in match_codes:
            match_codes[e.match_id] = len(match_codes)
            first[i] = 1
        mcode[i] = match_codes[e.match_id]
    return _PlayerArrays(
        day=np.fromiter((epoch_day(e.day) for e in ordered), dtype=np.int64, count=n),
        fee=np.fromiter((money_units(e.entry_fee) for e in ordered), dtype=np.float64, count=n),
        prize=np.fromiter((money_units(e.prize_won) for e in ordered), dtype=np.float64, count=n),
        won=np.fromiter((1 if e.prize_won > 0 else 0 for e in ordered), dtype=np.uint8, count=n),
        multi=np.fromiter((1 if e.multi_entry else 0 for e in ordered), dtype=np.uint8, count=n),
        guar=np.fromiter((1 if e.guaranteed else 0 for e in ordered), dtype=np.uint8, count=n),
        type_idx=np.fromiter((_TYPE_INDEX[e.contest_type] for e in ordered), dtype=np.int8, count=n),
        fee_cents=np.fromiter((e.entry_fee for e in ordered), dtype=np.int64, count=n),
        size=np.fromiter((e.contest_size for e in ordered), dtype=np.int64, count=n),
        fee_b=np.fromiter((stats.fee_bucket(e.entry_fee) for e in ordered), dtype=np.int8, count=n),
        size_b=np.fromiter((stats.size_bucket(e.contest_size) for e in ordered), dtype=np.int8, count=n),
        match_code=mcode,
        first_of_match=first,
    )


def _window_block(a: _PlayerArrays, lo: int, hi: int) -> list[float]:
    """The 32 window stats over join slice [lo, hi)."""
    n = hi - lo
    if n == 0:
        return [0.0] * WINDOW_BLOCK
    sl = slice(lo, hi)
    type_counts = np.bincount(a.type_idx[sl], minlength=N_TYPES)
    fee_bucket_counts = np.bincount(a.fee_b[sl], minlength=N_BUCKETS)
    size_bucket_counts = np.bincount(a.size_b[sl], minlength=N_BUCKETS)
    fee_sum = float(a.fee[sl].sum())
    prize_sum = float(a.prize[sl].sum())
    block = [
        float(n),
        float(np.count_nonzero(type_counts)),
        float(np.unique(a.size[sl]).size),
        float(np.unique(a.fee_cents[sl]).size),
        fee_sum / n,
        float(a.fee[sl].max()),
        prize_sum / n,
        float(a.prize[sl].max()),
        fee_sum,
        float(a.won[sl].sum()) / n,
        float(np.unique(a.match_code[sl]).size),
        float(a.multi[sl].sum()),
        float(a.guar[sl].sum()),
    ]
    block.extend(float(c) for c in type_counts)
    block.extend(float(c) for c in fee_bucket_counts)
    block.extend(float(c) for c in size_bucket_counts)
    return block


def _row_from_arrays(a: _PlayerArrays, as_of_day: dt.date) -> np.ndarray:
    d = epoch_day(as_of_day)
    end = int(np.searchsorted(a.day, d, side="left"))
    row: list[float] = []
    for k in PLAYER_WINDOWS:
        lo = int(np.searchsorted(a.day, d - k, side="left"))
        row.extend(_window_block(a, lo, end))
    # lifetime block
    if end == 0:
        row.extend([DAYS_SINCE_CAP] + [0.0] * (LIFETIME_BLOCK - 1))
    else:
        sl = slice(0, end)
        n = end
        fee_sum = float(a.fee[sl].sum())
        prize_sum = float(a.prize[sl].sum())
        row.extend(
            [
                min(float(d - a.day[end - 1]), DAYS_SINCE_CAP),
                float(n),
                float(np.unique(a.type_idx[sl]).size),
                fee_sum / n,
                float(a.fee[sl].max()),
                fee_sum,
                prize_sum / n,
                float(a.prize[sl].max()),
                float(a.won[sl].sum()) / n,
                float(a.first_of_match[sl].sum()),
                float(a.multi[sl].sum()) / n,
            ]
        )
    return np.asarray(row, dtype=np.float64)


def player_features_raw(
    history: Sequence[JoinEvent], as_of_day: dt.date, stats: NormalizationStats
) -> np.ndarray:
    """107 window + lifetime stats on the natural scale (pre-normalization).

    `stats` supplies only the bucket edges here; no z-scoring is applied.
    """
    return _row_from_arrays(_arrays_from_events(history, stats), as_of_day)


def player_features(
    history: Sequence[JoinEvent], as_of_day: dt.date, stats: NormalizationStats
) -> np.ndarray:
    """Normalized 107-dim player vector as of `as_of_day`."""
    raw = player_features_raw(history, as_of_day, stats)
    return _normalize(raw, stats.player_mean, stats.player_std, PLAYER_Z_MASK)


def cold_start_player_raw() -> np.ndarray:
    """The all-defaults raw vector for a player with no history."""
    raw = np.zeros(D_P, dtype=np.float64)
    raw[_LIFETIME_BASE] = DAYS_SINCE_CAP
    return raw


def cold_start_player_row(stats: NormalizationStats) -> np.ndarray:
    return _normalize(cold_start_player_raw(), stats.player_mean, stats.player_std, PLAYER_Z_MASK)


# --- contest features ---------------------------------------------------------


def contest_features_raw(spec: ContestSpec) -> np.ndarray:
    """11 intrinsic template attributes on the natural scale."""
    top_frac, winner_frac = prize_stats(spec.prize_distribution, spec.contest_size, spec.prize_money) \
        if spec.prize_money > 0 else (0.0, spec.prize_distribution.winners() / spec.contest_size)
    fee_units = money_units(spec.entry_fee)
    prize_units = money_units(spec.prize_money)
    onehot = [0.0, 0.0, 0.0]
    onehot[_TYPE_INDEX[spec.contest_type]] = 1.0
    return np.asarray(
        [
            fee_units,
            prize_units,
            float(spec.contest_size),
            *onehot,
            1.0 if spec.guaranteed else 0.0,
            1.0 if spec.multi_entry else 0.0,
            top_frac,
            winner_frac,
            prize_units / max(fee_units, 0.01),
        ],
        dtype=np.float64,
    )


def contest_features(spec: ContestSpec, stats: NormalizationStats) -> np.ndarray:
    """Normalized 11-dim contest vector; invalid specs are rejected."""
    violations = validate_contest(spec)
    if violations:
        raise ValueError(f"invalid contest {spec.contest_id}: " + "; ".join(violations))
    return _normalize(contest_features_raw(spec), stats.contest_mean, stats.contest_std, CONTEST_Z_MASK)


# --- interaction features -----------------------------------------------------


class RecentJoin(NamedTuple):
    """A recent-join summary row: one (player, day, template) with a count."""

    day: dt.date
    template_id: str
    contest_type: ContestType
    fee_bucket: int
    size_bucket: int
    prize_bucket: int
    count: int


def recent_summary(
    events: Sequence[JoinEvent], as_of_day: dt.date, stats: NormalizationStats
) -> list[RecentJoin]:
    """Aggregate a player's joins in the 5 days before `as_of_day`."""
    horizon = as_of_day - dt.timedelta(days=max(INTERACTION_WINDOWS))
    counts: dict[tuple, int] = {}
    for e in events:
        if horizon <= e.day < as_of_day:
            key = (
                e.day,
                e.template_id,
                e.contest_type,
                stats.fee_bucket(e.entry_fee),
                stats.size_bucket(e.contest_size),
                stats.prize_bucket(e.prize_money),
            )
            counts[key] = counts.get(key, 0) + 1
    return [RecentJoin(*key, count) for key, count in sorted(counts.items(), key=lambda kv: (kv[0][0], kv[0][1]))]


@dataclass
class RecentHists:
    """Window histograms of a player's recent joins, for fast lookups."""

    type_counts: np.ndarray   # (2, N_TYPES) rows: 1-day, 5-day
    fee_counts: np.ndarray    # (2, N_BUCKETS)
    size_counts: np.ndarray   # (2, N_BUCKETS)
    prize_counts: np.ndarray  # (2, N_BUCKETS)
    template_counts: dict[str, int] = field(default_factory=dict)  # 5-day window

    @classmethod
    def empty(cls) -> "RecentHists":
        return cls(
            type_counts=np.zeros((2, N_TYPES)),
            fee_counts=np.zeros((2, N_BUCKETS)),
            size_counts=np.zeros((2, N_BUCKETS)),
            prize_counts=np.zeros((2, N_BUCKETS)),
        )


def build_recent_hists(rows: Sequence[RecentJoin], as_of_day: dt.date) -> RecentHists:
    h = RecentHists.empty()
    for r in rows:
        age = (as_of_day - r.day).days
        if not 1 <= age <= max(INTERACTION_WINDOWS):
            continue
        windows = [w for w, k in enumerate(INTERACTION_WINDOWS) if age <= k]
        for w in windows:
            h.type_counts[w, _TYPE_INDEX[r.contest_type]] += r.count
            h.fee_counts[w, r.fee_bucket] += r.count
            h.size_counts[w, r.size_bucket] += r.count
            h.prize_counts[w, r.prize_bucket] += r.count
        h.template_counts[r.template_id] = h.template_counts.get(r.template_id, 0) + r.count
    return h


def interaction_from_hists(h: RecentHists, target: ContestSpec, stats: NormalizationStats) -> np.ndarray:
    """Raw 9-dim interaction counts of recent joins against a target contest."""
    t = _TYPE_INDEX[target.contest_type]
    fb = stats.fee_bucket(target.entry_fee)
    pb = stats.prize_bucket(target.prize_money)
    sb = stats.size_bucket(target.contest_size)
    vec = []
    for w in range(len(INTERACTION_WINDOWS)):
        vec.extend(
            [h.type_counts[w, t], h.fee_counts[w, fb], h.prize_counts[w, pb], h.size_counts[w, sb]]
        )
    vec.append(float(h.template_counts.get(target.template_id, 0)))
    return np.asarray(vec, dtype=np.float64)


def interaction_features_raw(
    recent: Sequence[JoinEvent], target: ContestSpec, as_of_day: dt.date, stats: NormalizationStats
) -> np.ndarray:
    rows = recent_summary(recent, as_of_day, stats)
    return interaction_from_hists(build_recent_hists(rows, as_of_day), target, stats)


def interaction_features(
    recent: Sequence[JoinEvent], target: ContestSpec, as_of_day: dt.date, stats: NormalizationStats
) -> np.ndarray:
    """Normalized 9-dim interaction vector for (player recent joins, target)."""
    raw = interaction_features_raw(recent, target, as_of_day, stats)
    return _normalize(raw, stats.inter_mean, stats.inter_std, INTERACTION_Z_MASK)


# --- template blocks (per-match fast path) -------------------------------------


@dataclass
class TemplateBlock:
    """Per-template arrays for scoring a whole match's templates at once."""

    template_ids: list[str]
    contest_matrix: np.ndarray  # (n, D_C) normalized float64
    type_idx: np.ndarray
    fee_b: np.ndarray
    size_b: np.ndarray
    prize_b: np.ndarray

    def interaction_matrix(self, h: RecentHists, stats: NormalizationStats) -> np.ndarray:
        """Normalized (n, D_I) interaction matrix against every template."""
        n = len(self.template_ids)
        raw = np.zeros((n, D_I), dtype=np.float64)
        for w in range(len(INTERACTION_WINDOWS)):
            base = 4 * w
            raw[:, base + 0] = h.type_counts[w][self.type_idx]
            raw[:, base + 1] = h.fee_counts[w][self.fee_b]
            raw[:, base + 2] = h.prize_counts[w][self.prize_b]
            raw[:, base + 3] = h.size_counts[w][self.size_b]
        if h.template_counts:
            raw[:, 8] = [float(h.template_counts.get(t, 0)) for t in self.template_ids]
        out = raw
        zm = INTERACTION_Z_MASK
        out[:, zm] = (np.log1p(out[:, zm]) - stats.inter_mean[zm]) / stats.inter_std[zm]
        return np.clip(out, -10.0, 10.0)


def build_template_block(templates: Sequence[ContestSpec], stats: NormalizationStats) -> TemplateBlock:
    ids = [t.template_id for t in templates]
    if len(set(ids)) != len(ids):
        raise DataError("duplicate template_id in template block")
    mat = np.stack([contest_features(t, stats) for t in templates])
    return TemplateBlock(
        template_ids=ids,
        contest_matrix=mat,
        type_idx=np.asarray([_TYPE_INDEX[t.contest_type] for t in templates], dtype=np.int64),
        fee_b=np.asarray([stats.fee_bucket(t.entry_fee) for t in templates], dtype=np.int64),
        size_b=np.asarray([stats.size_bucket(t.contest_size) for t in templates], dtype=np.int64),
        prize_b=np.asarray([stats.prize_bucket(t.prize_money) for t in templates], dtype=np.int64),
    )


# --- fitting -------------------------------------------------------------------


def fit_normalization(
    train_events: Sequence[JoinEvent],
    templates_by_match: Mapping[str, Sequence[ContestSpec]],
    match_days: Mapping[str, dt.date],
) -> NormalizationStats:
    """Fit bucket edges and per-dim mean/std on the training partition only.

    Edges are the 8-quantile boundaries of training entry fees, contest sizes
    and prize pools (join-weighted). Means/stds are computed over log1p raw
    rows: player rows per (player, match day), contest rows per distinct
    template, interaction rows per (player, match) against each available
    template.
    """
    if not train_events:
        raise DataError("cannot fit normalization on an empty training partition")

    stats = _identity_stats()
    stats.fee_edges = quantile_edges([e.entry_fee for e in train_events])
    stats.size_edges = quantile_edges([e.contest_size for e in train_events])
    stats.prize_edges = quantile_edges([e.prize_money for e in train_events])

    by_player: dict[str, list[JoinEvent]] = {}
    groups: dict[tuple[str, str], list[JoinEvent]] = {}
    for e in train_events:
        by_player.setdefault(e.player_id, []).append(e)
        groups.setdefault((e.player_id, e.match_id), []).append(e)

    arrays = {pid: _arrays_from_events(evs, stats) for pid, evs in by_player.items()}

    blocks: dict[str, TemplateBlock] = {}
    templates_seen: dict[str, ContestSpec] = {}
    for mid, tpls in templates_by_match.items():
        for t in tpls:
            templates_seen.setdefault(t.template_id, t)

    def _acc():
        return {"n": 0, "sum": None, "sumsq": None}

    def _add(acc: dict, rows: np.ndarray) -> None:
        rows = np.atleast_2d(rows)
        if acc["sum"] is None:
            acc["sum"] = np.zeros(rows.shape[1])
            acc["sumsq"] = np.zeros(rows.shape[1])
        acc["n"] += rows.shape[0]
        acc["sum"] += rows.sum(axis=0)
        acc["sumsq"] += (rows * rows).sum(axis=0)

    p_acc, i_acc = _acc(), _acc()
    seen_player_day: set[tuple[str, dt.date]] = set()
    hist_cache: dict[tuple[str, dt.date], RecentHists] = {}

    for (pid, mid) in sorted(groups):
        day = match_days.get(mid)
        if day is None:
            raise DataError(f"no match day known for match {mid}")
        if (pid, day) not in seen_player_day:
            seen_player_day.add((pid, day))
            raw = _row_from_arrays(arrays[pid], day)
            _add(p_acc, np.log1p(np.maximum(raw, 0.0))[None, :][:, PLAYER_Z_MASK])
        tpls = templates_by_match.get(mid)
        if not tpls:
            continue
        if mid not in blocks:
            blocks[mid] = _raw_template_block(tpls, stats)
        key = (pid, day)
        if key not in hist_cache:
            rows = recent_summary(by_player[pid], day, stats)
            hist_cache[key] = build_recent_hists(rows, day)
        raw_i = _raw_interaction_matrix(blocks[mid], hist_cache[key])
        _add(i_acc, np.log1p(raw_i))

    c_rows = np.stack(
        [contest_features_raw(templates_seen[t]) for t in sorted(templates_seen)]
    )
    c_log = np.log1p(np.maximum(c_rows[:, CONTEST_Z_MASK], 0.0))

    def _finish(acc: dict, mask: np.ndarray, mean: np.ndarray, std: np.ndarray) -> None:
        if acc["n"] == 0:
            return
        m = acc["sum"] / acc["n"]
        var = np.maximum(acc["sumsq"] / acc["n"] - m * m, 0.0)
        mean[mask] = m
        std[mask] = np.maximum(np.sqrt(var), 1e-8)

    _finish(p_acc, PLAYER_Z_MASK, stats.player_mean, stats.player_std)
    _finish(i_acc, INTERACTION_Z_MASK, stats.inter_mean, stats.inter_std)
    stats.contest_mean[CONTEST_Z_MASK] = c_log.mean(axis=0)
    stats.contest_std[CONTEST_Z_MASK] = np.maximum(c_log.std(axis=0), 1e-8)
    return stats


def _raw_template_block(templates: Sequence[ContestSpec], stats: NormalizationStats) -> TemplateBlock:
    """TemplateBlock whose contest_matrix is raw (fitting only)."""
    return TemplateBlock(
        template_ids=[t.template_id for t in templates],
        contest_matrix=np.stack([contest_features_raw(t) for t in templates]),
        type_idx=np.asarray([_TYPE_INDEX[t.contest_type] for t in templates], dtype=np.int64),
        fee_b=np.asarray([stats.fee_bucket(t.entry_fee) for t in templates], dtype=np.int64),
        size_b=np.asarray([stats.size_bucket(t.contest_size) for t in templates], dtype=np.int64),
        prize_b=np.asarray([stats.prize_bucket(t.prize_money) for t in templates], dtype=np.int64),
    )


def _raw_interaction_matrix(block: TemplateBlock, h: RecentHists) -> np.ndarray:
    n = len(block.template_ids)
    raw = np.zeros((n, D_I), dtype=np.float64)
    for w in range(len(INTERACTION_WINDOWS)):
        base = 4 * w
        raw[:, base + 0] = h.type_counts[w][block.type_idx]
        raw[:, base + 1] = h.fee_counts[w][block.fee_b]
        raw[:, base + 2] = h.prize_counts[w][block.prize_b]
        raw[:, base + 3] = h.size_counts[w][block.size_b]
    if h.template_counts:
        raw[:, 8] = [float(h.template_counts.get(t, 0)) for t in block.template_ids]
    return raw


# --- snapshots and the offline store --------------------------------------------


@dataclass
class FeatureSnapshot:
    """Per-day feature state: normalized player rows plus recent-join summaries."""

    as_of_day: dt.date
    stats: NormalizationStats
    players: dict[str, np.ndarray]
    recents: dict[str, list[RecentJoin]]
    schema_version: str = SNAPSHOT_SCHEMA

    def player_row(self, player_id: str) -> np.ndarray:
        """Stored row, or the cold-start vector for unknown players."""
        row = self.players.get(player_id)
        if row is None:
            return cold_start_player_row(self.stats).astype(np.float32)
        return row

    def hists_for(self, player_id: str) -> RecentHists:
        rows = self.recents.get(player_id)
        if not rows:
            return RecentHists.empty()
        return build_recent_hists(rows, self.as_of_day)


def build_snapshot(
    events: Sequence[JoinEvent], day: dt.date, stats: NormalizationStats
) -> FeatureSnapshot:
    """Compute the day's snapshot from the full join history.

    Only joins strictly before `day` 00:00 UTC are visible; players with no
    join in the 30 days before `day` are omitted.
    """
    cutoff = day_start(day)
    active_floor = day - dt.timedelta(days=30)
    by_player: dict[str, list[JoinEvent]] = {}
    for e in events:
        if e.time < cutoff:
            by_player.setdefault(e.player_id, []).append(e)

    players: dict[str, np.ndarray] = {}
    recents: dict[str, list[RecentJoin]] = {}
    for pid in sorted(by_player):
        evs = by_player[pid]
        if not any(active_floor <= e.day < day for e in evs):
            continue
        arrs = _arrays_from_events(evs, stats)
        raw = _row_from_arrays(arrs, day)
        players[pid] = _normalize(raw, stats.player_mean, stats.player_std, PLAYER_Z_MASK).astype(np.float32)
        rows = recent_summary(evs, day, stats)
        if rows:
            recents[pid] = rows
    return FeatureSnapshot(as_of_day=day, stats=stats, players=players, recents=recents)


def iter_snapshots(
    events: Sequence[JoinEvent], days: Sequence[dt.date], stats: NormalizationStats
):
    """Yield (day, FeatureSnapshot) over many days with per-player state reuse.

    Equivalent to build_snapshot(events, day, stats) per day, but sorts and
    encodes each player's history once.
    """
    by_player: dict[str, list[JoinEvent]] = {}
    for e in events:
        by_player.setdefault(e.player_id, []).append(e)
    prepared: dict[str, tuple[list[JoinEvent], _PlayerArrays]] = {}
    for pid in sorted(by_player):
        ordered = sorted(by_player[pid], key=lambda e: (e.time, e.template_id))
        prepared[pid] = (ordered, _arrays_from_events(ordered, stats))

    for day in sorted(days):
        d = epoch_day(day)
        players: dict[str, np.ndarray] = {}
        recents: dict[str, list[RecentJoin]] = {}
        for pid, (ordered, arrs) in prepared.items():
            end = int(np.searchsorted(arrs.day, d, side="left"))
            lo30 = int(np.searchsorted(arrs.day, d - 30, side="left"))
            if end - lo30 <= 0:
                continue
            raw = _row_from_arrays(arrs, day)
            players[pid] = _normalize(
                raw, stats.player_mean, stats.player_std, PLAYER_Z_MASK
            ).astype(np.float32)
            lo5 = int(np.searchsorted(arrs.day, d - max(INTERACTION_WINDOWS), side="left"))
            if end - lo5 > 0:
                rows = recent_summary(ordered[lo5:end], day, stats)
                if rows:
                    recents[pid] = rows
        yield day, FeatureSnapshot(as_of_day=day, stats=stats, players=players, recents=recents)


class SnapshotStore:
    """File-based offline feature store: one directory per as_of_day.

    Layout:
        <root>/manifest.json          dims, schema version, normalization stats
        <root>/days/<ISO-day>/player_features.txt   player_id,<hex float32 LE>
        <root>/days/<ISO-day>/recent_joins.txt      summary rows
        <root>/days/<ISO-day>/day.json              schema version, row count
    """

    def __init__(self, root: str | os.PathLike):
        self.root = str(root)

    def _manifest_path(self) -> str:
        return os.path.join(self.root, "manifest.json")

    def _day_dir(self, day: dt.date) -> str:
        return os.path.join(self.root, "days", day.isoformat())

    def write_manifest(self, stats: NormalizationStats) -> None:
        os.makedirs(self.root, exist_ok=True)
        doc = {
            "schema_version": SNAPSHOT_SCHEMA,
            "d_p": D_P,
            "d_c": D_C,
            "d_i": D_I,
            "stats": stats.to_json_dict(),
        }
        with open(self._manifest_path(), "w", encoding="utf-8") as fh:
            json.dump(doc, fh, sort_keys=True)

    def read_manifest(self) -> NormalizationStats:
        path = self._manifest_path()
        try:
            with open(path, "r", encoding="utf-8") as fh:
                doc = json.load(fh)
        except OSError as exc:
            raise StoreError(f"cannot read store manifest {path}: {exc}") from exc
        if doc.get("schema_version") != SNAPSHOT_SCHEMA:
            raise StoreError(
                f"{path}: schema version {doc.get('schema_version')!r} != {SNAPSHOT_SCHEMA!r}"
            )
        if (doc.get("d_p"), doc.get("d_c"), doc.get("d_i")) != (D_P, D_C, D_I):
            raise StoreError(f"{path}: dims mismatch")
        return NormalizationStats.from_json_dict(doc["stats"])

    def write_day(self, snapshot: FeatureSnapshot) -> None:
        day = snapshot.as_of_day
        path = self._day_dir(day)
        try:
            os.makedirs(path, exist_ok=True)
            with open(os.path.join(path, "player_features.txt"), "w", encoding="utf-8") as fh:
                for pid, vec in snapshot.players.items():
                    fh.write(f"{pid},{vec.astype('<f4').tobytes().hex()}\n")
            with open(os.path.join(path, "recent_joins.txt"), "w", encoding="utf-8") as fh:
                for pid, rows in snapshot.recents.items():
                    for r in rows:
                        fh.write(
                            f"{pid},{r.day.isoformat()},{r.template_id},{r.contest_type.value},"
                            f"{r.fee_bucket},{r.size_bucket},{r.prize_bucket},{r.count}\n"
                        )
            with open(os.path.join(path, "day.json"), "w", encoding="utf-8") as fh:
                json.dump(
                    {
                        "schema_version": snapshot.schema_version,
                        "as_of_day": day.isoformat(),
                        "n_players": len(snapshot.players),
                    },
                    fh,
                    sort_keys=True,
                )
        except OSError as exc:
            raise StoreError(f"snapshot write failed for day {day} at {path}: {exc}") from exc

    def read_day(self, day: dt.date) -> FeatureSnapshot:
        path = self._day_dir(day)
        stats = self.read_manifest()
        try:
            with open(os.path.join(path, "day.json"), "r", encoding="utf-8") as fh:
                meta = json.load(fh)
        except OSError as exc:
            raise StoreError(f"no snapshot for day {day} at {path}: {exc}") from exc
        if meta.get("schema_version") != SNAPSHOT_SCHEMA:
            raise StoreError(
                f"{path}: snapshot schema {meta.get('schema_version')!r} != {SNAPSHOT_SCHEMA!r}"
            )
        players: dict[str, np.ndarray] = {}
        with open(os.path.join(path, "player_features.txt"), "r", encoding="utf-8") as fh:
            for line in fh:
                pid, hexed = line.rstrip("\n").split(",", 1)
                vec = np.frombuffer(bytes.fromhex(hexed), dtype="<f4")
                if vec.shape != (D_P,):
                    raise StoreError(f"{path}: row for {pid} has {vec.shape[0]} dims, expected {D_P}")
                players[pid] = vec.copy()
        recents: dict[str, list[RecentJoin]] = {}
        with open(os.path.join(path, "recent_joins.txt"), "r", encoding="utf-8") as fh:
            for line in fh:
                pid, d, tpl, ctype, fee_b, size_b, prize_b, count = line.rstrip("\n").split(",")
                recents.setdefault(pid, []).append(
                    RecentJoin(
                        day=parse_day(d),
                        template_id=tpl,
                        contest_type=ContestType(ctype),
                        fee_bucket=int(fee_b),
                        size_bucket=int(size_b),
                        prize_bucket=int(prize_b),
                        count=int(count),
                    )
                )
        return FeatureSnapshot(as_of_day=day, stats=stats, players=players, recents=recents)

    def has_day(self, day: dt.date) -> bool:
        return os.path.isdir(self._day_dir(day))

    def days(self) -> list[dt.date]:
        base = os.path.join(self.root, "days")
        if not os.path.isdir(base):
            return []
        return sorted(parse_day(name) for name in os.listdir(base))


class SnapshotCache:
    """Read-through snapshot lookup over a store, keyed by day."""

    def __init__(self, store: SnapshotStore):
        self.store = store
        self._cache: dict[dt.date, FeatureSnapshot] = {}

    def get(self, day: dt.date) -> FeatureSnapshot:
        snap = self._cache.get(day)
        if snap is None:
            if not self.store.has_day(day):
                raise DataError(f"feature snapshot missing for day {day.isoformat()}")
            snap = self.store.read_day(day)
            self._cache[day] = snap
        return snap
