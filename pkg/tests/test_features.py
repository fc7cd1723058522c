import datetime as dt

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from widir.domain import CENTS, ContestType, day_of, day_start, match_templates, index_contests
from widir.errors import StoreError
from widir.features import (
    D_C,
    D_I,
    D_P,
    DAYS_SINCE_CAP,
    FeatureSnapshot,
    JoinEvent,
    NormalizationStats,
    PLAYER_WINDOWS,
    SnapshotStore,
    _identity_stats,
    bucket_of,
    build_snapshot,
    cold_start_player_raw,
    contest_features,
    contest_features_raw,
    enrich_joins,
    fit_normalization,
    interaction_features_raw,
    iter_snapshots,
    player_features,
    player_features_raw,
    quantile_edges,
    recent_summary,
)

from conftest import DAY0, mk_contest

UTC_TYPES = [ContestType.PUBLIC, ContestType.SPECIAL, ContestType.MEGA]


def ev(
    day,
    player="p1",
    match="m1",
    template="t1",
    ctype=ContestType.PUBLIC,
    fee=10 * CENTS,
    prize=0,
    size=10,
    pool=90 * CENTS,
    guaranteed=False,
    multi=False,
    hour=12,
):
    return JoinEvent(
        time=day_start(day) + hour * 3600,
        day=day,
        player_id=player,
        match_id=match,
        template_id=template,
        contest_type=ctype,
        entry_fee=fee,
        prize_won=prize,
        contest_size=size,
        prize_money=pool,
        guaranteed=guaranteed,
        multi_entry=multi,
    )


def oracle_player_vector(events, as_of_day, stats):
    """Independent reference: direct loops over the documented layout."""
    past = [e for e in events if e.day < as_of_day]
    vec = []
    for k in PLAYER_WINDOWS:
        window = [e for e in past if (as_of_day - e.day).days <= k]
        n = len(window)
        if n == 0:
            vec.extend([0.0] * 32)
            continue
        fees = [e.entry_fee / CENTS for e in window]
        prizes = [e.prize_won / CENTS for e in window]
        block = [
            float(n),
            float(len({e.contest_type for e in window})),
            float(len({e.contest_size for e in window})),
            float(len({e.entry_fee for e in window})),
            sum(fees) / n,
            max(fees),
            sum(prizes) / n,
            max(prizes),
            sum(fees),
            sum(1 for e in window if e.prize_won > 0) / n,
            float(len({e.match_id for e in window})),
            float(sum(1 for e in window if e.multi_entry)),
            float(sum(1 for e in window if e.guaranteed)),
        ]
        for t in UTC_TYPES:
            block.append(float(sum(1 for e in window if e.contest_type is t)))
        for b in range(8):
            block.append(float(sum(1 for e in window if bucket_of(e.entry_fee, stats.fee_edges) == b)))
        for b in range(8):
            block.append(float(sum(1 for e in window if bucket_of(e.contest_size, stats.size_edges) == b)))
        vec.extend(block)
    if not past:
        vec.extend([DAYS_SINCE_CAP] + [0.0] * 10)
    else:
        n = len(past)
        fees = [e.entry_fee / CENTS for e in past]
        prizes = [e.prize_won / CENTS for e in past]
        vec.extend(
            [
                min(float((as_of_day - max(e.day for e in past)).days), DAYS_SINCE_CAP),
                float(n),
                float(len({e.contest_type for e in past})),
                sum(fees) / n,
                max(fees),
                sum(fees),
                sum(prizes) / n,
                max(prizes),
                sum(1 for e in past if e.prize_won > 0) / n,
                float(len({e.match_id for e in past})),
                sum(1 for e in past if e.multi_entry) / n,
            ]
        )
    return np.asarray(vec)


class TestQuantileEdges:
    def test_uniform_sample_gives_near_equal_mass(self):
        values = np.arange(1, 801)
        edges = quantile_edges(values)
        # derived oracle: exact sample quantiles
        expected = np.quantile(values, [k / 8 for k in range(1, 9)])
        np.testing.assert_allclose(edges, expected)
        buckets = [bucket_of(v, edges) for v in values]
        counts = np.bincount(buckets, minlength=8)
        assert counts.min() >= 90 and counts.max() <= 110

    def test_degenerate_sample_stays_strictly_increasing(self):
        edges = quantile_edges([5.0] * 100)
        assert np.all(np.diff(edges) > 0)

    def test_fit_twice_identical(self):
        events = [ev(DAY0 + dt.timedelta(days=d), fee=(d + 1) * CENTS, match=f"m{d}") for d in range(10)]
        by_match = {f"m{d}": [mk_contest(match_id=f"m{d}")] for d in range(10)}
        days = {f"m{d}": DAY0 + dt.timedelta(days=d) for d in range(10)}
        s1 = fit_normalization(events, by_match, days)
        s2 = fit_normalization(events, by_match, days)
        for k, v in s1.to_json_dict().items():
            assert v == s2.to_json_dict()[k]

    def test_constant_feature_floors_stddev(self):
        # identical joins -> zero variance on every active count dim
        events = [ev(DAY0 + dt.timedelta(days=d), match=f"m{d}") for d in range(3)]
        by_match = {f"m{d}": [mk_contest(match_id=f"m{d}")] for d in range(3)}
        days = {f"m{d}": DAY0 + dt.timedelta(days=d) for d in range(3)}
        stats = fit_normalization(events, by_match, days)
        assert np.all(stats.player_std >= 1e-8)
        # a value equal to the mean normalizes to 0 even with the floored std
        constant_dim = np.flatnonzero(stats.player_std == 1e-8)
        assert constant_dim.size > 0


class TestPlayerFeatures:
    def test_empty_history_cold_start(self, identity_stats):
        raw = player_features_raw([], DAY0, identity_stats)
        assert raw.shape == (D_P,)
        np.testing.assert_array_equal(raw, cold_start_player_raw())
        assert raw[96] == DAYS_SINCE_CAP

    def test_single_join_yesterday(self, identity_stats):
        e = ev(DAY0 - dt.timedelta(days=1), fee=10 * CENTS)
        raw = player_features_raw([e], DAY0, identity_stats)
        # total_joins is dim 0 of each 32-wide window block
        assert raw[0] == 1.0 and raw[32] == 1.0 and raw[64] == 1.0
        for base in (0, 32, 64):
            assert raw[base + 9] == 0.0  # win_rate
            assert raw[base + 4] == 10.0  # avg fee in units
        assert raw[96] == 1.0  # days since last join

    def test_six_join_history_matches_hand_oracle(self):
        stats = _identity_stats()
        stats.fee_edges = np.asarray([600.0, 1100, 1600, 2100, 2600, 3100, 3600, 4100])
        stats.size_edges = np.asarray([3.0, 9, 50, 200, 800, 2000, 5000, 10000])
        as_of = dt.date(2025, 1, 11)
        events = [
            ev(dt.date(2025, 1, 1), match="mA", fee=10 * CENTS, size=10),
            ev(dt.date(2025, 1, 4), match="mB", fee=20 * CENTS, prize=50 * CENTS,
               ctype=ContestType.SPECIAL, size=100, multi=True, guaranteed=True),
            ev(dt.date(2025, 1, 8), match="mC", fee=10 * CENTS, size=10),
            ev(dt.date(2025, 1, 9), match="mC", fee=5 * CENTS, prize=15 * CENTS,
               ctype=ContestType.MEGA, size=1000, guaranteed=True),
            ev(dt.date(2025, 1, 10), match="mD", fee=10 * CENTS, size=10),
            ev(dt.date(2025, 1, 10), match="mD", fee=50 * CENTS, size=2, multi=True),
        ]
        raw = player_features_raw(events, as_of, stats)
        np.testing.assert_allclose(raw, oracle_player_vector(events, as_of, stats), atol=0)
        # hand-computed spot values (3-day window: the last 4 joins)
        assert raw[0] == 4.0  # total joins
        assert raw[1] == 2.0  # distinct types: PUBLIC, MEGA
        assert raw[2] == 3.0  # distinct sizes: {2, 10, 1000}
        assert raw[3] == 3.0  # distinct fees: {5, 10, 50}
        assert raw[4] == pytest.approx(18.75)  # avg fee
        assert raw[5] == 50.0
        assert raw[9] == pytest.approx(0.25)  # win rate
        assert raw[10] == 2.0  # distinct matches: mC, mD
        # 7-day window: 5 joins; 30-day: all 6
        assert raw[32] == 5.0 and raw[64] == 6.0
        # lifetime block
        assert raw[96] == 1.0
        assert raw[97] == 6.0
        assert raw[99] == pytest.approx(105 / 6)
        assert raw[104] == pytest.approx(2 / 6)
        assert raw[105] == 4.0  # distinct matches lifetime
        assert raw[106] == pytest.approx(2 / 6)

    def test_normalized_is_clipped_and_finite(self, identity_stats):
        events = [ev(DAY0 - dt.timedelta(days=1), fee=10**6 * CENTS, prize=10**7 * CENTS)]
        out = player_features(events, DAY0, identity_stats)
        assert np.all(np.isfinite(out))
        assert out.min() >= -10.0 and out.max() <= 10.0


@st.composite
def event_lists(draw):
    n = draw(st.integers(min_value=0, max_value=25))
    events = []
    for i in range(n):
        d = DAY0 + dt.timedelta(days=draw(st.integers(min_value=-40, max_value=5)))
        events.append(
            ev(
                d,
                match=f"m{draw(st.integers(0, 6))}",
                template=f"t{draw(st.integers(0, 5))}",
                ctype=draw(st.sampled_from(UTC_TYPES)),
                fee=draw(st.integers(1, 500)) * CENTS,
                prize=draw(st.sampled_from([0, 0, 0, 500, 12_00])),
                size=draw(st.sampled_from([2, 10, 100, 1000])),
                multi=draw(st.booleans()),
                guaranteed=draw(st.booleans()),
                hour=draw(st.integers(0, 23)),
            )
        )
    return events


class TestPlayerFeatureProperties:
    @settings(max_examples=60, deadline=None)
    @given(event_lists())
    def test_matches_oracle_on_random_histories(self, events):
        stats = _identity_stats()
        stats.fee_edges = np.asarray([100.0, 2500, 7500, 15000, 25000, 35000, 45000, 50000])
        stats.size_edges = np.asarray([2.0, 10, 100, 1000, 2000, 3000, 4000, 5000])
        raw = player_features_raw(events, DAY0, stats)
        np.testing.assert_allclose(raw, oracle_player_vector(events, DAY0, stats), atol=0)

    @settings(max_examples=40, deadline=None)
    @given(event_lists(), st.randoms())
    def test_permutation_invariance(self, events, rnd):
        stats = _identity_stats()
        shuffled = list(events)
        rnd.shuffle(shuffled)
        np.testing.assert_array_equal(
            player_features_raw(events, DAY0, stats),
            player_features_raw(shuffled, DAY0, stats),
        )

    @settings(max_examples=40, deadline=None)
    @given(event_lists())
    def test_no_leakage(self, events):
        stats = _identity_stats()
        visible = [e for e in events if e.day < DAY0]
        np.testing.assert_array_equal(
            player_features_raw(events, DAY0, stats),
            player_features_raw(visible, DAY0, stats),
        )

    @settings(max_examples=40, deadline=None)
    @given(event_lists())
    def test_window_nesting(self, events):
        raw = player_features_raw(events, DAY0, _identity_stats())
        assert raw[0] <= raw[32] <= raw[64]  # total joins per window


class TestContestFeatures:
    def test_template_level_invariance(self, identity_stats):
        a = mk_contest(contest_id="cA")
        b = mk_contest(contest_id="cB")
        np.testing.assert_array_equal(
            contest_features(a, identity_stats), contest_features(b, identity_stats)
        )

    def test_free_entry_uses_floor(self, identity_stats):
        spec = mk_contest(entry_fee=0, tiers=((1, 1, 100 * CENTS),))
        vec = contest_features(spec, identity_stats)
        assert np.all(np.isfinite(vec))
        raw = contest_features_raw(spec)
        assert raw[10] == pytest.approx(100 / 0.01)

    def test_hand_case(self, identity_stats):
        spec = mk_contest(
            entry_fee=49 * CENTS,
            contest_size=100_000,
            contest_type=ContestType.MEGA,
            tiers=((1, 1, 400_000 * CENTS), (2, 10_001, 60 * CENTS)),
            guaranteed=True,
            multi_entry=True,
        )
        raw = contest_features_raw(spec)
        assert raw[0] == 49.0
        assert raw[1] == 1_000_000.0  # 400k + 10_000 ranks x 60
        assert raw[2] == 100_000.0
        np.testing.assert_array_equal(raw[3:6], [0.0, 0.0, 1.0])
        assert raw[6] == 1.0 and raw[7] == 1.0
        assert raw[8] == pytest.approx(0.4)  # 400k / 1M
        assert raw[9] == pytest.approx(0.10001)  # 10_001 winners / 100k spots
        assert raw[10] == pytest.approx(1_000_000 / 49)
        assert contest_features(spec, identity_stats).shape == (D_C,)

    def test_invalid_spec_rejected(self, identity_stats):
        bad = mk_contest(contest_size=4, tiers=((1, 5, 10 * CENTS),))
        with pytest.raises(ValueError):
            contest_features(bad, identity_stats)


class TestInteractionFeatures:
    def test_empty_history_zero_counts(self, identity_stats):
        target = mk_contest()
        raw = interaction_features_raw([], target, DAY0, identity_stats)
        np.testing.assert_array_equal(raw, np.zeros(D_I))

    def test_same_type_counts(self):
        stats = _identity_stats()
        stats.fee_edges = np.asarray([1000.0, 2000, 3000, 4000, 5000, 6000, 7000, 8000])
        stats.prize_edges = np.asarray([1e4, 2e4, 3e4, 4e4, 5e4, 6e4, 7e4, 8e4])
        stats.size_edges = np.asarray([5.0, 20, 100, 500, 1000, 2000, 3000, 4000])
        target = mk_contest(entry_fee=15 * CENTS, contest_size=2, tiers=((1, 1, 9 * CENTS),))
        joins = [
            ev(DAY0 - dt.timedelta(days=1), template=f"x{i}", fee=75 * CENTS,
               size=3000, pool=70_000 * CENTS)
            for i in range(3)
        ]
        raw = interaction_features_raw(joins, target, DAY0, stats)
        # same type in both windows; every bucket differs from the target's
        np.testing.assert_array_equal(raw, [3, 0, 0, 0, 3, 0, 0, 0, 0])

    def test_window_overlap(self, identity_stats):
        target = mk_contest(template_id="tT")
        joins = [ev(DAY0 - dt.timedelta(days=3), template="tT")]
        raw = interaction_features_raw(joins, target, DAY0, identity_stats)
        assert raw[0] == 0.0  # not in the 1-day window
        assert raw[4] == 1.0  # in the 5-day window
        assert raw[8] == 1.0  # same template within 5 days

    def test_six_day_old_join_outside_both_windows(self, identity_stats):
        target = mk_contest(template_id="tT")
        joins = [ev(DAY0 - dt.timedelta(days=6), template="tT")]
        raw = interaction_features_raw(joins, target, DAY0, identity_stats)
        np.testing.assert_array_equal(raw, np.zeros(D_I))

    @settings(max_examples=40, deadline=None)
    @given(event_lists())
    def test_one_day_counts_nested_in_five_day(self, events):
        stats = _identity_stats()
        target = mk_contest()
        raw = interaction_features_raw(events, target, DAY0, stats)
        assert np.all(raw[:4] <= raw[4:8])


class TestSnapshots:
    def _world_events(self):
        events = []
        for d in range(1, 40):
            day = DAY0 + dt.timedelta(days=d)
            events.append(ev(day, player=f"p{d % 7}", match=f"m{d}", template=f"t{d % 5}",
                             fee=(5 + d) * CENTS))
        return events

    def test_store_round_trip_bitwise(self, tmp_path, identity_stats):
        events = self._world_events()
        day = DAY0 + dt.timedelta(days=30)
        snap = build_snapshot(events, day, identity_stats)
        assert snap.players
        store = SnapshotStore(tmp_path / "store")
        store.write_manifest(identity_stats)
        store.write_day(snap)
        loaded = store.read_day(day)
        assert set(loaded.players) == set(snap.players)
        for pid, vec in snap.players.items():
            np.testing.assert_array_equal(loaded.players[pid], vec)
        assert loaded.recents == snap.recents

    def test_stale_player_absent(self, identity_stats):
        day = DAY0 + dt.timedelta(days=40)
        events = [
            ev(day - dt.timedelta(days=31), player="stale"),
            ev(day - dt.timedelta(days=30), player="fresh"),
        ]
        snap = build_snapshot(events, day, identity_stats)
        assert "fresh" in snap.players
        assert "stale" not in snap.players

    def test_no_leakage_from_same_day_joins(self, identity_stats):
        day = DAY0 + dt.timedelta(days=10)
        past = [ev(day - dt.timedelta(days=2), player="p0")]
        with_leak = past + [ev(day, player="p0"), ev(day + dt.timedelta(days=1), player="p0")]
        a = build_snapshot(past, day, identity_stats)
        b = build_snapshot(with_leak, day, identity_stats)
        np.testing.assert_array_equal(a.players["p0"], b.players["p0"])

    def test_iter_snapshots_matches_single_day_builds(self, identity_stats):
        events = self._world_events()
        days = [DAY0 + dt.timedelta(days=d) for d in (10, 20, 31)]
        streamed = dict(iter_snapshots(events, days, identity_stats))
        for day in days:
            single = build_snapshot(events, day, identity_stats)
            assert set(streamed[day].players) == set(single.players)
            for pid in single.players:
                np.testing.assert_array_equal(streamed[day].players[pid], single.players[pid])
            assert streamed[day].recents == single.recents

    def test_schema_mismatch_is_error(self, tmp_path, identity_stats):
        store = SnapshotStore(tmp_path / "store")
        store.write_manifest(identity_stats)
        snap = build_snapshot(self._world_events(), DAY0 + dt.timedelta(days=30), identity_stats)
        store.write_day(snap)
        day_json = tmp_path / "store" / "days" / snap.as_of_day.isoformat() / "day.json"
        day_json.write_text(day_json.read_text().replace("widir-snapshot-v1", "widir-snapshot-v0"))
        with pytest.raises(StoreError):
            store.read_day(snap.as_of_day)

    def test_missing_day_is_error_with_context(self, tmp_path, identity_stats):
        store = SnapshotStore(tmp_path / "store")
        store.write_manifest(identity_stats)
        with pytest.raises(StoreError, match="2025-05-05"):
            store.read_day(dt.date(2025, 5, 5))

    def test_cold_start_row_for_unknown_player(self, identity_stats):
        snap = FeatureSnapshot(as_of_day=DAY0, stats=identity_stats, players={}, recents={})
        row = snap.player_row("nobody")
        assert row.shape == (D_P,)
        assert np.all(np.isfinite(row))


class TestFitNormalization:
    def test_empty_training_rejected(self):
        with pytest.raises(Exception):
            fit_normalization([], {}, {})

    def test_stats_round_trip_json(self, tiny_world):
        by_id = index_contests(tiny_world.contests)
        events = enrich_joins(tiny_world.joins, by_id)
        by_match = match_templates(tiny_world.contests)
        days = {m.match_id: day_of(m.start_time) for m in tiny_world.matches}
        stats = fit_normalization(events, by_match, days)
        loaded = NormalizationStats.from_json_dict(stats.to_json_dict())
        for key, value in stats.to_json_dict().items():
            assert loaded.to_json_dict()[key] == value
        assert np.all(stats.player_std > 0)
        assert np.all(np.diff(stats.fee_edges) > 0)
