"""Offline ranking evaluation: slates, precision@h / recall@h, baselines.

Metrics are computed at template level and macro-averaged over the
(player, match) pairs of the test partition that have at least one join.
"""

from __future__ import annotations

import datetime as dt
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from .domain import ContestSpec
from .errors import DataError
from .features import FeatureSnapshot, JoinEvent, build_template_block
from .generator import PlayerArchetype, archetype_utilities, template_stats
from .model import WidirParams, forward_batch
from .textio import format_kv

EVAL_H_VALUES = (1, 3, 5, 10)


@dataclass(frozen=True, slots=True)
class RankedSlate:
    """Descending-score template ordering for one (player, match)."""

    player_id: str
    match_id: str
    ranked: tuple[tuple[str, float], ...]

    def top(self, h: int) -> list[str]:
        return [tid for tid, _ in self.ranked[:h]]


@dataclass
class EvalReport:
    model: str
    n_pairs: int
    precision: dict[int, float] = field(default_factory=dict)
    recall: dict[int, float] = field(default_factory=dict)

    def validate(self) -> None:
        hs = sorted(self.recall)
        for h in hs:
            if not (0.0 <= self.precision[h] <= 1.0 and 0.0 <= self.recall[h] <= 1.0):
                raise DataError(f"metric out of [0,1] at h={h}")
        for a, b in zip(hs, hs[1:]):
            if self.recall[b] < self.recall[a] - 1e-12:
                raise DataError(f"recall not non-decreasing between h={a} and h={b}")

    def to_text(self) -> str:
        items = {"model": self.model, "n_pairs": str(self.n_pairs)}
        for h in sorted(self.precision):
            items[f"precision@{h}"] = repr(self.precision[h])
            items[f"recall@{h}"] = repr(self.recall[h])
        return format_kv(items)

    @classmethod
    def from_text(cls, text: str) -> "EvalReport":
        precision: dict[int, float] = {}
        recall: dict[int, float] = {}
        model, n_pairs = "", 0
        for line in text.splitlines():
            if not line.strip():
                continue
            key, value = (part.strip() for part in line.split("=", 1))
            if key == "model":
                model = value
            elif key == "n_pairs":
                n_pairs = int(value)
            elif key.startswith("precision@"):
                precision[int(key.split("@")[1])] = float(value)
            elif key.startswith("recall@"):
                recall[int(key.split("@")[1])] = float(value)
        return cls(model=model, n_pairs=n_pairs, precision=precision, recall=recall)


def _make_slate(player_id: str, match_id: str, template_ids: Sequence[str], scores: Sequence[float]) -> RankedSlate:
    if len(set(template_ids)) != len(template_ids):
        raise ValueError(f"duplicate template_ids in slate input for match {match_id}")
    order = sorted(range(len(template_ids)), key=lambda i: (-float(scores[i]), template_ids[i]))
    return RankedSlate(
        player_id=player_id,
        match_id=match_id,
        ranked=tuple((template_ids[i], float(scores[i])) for i in order),
    )


def popularity_rank(contests: Sequence[ContestSpec]) -> RankedSlate:
    """Templates ordered by prize pool descending, ties by template_id."""
    if not contests:
        raise ValueError("popularity_rank requires a non-empty contest list")
    return _make_slate(
        "",
        contests[0].match_id,
        [c.template_id for c in contests],
        [c.prize_money for c in contests],
    )


def model_rank(
    params: WidirParams,
    snapshot: FeatureSnapshot,
    player_id: str,
    contests: Sequence[ContestSpec],
) -> RankedSlate:
    """Score a match's templates for one player and sort descending.

    Cold players (absent from the snapshot) use the cold-start player vector
    and zero interaction counts. The snapshot day must precede match start.
    """
    if not contests:
        raise ValueError("model_rank requires a non-empty contest list")
    block = build_template_block(contests, snapshot.stats)
    player_row = np.asarray(snapshot.player_row(player_id), dtype=np.float32)
    inter = block.interaction_matrix(snapshot.hists_for(player_id), snapshot.stats).astype(np.float32)
    contest = block.contest_matrix.astype(np.float32)
    n = len(block.template_ids)
    players = np.repeat(player_row[None, :], n, axis=0)
    scores = forward_batch(params, players, contest, inter)
    return _make_slate(player_id, contests[0].match_id, block.template_ids, scores.tolist())


def precision_at(slate: RankedSlate, actual_joined: set[str], h: int) -> float:
    """|top-h ∩ joined| / h; a slate shorter than h still divides by h."""
    if h < 1:
        raise ValueError("h must be >= 1")
    return len(set(slate.top(h)) & actual_joined) / h


def recall_at(slate: RankedSlate, actual_joined: set[str], h: int) -> float:
    """|top-h ∩ joined| / |joined|; undefined (rejected) for no joins."""
    if h < 1:
        raise ValueError("h must be >= 1")
    if not actual_joined:
        raise ValueError("recall is undefined for an empty actual_joined set")
    return len(set(slate.top(h)) & actual_joined) / len(actual_joined)


# --- scorers ------------------------------------------------------------------


class PopularityScorer:
    name = "popularity"

    def rank(self, player_id, match_id, templates, snapshot) -> RankedSlate:
        slate = popularity_rank(templates)
        return RankedSlate(player_id=player_id, match_id=match_id, ranked=slate.ranked)


class ModelScorer:
    name = "widir"

    def __init__(self, params: WidirParams):
        self.params = params

    def rank(self, player_id, match_id, templates, snapshot) -> RankedSlate:
        return model_rank(self.params, snapshot, player_id, templates)


class GroundTruthScorer:
    """Ranks by the synthetic generator's deterministic utility (the oracle)."""

    name = "ground_truth"

    def __init__(self, archetypes: Mapping[str, PlayerArchetype]):
        self.archetypes = archetypes

    def rank(self, player_id, match_id, templates, snapshot) -> RankedSlate:
        arch = self.archetypes.get(player_id)
        if arch is None:
            raise DataError(f"no archetype known for player {player_id}")
        ts = template_stats(templates)
        utils = archetype_utilities(arch, ts)
        return _make_slate(player_id, match_id, ts.template_ids, utils.tolist())


class RandomScorer:
    name = "random"

    def __init__(self, seed: int):
        self.seed = seed

    def rank(self, player_id, match_id, templates, snapshot) -> RankedSlate:
        import hashlib

        digest = hashlib.blake2b(f"{self.seed}|{player_id}|{match_id}".encode(), digest_size=8).digest()
        rng = np.random.default_rng(int.from_bytes(digest, "little"))
        ids = [t.template_id for t in templates]
        return _make_slate(player_id, match_id, ids, rng.random(len(ids)).tolist())


def evaluate(
    scorer,
    test_events: Sequence[JoinEvent],
    templates_by_match: Mapping[str, Sequence[ContestSpec]],
    match_days: Mapping[str, dt.date],
    snapshots,
    h_values: Sequence[int] = EVAL_H_VALUES,
) -> EvalReport:
    """Macro-averaged precision@h / recall@h over test (player, match) pairs.

    For each pair with at least one join, the slate ranks the match's
    available templates using features as of the match's day
    (`snapshots.get(day)` lookup).
    """
    joined: dict[tuple[str, str], set[str]] = {}
    for e in test_events:
        joined.setdefault((e.player_id, e.match_id), set()).add(e.template_id)

    prec_sum = {h: 0.0 for h in h_values}
    rec_sum = {h: 0.0 for h in h_values}
    n = 0
    for (pid, mid) in sorted(joined):
        templates = templates_by_match.get(mid)
        if not templates:
            raise DataError(f"match {mid} missing from catalog")
        day = match_days.get(mid)
        if day is None:
            raise DataError(f"no match day known for match {mid}")
        snap = snapshots.get(day)
        slate = scorer.rank(pid, mid, templates, snap)
        actual = joined[(pid, mid)]
        for h in h_values:
            prec_sum[h] += precision_at(slate, actual, h)
            rec_sum[h] += recall_at(slate, actual, h)
        n += 1
    if n == 0:
        raise DataError("no (player, match) pairs with joins in the test partition")
    report = EvalReport(
        model=getattr(scorer, "name", "scorer"),
        n_pairs=n,
        precision={h: prec_sum[h] / n for h in h_values},
        recall={h: rec_sum[h] / n for h in h_values},
    )
    report.validate()
    return report
