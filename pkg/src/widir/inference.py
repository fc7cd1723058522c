"""Daily batch inference: score active players against upcoming matches.

Payloads carry a full template ordering per (player, match) so the serving
layer never runs the model; `generated_at` is an input, making re-runs
bytewise idempotent.
"""

from __future__ import annotations

import datetime as dt
import json
import os
from dataclasses import dataclass
from typing import Iterable, Mapping, Sequence

import numpy as np

from .domain import ContestSpec, JoinRecord, MatchRecord, day_of
from .errors import StoreError
from .evaluation import _make_slate
from .features import FeatureSnapshot, build_template_block
from .model import WidirParams, forward_batch

_SCORE_CHUNK = 512  # players scored per forward batch


@dataclass(frozen=True, slots=True)
class RankingPayload:
    """Full precomputed template ordering for one (player, match)."""

    player_id: str
    match_id: str
    ranking: tuple[tuple[str, float], ...]  # (template_id, score), best first
    generated_at: int
    model_version: str


def active_players(joins: Sequence[JoinRecord], as_of_day: dt.date) -> set[str]:
    """Players with at least one join in the 30 days ending the day before `as_of_day`."""
    lo = as_of_day - dt.timedelta(days=30)
    return {
        r.player_id
        for r in joins
        if lo <= day_of(r.joining_time) < as_of_day
    }


def run_batch(
    params: WidirParams,
    snapshot: FeatureSnapshot,
    matches: Sequence[tuple[MatchRecord, Sequence[ContestSpec]]],
    active: set[str],
    model_version: str,
    generated_at: int,
) -> list[RankingPayload]:
    """One payload per (active player, upcoming match), ordered as model_rank orders.

    Scoring batches many players per forward call; the scoring kernel is
    batch-size independent, so the ordering is bit-identical to per-player
    model_rank calls.
    """
    players = sorted(active)
    payloads: list[RankingPayload] = []
    for match, templates in matches:
        block = build_template_block(templates, snapshot.stats)
        contest = block.contest_matrix.astype(np.float32)
        n_tpl = len(block.template_ids)
        for base in range(0, len(players), _SCORE_CHUNK):
            chunk = players[base : base + _SCORE_CHUNK]
            rows = np.stack([np.asarray(snapshot.player_row(p), dtype=np.float32) for p in chunk])
            inters = np.concatenate(
                [
                    block.interaction_matrix(snapshot.hists_for(p), snapshot.stats).astype(np.float32)
                    for p in chunk
                ]
            )
            big_p = np.repeat(rows, n_tpl, axis=0)
            big_c = np.tile(contest, (len(chunk), 1))
            scores = forward_batch(params, big_p, big_c, inters).reshape(len(chunk), n_tpl)
            for pi, pid in enumerate(chunk):
                slate = _make_slate(pid, match.match_id, block.template_ids, scores[pi].tolist())
                payloads.append(
                    RankingPayload(
                        player_id=pid,
                        match_id=match.match_id,
                        ranking=slate.ranked,
                        generated_at=generated_at,
                        model_version=model_version,
                    )
                )
    return payloads


def publish_payloads(store, payloads: Iterable[RankingPayload], retries: int = 1) -> None:
    """Atomic per-key replacement into the online store, with one retry."""
    for payload in payloads:
        attempt = 0
        while True:
            try:
                store.put(payload)
                break
            except Exception as exc:  # store backends may fail transiently
                attempt += 1
                if attempt > retries:
                    raise StoreError(
                        f"publish failed for player {payload.player_id} "
                        f"match {payload.match_id}: {exc}"
                    ) from exc


def write_payloads(path, payloads: Sequence[RankingPayload]) -> None:
    """Newline-delimited JSON payload file; written atomically."""
    tmp = f"{path}.tmp"
    with open(tmp, "w", encoding="utf-8") as fh:
        for p in payloads:
            fh.write(
                json.dumps(
                    {
                        "player_id": p.player_id,
                        "match_id": p.match_id,
                        "ranking": [[tid, float(score)] for tid, score in p.ranking],
                        "generated_at": p.generated_at,
                        "model_version": p.model_version,
                    },
                    sort_keys=True,
                )
                + "\n"
            )
    os.replace(tmp, path)


def read_payloads(path) -> list[RankingPayload]:
    out: list[RankingPayload] = []
    with open(path, "r", encoding="utf-8") as fh:
        for line in fh:
            doc = json.loads(line)
            out.append(
                RankingPayload(
                    player_id=doc["player_id"],
                    match_id=doc["match_id"],
                    ranking=tuple((tid, float(s)) for tid, s in doc["ranking"]),
                    generated_at=int(doc["generated_at"]),
                    model_version=doc["model_version"],
                )
            )
    return out
