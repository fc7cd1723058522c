"""Ordered lists, preference pairs, and minibatch training of the ranker.

Per (player, match) the joined templates are aggregated into a fixed-length
ordered list (most-joined first, padded with unjoined templates from the
same match); strict count preferences become training pairs; pairs are
minimized under the pairwise hinge with Adam or SGD, validation-loss early
stopping, and best-epoch parameter selection. All randomness is seeded and
the loop is single-threaded, so a seed fixes the final parameters.
"""

from __future__ import annotations

import dataclasses
import datetime as dt
import hashlib
import logging
import time
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from .domain import ContestSpec
from .errors import ConfigError, DataError
from .features import (
    D_C,
    D_I,
    D_P,
    JoinEvent,
    NormalizationStats,
    build_template_block,
)
from .model import WidirDims, WidirParams, backward_batch, forward_batch, init_params
from .textio import read_kv, require_keys

logger = logging.getLogger(__name__)

_LIST_STREAM = 11
_PAIR_STREAM = 12
_EPOCH_STREAM = 13


@dataclass(frozen=True, slots=True)
class OrderedContestList:
    """Join-frequency-ordered templates for one (player, match), fixed length."""

    player_id: str
    match_id: str
    entries: tuple[tuple[str, int], ...]  # (template_id, join_count), count desc
    joined_count: int
    short: bool = False  # match had fewer templates than the target length


@dataclass(frozen=True, slots=True)
class PreferencePair:
    player_id: str
    match_id: str
    pos_template_id: str
    neg_template_id: str


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 0.001
    epochs: int = 100
    batch_size: int = 4096
    validation_batch_size: int = 16384
    early_stopping_rounds: int = 15
    list_length: int = 100
    max_pairs_per_list: int = 256
    optimizer: str = "adam"  # "adam" (b1=0.9, b2=0.999, eps=1e-8) or "sgd"
    seed: int = 0

    def validate(self) -> None:
        for name in ("learning_rate", "epochs", "batch_size", "validation_batch_size",
                     "early_stopping_rounds", "list_length", "max_pairs_per_list"):
            if getattr(self, name) <= 0:
                raise ConfigError(f"{name} must be positive")
        if self.list_length not in (50, 100, 200):
            raise ConfigError(f"list_length must be one of (50, 100, 200), got {self.list_length}")
        if self.optimizer not in ("adam", "sgd"):
            raise ConfigError(f"optimizer must be 'adam' or 'sgd', got {self.optimizer!r}")

    @classmethod
    def from_kv_dict(cls, kv: Mapping[str, str], context: str = "train config") -> "TrainConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        require_keys(dict(kv), known, context)
        kwargs: dict = {}
        try:
            for name, raw in kv.items():
                if name == "optimizer":
                    kwargs[name] = raw
                elif name == "learning_rate":
                    kwargs[name] = float(raw)
                else:
                    kwargs[name] = int(raw)
            config = cls(**kwargs)
        except (ValueError, TypeError) as exc:
            raise ConfigError(f"{context}: {exc}") from exc
        config.validate()
        return config

    @classmethod
    def from_file(cls, path) -> "TrainConfig":
        return cls.from_kv_dict(read_kv(path), context=str(path))


def _list_rng(seed: int, stream: int, player_id: str, match_id: str) -> np.random.Generator:
    digest = hashlib.blake2b(f"{player_id}|{match_id}".encode(), digest_size=8).digest()
    key = int.from_bytes(digest, "little")
    return np.random.default_rng(np.random.SeedSequence((seed, stream, key)))


def build_ordered_lists(
    train_events: Sequence[JoinEvent],
    templates_by_match: Mapping[str, Sequence[ContestSpec]],
    list_length: int,
    seed: int,
) -> list[OrderedContestList]:
    """One fixed-length ordered list per (player, match) with at least one join.

    Join counts are aggregated per template and sorted descending (ties by
    template_id); lists are trimmed to `list_length` or padded with unjoined
    templates sampled uniformly without replacement. Matches with too few
    templates yield short lists (logged, not fatal).
    """
    groups: dict[tuple[str, str], dict[str, int]] = {}
    for e in train_events:
        counts = groups.setdefault((e.player_id, e.match_id), {})
        counts[e.template_id] = counts.get(e.template_id, 0) + 1

    out: list[OrderedContestList] = []
    short_matches = 0
    for (pid, mid) in sorted(groups):
        counts = groups[(pid, mid)]
        joined = sorted(counts.items(), key=lambda kv: (-kv[1], kv[0]))
        if len(joined) >= list_length:
            entries = joined[:list_length]
            short = False
        else:
            available = templates_by_match.get(mid)
            if available is None:
                raise DataError(f"match {mid} missing from catalog")
            candidates = sorted(t.template_id for t in available if t.template_id not in counts)
            need = list_length - len(joined)
            if len(candidates) <= need:
                pad = candidates
                short = len(pad) < need
                if short:
                    short_matches += 1
            else:
                rng = _list_rng(seed, _LIST_STREAM, pid, mid)
                idx = rng.choice(len(candidates), size=need, replace=False)
                pad = [candidates[i] for i in sorted(int(i) for i in idx)]
                short = False
            entries = joined + [(tid, 0) for tid in pad]
        out.append(
            OrderedContestList(
                player_id=pid,
                match_id=mid,
                entries=tuple(entries),
                joined_count=sum(1 for _, c in entries if c > 0),
                short=short,
            )
        )
    if short_matches:
        logger.warning("%d lists are short: match template sets smaller than list_length", short_matches)
    return out


def build_pairs(
    lst: OrderedContestList, max_pairs: int | None, seed: int
) -> list[PreferencePair]:
    """The strict-preference pair set of a list; seeded uniform subsample if capped.

    Every (more-joined, less-joined) combination is a pair, including joined
    versus padded; equal counts (including padded vs padded) produce none.
    """
    entries = lst.entries
    # group positions by join count, descending
    by_count: dict[int, list[int]] = {}
    for i, (_, count) in enumerate(entries):
        by_count.setdefault(count, []).append(i)
    counts_desc = sorted(by_count, reverse=True)
    pairs: list[tuple[int, int]] = []
    for a_i, ca in enumerate(counts_desc):
        for cb in counts_desc[a_i + 1 :]:
            for i in by_count[ca]:
                for j in by_count[cb]:
                    pairs.append((i, j))
    if max_pairs is not None and len(pairs) > max_pairs:
        rng = _list_rng(seed, _PAIR_STREAM, lst.player_id, lst.match_id)
        chosen = rng.choice(len(pairs), size=max_pairs, replace=False)
        pairs = [pairs[i] for i in sorted(int(i) for i in chosen)]
    return [
        PreferencePair(
            player_id=lst.player_id,
            match_id=lst.match_id,
            pos_template_id=entries[i][0],
            neg_template_id=entries[j][0],
        )
        for i, j in pairs
    ]


# --- pair feature assembly -------------------------------------------------------


@dataclass
class PairDataset:
    """Pair features as flat arrays; player rows are shared per list."""

    player_rows: np.ndarray  # (n_lists, D_P) float32
    list_idx: np.ndarray     # (n_pairs,) int32
    pos_contest: np.ndarray  # (n_pairs, D_C) float32
    neg_contest: np.ndarray
    pos_inter: np.ndarray    # (n_pairs, D_I) float32
    neg_inter: np.ndarray

    @property
    def n_pairs(self) -> int:
        return int(self.list_idx.shape[0])

    def batch(self, idx: np.ndarray):
        p = self.player_rows[self.list_idx[idx]]
        return (
            (p, self.pos_contest[idx], self.pos_inter[idx]),
            (p, self.neg_contest[idx], self.neg_inter[idx]),
        )


def assemble_pair_dataset(
    lists: Sequence[OrderedContestList],
    snapshots,
    templates_by_match: Mapping[str, Sequence[ContestSpec]],
    match_days: Mapping[str, dt.date],
    stats: NormalizationStats,
    max_pairs: int | None,
    seed: int,
) -> PairDataset:
    """Materialize pair features from snapshots (`snapshots.get(day)` lookup)."""
    blocks: dict[str, object] = {}
    player_rows: list[np.ndarray] = []
    list_idx: list[int] = []
    pos_c: list[np.ndarray] = []
    neg_c: list[np.ndarray] = []
    pos_i: list[np.ndarray] = []
    neg_i: list[np.ndarray] = []

    for li, lst in enumerate(lists):
        day = match_days.get(lst.match_id)
        if day is None:
            raise DataError(f"no match day known for match {lst.match_id}")
        snap = snapshots.get(day)
        block = blocks.get(lst.match_id)
        if block is None:
            tpls = templates_by_match.get(lst.match_id)
            if not tpls:
                raise DataError(f"match {lst.match_id} missing from catalog")
            block = build_template_block(tpls, stats)
            blocks[lst.match_id] = block
        tid_to_row = {tid: r for r, tid in enumerate(block.template_ids)}

        player_rows.append(np.asarray(snap.player_row(lst.player_id), dtype=np.float32))
        inter = block.interaction_matrix(snap.hists_for(lst.player_id), stats).astype(np.float32)
        contest = block.contest_matrix.astype(np.float32)

        for pair in build_pairs(lst, max_pairs, seed):
            pr = tid_to_row.get(pair.pos_template_id)
            nr = tid_to_row.get(pair.neg_template_id)
            if pr is None or nr is None:
                raise DataError(
                    f"pair references template missing from match {lst.match_id} catalog"
                )
            list_idx.append(li)
            pos_c.append(contest[pr])
            neg_c.append(contest[nr])
            pos_i.append(inter[pr])
            neg_i.append(inter[nr])

    if not list_idx:
        raise DataError("no training pairs could be built (empty pair stream)")
    return PairDataset(
        player_rows=np.stack(player_rows),
        list_idx=np.asarray(list_idx, dtype=np.int32),
        pos_contest=np.stack(pos_c),
        neg_contest=np.stack(neg_c),
        pos_inter=np.stack(pos_i),
        neg_inter=np.stack(neg_i),
    )


# --- optimizers --------------------------------------------------------------------


class Adam:
    def __init__(self, arrays: list[np.ndarray], lr: float,
                 beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self.m = [np.zeros_like(a) for a in arrays]
        self.v = [np.zeros_like(a) for a in arrays]

    def step(self, arrays: list[np.ndarray], grads: list[np.ndarray], scale: float) -> None:
        self.t += 1
        bc1 = 1.0 - self.beta1 ** self.t
        bc2 = 1.0 - self.beta2 ** self.t
        for a, g, m, v in zip(arrays, grads, self.m, self.v):
            gs = g * np.float32(scale) if a.dtype == np.float32 else g * scale
            m *= self.beta1
            m += (1.0 - self.beta1) * gs
            v *= self.beta2
            v += (1.0 - self.beta2) * (gs * gs)
            a -= self.lr * (m / bc1) / (np.sqrt(v / bc2) + self.eps)


class SGD:
    def __init__(self, arrays: list[np.ndarray], lr: float):
        self.lr = lr

    def step(self, arrays: list[np.ndarray], grads: list[np.ndarray], scale: float) -> None:
        for a, g in zip(arrays, grads):
            a -= self.lr * scale * g


class EarlyStopper:
    """Strict-improvement early stopping that remembers the best epoch."""

    def __init__(self, rounds: int):
        self.rounds = rounds
        self.best = float("inf")
        self.best_epoch: int | None = None
        self.bad = 0

    def update(self, epoch: int, value: float) -> bool:
        """Record an epoch's validation loss; True means stop now."""
        if value < self.best:
            self.best = value
            self.best_epoch = epoch
            self.bad = 0
            return False
        self.bad += 1
        return self.bad >= self.rounds


# --- training loop -------------------------------------------------------------------


@dataclass(frozen=True, slots=True)
class EpochRow:
    epoch: int
    train_loss: float
    valid_loss: float
    seconds: float


@dataclass
class TrainingReport:
    rows: list[EpochRow] = field(default_factory=list)
    best_epoch: int = 0
    best_valid_loss: float = float("inf")
    stopped_early: bool = False
    wall_seconds: float = 0.0


@dataclass
class TrainResult:
    params: WidirParams
    report: TrainingReport


def write_report(path, report: TrainingReport) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for r in report.rows:
            fh.write(f"{r.epoch},{r.train_loss!r},{r.valid_loss!r},{r.seconds!r}\n")


def read_report(path) -> list[EpochRow]:
    rows = []
    with open(path, "r", encoding="utf-8") as fh:
        for line in fh:
            e, tl, vl, s = line.rstrip("\n").split(",")
            rows.append(EpochRow(int(e), float(tl), float(vl), float(s)))
    return rows


def _mean_valid_loss(params: WidirParams, data: PairDataset, batch: int) -> float:
    total = 0.0
    n = data.n_pairs
    for a in range(0, n, batch):
        idx = np.arange(a, min(a + batch, n))
        (pp, pc, pi), (np_, nc, ni) = data.batch(idx)
        s_pos = forward_batch(params, pp, pc, pi, fast=True)
        s_neg = forward_batch(params, np_, nc, ni, fast=True)
        total += float(np.maximum(0.0, 1.0 - (s_pos - s_neg)).sum())
    return total / n


def train(
    config: TrainConfig,
    dims: WidirDims,
    train_data: PairDataset,
    valid_data: PairDataset,
) -> TrainResult:
    """Minibatch pairwise-hinge training with best-epoch parameter selection."""
    config.validate()
    if train_data.n_pairs == 0:
        raise DataError("empty training pair stream")
    if valid_data.n_pairs == 0:
        raise DataError("empty validation pair stream")

    t0 = time.perf_counter()
    params = init_params(dims, config.seed, dtype=np.float32)
    arrays = params.arrays()
    opt = Adam(arrays, config.learning_rate) if config.optimizer == "adam" else SGD(arrays, config.learning_rate)
    stopper = EarlyStopper(config.early_stopping_rounds)
    rng = np.random.default_rng(np.random.SeedSequence((config.seed, _EPOCH_STREAM)))
    report = TrainingReport()
    best_params = params.copy()

    # epoch-0 baseline row: losses under the initial parameters
    report.rows.append(
        EpochRow(
            0,
            _mean_valid_loss(params, train_data, config.validation_batch_size),
            _mean_valid_loss(params, valid_data, config.validation_batch_size),
            0.0,
        )
    )

    for epoch in range(1, config.epochs + 1):
        e0 = time.perf_counter()
        perm = rng.permutation(train_data.n_pairs)
        loss_sum = 0.0
        for a in range(0, train_data.n_pairs, config.batch_size):
            idx = perm[a : a + config.batch_size]
            pos, neg = train_data.batch(idx)
            grads, losses = backward_batch(params, pos, neg, fast=True)
            loss_sum += float(losses.sum())
            opt.step(arrays, grads.arrays(), 1.0 / idx.size)
        train_loss = loss_sum / train_data.n_pairs
        valid_loss = _mean_valid_loss(params, valid_data, config.validation_batch_size)
        report.rows.append(EpochRow(epoch, train_loss, valid_loss, time.perf_counter() - e0))

        improved = valid_loss < stopper.best
        stop = stopper.update(epoch, valid_loss)
        if improved:
            best_params = params.copy()
        if stop:
            report.stopped_early = True
            break

    report.best_epoch = stopper.best_epoch if stopper.best_epoch is not None else 0
    report.best_valid_loss = stopper.best
    report.wall_seconds = time.perf_counter() - t0
    return TrainResult(params=best_params, report=report)
