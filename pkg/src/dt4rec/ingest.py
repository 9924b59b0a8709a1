"""Log parsing, sessionization, splitting, negative construction, the synthetic
retention world and the on-disk dataset bundle."""

from __future__ import annotations

import csv
import datetime as dt
import json
import logging
from collections import defaultdict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Hashable, Sequence

import numpy as np

from .config import DataConfig, SyntheticWorldConfig
from .datamodel import (
    InteractionEvent,
    ItemVocabulary,
    RecommendationRound,
    Trajectory,
    build_trajectory,
    Step,
)
from .errors import ConfigError, FormatError
from .losses import kappa as kappa_rule

log = logging.getLogger(__name__)

BUNDLE_FORMAT = "dt4rec-bundle"
BUNDLE_VERSION = 1
SPLITS = ("train", "validation", "test")

SECONDS_PER_DAY = 86400


@dataclass
class DatasetSplit:
    train: list
    validation: list
    test: list
    split_seed: int = 0

    def users(self, name: str) -> set:
        return {t.user_id for t in getattr(self, name)}

    def all(self) -> list:
        return [*self.train, *self.validation, *self.test]


@dataclass
class NegativeSample:
    base: Trajectory
    rewards: tuple
    replaced_rewards: tuple  # per-step return-to-go of the negative
    kappa: float

    @property
    def trajectory(self) -> Trajectory:
        return self.base.with_rewards(self.rewards)


@dataclass
class ParseReport:
    rows: int = 0
    malformed: int = 0


# ---------------------------------------------------------------- parsing

def parse_log(path, delimiter: str = "\t", has_header: bool | None = None,
              max_malformed: float = 0.10, report: ParseReport | None = None) -> list[InteractionEvent]:
    """Read ``user, item, timestamp[, ...]`` rows. Extra columns are ignored."""
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"interaction log not found: {path}")
    report = report if report is not None else ParseReport()
    events = []
    with path.open(newline="") as fh:
        for lineno, row in enumerate(csv.reader(fh, delimiter=delimiter)):
            if not row or all(not c.strip() for c in row):
                continue
            report.rows += 1
            try:
                user, item, ts = row[0].strip(), row[1].strip(), int(row[2].strip())
                if ts < 0 or not user or not item:
                    raise ValueError
            except (IndexError, ValueError):
                if lineno == 0 and has_header is not False:
                    report.rows -= 1
                    continue
                report.malformed += 1
                continue
            events.append(InteractionEvent(_maybe_int(user), _maybe_int(item), ts))
    if report.rows == 0:
        log.warning("empty interaction log %s", path)
        return []
    if report.malformed:
        log.warning("%d of %d rows malformed in %s", report.malformed, report.rows, path)
    if report.malformed > max_malformed * report.rows:
        raise FormatError(
            f"{report.malformed}/{report.rows} malformed rows exceeds {max_malformed:.0%}")
    events.sort(key=lambda e: (_sort_key(e.user_id), e.timestamp))
    return events


def _maybe_int(s: str):
    try:
        return int(s)
    except ValueError:
        return s


def _sort_key(x):
    return (0, x, "") if isinstance(x, int) else (1, 0, str(x))


# ---------------------------------------------------------------- rounds

def interval_index(timestamp: int, interval) -> int:
    if isinstance(interval, str) and interval.isdigit():
        interval = int(interval)
    if interval == "day":
        return timestamp // SECONDS_PER_DAY
    if interval == "month":
        d = dt.datetime.fromtimestamp(timestamp, tz=dt.timezone.utc)
        return d.year * 12 + d.month - 1
    if isinstance(interval, int) and interval > 0:
        return timestamp // interval
    raise ConfigError(f"interval must be 'day', 'month' or positive seconds, got {interval!r}")


def sessionize(events: Sequence[InteractionEvent], interval="day", K: int = 7,
               vocab: ItemVocabulary | None = None, horizon: int | None = None) -> dict:
    """Group events into one round per active interval with K login flags.

    ``horizon`` is the last observed interval (default: the latest interval in the
    log). Rounds whose label window would pass the horizon are not emitted.
    Items are mapped through ``vocab`` when given, otherwise raw ids are kept.
    """
    if not events:
        return {}
    by_user: dict = defaultdict(lambda: defaultdict(list))
    last = None
    for e in events:
        b = interval_index(e.timestamp, interval)
        last = b if last is None else max(last, b)
        by_user[e.user_id][b].append((e.timestamp, e.item_id))
    if horizon is None:
        horizon = last
    out = {}
    for user in sorted(by_user, key=_sort_key):
        buckets = by_user[user]
        active = set(buckets)
        rounds = []
        for b in sorted(buckets):
            if b + K > horizon:
                break
            items = [it for _, it in sorted(buckets[b], key=lambda p: p[0])]
            if vocab is not None:
                items = [vocab.index(it) for it in items]
            flags = tuple((b + k) in active for k in range(1, K + 1))
            rounds.append(RecommendationRound(len(rounds) + 1, tuple(items), flags))
        out[user] = rounds
    return out


def filter_min_interactions(events: Sequence[InteractionEvent], minimum: int) -> list:
    counts: dict = defaultdict(int)
    for e in events:
        counts[e.user_id] += 1
    return [e for e in events if counts[e.user_id] >= minimum]


def events_to_trajectories(events, data: DataConfig, max_length: int,
                           horizon: int | None = None, state_window: int = 30):
    events = filter_min_interactions(events, data.min_interactions)
    vocab = ItemVocabulary.build(e.item_id for e in events)
    rounds = sessionize(events, data.interval, data.K, vocab=vocab, horizon=horizon)
    trajs = [build_trajectory(r, user_id=u, window=state_window, max_length=max_length)
             for u, r in rounds.items() if r]
    return trajs, vocab


# ---------------------------------------------------------------- splitting

def split_counts(n: int, fractions: Sequence[float]) -> list[int]:
    """Floor each share, then hand leftovers to the largest fractional parts."""
    raw = [f * n for f in fractions]
    counts = [int(np.floor(r + 1e-9)) for r in raw]
    rest = n - sum(counts)
    order = sorted(range(len(raw)), key=lambda i: (-(raw[i] - counts[i]), i))
    for i in order[:rest]:
        counts[i] += 1
    return counts


def split_dataset(trajectories: Sequence[Trajectory], fractions=(0.56, 0.24, 0.20),
                  seed: int = 0) -> DatasetSplit:
    if len(fractions) != 3 or abs(sum(fractions) - 1.0) > 1e-9 or min(fractions) < 0:
        raise ConfigError(f"split fractions must be three non-negative shares summing to 1, got {fractions}")
    users = sorted({t.user_id for t in trajectories}, key=_sort_key)
    rng = np.random.default_rng(seed)
    perm = rng.permutation(len(users))
    n_train, n_val, _ = split_counts(len(users), fractions)
    assignment = {}
    for rank, idx in enumerate(perm):
        assignment[users[idx]] = 0 if rank < n_train else 1 if rank < n_train + n_val else 2
    parts: list[list] = [[], [], []]
    for t in trajectories:
        parts[assignment[t.user_id]].append(t)
    return DatasetSplit(*parts, split_seed=seed)


# ---------------------------------------------------------------- negatives

def make_negatives(positive: Trajectory, n_neg: int = 2, r_max: int = 7, seed=0,
                   higher: bool = False) -> list[NegativeSample]:
    """Copies of ``positive`` with each step reward redrawn uniformly below the logged one.

    With ``higher`` the redraw is from the values above instead. Steps with nothing
    to draw from keep their reward.
    """
    if n_neg < 1:
        raise ConfigError(f"n_neg must be >= 1, got {n_neg}")
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    out = []
    for _ in range(n_neg):
        rewards = []
        for e in positive.rewards:
            if higher:
                rewards.append(int(rng.integers(e + 1, r_max + 1)) if e < r_max else e)
            else:
                rewards.append(int(rng.integers(0, e)) if e > 0 else 0)
        neg = positive.with_rewards(rewards)
        w = kappa_rule(float(np.mean(rewards)), r_max)
        out.append(NegativeSample(positive, tuple(rewards), tuple(neg.returns_to_go), w))
    return out


# ---------------------------------------------------------------- synthetic world

@dataclass
class SyntheticWorld:
    config: SyntheticWorldConfig
    item_genre: np.ndarray
    user_affinity: np.ndarray          # (n_users, n_genres) genre preference distribution
    preferred_genre: np.ndarray
    popularity: np.ndarray | None = None
    item_quality: np.ndarray | None = None
    events: list = field(default_factory=list)
    # per user: list of (day, items, satisfaction, login_count)
    records: dict = field(default_factory=dict)

    @property
    def horizon(self) -> int:
        return self.config.n_days - 1

    def match_rate(self, user: int, items: Sequence[int]) -> float:
        """Share of raw items whose genre is the user's preferred genre."""
        if len(items) == 0:
            return 0.0
        g = self.preferred_genre[user]
        return float(np.mean([self.item_genre[i] == g for i in items]))

    def satisfaction(self, user: int, items: Sequence[int]) -> float:
        lam = self.config.quality_weight
        if lam == 0.0 or len(items) == 0:
            return self.match_rate(user, items)
        quality = float(np.mean(self.item_quality[np.asarray(items)]))
        return (1.0 - lam) * self.match_rate(user, items) + lam * quality

    def login_probability(self, user: int, items: Sequence[int]) -> float:
        return self.config.retention_link(self.satisfaction(user, items))

    def round_logins(self, user) -> list[int]:
        return [r[3] for r in self.records.get(user, [])]

    def to_json(self) -> dict:
        return {
            "config": self.config.__dict__,
            "item_genre": self.item_genre.tolist(),
            "user_affinity": np.round(self.user_affinity, 12).tolist(),
            "preferred_genre": self.preferred_genre.tolist(),
            "popularity": np.round(self.popularity, 12).tolist() if self.popularity is not None else None,
            "item_quality": self.item_quality.tolist() if self.item_quality is not None else None,
        }


def synth_generate(config: SyntheticWorldConfig, focus_range=(0.0, 1.0)) -> SyntheticWorld:
    """Simulate users over ``n_days`` intervals.

    Each user has a latent genre preference. On an active day the user consumes a few
    items; each comes from the preference with probability ``focus`` (a per-user level
    jittered every round) and otherwise from a global popularity law, so popular items are frequent
    in the log whatever the user likes. Login on the next day happens with probability
    ``retention_link(match rate of the latest round)``.
    """
    config.validate()
    rng = np.random.default_rng(config.seed)
    G = config.n_genres
    item_genre = np.arange(config.n_items) % G
    logits = rng.normal(size=(config.n_users, G))
    preferred = logits.argmax(1)
    z = config.preference_sharpness * (logits - logits.max(1, keepdims=True))
    affinity = np.exp(z)
    affinity /= affinity.sum(1, keepdims=True)
    genre_count = np.bincount(item_genre, minlength=G).astype(float)
    ranks = rng.permutation(config.n_items) + 1
    popularity = ranks.astype(float) ** -config.popularity_exponent
    popularity /= popularity.sum()

    if config.popular_within_genre:
        within_genre = popularity / np.bincount(item_genre, weights=popularity, minlength=G)[item_genre]
    else:
        within_genre = 1.0 / genre_count[item_genre]
    # separate stream so the quality draw leaves the behaviour simulation unchanged
    n_good = int(round(config.quality_share * config.n_items))
    quality = np.zeros(config.n_items)
    quality[np.random.default_rng([config.seed, 1]).permutation(config.n_items)[:n_good]] = 1.0
    world = SyntheticWorld(config, item_genre, affinity, preferred, popularity=popularity, item_quality=quality)
    events = []
    lo, hi = focus_range
    for u in range(config.n_users):
        user_focus = rng.uniform(lo, hi)
        per_item = affinity[u][item_genre] * within_genre
        per_item /= per_item.sum()
        active_days = []
        rounds = []
        p_login = 1.0
        for day in range(config.n_days):
            if day > 0 and rng.random() >= p_login:
                continue
            level = user_focus
            if config.focus_persistence < 1.0:
                fresh = rng.uniform(lo, hi)
                level = config.focus_persistence * user_focus + (1.0 - config.focus_persistence) * fresh
            focus = float(np.clip(level + config.focus_jitter * rng.normal(), lo, hi))
            m = int(rng.integers(config.min_items_per_round, config.max_items_per_round + 1))
            probs = focus * per_item + (1.0 - focus) * popularity
            items = rng.choice(config.n_items, size=m, p=probs / probs.sum())
            offsets = np.sort(rng.integers(0, SECONDS_PER_DAY, size=m))
            for it, off in zip(items, offsets):
                events.append(InteractionEvent(u, int(it), int(day * SECONDS_PER_DAY + off)))
            rate = world.satisfaction(u, items)
            p_login = config.retention_link(rate)
            active_days.append(day)
            rounds.append([day, [int(i) for i in items], rate])
        active = set(active_days)
        world.records[u] = [
            (day, items, rate, sum((day + k) in active for k in range(1, config.K + 1)))
            for day, items, rate in rounds if day + config.K <= world.horizon
        ]
    events.sort(key=lambda e: (e.user_id, e.timestamp))
    world.events = events
    return world


# ---------------------------------------------------------------- bundle io

def _dumps(obj) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"))


def trajectory_to_record(t: Trajectory) -> dict:
    return {
        "user": t.user_id,
        "rewards": list(t.rewards),
        "return_to_go": t.returns_to_go,
        "states": [list(s) for s in t.states],
        "actions": [list(a) for a in t.actions],
    }


def trajectory_from_record(rec: dict) -> Trajectory:
    steps = tuple(Step(int(g), tuple(s), tuple(a))
                  for g, s, a in zip(rec["return_to_go"], rec["states"], rec["actions"]))
    traj = Trajectory(rec["user"], steps, tuple(int(r) for r in rec["rewards"]))
    if traj.returns_to_go != traj.with_rewards(traj.rewards).returns_to_go:
        raise FormatError(f"return-to-go inconsistent for user {rec['user']!r}")
    return traj


def dataset_stats(split: DatasetSplit, vocab: ItemVocabulary, n_events: int | None = None) -> dict:
    trajs = split.all()
    rewards = [r for t in trajs for r in t.rewards]
    n_users = len({t.user_id for t in trajs})
    n_inter = n_events if n_events is not None else sum(len(a) for t in trajs for a in t.actions)
    return {
        "users": n_users,
        "items": vocab.n_items,
        "interactions": n_inter,
        "mean_retention": round(float(np.mean(rewards)), 6) if rewards else 0.0,
        "density": round(n_inter / max(1, n_users * vocab.n_items), 6),
        "trajectories": {name: len(getattr(split, name)) for name in SPLITS},
        "rounds": len(rewards),
    }


def write_bundle(out_dir, split: DatasetSplit, vocab: ItemVocabulary, K: int,
                 extra: dict | None = None, world: SyntheticWorld | None = None,
                 n_events: int | None = None) -> Path:
    """Write the versioned dataset bundle. Output bytes depend only on the inputs."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    with (out / "vocab.tsv").open("w") as fh:
        fh.write("index\titem_id\n")
        for i, item in enumerate(vocab.items):
            fh.write(f"{i + 3}\t{json.dumps(item)}\n")
    for name in SPLITS:
        with (out / f"{name}.jsonl").open("w") as fh:
            for t in getattr(split, name):
                fh.write(_dumps(trajectory_to_record(t)) + "\n")
    stats = dataset_stats(split, vocab, n_events)
    (out / "stats.json").write_text(json.dumps(stats, indent=2, sort_keys=True) + "\n")
    manifest = {
        "format": BUNDLE_FORMAT,
        "version": BUNDLE_VERSION,
        "K": K,
        "n_items": vocab.n_items,
        "vocab_hash": vocab.digest(),
        "split_seed": split.split_seed,
        "files": ["vocab.tsv", *(f"{n}.jsonl" for n in SPLITS), "stats.json"],
    }
    if world is not None:
        (out / "world.json").write_text(_dumps(world.to_json()) + "\n")
        manifest["files"].append("world.json")
    if extra:
        manifest.update(extra)
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return out


@dataclass
class Bundle:
    path: Path
    manifest: dict
    vocab: ItemVocabulary
    split: DatasetSplit

    @property
    def K(self) -> int:
        return int(self.manifest["K"])


def read_bundle(path) -> Bundle:
    path = Path(path)
    mpath = path / "manifest.json"
    if not mpath.exists():
        raise FileNotFoundError(f"no dataset bundle at {path}")
    manifest = json.loads(mpath.read_text())
    if manifest.get("format") != BUNDLE_FORMAT:
        raise FormatError(f"{path} is not a {BUNDLE_FORMAT}")
    if manifest.get("version") != BUNDLE_VERSION:
        raise FormatError(f"unsupported bundle version {manifest.get('version')}")
    items = []
    with (path / "vocab.tsv").open() as fh:
        next(fh)
        for i, line in enumerate(fh):
            idx, raw = line.rstrip("\n").split("\t", 1)
            if int(idx) != i + 3:
                raise FormatError(f"vocabulary index gap at line {i + 2}")
            items.append(json.loads(raw))
    vocab = ItemVocabulary(items)
    if vocab.digest() != manifest["vocab_hash"]:
        raise FormatError("vocabulary hash mismatch")
    parts = []
    for name in SPLITS:
        with (path / f"{name}.jsonl").open() as fh:
            parts.append([trajectory_from_record(json.loads(line)) for line in fh if line.strip()])
    return Bundle(path, manifest, vocab, DatasetSplit(*parts, split_seed=manifest["split_seed"]))


# ---------------------------------------------------------------- experiment subsets

def keep_steps(trajectories: Sequence[Trajectory], keep) -> list[Trajectory]:
    """Rebuild trajectories from the steps where ``keep(traj_index, step_index)`` holds.

    Kept steps retain their logged state and action; return-to-go is recomputed over
    the kept steps. Trajectories left empty are dropped.
    """
    out = []
    for ti, t in enumerate(trajectories):
        idx = [i for i in range(len(t)) if keep(ti, i)]
        if not idx:
            continue
        rewards = [t.rewards[i] for i in idx]
        base = Trajectory(t.user_id, tuple(t.steps[i] for i in idx), tuple(rewards))
        out.append(base.with_rewards(rewards))
    return out


def filter_low_reward_steps(trajectories: Sequence[Trajectory], threshold: int = 4) -> list[Trajectory]:
    """Data-B: drop every step whose reward is below ``threshold``."""
    return keep_steps(trajectories, lambda ti, i: trajectories[ti].rewards[i] >= threshold)


def resample_high_proportion(trajectories: Sequence[Trajectory], proportion: float,
                             high_min: int = 6, seed: int = 0) -> list[Trajectory]:
    """Subsample steps so ``proportion`` percent of them have reward >= ``high_min``.

    At 100 the data is returned unchanged.
    """
    if not 0 < proportion <= 100:
        raise ConfigError(f"proportion {proportion} outside (0, 100]")
    if proportion == 100:
        return list(trajectories)
    high = [(ti, i) for ti, t in enumerate(trajectories) for i, r in enumerate(t.rewards) if r >= high_min]
    low = [(ti, i) for ti, t in enumerate(trajectories) for i, r in enumerate(t.rewards) if r < high_min]
    if not high or not low:
        return list(trajectories)
    p = proportion / 100.0
    rng = np.random.default_rng(seed)
    if len(high) / (len(high) + len(low)) < p:
        n_low = int(round(len(high) * (1 - p) / p))
        low = [low[j] for j in rng.choice(len(low), size=n_low, replace=False)]
    else:
        n_high = max(1, int(round(len(low) * p / (1 - p))))
        high = [high[j] for j in rng.choice(len(high), size=n_high, replace=False)]
    kept = set(high) | set(low)
    return keep_steps(trajectories, lambda ti, i: (ti, i) in kept)
