import dataclasses
import json

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from dt4rec.config import DataConfig, SyntheticWorldConfig
from dt4rec.datamodel import InteractionEvent, ItemVocabulary, build_trajectory
from dt4rec.errors import ConfigError, FormatError
from dt4rec.ingest import (
    SECONDS_PER_DAY, events_to_trajectories, filter_low_reward_steps, make_negatives,
    parse_log, read_bundle, resample_high_proportion, sessionize, split_counts, split_dataset,
    synth_generate, write_bundle,
)
from dt4rec.losses import kappa


def _day(d, user="u", item="i"):
    return InteractionEvent(user, item, d * SECONDS_PER_DAY + 5)


# ---------------------------------------------------------------- parse_log

def test_parse_well_formed(tmp_path):
    p = tmp_path / "log.tsv"
    p.write_text("1\t10\t100\n2\t11\t50\n1\t12\t20\t4.5\n")
    events = parse_log(p)
    assert len(events) == 3
    assert [(e.user_id, e.timestamp) for e in events] == [(1, 20), (1, 100), (2, 50)]


def test_parse_counts_malformed(tmp_path):
    from dt4rec.ingest import ParseReport
    p = tmp_path / "log.tsv"
    rows = [f"{u}\t{u + 1}\t{u * 10}" for u in range(20)] + ["5\t6\tnot-a-time"]
    p.write_text("\n".join(rows) + "\n")
    report = ParseReport()
    events = parse_log(p, has_header=False, report=report)
    assert len(events) == 20 and report.malformed == 1


def test_parse_too_many_malformed(tmp_path):
    p = tmp_path / "log.tsv"
    p.write_text("1\t2\tx\n1\t2\ty\n1\t2\t3\n")
    with pytest.raises(FormatError):
        parse_log(p, has_header=False)


def test_parse_empty_and_missing(tmp_path, caplog):
    p = tmp_path / "empty.tsv"
    p.write_text("")
    assert parse_log(p) == []
    assert "empty" in caplog.text
    with pytest.raises(FileNotFoundError):
        parse_log(tmp_path / "nope.tsv")


def test_parse_skips_header(tmp_path):
    p = tmp_path / "log.csv"
    p.write_text("user,item,timestamp\n1,2,3\n")
    assert len(parse_log(p, delimiter=",")) == 1


# ---------------------------------------------------------------- sessionize

def test_sessionize_windowing():
    events = [_day(1), _day(2), _day(3)]
    rounds = sessionize(events, "day", K=2)["u"]
    assert len(rounds) == 1
    assert rounds[0].login_flags == (True, True)
    assert sum(rounds[0].login_flags) == 2


def test_sessionize_single_day_user():
    events = [_day(1, "a"), _day(8, "b")]
    rounds = sessionize(events, "day", K=7)
    assert sum(rounds["a"][0].login_flags) == 0
    assert rounds["b"] == []


def test_sessionize_empty():
    assert sessionize([], "day", 7) == {}


def test_sessionize_maps_through_vocab_and_orders_items():
    vocab = ItemVocabulary.build(["x", "y"])
    events = [InteractionEvent("u", "y", 10), InteractionEvent("u", "x", 5), _day(1, item="x")]
    rounds = sessionize(events, "day", K=1, vocab=vocab)["u"]
    assert rounds[0].new_items == (vocab.index("x"), vocab.index("y"))


def test_sessionize_explicit_seconds_and_month():
    events = [InteractionEvent("u", "i", 0), InteractionEvent("u", "i", 3600)]
    assert len(sessionize(events, 3600, K=1)["u"]) == 1
    jan, feb = 1704067200, 1706745600  # 2024-01-01, 2024-02-01 UTC
    months = sessionize([InteractionEvent("u", "i", jan), InteractionEvent("u", "i", feb)], "month", K=1)
    assert months["u"][0].login_flags == (True,)
    with pytest.raises(ConfigError):
        sessionize(events, "week", K=1)


# ---------------------------------------------------------------- split

def test_split_counts_examples():
    assert split_counts(10, (0.5, 0.3, 0.2)) == [5, 3, 2]
    assert sum(split_counts(7, (0.56, 0.24, 0.2))) == 7


def _toy_trajs(n):
    from dt4rec.datamodel import RecommendationRound
    return [build_trajectory([RecommendationRound(1, [3], [True])], user_id=u) for u in range(n)]


def test_split_dataset_sizes_and_determinism():
    trajs = _toy_trajs(10)
    s1 = split_dataset(trajs, (0.5, 0.3, 0.2), seed=7)
    s2 = split_dataset(trajs, (0.5, 0.3, 0.2), seed=7)
    assert (len(s1.train), len(s1.validation), len(s1.test)) == (5, 3, 2)
    assert s1.users("train") == s2.users("train") and s1.users("test") == s2.users("test")
    assert not (s1.users("train") & s1.users("validation"))
    assert not (s1.users("train") & s1.users("test"))
    with pytest.raises(ConfigError):
        split_dataset(trajs, (0.5, 0.5, 0.5), seed=7)


# ---------------------------------------------------------------- negatives

def _traj(rewards):
    from dt4rec.datamodel import RecommendationRound
    K = 7
    rounds = [RecommendationRound(i + 1, [3 + i], [j < r for j in range(K)]) for i, r in enumerate(rewards)]
    return build_trajectory(rounds, user_id="u")


def test_negatives_of_zero_reward():
    neg = make_negatives(_traj([0, 0, 0]), n_neg=1, r_max=7, seed=0)[0]
    assert neg.rewards == (0, 0, 0)
    assert neg.kappa == kappa(0, 7) == 1.0


def test_negatives_range_and_identity():
    pos = _traj([7, 7])
    negs = make_negatives(pos, n_neg=1, r_max=7, seed=3)
    assert all(0 <= r <= 6 for r in negs[0].rewards)
    t = negs[0].trajectory
    assert t.states == pos.states and t.actions == pos.actions
    assert list(negs[0].replaced_rewards) == t.returns_to_go


@settings(max_examples=50, deadline=None)
@given(st.lists(st.integers(0, 7), min_size=1, max_size=10), st.integers(0, 2 ** 31))
def test_negatives_strictly_lower_and_reproducible(rewards, seed):
    pos = _traj(rewards)
    a = make_negatives(pos, 3, 7, seed)
    b = make_negatives(pos, 3, 7, seed)
    assert [n.rewards for n in a] == [n.rewards for n in b]
    for n in a:
        for r_neg, r_pos in zip(n.rewards, rewards):
            assert r_neg < r_pos or r_pos == 0 == r_neg
        assert n.trajectory.states == pos.states and n.trajectory.actions == pos.actions
        assert 0 < n.kappa <= 1


def test_negatives_higher_switch_and_errors():
    pos = _traj([2, 7])
    n = make_negatives(pos, 1, 7, seed=0, higher=True)[0]
    assert n.rewards[0] > 2 and n.rewards[1] == 7
    with pytest.raises(ConfigError):
        make_negatives(pos, 0, 7)


# ---------------------------------------------------------------- synthetic world

def test_synth_deterministic(small_world_cfg):
    a = synth_generate(small_world_cfg)
    b = synth_generate(small_world_cfg)
    assert a.events == b.events
    assert json.dumps(a.to_json()) == json.dumps(b.to_json())


def test_synth_sessionize_reproduces_login_counts(small_world_cfg):
    world = synth_generate(small_world_cfg)
    data = DataConfig(K=small_world_cfg.K, min_interactions=1)
    trajs, vocab = events_to_trajectories(world.events, data, max_length=10 ** 6, horizon=world.horizon)
    assert trajs
    for t in trajs:
        assert list(t.rewards) == world.round_logins(t.user_id)
        raw = [[vocab.item(i) for i in a] for a in t.actions]
        assert raw == [r[1] for r in world.records[t.user_id]]


def test_synth_saturated_preference_hits_link_max():
    cfg = SyntheticWorldConfig(n_users=400, n_items=50, n_genres=5, preference_sharpness=1e6,
                               n_days=15, K=7, link_min=0.1, link_max=0.8, seed=11)
    world = synth_generate(cfg, focus_range=(1.0, 1.0))
    rates = [r[2] for recs in world.records.values() for r in recs]
    counts = [r[3] for recs in world.records.values() for r in recs]
    assert min(rates) == 1.0
    # every login has probability link_max, so counts are Binomial(7, 0.8): mean 5.6
    se = np.sqrt(7 * 0.8 * 0.2 / len(counts))
    assert abs(np.mean(counts) - 7 * 0.8) < 4 * se


def test_synth_single_item_world():
    world = synth_generate(SyntheticWorldConfig(n_users=5, n_items=1, n_genres=3, n_days=12, seed=0))
    assert {e.item_id for e in world.events} == {0}


def test_synth_rejects_bad_config():
    with pytest.raises(ConfigError):
        synth_generate(SyntheticWorldConfig(n_users=0))


# ---------------------------------------------------------------- bundle + subsets

def test_bundle_round_trip(tmp_path, small_world_cfg):
    world = synth_generate(small_world_cfg)
    trajs, vocab = events_to_trajectories(world.events, DataConfig(min_interactions=1), 10,
                                          horizon=world.horizon)
    split = split_dataset(trajs, (0.6, 0.2, 0.2), 1)
    write_bundle(tmp_path / "b1", split, vocab, 7, world=world)
    write_bundle(tmp_path / "b2", split, vocab, 7, world=world)
    for f in (tmp_path / "b1").iterdir():
        assert f.read_bytes() == (tmp_path / "b2" / f.name).read_bytes()
    bundle = read_bundle(tmp_path / "b1")
    assert bundle.vocab.digest() == vocab.digest()
    assert bundle.split.train == split.train and bundle.split.test == split.test
    with pytest.raises(FileNotFoundError):
        read_bundle(tmp_path / "missing")


def test_data_b_and_bc_subsets():
    trajs = [_traj([1, 5, 3, 7]), _traj([0, 2])]
    data_b = filter_low_reward_steps(trajs, 4)
    assert [t.rewards for t in data_b] == [(5, 7)]
    assert data_b[0].returns_to_go == [12, 7]
    assert sum(len(t) for t in data_b) <= sum(len(t) for t in trajs)
    assert resample_high_proportion(trajs, 100, 6) == trajs
    sub = resample_high_proportion(trajs, 40, 6, seed=0)
    rewards = [r for t in sub for r in t.rewards]
    assert sum(r >= 6 for r in rewards) / len(rewards) == pytest.approx(1 / 2.5, abs=0.15)
    with pytest.raises(ConfigError):
        resample_high_proportion(trajs, 0, 6)
    with pytest.raises(ConfigError):
        resample_high_proportion(trajs, 120, 6)


def test_synth_quality_mixes_into_satisfaction():
    cfg = SyntheticWorldConfig(n_users=20, n_items=40, n_genres=4, n_days=15, quality_weight=0.4,
                               quality_share=0.5, seed=2)
    world = synth_generate(cfg)
    assert set(np.unique(world.item_quality)) <= {0, 1}
    assert world.item_quality.sum() == 20
    items = [0, 1, 2]
    expected = 0.6 * world.match_rate(5, items) + 0.4 * world.item_quality[items].mean()
    assert world.satisfaction(5, items) == pytest.approx(expected)
    assert world.login_probability(5, items) == pytest.approx(cfg.retention_link(expected))
    # quality comes from its own stream: switching it on leaves the genre layout untouched
    plain = synth_generate(dataclasses.replace(cfg, quality_weight=0.0))
    np.testing.assert_array_equal(plain.item_genre, world.item_genre)
    np.testing.assert_array_equal(plain.item_quality, world.item_quality)


def test_synth_pure_quality_world_ignores_genre():
    cfg = SyntheticWorldConfig(n_users=10, n_items=30, n_genres=3, n_days=15, quality_weight=1.0,
                               quality_share=0.3, seed=4)
    world = synth_generate(cfg)
    good = [i for i in range(30) if world.item_quality[i]]
    assert all(world.satisfaction(u, good[:2]) == 1.0 for u in range(10))
    assert world.satisfaction(0, []) == 0.0


def test_synth_focus_persistence_is_deterministic():
    cfg = SyntheticWorldConfig(n_users=15, n_items=20, n_genres=4, n_days=15, focus_persistence=0.3, seed=8)
    assert synth_generate(cfg).events == synth_generate(cfg).events
    assert synth_generate(cfg).events != synth_generate(dataclasses.replace(cfg, focus_persistence=1.0)).events
