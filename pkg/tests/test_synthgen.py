import numpy as np
import pytest

from modret.encoder import EncoderConfig, tokenize
from modret.errors import ConfigError, DataError
from modret.metrics import mean_metric, ndcg_at_k
from modret.synthgen import (
    SynthConfig,
    SynthTask,
    gen_task,
    gen_world,
    read_jsonl,
    stratified_counts,
    write_jsonl,
)

SMALL = SynthConfig(
    attributes=("qa", "fc", "sci"),
    sublexicon=16,
    shared=32,
    passages=400,
    queries=50,
    query_len=4,
    passage_len=6,
    hard_negatives=3,
    seed=5,
)


@pytest.fixture(scope="module")
def world():
    return gen_world(SMALL)


def test_sigma_is_a_bijection_with_inverse(world):
    for a in SMALL.attributes:
        s = world.sigma(a)
        assert sorted(s) == sorted(world.content)
        assert sorted(s.values()) == sorted(world.sublexicons[a])
        inv = world.sigma_inverse(a)
        assert all(inv[s[w]] == w for w in world.content)


def test_world_is_deterministic_and_seed_sensitive(world):
    again = gen_world(SMALL)
    assert again.perms == world.perms and again.content == world.content
    other = gen_world(SynthConfig(**{**SMALL.to_dict(), "seed": 6}))
    assert other.perms != world.perms


def test_world_words_occupy_distinct_token_buckets(world):
    cfg = EncoderConfig(vocab_size=SMALL.vocab_size)
    words = list(world.content) + list(world.shared)
    for a in SMALL.attributes:
        words += list(world.sublexicons[a])
    buckets = [tokenize(w, cfg)[1] for w in words]
    assert len(set(buckets)) == len(words)


def test_config_rejects_overfull_vocabulary():
    with pytest.raises(ConfigError):
        SynthConfig(sublexicon=300, shared=256, attributes=("a", "b"))
    with pytest.raises(ConfigError):
        SynthConfig(query_len=10, sublexicon=8)


def test_stratified_split_is_exact():
    assert stratified_counts({"qa": 0.7, "fc": 0.3}, 1000) == {"qa": 700, "fc": 300}
    c = stratified_counts({"a": 1 / 3, "b": 1 / 3, "c": 1 / 3}, 100)
    assert sum(c.values()) == 100 and max(c.values()) - min(c.values()) <= 1


def test_task_query_attribute_ratio():
    cfg = SynthConfig(attributes=("qa", "fc"), sublexicon=16, shared=32, query_len=4, passage_len=6,
                      hard_negatives=0, queries=1000, passages=1000)
    t = gen_task(gen_world(cfg), {"qa": 0.7, "fc": 0.3}, "mix", seed=1)
    attrs = list(t.query_attribute.values())
    assert attrs.count("qa") == 700 and attrs.count("fc") == 300


def test_task_rejects_bad_weights(world):
    with pytest.raises(ConfigError):
        gen_task(world, {"qa": 0.5}, "t", 0)
    with pytest.raises(ConfigError):
        gen_task(world, {"nope": 1.0}, "t", 0)
    with pytest.raises(ConfigError):
        gen_task(world, {"qa": 1.0}, "t", 0, passages=10)


def _words(text):
    return set(text.split())


def _overlap_rankings(task, transform):
    """Rank passages by token overlap with the (transformed) query; ties by id."""
    ids = sorted(task.passages)
    bags = [_words(task.passages[p]) for p in ids]
    out = {}
    for qid, q in task.queries.items():
        qw = transform(qid, q.split())
        scores = np.array([len(qw & b) for b in bags])
        order = np.lexsort((np.arange(len(ids)), -scores))
        out[qid] = [ids[i] for i in order[:10]]
    return out


def test_positive_is_found_by_sigma_oracle_but_not_by_raw_overlap(world):
    t = gen_task(world, {"qa": 1.0}, "qa", seed=3)
    sig = world.sigma("qa")
    oracle = _overlap_rankings(t, lambda qid, ws: {sig[w] for w in ws})
    raw = _overlap_rankings(t, lambda qid, ws: set(ws))
    for qid, rel in t.qrels.items():
        assert oracle[qid][0] in rel
    ndcg_oracle, _ = mean_metric(oracle, t.qrels, ndcg_at_k, 10)
    ndcg_raw, _ = mean_metric(raw, t.qrels, ndcg_at_k, 10)
    assert ndcg_oracle == 1.0
    assert ndcg_raw < 0.1


def test_wrong_bijection_prefers_hard_negatives(world):
    t = gen_task(world, {"qa": 1.0}, "qa", seed=3)
    sig = world.sigma("fc")
    wrong = _overlap_rankings(t, lambda qid, ws: {sig[w] for w in ws})
    ndcg, _ = mean_metric(wrong, t.qrels, ndcg_at_k, 10)
    assert ndcg < 0.1


def test_hard_negatives_share_content_under_other_attributes(world):
    t = gen_task(world, {"qa": 1.0}, "qa", seed=3)
    inv = {a: world.sigma_inverse(a) for a in SMALL.attributes}
    for ex in t.examples:
        q = set(t.queries[ex["query_id"]].split())
        pos = _words(t.passages[ex["positive"]])
        assert {inv["qa"][w] for w in pos if w in inv["qa"]} == q
        for n in ex["negatives"]:
            bag = _words(t.passages[n])
            assert not bag & set(world.sublexicons["qa"])
            hits = [a for a in ("fc", "sci") if {inv[a][w] for w in bag if w in inv[a]} == q]
            assert len(hits) == 1


def test_judged_positive_is_the_only_exact_match(world):
    t = gen_task(world, {"qa": 0.5, "fc": 0.5}, "mix", seed=4, negative_attributes=["sci"])
    for qid, rel in t.qrels.items():
        a = t.query_attribute[qid]
        target = set(world.apply(a, t.queries[qid].split()))
        matches = [p for p, text in t.passages.items() if target <= _words(text)]
        assert matches == list(rel)


def test_no_distractors_uses_same_attribute_negatives(world):
    t = gen_task(world, {"qa": 1.0}, "qa", seed=2, negative_attributes=[])
    qa_words = set(world.sublexicons["qa"])
    for ex in t.examples:
        assert len(ex["negatives"]) == SMALL.hard_negatives
        for n in ex["negatives"]:
            assert _words(t.passages[n]) & qa_words


def test_task_is_deterministic(world):
    a = gen_task(world, {"qa": 0.6, "fc": 0.4}, "t", seed=9)
    b = gen_task(world, {"qa": 0.6, "fc": 0.4}, "t", seed=9)
    assert a.passages == b.passages and a.queries == b.queries and a.examples == b.examples
    c = gen_task(world, {"qa": 0.6, "fc": 0.4}, "t", seed=10)
    assert c.passages != a.passages


def test_task_roundtrip_through_files(world, tmp_path):
    t = gen_task(world, {"qa": 0.6, "fc": 0.4}, "t", seed=9)
    t.write(tmp_path)
    back = SynthTask.read(tmp_path)
    assert back.queries == t.queries
    assert back.passages == t.passages
    assert back.qrels == t.qrels
    assert back.examples == t.examples
    assert back.spec == t.spec
    ex = back.train_examples()
    assert len(ex) == len(t.examples) and ex[0].task == t.spec


def test_jsonl_rejects_malformed_lines(tmp_path):
    p = tmp_path / "x.jsonl"
    write_jsonl(p, [{"id": "a", "text": "b"}])
    assert read_jsonl(p) == [{"id": "a", "text": "b"}]
    p.write_text('{"id": "a"}\nnot json\n')
    with pytest.raises(DataError):
        read_jsonl(p)
