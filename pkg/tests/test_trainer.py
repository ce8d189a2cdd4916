import math

import numpy as np
import pytest

from modret.algebra import GENERAL_QUERY, CompositionSpec, compose_final
from modret.decomposer import TaskSpec
from modret.encoder import Backbone, Embedding, EncoderConfig, PromptStack, backward, encode_batch, tokenize
from modret.errors import ConfigError, DataError
from modret.numcore import Rng, grad_check
from modret.trainer import (
    TrainConfig,
    TrainExample,
    batch_nll,
    init_general,
    nll_loss,
    route_gradients,
    train_general,
    train_joint,
)

from conftest import random_stack

CFG = EncoderConfig(layers=2, dim=16, heads=2, ffn_dim=32, vocab_size=256, max_len=16, prompt_len=4, seed=3)


@pytest.fixture(scope="module")
def bb():
    return Backbone.init(CFG)


def corpus_and_examples(n=8, task=None):
    corpus = {f"p{i}": f"word{i} thing{i} other{i}" for i in range(8 + 5 * n)}
    task = task or TaskSpec("general")
    ex = [TrainExample(f"word{i} query", f"p{i}", tuple(f"p{j}" for j in range(8 + 5 * i, 13 + 5 * i)), task) for i in range(n)]
    return corpus, ex


def test_nll_examples():
    e = Embedding.of
    q = e([1.0, 0.0])
    same = e([0.5, 0.0])
    assert abs(nll_loss(q, same, [same] * 5) - math.log(6)) < 1e-12
    assert abs(math.log(6) - 1.791759) < 1e-6
    assert nll_loss(q, e([1e4, 0.0]), [e([0.0, 0.0])] * 5) < 1e-12
    with pytest.raises(ConfigError):
        nll_loss(q, same, [])


def test_batch_nll_matches_per_example_loss_with_in_batch_negatives():
    r = Rng(1)
    Q, P = r.normal((2, 4)), r.normal((6, 4))
    loss, _, _ = batch_nll(Q, P, np.array([0, 3]))
    e = Embedding.of
    per = [nll_loss(e(Q[0]), e(P[0]), [e(P[j]) for j in range(6) if j != 0]),
           nll_loss(e(Q[1]), e(P[3]), [e(P[j]) for j in range(6) if j != 3])]
    assert abs(loss - np.mean(per)) < 1e-12


def test_config_defaults_and_validation():
    assert TrainConfig(phase=1).general_lr == 7e-3
    p2 = TrainConfig(phase=2)
    assert p2.general_lr == 7e-6 and p2.lr_attribute == 7e-3
    assert round(p2.lr_attribute / p2.general_lr) == 1000
    assert (p2.batch_size, p2.negatives, p2.epochs, p2.scale) == (8, 5, 5, 0.5)
    for bad in ({"negatives": 0}, {"lr_general": 0.0}, {"phase": 3}, {"optimizer": "rmsprop"}):
        with pytest.raises(ConfigError):
            TrainConfig(**bad)


def test_example_validation(bb):
    with pytest.raises(DataError):
        TrainExample("q", "p1", ("p1", "p2"))
    corpus, ex = corpus_and_examples()
    with pytest.raises(ConfigError):
        train_general(bb, corpus, [], TrainConfig())
    with pytest.raises(DataError):
        train_general(bb, {}, ex, TrainConfig())


def test_zero_steps_returns_initial(bb):
    corpus, ex = corpus_and_examples()
    init = init_general(bb, 4)
    r = train_general(bb, corpus, ex, TrainConfig(max_steps=0), init=init)
    assert np.array_equal(r.general_query.values, init[0].values)
    assert np.array_equal(r.general_passage.values, init[1].values)
    assert r.losses == []


def test_loss_halves_on_separable_batch(bb):
    corpus, ex = corpus_and_examples()
    r = train_general(bb, corpus, ex, TrainConfig(phase=1, lr_general=1.0, epochs=200, seed=1))
    assert len(r.losses) == 200
    assert r.losses[-1] <= 0.5 * r.losses[0]


def test_backbone_frozen_and_deterministic(bb):
    corpus, ex = corpus_and_examples()
    before = bb.digest()
    cfg = TrainConfig(phase=1, lr_general=1.0, epochs=3, seed=2)
    a = train_general(bb, corpus, ex, cfg)
    b = train_general(bb, corpus, ex, cfg)
    assert bb.digest() == before
    assert np.array_equal(a.general_query.values, b.general_query.values)
    assert a.losses == b.losses


def test_log_lines(bb):
    corpus, ex = corpus_and_examples()
    lines = []
    train_general(bb, corpus, ex, TrainConfig(epochs=2, batch_size=4), log=lines.append)
    assert [l["step"] for l in lines] == [0, 1, 2, 3]
    assert [l["epoch"] for l in lines] == [0, 0, 1, 1]
    assert all(set(l) == {"step", "epoch", "loss", "phase"} and l["phase"] == 1 for l in lines)


def test_joint_empty_composition_only_updates_general(bb):
    corpus, ex = corpus_and_examples(task=TaskSpec("plain"))
    g = init_general(bb, 0)
    r = train_joint(bb, corpus, ex, TrainConfig(phase=2, lr_general=0.1, epochs=1), g, ["alpha"])
    assert not np.any(r.attributes["alpha"].values)
    assert not np.array_equal(r.general_query.values, g[0].values)


def test_joint_rejects_unknown_attribute(bb):
    corpus, ex = corpus_and_examples(task=TaskSpec("t", {"beta": 1.0}))
    with pytest.raises(DataError):
        train_joint(bb, corpus, ex, TrainConfig(phase=2), init_general(bb, 0), ["alpha"])
    with pytest.raises(ConfigError):
        train_joint(bb, corpus, ex, TrainConfig(phase=2), init_general(bb, 0), [])
    with pytest.raises(ConfigError):
        train_joint(bb, corpus, ex, TrainConfig(phase=1), init_general(bb, 0), ["beta"])


def test_shared_attribute_receives_both_tasks():
    g1, g2 = np.full((1, 2, 1, 1), 1.0), np.full((1, 2, 1, 1), 10.0)
    specs = [CompositionSpec((("alpha", 1.0),), 0.5), CompositionSpec((("alpha", 1.0), ("beta", 2.0)), 0.5)]
    out = route_gradients(specs, np.stack([g1, g2]))
    assert np.allclose(out["alpha"], 0.5 * g1 + 0.25 * g2)
    assert np.allclose(out["beta"], 0.25 * 2.0 * g2)
    assert route_gradients([CompositionSpec()], np.stack([g1])) == {}


def test_joint_shared_attribute_trained_by_both_tasks(bb):
    _, ex1 = corpus_and_examples(4, TaskSpec("t1", {"alpha": 1.0}))
    corpus, ex2 = corpus_and_examples(8, TaskSpec("t2", {"alpha": 1.0, "beta": 1.0}))
    g = init_general(bb, 0)
    cfg = TrainConfig(phase=2, epochs=1, batch_size=4, max_steps=1, lr_attribute=0.1)
    only1 = train_joint(bb, corpus, ex1, cfg, g, ["alpha", "beta"])
    only2 = train_joint(bb, corpus, ex2[4:], cfg, g, ["alpha", "beta"])
    assert np.any(only1.attributes["alpha"].values) and not np.any(only1.attributes["beta"].values)
    assert np.any(only2.attributes["alpha"].values) and np.any(only2.attributes["beta"].values)


def test_routing_law_matches_finite_differences(bb):
    """d loss / d P_i = (w/N) * coef_i * d loss / d P_composed, through the full pipeline."""
    specs = [CompositionSpec((("a", 1.0), ("b", 0.7)), 0.5), CompositionSpec((("a", -2.0),), 0.8)]
    general = random_stack(CFG, 1, 0.3)
    gp = random_stack(CFG, 2, 0.3).values
    qs = [tokenize(t, CFG) for t in ("red fox", "blue whale")]
    ps = [tokenize(t, CFG) for t in ("fox red x", "y z", "whale blue", "q")]
    targets = np.array([0, 2])

    def f(params):
        mods = {GENERAL_QUERY: general, "a": PromptStack(params[0]), "b": PromptStack(params[1])}
        pre = np.stack([compose_final(s, mods).values for s in specs])
        Q, qc = encode_batch(bb, qs, pre, keep_cache=True)
        P, _ = encode_batch(bb, ps, gp)
        loss, dQ, _ = batch_nll(Q, P, targets)
        routed = route_gradients(specs, backward(bb, qc, dQ))
        return loss, [routed["a"], routed["b"]]

    params = [random_stack(CFG, 3, 0.3).values.copy(), random_stack(CFG, 4, 0.3).values.copy()]
    assert grad_check(f, params) <= 1e-4


def test_attribute_prompts_do_not_touch_passages(bb):
    from modret.index import build_index

    corpus, ex = corpus_and_examples(4, TaskSpec("t", {"alpha": 1.0}))
    g = init_general(bb, 0)
    r = train_joint(bb, corpus, ex, TrainConfig(phase=2, epochs=1, lr_general=1e-12), g, ["alpha"])
    a = build_index(corpus, bb, r.general_passage)
    b = build_index(corpus, bb, r.general_passage)
    assert a.to_bytes() == b.to_bytes()
