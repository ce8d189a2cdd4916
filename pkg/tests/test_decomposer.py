import json
import warnings

import pytest

from modret.algebra import GENERAL_QUERY
from modret.decomposer import (
    Lexicon,
    MissingModuleWarning,
    Rule,
    TaskSpec,
    UnmatchedInstructionWarning,
    decompose,
    select_modules,
)
from modret.errors import ConfigError


def test_instruction_examples():
    t = decompose("Retrieve scientific paper paragraph to answer this question.")
    assert set(t.attributes) == {"Science", "QA"}
    assert all(w == 1.0 for w in t.attributes.values())
    t = decompose("Retrieve an Wikipedia introduction paragraph of the following entity.")
    assert set(t.attributes) == {"Wikipedia"}


def test_more_instruction_examples():
    assert set(decompose("Verify if the following claim is true.").attributes) == {"Fact-Checking"}
    assert "Medical" in decompose("Find a MEDICAL article").attributes


def test_unmatched_warns():
    with pytest.warns(UnmatchedInstructionWarning):
        t = decompose("xyzzy")
    assert t.attributes == {}


def test_rule_order_does_not_matter():
    rules = list(Lexicon.default().rules)
    text = "Retrieve scientific paper paragraph to answer this question."
    a = decompose(text, Lexicon(tuple(rules)))
    b = decompose(text, Lexicon(tuple(reversed(rules))))
    assert a.attributes == b.attributes


def test_lexicon_json(tmp_path):
    p = tmp_path / "lex.json"
    p.write_text(json.dumps([{"pattern": "^legal", "regex": True, "attribute": "Legal"}, {"pattern": "court", "regex": False, "attribute": "Legal"}]))
    lex = Lexicon.from_json(p)
    assert decompose("LEGAL text from a court", lex).attributes == {"Legal": 1.0}
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        assert decompose("about legal matters", Lexicon((lex.rules[0],))).attributes == {}
    assert Lexicon.from_json(lex.to_json()) == lex


def test_bad_regex_fails_at_load(tmp_path):
    p = tmp_path / "lex.json"
    p.write_text(json.dumps([{"pattern": "(unclosed", "regex": True, "attribute": "X"}]))
    with pytest.raises(ConfigError):
        Lexicon.from_json(p)
    with pytest.raises(ConfigError):
        Rule("", "X")
    with pytest.raises(ConfigError):
        Lexicon.from_json([{"pattern": "a", "attribute": "b", "extra": 1}])


def test_taskspec_json_and_validation(tmp_path):
    p = tmp_path / "t.json"
    p.write_text(json.dumps({"name": "qa-fc", "instruction": "x", "attributes": {"QA": 0.7, "FC": 0.3}}))
    t = TaskSpec.from_json(p)
    assert t.attributes == {"QA": 0.7, "FC": 0.3}
    assert TaskSpec.from_json(t.to_json()) == t
    with pytest.raises(ConfigError):
        TaskSpec("x", {"a": -1})
    with pytest.raises(ConfigError):
        TaskSpec.from_json({"name": "x", "bogus": 1})


def test_select_modules():
    reg = {GENERAL_QUERY, "Science", "QA", "QA2"}
    spec = select_modules(TaskSpec("t", {"Science": 1, "QA": 1}), reg)
    assert spec.terms == (("Science", 1.0), ("QA", 1.0)) and spec.scale == 0.5
    with pytest.warns(MissingModuleWarning):
        spec = select_modules(TaskSpec("t", {"Legal": 1}), reg)
    assert spec.terms == ()
    spec = select_modules(TaskSpec("t", {"QA": 0.7, "FC": 0.3}), {"QA", "FC"}, scale=0.8)
    assert spec.terms == (("QA", 0.7), ("FC", 0.3)) and spec.scale == 0.8
