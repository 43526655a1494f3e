import math
import random

import numpy as np
import pytest
from hypothesis import given, strategies as st

from fuzz import mutate_boundaries, random_template, tokenizer, walk_nll
from kcomp.backends import TableOracle
from kcomp.codec import (
    INPUT_LAYOUTS,
    QUESTION_FIRST,
    CodecError,
    EntityDescription,
    SequenceTemplate,
    TokenizerConfigError,
    WhitespaceTokenizer,
    build_loss_mask,
    check_factorization,
    check_reserved_atomic,
    export_training_record,
    render_compressor_input,
    render_target,
    segment_nll,
)
from kcomp.pipeline import parse_compressor_output

DOWN_ENTRIES = [
    EntityDescription("symptom", "A symptom is a departure from normal function or feeling."),
    EntityDescription("Down syndrome", "Down syndrome is a genetic disorder."),
]


def test_target_lines_follow_entry_order():
    text, (ed_s, ed_e, s_s, s_e) = render_target(DOWN_ENTRIES, "It causes delays.")
    lines = text.split("\n")
    assert lines[0] == "symptom: A symptom is a departure from normal function or feeling.<eod>"
    assert lines[1] == "Down syndrome: Down syndrome is a genetic disorder.<eod>"
    assert lines[2] == "It causes delays."
    raw = text.encode()
    assert ed_e == s_s and raw[s_s:s_e] == b"It causes delays."
    assert raw[ed_s:ed_e].count(b"<eod>") == 2


def test_target_preconditions():
    with pytest.raises(CodecError):
        render_target([], "summary")
    with pytest.raises(CodecError):
        render_target(DOWN_ENTRIES, "  ")
    with pytest.raises(CodecError):
        render_target([EntityDescription("a:b", "x")], "s")
    with pytest.raises(CodecError):
        render_target([EntityDescription("a", "has <eod> inside")], "s")
    with pytest.raises(CodecError):
        render_target([EntityDescription("a", "two\nlines")], "s")


def test_input_layouts():
    assert render_compressor_input("Q <ent>?", ["T1\nbody one"]) == "T1\nbody one\n\nQ <ent>?"
    ranked = [f"T{i}\nbody {i}" for i in (3, 1, 2)]
    assert render_compressor_input("q", ranked).split("\n\n")[:3] == ranked
    assert render_compressor_input("q", ranked, QUESTION_FIRST).startswith("q\n\n")
    with pytest.raises(CodecError):
        render_compressor_input("q", [])
    t = SequenceTemplate.build("q", ["p"], DOWN_ENTRIES, "s", QUESTION_FIRST)
    assert t.layout == INPUT_LAYOUTS[QUESTION_FIRST]


_SAFE = st.text(st.characters(whitelist_categories=("L", "N"), whitelist_characters=" .,-"),
                min_size=1, max_size=20).filter(lambda s: s.strip())


@given(st.lists(st.tuples(_SAFE, _SAFE), min_size=1, max_size=5), _SAFE)
def test_render_parse_round_trip(pairs, summary):
    entries = [EntityDescription(s.strip(), d.strip()) for s, d in pairs]
    text, _ = render_target(entries, summary)
    parsed = parse_compressor_output(text)
    assert list(parsed.entries) == entries
    assert parsed.summary == summary.strip()


def test_loss_mask_small_case():
    t = SequenceTemplate("p1 p2 p3 p4", "s: d<eod>\nsum one two", (0, 10, 10, 21))
    lm = build_loss_mask(t, WhitespaceTokenizer())
    assert list(lm.mask) == [False] * 4 + [True] * 6
    assert lm.segments == ("input",) * 4 + ("ED",) * 3 + ("S",) * 3
    assert lm.input_length == 4


def test_empty_target_is_rejected():
    t = SequenceTemplate("only input", "", (0, 0, 0, 0))
    with pytest.raises(CodecError):
        build_loss_mask(t, WhitespaceTokenizer())


def test_segment_labels_match_byte_scan():
    rng = random.Random(5)
    tok = tokenizer()
    for _ in range(100):
        t = random_template(rng)
        lm = build_loss_mask(t, tok)
        ref = walk_nll(np.full((64, 64), 1 / 64), t, tok)
        assert list(lm.segments) == ref["labels"]
        assert lm.mask == tuple(lab != "input" for lab in ref["labels"])


def test_uniform_oracle_closed_form():
    t = SequenceTemplate("in put", "a: b<eod>\nx y z", (0, 10, 10, 15))
    tok = WhitespaceTokenizer(vocab_size=4)
    oracle = TableOracle.uniform(4)
    assert segment_nll(oracle, t, tok, "S") == pytest.approx(3 * math.log(4), abs=1e-12)
    assert segment_nll(oracle, t, tok, "joint") == pytest.approx(6 * math.log(4), abs=1e-12)


def test_deterministic_oracle_has_zero_loss():
    vocab = {"in": 3, "a:": 4, "b": 5, "x": 6}
    tok = WhitespaceTokenizer(vocab=vocab)
    t = SequenceTemplate("in", "a: b<eod>\nx", (0, 10, 10, 11))
    # in -> a: -> b -> <eod> -> x
    succ = [0, 0, 6, 4, 5, 2, 0]
    oracle = TableOracle.chain(succ)
    assert segment_nll(oracle, t, tok, "joint") == 0.0
    report = check_factorization(oracle, t, tok)
    assert report.passed and report.residual == 0.0


def test_zero_probability_is_reported_as_infinite():
    tok = WhitespaceTokenizer(vocab={"in": 3, "a:": 4, "b": 5, "x": 6})
    t = SequenceTemplate("in", "a: b<eod>\nx", (0, 10, 10, 11))
    oracle = TableOracle.chain([0, 0, 0, 0, 0, 0, 0])
    assert segment_nll(oracle, t, tok, "ED") == math.inf
    report = check_factorization(oracle, t, tok)
    assert not report.passed and "infinite" in report.reason


def test_matches_brute_force_walk():
    rng = random.Random(9)
    tok = tokenizer()
    for seed in range(30):
        oracle = TableOracle.random(64, seed=seed)
        t = random_template(rng)
        ref = walk_nll(oracle.table, t, tok)
        for seg in ("ED", "S", "joint"):
            assert segment_nll(oracle, t, tok, seg) == pytest.approx(ref[seg], rel=1e-12, abs=1e-12)


def test_chain_rule_holds_on_random_cases():
    rng = random.Random(1)
    tok = tokenizer()
    for seed in range(100):
        report = check_factorization(TableOracle.random(64, seed=seed, concentration=0.3),
                                     random_template(rng), tok)
        assert report.passed, report.reason


def test_boundary_mutations_break_the_identity():
    rng = random.Random(2)
    tok = tokenizer()
    for seed in range(60):
        oracle = TableOracle.random(64, seed=seed)
        t = random_template(rng)
        assert check_factorization(oracle, t, tok).passed
        mutated = mutate_boundaries(t, tok, rng)
        assert not check_factorization(oracle, mutated, tok).passed


def test_reserved_tokens_stay_atomic():
    tok = WhitespaceTokenizer()
    check_reserved_atomic(tok)
    assert tok.encode("word<eod>") == [tok.token_id("word"), 2]
    assert tok.encode("<ent>x<ent>") == [1, tok.token_id("x"), 1]

    class CharTokenizer:
        name = "chars"

        def tokenize(self, text):
            from kcomp.codec import Token
            raw = text.encode()
            return [Token(b, i, i + 1) for i, b in enumerate(raw)]

    with pytest.raises(TokenizerConfigError):
        check_reserved_atomic(CharTokenizer())
    with pytest.raises(TokenizerConfigError):
        build_loss_mask(SequenceTemplate("a", "b: c<eod>\nd", (0, 10, 10, 11)), CharTokenizer())


def test_boundaries_must_be_ordered():
    with pytest.raises(CodecError):
        SequenceTemplate("a", "xyz", (0, 5, 5, 3))
    with pytest.raises(CodecError):
        SequenceTemplate("a", "xyz", (2, 3, 1, 3))


def test_export_training_record():
    t = SequenceTemplate.build("What are the <ent> of <ent>?", ["Down syndrome\nA disorder."],
                               DOWN_ENTRIES, "It is genetic.")
    bare = export_training_record(t)
    assert set(bare) == {"input_text", "target_text", "boundaries", "layout"}
    full = export_training_record(t, WhitespaceTokenizer())
    assert len(full["token_ids"]) == len(full["loss_mask"])
    assert full["loss_mask"][0] == 0 and full["loss_mask"][-1] == 1
    assert full["tokenizer"] == "whitespace"
