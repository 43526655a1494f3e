import itertools
import random

import pytest
from hypothesis import given, strategies as st

from kcomp import ENT_TOKEN
from kcomp.backends import EchoNER
from kcomp.backends.base import ProtocolError
from kcomp.corpus import KnowledgeDictionary
from kcomp.masking import (
    EntityMention,
    EntityRecognizer,
    MaskedQuestion,
    MaskingError,
    RecognizerPolicy,
    attach_descriptions,
    mask_question,
    recognize_entities,
)

DOWN = KnowledgeDictionary.from_pairs([
    ("symptom", "A symptom is a departure from normal function."),
    ("Down syndrome", "Down syndrome is a genetic disorder."),
])


def _mask(question, dictionary, **policy):
    return mask_question(question, recognize_entities(question, dictionary, RecognizerPolicy(**policy)))


def test_worked_example():
    masked = _mask("What are the symptoms of Down syndrome?", DOWN)
    assert masked.masked == "What are the <ent> of <ent>?"
    assert [m.surface for m in masked.mentions] == ["symptoms", "Down syndrome"]
    assert [m.entry.surface for m in masked.mentions] == ["symptom", "Down syndrome"]
    entries, unresolved = attach_descriptions(masked.mentions, DOWN)
    assert [e.surface for e in entries] == ["symptom", "Down syndrome"] and unresolved == []


def test_plural_needs_suffix_strip():
    masked = _mask("What are the symptoms of Down syndrome?", DOWN, suffix_strip=False)
    assert masked.masked == "What are the symptoms of <ent>?"


def test_no_hits_is_identity():
    masked = _mask("How tall is the tower?", DOWN)
    assert masked.masked == masked.original and masked.mentions == ()
    assert mask_question("plain", []).masked == "plain"


def test_stopwords_and_short_surfaces_are_ignored():
    kd = KnowledgeDictionary.from_pairs([("the", "article"), ("ab", "short"), ("abc", "long enough")])
    found = recognize_entities("the ab abc", kd)
    assert [m.surface for m in found] == ["abc"]


def test_longest_match_wins():
    kd = KnowledgeDictionary.from_pairs([("arthritis", "joint"), ("rheumatoid arthritis", "autoimmune")])
    found = recognize_entities("Is rheumatoid arthritis hereditary?", kd)
    assert [m.surface for m in found] == ["rheumatoid arthritis"]


def _oracle_selection(cands):
    """Enumerate every pairwise-disjoint subset; keep the maximal ones; choose the one whose
    members, listed by (longest, leftmost) priority, form the smallest sequence."""
    def disjoint(group):
        return all(a[1] <= b[0] or b[1] <= a[0] for a, b in itertools.combinations(group, 2))

    sets = [set(g) for r in range(len(cands) + 1) for g in itertools.combinations(cands, r) if disjoint(g)]
    maximal = [s for s in sets if not any(s < t for t in sets)]
    prio = lambda c: (-(c[1] - c[0]), c[0])
    best = min(maximal, key=lambda s: sorted(prio(c) for c in s))
    return sorted((c[0], c[1]) for c in best)


def test_overlap_resolution_matches_enumeration():
    rng = random.Random(11)
    words = ["rheumatoid", "arthritis", "juvenile", "onset", "disease", "chronic", "pain"]
    for _ in range(150):
        vocab_terms = {" ".join(rng.choice(words) for _ in range(rng.randint(1, 3))) for _ in range(6)}
        kd = KnowledgeDictionary.from_pairs((t, f"about {t}") for t in vocab_terms)
        question = " ".join(rng.choice(words) for _ in range(rng.randint(3, 8)))
        recognizer = EntityRecognizer(kd, RecognizerPolicy(suffix_strip=False))
        cands = [(s, e) for s, e, _ in recognizer._gazetteer.candidates(question)]
        got = [(m.start, m.end) for m in recognizer.recognize(question)]
        # the question is ASCII, so byte and character offsets coincide
        assert got == _oracle_selection(sorted(set(cands)))


def test_gazetteer_ignores_insertion_order():
    pairs = [("Down syndrome", "a"), ("syndrome", "b"), ("symptom", "c"), ("down", "d")]
    q = "Down syndrome symptoms and other syndrome notes"
    first = recognize_entities(q, KnowledgeDictionary.from_pairs(pairs))
    second = recognize_entities(q, KnowledgeDictionary.from_pairs(reversed(pairs)))
    assert [(m.surface, m.span) for m in first] == [(m.surface, m.span) for m in second]


def test_spans_are_utf8_bytes():
    kd = KnowledgeDictionary.from_pairs([("Sjögren syndrome", "dry eyes")])
    q = "Ist Sjögren syndrome erblich?"
    (m,) = recognize_entities(q, kd)
    assert q.encode()[m.start:m.end].decode() == "Sjögren syndrome"
    assert m.span == (4, 4 + len("Sjögren syndrome".encode()))
    assert mask_question(q, [m]).masked == "Ist <ent> erblich?"


def test_mask_rejects_bad_spans():
    q = "What is aspirin?"
    with pytest.raises(MaskingError):
        mask_question(q, [EntityMention("aspirin", (8, 99))])
    with pytest.raises(MaskingError):
        mask_question(q, [EntityMention("aspirin", (8, 15)), EntityMention("pirin", (10, 15))])
    with pytest.raises(MaskingError):
        mask_question(q, [EntityMention("what", (0, 4))])
    with pytest.raises(MaskingError):
        mask_question("é" + q, [EntityMention("x", (1, 2))])
    with pytest.raises(MaskingError):
        mask_question(f"has {ENT_TOKEN}", [])
    with pytest.raises(MaskingError):
        recognize_entities("   ", DOWN)


def test_unmask_detects_count_mismatch():
    with pytest.raises(MaskingError):
        MaskedQuestion("a b", "<ent> b", ()).unmask()


_PLAIN = st.text(st.characters(blacklist_categories=("Cs",), blacklist_characters="<>"), max_size=12)


@given(st.lists(st.tuples(_PLAIN, st.text(st.characters(blacklist_categories=("Cs",),
                                                           blacklist_characters="<>"),
                                             min_size=1, max_size=8)), max_size=6), _PLAIN)
def test_round_trip_with_planted_spans(parts, tail):
    question, mentions = "", []
    for gap, surface in parts:
        question += gap
        start = len(question.encode())
        question += surface
        mentions.append(EntityMention(surface, (start, len(question.encode()))))
    question += tail
    masked = mask_question(question, mentions)
    assert masked.unmask() == question
    assert masked.masked.count(ENT_TOKEN) == len(mentions)


def test_attach_descriptions_dedups_and_reports_unknowns():
    kd = KnowledgeDictionary.from_pairs([("insulin", "A hormone.")])
    mentions = [
        EntityMention("Insulin", (0, 7)),
        EntityMention("unknownase", (8, 18)),
        EntityMention("insulin", (19, 26)),
        EntityMention("UNKNOWNASE", (27, 37)),
    ]
    entries, unresolved = attach_descriptions(mentions, kd)
    assert [e.surface for e in entries] == ["insulin"]
    assert unresolved == ["unknownase"]
    assert attach_descriptions([], kd) == ([], [])


def test_attach_descriptions_keeps_first_occurrence_order():
    entries, _ = attach_descriptions(
        [EntityMention("Down syndrome", (0, 13)), EntityMention("symptom", (20, 27))], DOWN)
    assert [e.surface for e in entries] == ["Down syndrome", "symptom"]


def test_external_ner_resolves_spans_through_dictionary():
    ner = EchoNER(["symptoms", "Down syndrome", "syndrome", "mystery"])
    rec = EntityRecognizer(DOWN, RecognizerPolicy(mode="external_ner"), ner)
    q = "What are the symptoms of Down syndrome and mystery?"
    found = rec.recognize(q)
    assert [m.surface for m in found] == ["symptoms", "Down syndrome", "mystery"]
    assert [m.entry and m.entry.surface for m in found] == ["symptom", "Down syndrome", None]
    assert mask_question(q, found).masked == "What are the <ent> of <ent> and <ent>?"
    assert ner.calls == 1


def test_external_ner_rejects_bad_spans():
    class Broken:
        def ner(self, text):
            from kcomp.backends.base import NERSpan
            return [NERSpan(0, 500, "X")]

    rec = EntityRecognizer(DOWN, RecognizerPolicy(mode="external_ner"), Broken())
    with pytest.raises(ProtocolError):
        rec.recognize("short")
    with pytest.raises(ValueError):
        EntityRecognizer(DOWN, RecognizerPolicy(mode="external_ner"))


def test_policy_validation():
    with pytest.raises(ValueError):
        RecognizerPolicy(min_surface_chars=0)
    with pytest.raises(ValueError):
        RecognizerPolicy(mode="spacy")


def test_case_sensitive_policy():
    kd = KnowledgeDictionary.from_pairs([("AIDS", "A syndrome.")])
    assert recognize_entities("aids for walking", kd, RecognizerPolicy(case_insensitive=False)) == []
    assert len(recognize_entities("AIDS in 1990", kd, RecognizerPolicy(case_insensitive=False))) == 1
