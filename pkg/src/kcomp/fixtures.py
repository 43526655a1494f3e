"""Small deterministic corpora and decision streams for demos and tests."""
from __future__ import annotations

import json
import random
from typing import Iterator

from .dataset import FilterDecision, QAExample

DEMO_DOCUMENTS = [
    ("d01", "Down syndrome",
     "Down syndrome is a genetic disorder caused by the presence of all or part of a third copy of "
     "chromosome 21. It is usually associated with physical growth delays, mild to moderate "
     "intellectual disability, and characteristic facial features."),
    ("d02", "Symptom",
     "A symptom is a departure from normal function or feeling which is apparent to a patient, "
     "reflecting the presence of an unusual state or of a disease. Symptoms can be acute or chronic."),
    ("d03", "Clinical trial",
     "A clinical trial is a prospective biomedical or behavioral research study on human participants. "
     "Trials are designed to answer specific questions about interventions such as new treatments."),
    ("d04", "Research",
     "Research is creative and systematic work undertaken to increase the stock of knowledge. "
     "It involves the collection, organization and analysis of evidence."),
    ("d05", "Disorder",
     "A disorder is a functional abnormality or disturbance of the body or mind. "
     "Medical disorders can be categorized into mental, physical, genetic and emotional types."),
    ("d06", "Chromosome 21",
     "Chromosome 21 is one of the 23 pairs of chromosomes in humans. "
     "It is the smallest human autosome, spanning about 45 million base pairs."),
    ("d07", "Trisomy",
     "A trisomy is a type of polysomy in which there are three instances of a particular chromosome. "
     "Trisomy of chromosome 21 causes Down syndrome."),
    ("d08", "Intellectual disability",
     "Intellectual disability is a generalized neurodevelopmental disorder characterized by limited "
     "intellectual and adaptive functioning. It is identified by an IQ score under 70."),
    ("d09", "Diabetes",
     "Diabetes mellitus is a group of common endocrine diseases characterized by sustained high blood "
     "sugar levels. It results from insufficient insulin production or resistance to its effects."),
    ("d10", "Insulin",
     "Insulin is a peptide hormone produced by beta cells of the pancreatic islets. "
     "It regulates the metabolism of carbohydrates, fats and protein."),
    ("d11", "Hypertension",
     "Hypertension is a long-term medical condition in which the blood pressure in the arteries is "
     "persistently elevated. It usually does not cause symptoms itself."),
    ("d12", "Treatment",
     "Treatment is the management and care of a patient to combat a disease or disorder. "
     "Treatments may be medical, surgical or behavioral."),
]

DEMO_QUESTIONS = [
    ("q01", "What are the symptoms of Down syndrome?", "physical growth delays", "train"),
    ("q02", "How does insulin affect diabetes?", "it lowers blood sugar", "train"),
    ("q03", "Is hypertension a disorder?", "yes", "train"),
    ("q04", "What causes trisomy?", "an extra chromosome copy", "validation"),
    ("q05", "Who should join a clinical trial for treatment of hypertension?", "eligible patients", "test"),
    ("q06", "How long does it take?", "it depends", "train"),
    ("q07", "Why do people sneeze?", "to clear the nose", "test"),
    ("q08", "What is known about chromosome 21?", "smallest autosome", "validation"),
]


def demo_corpus_lines() -> list[str]:
    return [json.dumps({"id": i, "title": t, "text": x, "source": "other"}) for i, t, x in DEMO_DOCUMENTS]


def demo_questions() -> list[QAExample]:
    return [QAExample(q, text, a, split) for q, text, a, split in DEMO_QUESTIONS]


_WORDS = (
    "alpha beta gamma delta epsilon zeta theta iota kappa lambda sigma omega cell gene protein "
    "tissue dose assay cohort marker plasma enzyme receptor kinase pathway signal membrane"
).split()


def synthetic_corpus_lines(n_docs: int, tokens_per_doc: int, seed: int = 0) -> list[str]:
    """Documents of exactly ``tokens_per_doc`` whitespace tokens each (title excluded)."""
    rng = random.Random(seed)
    lines = []
    for i in range(n_docs):
        words = [rng.choice(_WORDS) for _ in range(tokens_per_doc - 1)]
        text = " ".join(words) + "."
        text = text[0].upper() + text[1:]
        lines.append(json.dumps({"id": f"s{i:04d}", "title": f"Topic{i:04d}", "text": text}))
    return lines


def decision_stream(split: str, original: int, kept: int, seed: int = 0,
                    no_description_share: float = 0.5) -> Iterator[FilterDecision]:
    """A shuffled decision stream with exactly ``kept`` keeps out of ``original``."""
    if not 0 <= kept <= original:
        raise ValueError("need 0 <= kept <= original")
    rng = random.Random(seed)
    dropped = original - kept
    n_desc = 0 if split == "test" else int(dropped * no_description_share)
    reasons = ["kept"] * kept + ["no_description"] * n_desc + ["no_entity"] * (dropped - n_desc)
    rng.shuffle(reasons)
    for i, reason in enumerate(reasons):
        yield FilterDecision(reason == "kept", reason, f"{split}-{i:06d}", split)


# Published dataset sizes before/after entity filtering: split -> (original, kept, percent)
FILTER_TABLE = {
    "MedQuAD": {"train": (13127, 9064, 30.9), "validation": (1640, 1095, 33.2), "test": (1640, 1554, 5.2)},
    "MASH-QA": {"train": (27728, 20458, 26.2), "validation": (3587, 2637, 26.4), "test": (3493, 3226, 7.6)},
    "BioASQ": {"train": (3209, 2284, 28.8), "validation": (803, 563, 29.8), "test": (707, 647, 8.4)},
}


def table_decisions(dataset: str, seed: int = 0) -> list[FilterDecision]:
    """Decision streams for every split of one published dataset row group."""
    out = []
    for i, (split, (original, kept, _)) in enumerate(FILTER_TABLE[dataset].items()):
        out.extend(decision_stream(split, original, kept, seed + i))
    return out
