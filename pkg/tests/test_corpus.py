import json

import numpy as np
import pytest

from expertlink.corpus import (CorpusError, Expert, ExpertInstance, ReferenceCorpus,
                               SupportInfo, TripletBatch, eligible_experts,
                               generate_name_variants, load_corpus, paper_support,
                               sample_instance, sample_triplets,
                               save_reference_corpus)


def make_expert(eid, name="bo li", n_papers=3, token="deep"):
    papers = [paper_support(title=f"{token} paper {i}", keywords=[token],
                            authors=[name], org="org", venue="venue")
              for i in range(n_papers)]
    return Expert(id=eid, name=name, support=papers)


def write_jsonl(path, records):
    with open(path, "w", encoding="utf-8") as f:
        for r in records:
            f.write(json.dumps(r) + "\n")


# ---------------------------------------------------------------------------
# Types

def test_support_info_requires_text():
    with pytest.raises(CorpusError):
        SupportInfo("sentence", (("sentence", "   "),))


def test_support_info_serialization_round_trip_is_byte_identical():
    info = paper_support(title="Graph Learning", keywords=["graphs", "ml"],
                         authors=["bo li"], org="tsinghua", venue="kdd")
    a = json.dumps(info.to_obj())
    b = json.dumps(SupportInfo.from_obj(json.loads(a)).to_obj())
    assert a == b


def test_expert_requires_support():
    with pytest.raises(CorpusError):
        Expert(id="e1", name="bo li", support=[])


def test_instance_rejects_duplicates():
    with pytest.raises(CorpusError):
        ExpertInstance("e1", (0, 0, 1))


def test_triplet_enforces_same_expert_positive():
    a = ExpertInstance("e1", (0, 1))
    p = ExpertInstance("e2", (2, 3))
    with pytest.raises(CorpusError):
        TripletBatch(anchor=a, positive=p, negatives=())


def test_triplet_enforces_disjoint_positive():
    a = ExpertInstance("e1", (0, 1))
    p = ExpertInstance("e1", (1, 2))
    with pytest.raises(CorpusError):
        TripletBatch(anchor=a, positive=p, negatives=())


# ---------------------------------------------------------------------------
# Loading

def test_load_reference_two_experts(tmp_path):
    path = tmp_path / "ref.jsonl"
    write_jsonl(path, [
        {"id": "e1", "name": "bo li", "papers": [
            {"title": f"t{i}", "keywords": ["k"], "authors": ["bo li"],
             "org": "o", "venue": "v"} for i in range(3)]},
        {"id": "e2", "name": "wei chen", "papers": [
            {"title": f"s{i}", "keywords": ["k"], "authors": ["wei chen"],
             "org": "o", "venue": "v"} for i in range(3)]},
    ])
    corpus = load_corpus(path, "reference")
    assert len(corpus) == 2
    assert corpus.get("e1").n_support == 3
    assert corpus.get("e2").n_support == 3


def test_news_keeps_six_sentences_each_side(tmp_path):
    path = tmp_path / "news.jsonl"
    write_jsonl(path, [{
        "mention_id": "m1", "name": "bo li",
        "sentences_before": [f"before {i}" for i in range(15)],
        "sentences_after": [f"after {i}" for i in range(2)],
    }])
    corpus = load_corpus(path, "news")
    mention = corpus.get("m1")
    texts = [s.text() for s in mention.support]
    assert len(texts) == 8  # 6 kept before + 2 after
    assert texts[0] == "before 9"  # nearest six sentences survive
    assert texts[5] == "before 14"
    assert texts[6:] == ["after 0", "after 1"]


def test_duplicate_id_rejects_load(tmp_path):
    path = tmp_path / "ref.jsonl"
    rec = {"id": "e1", "name": "bo li",
           "papers": [{"title": "t", "keywords": [], "authors": [], "org": "",
                       "venue": ""}]}
    write_jsonl(path, [rec, rec])
    with pytest.raises(CorpusError, match="e1"):
        load_corpus(path, "reference")


def test_malformed_line_reports_line_number(tmp_path):
    path = tmp_path / "ref.jsonl"
    with open(path, "w") as f:
        f.write(json.dumps({"id": "e1", "name": "n", "papers": [
            {"title": "t", "keywords": [], "authors": [], "org": "", "venue": ""}]}) + "\n")
        f.write("{broken\n")
    with pytest.raises(CorpusError, match=":2"):
        load_corpus(path, "reference")


def test_missing_field_reports_line_number(tmp_path):
    path = tmp_path / "news.jsonl"
    write_jsonl(path, [{"mention_id": "m1", "name": "x"}])
    with pytest.raises(CorpusError, match="sentences_before"):
        load_corpus(path, "news")


def test_linkedin_support_shape(tmp_path):
    path = tmp_path / "li.jsonl"
    write_jsonl(path, [{
        "user_id": "u1", "name": "bo li", "affiliation": "tsinghua",
        "skills": ["ml", "nlp", "graphs"],
        "summary": "Works on graphs. Builds search systems. Likes espresso.",
    }])
    mention = load_corpus(path, "linkedin").get("u1")
    kinds = [s.kind for s in mention.support]
    assert kinds[:2] == ["attribute", "attribute"]
    assert mention.support[1].text() == "ml nlp graphs"
    assert sum(k == "sentence" for k in kinds) == 3


def test_reference_round_trip(tmp_path):
    corpus = ReferenceCorpus([make_expert("e1", n_papers=2),
                              make_expert("e2", name="wei chen", n_papers=4)])
    path = tmp_path / "dump.jsonl"
    save_reference_corpus(path, corpus)
    again = load_corpus(path, "reference")
    assert [e.id for e in again] == [e.id for e in corpus]
    for a, b in zip(again, corpus):
        assert a == b


def test_unknown_schema_rejected(tmp_path):
    path = tmp_path / "x.jsonl"
    path.write_text("")
    with pytest.raises(CorpusError, match="schema"):
        load_corpus(path, "wiki")


# ---------------------------------------------------------------------------
# Name variants

def test_variants_two_token_example():
    assert generate_name_variants("Bo Li") == {"bo li", "li bo", "b li", "l bo"}


def test_variants_single_token():
    assert generate_name_variants("Li") == {"li"}


def test_variants_empty_name_errors():
    with pytest.raises(CorpusError):
        generate_name_variants("   ")


def test_variants_three_tokens_match_hand_enumeration():
    # rotation: move last token first; initialization: every token but the
    # last becomes its first letter, applied to both orderings
    expected = {
        "jing wei zhang",       # original
        "zhang jing wei",       # rotated
        "j w zhang",            # initialized original
        "z j wei",              # initialized rotated
    }
    assert generate_name_variants("Jing Wei Zhang") == expected


def test_rotation_is_symmetric_for_two_token_names():
    a = generate_name_variants("Bo Li")
    b = generate_name_variants("Li Bo")
    assert "li bo" in a and "bo li" in b
    assert a == b


# ---------------------------------------------------------------------------
# Candidate generation

def test_candidate_set_rotation_hit():
    corpus = ReferenceCorpus([make_expert("e1", name="Bo Li")])
    assert corpus.candidate_set("Li Bo") == ["e1"]


def test_candidate_set_no_match_is_empty():
    corpus = ReferenceCorpus([make_expert("e1", name="Bo Li")])
    assert corpus.candidate_set("Alan Turing") == []


def test_candidate_set_matches_quadratic_oracle():
    rng = np.random.default_rng(5)
    firsts = ["bo", "wei", "jing", "li"]
    lasts = ["li", "chen", "zhang", "wang", "bo"]
    experts = []
    for i in range(20):
        name = f"{firsts[rng.integers(len(firsts))]} {lasts[rng.integers(len(lasts))]}"
        experts.append(make_expert(f"e{i:02d}", name=name))
    corpus = ReferenceCorpus(experts)
    for query in experts:
        expected = sorted(
            other.id for other in experts
            if generate_name_variants(query.name) & generate_name_variants(other.name))
        assert corpus.candidate_set(query.name) == expected


def test_candidate_set_fuzzy_fallback():
    corpus = ReferenceCorpus([make_expert("e1", name="Bo Li")])
    assert corpus.candidate_set("bo xli") == []
    assert corpus.candidate_set("bo xli", fuzzy=True) == ["e1"]


# ---------------------------------------------------------------------------
# Sampling

def test_sample_instance_draws_cap_distinct_items():
    expert = make_expert("e1", n_papers=10)
    inst = sample_instance(expert, 6, np.random.default_rng(0))
    assert len(inst.items) == 6
    assert len(set(inst.items)) == 6
    assert all(0 <= i < 10 for i in inst.items)


def test_sample_instance_small_expert_returns_all():
    expert = make_expert("e1", n_papers=3)
    inst = sample_instance(expert, 6, np.random.default_rng(0))
    assert sorted(inst.items) == [0, 1, 2]


def test_sample_instance_is_seed_deterministic():
    expert = make_expert("e1", n_papers=10)
    a = sample_instance(expert, 6, np.random.default_rng(42))
    b = sample_instance(expert, 6, np.random.default_rng(42))
    assert a == b


def test_sample_triplets_reproduces_reference_counts():
    # 480 eligible experts, 10 anchors each, 9 negatives per anchor
    experts = [make_expert(f"e{i:03d}", name=f"n{i:03d} l{i:03d}", n_papers=12)
               for i in range(480)]
    corpus = ReferenceCorpus(experts)
    triplets = sample_triplets(corpus, cap=6, n_neg=9, per_expert=10,
                               rng=np.random.default_rng(1))
    assert len(triplets) == 4800
    assert sum(len(t.negatives) for t in triplets) == 43200


def test_sample_triplets_filters_small_experts():
    experts = [make_expert("big1", name="a b", n_papers=12),
               make_expert("big2", name="c d", n_papers=12),
               make_expert("small", name="e f", n_papers=11)]
    corpus = ReferenceCorpus(experts)
    triplets = sample_triplets(corpus, cap=6, n_neg=1, per_expert=2,
                               rng=np.random.default_rng(0))
    anchors = {t.anchor.expert_id for t in triplets}
    assert anchors == {"big1", "big2"}  # 11 < 2*6 cannot form a disjoint pair


def test_sample_triplets_two_expert_corpus_forces_negative():
    experts = [make_expert("e1", name="a b", n_papers=4),
               make_expert("e2", name="c d", n_papers=4)]
    corpus = ReferenceCorpus(experts)
    triplets = sample_triplets(corpus, cap=2, n_neg=1, per_expert=3,
                               rng=np.random.default_rng(0))
    for t in triplets:
        other = "e2" if t.anchor.expert_id == "e1" else "e1"
        assert [n.expert_id for n in t.negatives] == [other]


def test_sample_triplets_errors_when_nothing_eligible():
    experts = [make_expert("e1", name="a b", n_papers=3),
               make_expert("e2", name="c d", n_papers=3)]
    corpus = ReferenceCorpus(experts)
    with pytest.raises(CorpusError, match="4"):
        sample_triplets(corpus, cap=2, n_neg=1, per_expert=1,
                        rng=np.random.default_rng(0))


def test_sample_triplets_invariants_and_determinism():
    rng = np.random.default_rng(3)
    experts = [make_expert(f"e{i}", name=f"n{i % 3} family", n_papers=14)
               for i in range(9)]
    corpus = ReferenceCorpus(experts)
    a = sample_triplets(corpus, cap=6, n_neg=4, per_expert=5,
                        rng=np.random.default_rng(11))
    b = sample_triplets(corpus, cap=6, n_neg=4, per_expert=5,
                        rng=np.random.default_rng(11))
    assert a == b  # byte-for-byte identical stream
    for t in a:
        assert set(t.anchor.items).isdisjoint(t.positive.items)
        assert len(set(t.anchor.items)) == len(t.anchor.items)
        for neg in t.negatives:
            assert neg.expert_id != t.anchor.expert_id


def test_eligible_experts_threshold():
    experts = [make_expert("a", name="x y", n_papers=12),
               make_expert("b", name="x y", n_papers=11)]
    assert [e.id for e in eligible_experts(ReferenceCorpus(experts), 6)] == ["a"]
