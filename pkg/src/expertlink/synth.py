"""Desk-scale synthetic corpora.

Each expert owns a topic: a token subset drawn from a shared topic
universe, so same-name experts are mostly-disjoint in vocabulary but not
trivially so.  Name collision groups are injected so candidate lists have
a controlled size, and external mentions can carry a vocabulary shift
(domain-marker tokens) for adaptation experiments.
"""
from __future__ import annotations

import json
import string
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .corpus import (Expert, ExternalCorpus, ExternalMention, ReferenceCorpus,
                     SupportInfo, paper_support)


@dataclass(frozen=True)
class SynthConfig:
    n_experts: int = 50
    papers_per_expert: int = 24
    queries_per_expert: int = 2
    vocab_topics: int = 2000         # size of the shared topic-token universe
    topic_tokens_per_expert: int = 12
    collision_size: int = 18         # target experts per name group
    mentions_per_expert: int = 2
    sentences_per_mention: int = 8
    sentence_len: int = 18           # matches paper token counts: length must
                                     # not be a domain giveaway on its own
    shift: float = 0.0               # fraction of external tokens that are domain markers
    global_shift_frac: float = 0.5   # share of the marker mass drawn corpus-wide
                                     # (the rest comes from the group dialect)
    marker_leak: float = 0.0         # loanword rate: dialect markers in paper titles
    title_len: int = 12
    n_keywords: int = 6
    topic_frac: float = 0.95         # topical share of title tokens
    n_filler: int = 40
    n_markers: int = 16
    seed: int = 0

    def __post_init__(self):
        if self.n_experts < 2:
            raise ValueError("need at least 2 experts")
        if not 0.0 <= self.shift <= 1.0:
            raise ValueError("shift must lie in [0, 1]")
        if self.sentences_per_mention > 12:
            raise ValueError("mentions keep at most 12 sentences (6 per side)")


@dataclass
class SynthData:
    cfg: SynthConfig
    reference: ReferenceCorpus
    external: ExternalCorpus
    queries: list[dict]
    expert_topics: dict[str, list[str]]
    groups: list[list[str]]
    marker_tokens: list[str]


def _letters(i: int) -> str:
    return string.ascii_lowercase[i % 26]


def _group_sizes(n: int, target: int) -> list[int]:
    sizes = [target] * (n // target)
    rest = n % target
    if rest:
        sizes.append(rest)
    return sizes


def _name_spellings(group: int, size: int) -> tuple[str, list[str]]:
    """A base name plus colliding spellings; letter pairs are unique per
    group so initialized variants never bridge groups."""
    first = _letters(2 * group) + f"given{group:02d}"
    last = _letters(2 * group + 1) + f"family{group:02d}"
    forms = [f"{first} {last}", f"{last} {first}", f"{first[0]} {last}"]
    return f"{first} {last}", [forms[i % len(forms)] for i in range(size)]


def synth_corpus(cfg: SynthConfig) -> SynthData:
    rng = np.random.default_rng(cfg.seed)
    universe = [f"w{k:03d}" for k in range(cfg.vocab_topics)]
    filler = [f"common{k:02d}" for k in range(cfg.n_filler)]

    # External-domain vocabulary: a corpus-wide set plus a per-name-group
    # dialect. The loanword leak anchors each dialect inside its group's
    # topics; the corpus-wide set has no reference-side anchor.
    global_markers = [f"extg{k:02d}" for k in range(cfg.n_markers)]

    def group_markers(group: int) -> list[str]:
        return [f"ext{group}k{k:02d}" for k in range(cfg.n_markers)]

    def topic_pick(topic: list[str], n: int) -> list[str]:
        return [topic[i] for i in rng.integers(0, len(topic), size=n)]

    def make_paper(topic: list[str], markers: list[str]) -> SupportInfo:
        # All text lives in title + keywords: record structure then carries
        # no domain signal, so probes measure the vocabulary gap alone.
        title = []
        for _ in range(cfg.title_len):
            if cfg.marker_leak and rng.random() < cfg.marker_leak:
                title.append(markers[rng.integers(0, len(markers))])
            elif rng.random() < cfg.topic_frac:
                title.append(topic[rng.integers(0, len(topic))])
            else:
                title.append(filler[rng.integers(0, len(filler))])
        return paper_support(
            title=" ".join(title),
            keywords=topic_pick(topic, cfg.n_keywords))

    experts: list[Expert] = []
    queries: list[dict] = []
    expert_topics: dict[str, list[str]] = {}
    groups: list[list[str]] = []
    expert_meta: list[tuple[Expert, list[str], list[str]]] = []
    all_markers: list[str] = []

    eid = 0
    for g, size in enumerate(_group_sizes(cfg.n_experts, cfg.collision_size)):
        _, spellings = _name_spellings(g, size)
        markers = group_markers(g)
        all_markers.extend(markers)
        group_ids = []
        for name in spellings:
            expert_id = f"e{eid:04d}"
            eid += 1
            topic = [universe[i] for i in rng.choice(
                cfg.vocab_topics, size=cfg.topic_tokens_per_expert, replace=False)]
            papers = [make_paper(topic, markers)
                      for _ in range(cfg.papers_per_expert)]
            expert = Expert(id=expert_id, name=name, support=papers)
            experts.append(expert)
            expert_topics[expert_id] = topic
            group_ids.append(expert_id)
            expert_meta.append((expert, topic, markers))
        groups.append(group_ids)

    for expert, topic, markers in expert_meta:
        for q in range(cfg.queries_per_expert):
            paper = make_paper(topic, markers)
            queries.append({
                "id": f"q-{expert.id}-{q}",
                "name": expert.name,
                "papers": [_paper_record(paper)],
                "truth_id": expert.id,
            })

    mentions: list[ExternalMention] = []
    mid = 0
    for expert, topic, markers in expert_meta:
        for _ in range(cfg.mentions_per_expert):
            sentences = [_external_sentence(topic, markers, global_markers,
                                            filler, cfg, rng)
                         for _ in range(cfg.sentences_per_mention)]
            support = [SupportInfo("sentence", (("sentence", s),)) for s in sentences]
            mentions.append(ExternalMention(
                mention_id=f"m{mid:04d}", name=expert.name,
                support=support, truth_expert_id=expert.id))
            mid += 1

    return SynthData(cfg=cfg, reference=ReferenceCorpus(experts),
                     external=ExternalCorpus(mentions), queries=queries,
                     expert_topics=expert_topics, groups=groups,
                     marker_tokens=global_markers + all_markers)


def _external_sentence(topic: list[str], dialect: list[str], global_markers: list[str],
                       filler: list[str], cfg: SynthConfig,
                       rng: np.random.Generator) -> str:
    # Same token-bag recipe as papers (topical with the same filler rate),
    # with a `shift` fraction replaced by external-domain markers, split
    # evenly between the corpus-wide and dialect halves.
    tokens = []
    for _ in range(cfg.sentence_len):
        draw = rng.random()
        if draw < cfg.shift * cfg.global_shift_frac:
            tokens.append(global_markers[rng.integers(0, len(global_markers))])
        elif draw < cfg.shift:
            tokens.append(dialect[rng.integers(0, len(dialect))])
        elif rng.random() < cfg.topic_frac:
            tokens.append(topic[rng.integers(0, len(topic))])
        else:
            tokens.append(filler[rng.integers(0, len(filler))])
    return " ".join(tokens)


def make_ambiguous_mentions(data: SynthData, pairs: list[tuple[str, str]],
                            p_primary: float, rng: np.random.Generator,
                            prefix: str = "amb") -> list[ExternalMention]:
    """Mentions drawing tokens from two experts' topics; the second expert of
    each pair is the ground truth.  Used to plant contested link decisions."""
    cfg = data.cfg
    mentions = []
    for k, (primary, truth) in enumerate(pairs):
        topic_a = data.expert_topics[primary]
        topic_b = data.expert_topics[truth]
        sentences = []
        for _ in range(cfg.sentences_per_mention):
            toks = [topic_a[rng.integers(0, len(topic_a))]
                    if rng.random() < p_primary
                    else topic_b[rng.integers(0, len(topic_b))]
                    for _ in range(cfg.sentence_len)]
            sentences.append(" ".join(toks))
        support = [SupportInfo("sentence", (("sentence", s),)) for s in sentences]
        mentions.append(ExternalMention(
            mention_id=f"{prefix}{k:04d}",
            name=data.reference.get(truth).name,
            support=support, truth_expert_id=truth))
    return mentions


# ---------------------------------------------------------------------------
# Files

def _paper_record(info: SupportInfo) -> dict:
    fields = dict(info.text_fields)
    return {"title": fields.get("title", ""),
            "keywords": fields.get("keywords", "").split(),
            "authors": fields.get("authors", "").split(),
            "org": fields.get("org", ""),
            "venue": fields.get("venue", "")}


def write_synth(data: SynthData, out_dir) -> dict[str, str]:
    """Write reference.jsonl / external.jsonl / queries.jsonl; returns paths."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = {"reference": str(out / "reference.jsonl"),
             "external": str(out / "external.jsonl"),
             "queries": str(out / "queries.jsonl")}

    with open(paths["reference"], "w", encoding="utf-8") as f:
        for e in data.reference:
            papers = [_paper_record(s) for s in e.support]
            f.write(json.dumps({"id": e.id, "name": e.name, "papers": papers}) + "\n")

    with open(paths["external"], "w", encoding="utf-8") as f:
        for m in data.external:
            sentences = [s.text_fields[0][1] for s in m.support]
            half = (len(sentences) + 1) // 2
            f.write(json.dumps({
                "mention_id": m.mention_id, "name": m.name,
                "sentences_before": sentences[:half],
                "sentences_after": sentences[half:],
                "truth_id": m.truth_expert_id}) + "\n")

    with open(paths["queries"], "w", encoding="utf-8") as f:
        for q in data.queries:
            f.write(json.dumps(q) + "\n")
    return paths


def load_queries(path) -> list[dict]:
    records = []
    with open(path, "r", encoding="utf-8") as f:
        for line in f:
            line = line.strip()
            if line:
                records.append(json.loads(line))
    return records


def query_tuples(records: list[dict]) -> list[tuple[SupportInfo, str, str]]:
    """(paper, truth id, query name) triples from raw query records."""
    out = []
    for rec in records:
        p = rec["papers"][0]
        info = paper_support(title=p.get("title", ""), keywords=p.get("keywords", []),
                             authors=p.get("authors", []), org=p.get("org", ""),
                             venue=p.get("venue", ""))
        out.append((info, rec["truth_id"], rec["name"]))
    return out


def assemble_queries(corpus: ReferenceCorpus, records: list[dict],
                     n_candidates: int, rng: np.random.Generator) -> list:
    """Attach candidate lists of exactly ``n_candidates`` experts per query:
    name-variant hits first, trimmed or padded with random other experts,
    always containing the truth."""
    all_ids = [e.id for e in corpus]
    queries = []
    for info, truth_id, name in query_tuples(records):
        cands = corpus.candidate_set(name)
        if truth_id not in cands:
            cands = [truth_id] + cands
        if len(cands) > n_candidates:
            others = [c for c in cands if c != truth_id]
            pick = rng.choice(len(others), size=n_candidates - 1, replace=False)
            cands = sorted([truth_id] + [others[i] for i in pick])
        elif len(cands) < n_candidates:
            pool = [i for i in all_ids if i not in set(cands)]
            need = n_candidates - len(cands)
            pick = rng.choice(len(pool), size=need, replace=False)
            cands = sorted(cands + [pool[i] for i in pick])
        queries.append((info, truth_id, cands))
    return queries
