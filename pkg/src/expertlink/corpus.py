"""Expert corpora: data model, JSONL ingestion, instance/triplet sampling,
and name-variant candidate generation.

A reference corpus holds experts, each backed by a set of support items
(papers).  External corpora hold mentions (news sentences, profile
attributes) to be linked against the reference side.
"""
from __future__ import annotations

import json
import re
from dataclasses import dataclass, field
from typing import Iterable, Iterator

import numpy as np

PAPER_FIELDS = ("title", "keywords", "authors", "org", "venue")

NEWS_WINDOW = 6  # sentences kept on each side of a mention


class CorpusError(ValueError):
    """Raised on malformed corpus files or invariant violations."""


@dataclass(frozen=True)
class SupportInfo:
    """One atomic text item describing an expert: a paper record, a single
    sentence, or a profile attribute.

    ``text_fields`` is an ordered tuple of (field_name, value) pairs; the
    order is part of the identity of the item and survives serialization.
    """

    kind: str  # "paper" | "sentence" | "attribute"
    text_fields: tuple[tuple[str, str], ...]

    def __post_init__(self) -> None:
        if self.kind not in ("paper", "sentence", "attribute"):
            raise CorpusError(f"unknown support kind: {self.kind!r}")
        if not any(v.strip() for _, v in self.text_fields):
            raise CorpusError("support item has no non-empty text field")

    def text(self) -> str:
        """All field values joined in stored order."""
        return " ".join(v for _, v in self.text_fields if v)

    def to_obj(self) -> dict:
        return {"kind": self.kind, "fields": [[n, v] for n, v in self.text_fields]}

    @classmethod
    def from_obj(cls, obj: dict) -> "SupportInfo":
        return cls(kind=obj["kind"],
                   text_fields=tuple((n, v) for n, v in obj["fields"]))


@dataclass
class Expert:
    id: str
    name: str
    support: list[SupportInfo]
    source: str = "reference"  # "reference" | "external"

    def __post_init__(self) -> None:
        if not self.support:
            raise CorpusError(f"expert {self.id!r} has empty support")

    @property
    def n_support(self) -> int:
        return len(self.support)


@dataclass(frozen=True)
class ExpertInstance:
    """A sampled subset of one expert's support items, by index."""

    expert_id: str
    items: tuple[int, ...]

    def __post_init__(self) -> None:
        if not self.items:
            raise CorpusError("instance must contain at least one item")
        if len(set(self.items)) != len(self.items):
            raise CorpusError("instance items must be distinct")


@dataclass(frozen=True)
class TripletBatch:
    """Anchor/positive from one expert, negatives from others.

    Anchor and positive are item-disjoint by construction.
    """

    anchor: ExpertInstance
    positive: ExpertInstance
    negatives: tuple[ExpertInstance, ...]

    def __post_init__(self) -> None:
        if self.anchor.expert_id != self.positive.expert_id:
            raise CorpusError("anchor and positive must share an expert")
        if set(self.anchor.items) & set(self.positive.items):
            raise CorpusError("anchor and positive instances overlap")
        for neg in self.negatives:
            if neg.expert_id == self.anchor.expert_id:
                raise CorpusError("negative drawn from the anchor expert")


@dataclass
class ExternalMention:
    mention_id: str
    name: str
    support: list[SupportInfo]
    truth_expert_id: str | None = None

    def __post_init__(self) -> None:
        if not self.support:
            raise CorpusError(f"mention {self.mention_id!r} has empty support")


# ---------------------------------------------------------------------------
# Name variants

_WS = re.compile(r"\s+")


def generate_name_variants(name: str) -> set[str]:
    """All lowercased match keys for a person name.

    Includes the name itself, the rotation moving the last token first, and
    the initialized forms of both orderings (every token but the last
    reduced to its first letter).  "Bo Li" yields {"bo li", "li bo",
    "b li", "l bo"}.
    """
    tokens = [t for t in _WS.split(name.strip().lower()) if t]
    if not tokens:
        raise CorpusError("cannot build variants of an empty name")
    if len(tokens) == 1:
        return {tokens[0]}

    def initialed(toks: list[str]) -> str:
        return " ".join([t[0] for t in toks[:-1]] + [toks[-1]])

    rotated = [tokens[-1]] + tokens[:-1]
    return {
        " ".join(tokens),
        " ".join(rotated),
        initialed(tokens),
        initialed(rotated),
    }


class NameIndex:
    """Lowercased variant -> expert ids, for candidate generation."""

    def __init__(self, experts: Iterable[Expert]):
        self._by_variant: dict[str, set[str]] = {}
        for e in experts:
            for v in generate_name_variants(e.name):
                self._by_variant.setdefault(v, set()).add(e.id)

    def candidates(self, query_name: str, fuzzy: bool = False) -> list[str]:
        """Ids of experts whose variant set intersects the query's, sorted.

        With ``fuzzy`` enabled, falls back to edit-distance-1 matches over
        indexed variants when the exact intersection is empty.
        """
        hits: set[str] = set()
        variants = generate_name_variants(query_name)
        for v in variants:
            hits |= self._by_variant.get(v, set())
        if not hits and fuzzy:
            for v in variants:
                for indexed, ids in self._by_variant.items():
                    if _edit_distance_at_most_1(v, indexed):
                        hits |= ids
        return sorted(hits)


def _edit_distance_at_most_1(a: str, b: str) -> bool:
    if a == b:
        return True
    la, lb = len(a), len(b)
    if abs(la - lb) > 1:
        return False
    if la > lb:
        a, b, la, lb = b, a, lb, la
    # a is the shorter (or equal) string
    i = j = 0
    edited = False
    while i < la and j < lb:
        if a[i] == b[j]:
            i += 1
            j += 1
            continue
        if edited:
            return False
        edited = True
        if la == lb:
            i += 1
        j += 1
    return True


# ---------------------------------------------------------------------------
# Corpora

class ReferenceCorpus:
    """Immutable-after-load set of reference experts, indexed by id and by
    name variant."""

    def __init__(self, experts: list[Expert]):
        self.experts: dict[str, Expert] = {}
        for e in experts:
            if e.id in self.experts:
                raise CorpusError(f"duplicate expert id {e.id!r}")
            self.experts[e.id] = e
        self._index = NameIndex(experts)

    def __len__(self) -> int:
        return len(self.experts)

    def __iter__(self) -> Iterator[Expert]:
        return iter(self.experts.values())

    def get(self, expert_id: str) -> Expert:
        try:
            return self.experts[expert_id]
        except KeyError:
            raise CorpusError(f"unknown expert id {expert_id!r}") from None

    def candidate_set(self, query_name: str, fuzzy: bool = False) -> list[str]:
        return self._index.candidates(query_name, fuzzy=fuzzy)


class ExternalCorpus:
    def __init__(self, mentions: list[ExternalMention]):
        self.mentions: dict[str, ExternalMention] = {}
        for m in mentions:
            if m.mention_id in self.mentions:
                raise CorpusError(f"duplicate mention id {m.mention_id!r}")
            self.mentions[m.mention_id] = m

    def __len__(self) -> int:
        return len(self.mentions)

    def __iter__(self) -> Iterator[ExternalMention]:
        return iter(self.mentions.values())

    def get(self, mention_id: str) -> ExternalMention:
        try:
            return self.mentions[mention_id]
        except KeyError:
            raise CorpusError(f"unknown mention id {mention_id!r}") from None


# ---------------------------------------------------------------------------
# Loading / saving

def _iter_jsonl(path) -> Iterator[tuple[int, dict]]:
    with open(path, "r", encoding="utf-8") as f:
        for lineno, line in enumerate(f, 1):
            line = line.strip()
            if not line:
                continue
            try:
                yield lineno, json.loads(line)
            except json.JSONDecodeError as exc:
                raise CorpusError(f"{path}:{lineno}: malformed JSON ({exc.msg})") from None


def _require(obj: dict, key: str, path, lineno: int):
    if key not in obj:
        raise CorpusError(f"{path}:{lineno}: missing required field {key!r}")
    return obj[key]


def paper_support(title: str = "", keywords: Iterable[str] = (),
                  authors: Iterable[str] = (), org: str = "",
                  venue: str = "") -> SupportInfo:
    """A paper record in the fixed field order used by the encoder."""
    values = (title, " ".join(keywords), " ".join(authors), org, venue)
    return SupportInfo(kind="paper",
                       text_fields=tuple(zip(PAPER_FIELDS, values)))


_SENT_SPLIT = re.compile(r"(?<=[.!?])\s+")


def load_corpus(path, schema: str):
    """Load a line-delimited JSON corpus file.

    ``schema`` selects the record shape: "reference" yields a
    ReferenceCorpus; "news" and "linkedin" yield ExternalCorpus.  Malformed
    lines raise CorpusError with the offending line number; a duplicate id
    rejects the whole load.
    """
    if schema == "reference":
        experts = []
        for lineno, obj in _iter_jsonl(path):
            support = []
            for p in _require(obj, "papers", path, lineno):
                support.append(paper_support(
                    title=p.get("title", ""),
                    keywords=p.get("keywords", []),
                    authors=p.get("authors", []),
                    org=p.get("org", ""),
                    venue=p.get("venue", ""),
                ))
            try:
                experts.append(Expert(id=_require(obj, "id", path, lineno),
                                      name=_require(obj, "name", path, lineno),
                                      support=support))
            except CorpusError as exc:
                raise CorpusError(f"{path}:{lineno}: {exc}") from None
        return ReferenceCorpus(experts)

    if schema == "news":
        mentions = []
        for lineno, obj in _iter_jsonl(path):
            before = _require(obj, "sentences_before", path, lineno)
            after = _require(obj, "sentences_after", path, lineno)
            support = [SupportInfo("sentence", (("sentence", s),))
                       for s in before[-NEWS_WINDOW:]]
            support += [SupportInfo("sentence", (("sentence", s),))
                        for s in after[:NEWS_WINDOW]]
            try:
                mentions.append(ExternalMention(
                    mention_id=_require(obj, "mention_id", path, lineno),
                    name=_require(obj, "name", path, lineno),
                    support=support,
                    truth_expert_id=obj.get("truth_id"),
                ))
            except CorpusError as exc:
                raise CorpusError(f"{path}:{lineno}: {exc}") from None
        return ExternalCorpus(mentions)

    if schema == "linkedin":
        mentions = []
        for lineno, obj in _iter_jsonl(path):
            support = [
                SupportInfo("attribute", (("affiliation", _require(obj, "affiliation", path, lineno)),)),
                SupportInfo("attribute", (("skills", " ".join(_require(obj, "skills", path, lineno))),)),
            ]
            summary = _require(obj, "summary", path, lineno)
            for sent in _SENT_SPLIT.split(summary):
                if sent.strip():
                    support.append(SupportInfo("sentence", (("sentence", sent),)))
            try:
                mentions.append(ExternalMention(
                    mention_id=_require(obj, "user_id", path, lineno),
                    name=_require(obj, "name", path, lineno),
                    support=support,
                    truth_expert_id=obj.get("truth_id"),
                ))
            except CorpusError as exc:
                raise CorpusError(f"{path}:{lineno}: {exc}") from None
        return ExternalCorpus(mentions)

    raise CorpusError(f"unknown corpus schema {schema!r}")


def save_reference_corpus(path, corpus: ReferenceCorpus) -> None:
    """Write a ReferenceCorpus back out in the reference JSONL schema."""
    with open(path, "w", encoding="utf-8") as f:
        for e in corpus:
            papers = []
            for s in e.support:
                fields = dict(s.text_fields)
                papers.append({
                    "title": fields.get("title", ""),
                    "keywords": fields.get("keywords", "").split(),
                    "authors": fields.get("authors", "").split(),
                    "org": fields.get("org", ""),
                    "venue": fields.get("venue", ""),
                })
            f.write(json.dumps({"id": e.id, "name": e.name, "papers": papers},
                               ensure_ascii=False) + "\n")


# ---------------------------------------------------------------------------
# Sampling

def sample_instance(expert: Expert, cap: int,
                    rng: np.random.Generator) -> ExpertInstance:
    """Uniformly draw min(n_support, cap) distinct items of one expert."""
    if cap < 1:
        raise CorpusError("instance cap must be >= 1")
    n = expert.n_support
    if n == 0:
        raise CorpusError(f"expert {expert.id!r} has no support to sample")
    k = min(n, cap)
    idx = rng.choice(n, size=k, replace=False)
    return ExpertInstance(expert_id=expert.id, items=tuple(sorted(int(i) for i in idx)))


def eligible_experts(corpus: ReferenceCorpus, cap: int) -> list[Expert]:
    """Experts with enough support for a disjoint anchor/positive pair."""
    return [e for e in corpus if e.n_support >= 2 * cap]


def sample_triplets(corpus: ReferenceCorpus, cap: int, n_neg: int,
                    per_expert: int, rng: np.random.Generator) -> list[TripletBatch]:
    """Sample training triplets over all eligible experts.

    Each eligible expert contributes ``per_expert`` anchors.  Anchor and
    positive are drawn disjointly from the same expert; negatives prefer
    experts reachable through the anchor's name variants, falling back to a
    uniform draw over the remaining eligible experts.
    """
    pool = eligible_experts(corpus, cap)
    if len(pool) < 2:
        raise CorpusError(
            f"need at least 2 experts with >= {2 * cap} support items, found {len(pool)}")
    pool_ids = [e.id for e in pool]
    pool_set = set(pool_ids)

    triplets: list[TripletBatch] = []
    for expert in pool:
        same_name = [cid for cid in corpus.candidate_set(expert.name)
                     if cid != expert.id and cid in pool_set]
        others = [eid for eid in pool_ids if eid != expert.id]
        for _ in range(per_expert):
            perm = rng.permutation(expert.n_support)
            anchor = ExpertInstance(expert.id, tuple(sorted(int(i) for i in perm[:cap])))
            positive = ExpertInstance(expert.id, tuple(sorted(int(i) for i in perm[cap:2 * cap])))

            neg_ids: list[str] = []
            if same_name:
                take = min(n_neg, len(same_name))
                neg_ids.extend(str(x) for x in rng.choice(same_name, size=take, replace=False))
            if len(neg_ids) < n_neg:
                remaining = [eid for eid in others if eid not in set(neg_ids)]
                need = n_neg - len(neg_ids)
                if need >= len(remaining):
                    neg_ids.extend(remaining)
                else:
                    neg_ids.extend(str(x) for x in rng.choice(remaining, size=need, replace=False))
            negatives = tuple(sample_instance(corpus.get(nid), cap, rng) for nid in neg_ids)
            triplets.append(TripletBatch(anchor=anchor, positive=positive, negatives=negatives))
    return triplets
