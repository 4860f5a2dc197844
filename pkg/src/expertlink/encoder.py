"""Support-item encoder: vocabulary, tokenization, and a trainable
mean-pooled embedding + projection generator producing unit-length vectors.

Two generators with identical shape are used downstream: a shared one
(trained contrastively, then adversarially aligned) and a private one for
external-only features.
"""
from __future__ import annotations

import re
from collections import Counter
from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np

from . import diffcore as dc
from .corpus import ExpertInstance, ReferenceCorpus, SupportInfo

PAD, UNK, CLS, SEP = 0, 1, 2, 3
SPECIAL_TOKENS = ("<pad>", "<unk>", "<cls>", "<sep>")

_TOKEN = re.compile(r"[a-z0-9]+")


def text_tokens(text: str) -> list[str]:
    return _TOKEN.findall(text.lower())


@dataclass(frozen=True)
class Vocab:
    token_to_id: dict[str, int]
    id_to_token: tuple[str, ...]

    @property
    def size(self) -> int:
        return len(self.id_to_token)

    def lookup(self, token: str) -> int:
        return self.token_to_id.get(token, UNK)

    def save(self, path) -> None:
        with open(path, "w", encoding="utf-8") as f:
            for tok in self.id_to_token:
                f.write(tok + "\n")

    @classmethod
    def load(cls, path) -> "Vocab":
        with open(path, "r", encoding="utf-8") as f:
            tokens = [line.rstrip("\n") for line in f if line.rstrip("\n")]
        if tuple(tokens[:4]) != SPECIAL_TOKENS:
            raise ValueError(f"vocab file {path} does not start with the special tokens")
        return cls(token_to_id={t: i for i, t in enumerate(tokens)},
                   id_to_token=tuple(tokens))


def build_vocab(corpora: Sequence, min_freq: int = 1) -> Vocab:
    """Frequency-then-lexicographic vocabulary over every support item.

    Tokens seen fewer than ``min_freq`` times map to UNK.
    """
    if not corpora:
        raise ValueError("build_vocab needs at least one corpus")
    counts: Counter[str] = Counter()
    for corpus in corpora:
        for entry in corpus:
            for info in entry.support:
                counts.update(text_tokens(info.text()))
    kept = sorted((t for t, c in counts.items() if c >= min_freq),
                  key=lambda t: (-counts[t], t))
    tokens = list(SPECIAL_TOKENS) + kept
    return Vocab(token_to_id={t: i for i, t in enumerate(tokens)},
                 id_to_token=tuple(tokens))


def tokenize(info: SupportInfo, vocab: Vocab, max_len: int) -> list[int]:
    """CLS + field tokens in stored field order + SEP, truncated to
    ``max_len`` with CLS and SEP always kept."""
    if max_len < 3:
        raise ValueError("max_len must be >= 3")
    ids = [CLS]
    for _, value in info.text_fields:
        ids.extend(vocab.lookup(t) for t in text_tokens(value))
    ids.append(SEP)
    if len(ids) > max_len:
        ids = ids[:max_len - 1] + [SEP]
    return ids


# ---------------------------------------------------------------------------
# Generator

@dataclass
class GeneratorParams:
    """Trainable embedding table + tanh projection, L2-normalized output."""

    embedding: dc.Tensor  # (vocab, d_tok)
    projection: dc.Tensor  # (d_tok, d_out)

    @property
    def d_out(self) -> int:
        return self.projection.data.shape[1]

    @classmethod
    def init(cls, prefix: str, vocab_size: int, d_tok: int, d_out: int,
             rng: np.random.Generator) -> "GeneratorParams":
        emb = rng.uniform(-0.05, 0.05, size=(vocab_size, d_tok))
        proj = xavier_uniform((d_tok, d_out), rng)
        return cls(embedding=dc.param(f"{prefix}.embedding", emb),
                   projection=dc.param(f"{prefix}.projection", proj))

    def parameters(self) -> list[dc.Tensor]:
        return [self.embedding, self.projection]

    def clone(self, prefix: str) -> "GeneratorParams":
        return GeneratorParams(
            embedding=dc.param(f"{prefix}.embedding", self.embedding.data.copy()),
            projection=dc.param(f"{prefix}.projection", self.projection.data.copy()))


def xavier_uniform(shape: tuple[int, int], rng: np.random.Generator,
                   gain: float = 1.0) -> np.ndarray:
    bound = gain * np.sqrt(6.0 / (shape[0] + shape[1]))
    return rng.uniform(-bound, bound, size=shape)


def encode_batch(gen: GeneratorParams, token_lists: Sequence[Sequence[int]]) -> dc.Tensor:
    """Encode several token sequences at once -> (n, d_out) unit rows."""
    for i, toks in enumerate(token_lists):
        if not toks:
            raise ValueError(f"token sequence {i} is empty")
        if all(t == PAD for t in toks):
            raise ValueError(f"token sequence {i} is all padding")
    means = dc.embed_mean(gen.embedding, token_lists)
    projected = dc.tanh(dc.linear(gen.projection, means))
    return dc.l2norm_rows(projected)


def encode(gen: GeneratorParams, tokens: Sequence[int]) -> dc.Tensor:
    """Encode one token sequence -> unit vector of dimension d_out."""
    rows = encode_batch(gen, [tokens])
    y = rows.data[0]

    def back(g):
        return [(rows, g[None, :])]

    return dc.custom(y, (rows,), back)


def instance_token_lists(instance: ExpertInstance, corpus: ReferenceCorpus,
                         vocab: Vocab, max_len: int) -> list[list[int]]:
    expert = corpus.get(instance.expert_id)
    lists = []
    for idx in instance.items:
        if idx < 0 or idx >= expert.n_support:
            raise ValueError(
                f"instance item {idx} out of range for expert {expert.id!r} "
                f"with {expert.n_support} items")
        lists.append(tokenize(expert.support[idx], vocab, max_len))
    return lists


def encode_instance(gen: GeneratorParams, instance: ExpertInstance,
                    corpus: ReferenceCorpus, vocab: Vocab,
                    max_len: int) -> dc.Tensor:
    """One embedding row per instance item, order preserved."""
    return encode_batch(gen, instance_token_lists(instance, corpus, vocab, max_len))


# ---------------------------------------------------------------------------
# Precomputed embeddings

class FixedEmbeddingProvider:
    """Frozen per-item vectors loaded from disk, L2-normalized on ingest."""

    def __init__(self, vectors: dict[str, np.ndarray], d_out: int):
        self.d_out = d_out
        self.vectors: dict[str, np.ndarray] = {}
        for key, vec in vectors.items():
            if vec.shape != (d_out,):
                raise ValueError(
                    f"embedding for {key!r} has dimension {vec.shape[0]}, expected {d_out}")
            norm = float(np.linalg.norm(vec))
            if norm == 0.0:
                raise ValueError(f"embedding for {key!r} is the zero vector")
            self.vectors[key] = vec / norm

    def get(self, item_id: str) -> np.ndarray:
        try:
            return self.vectors[item_id]
        except KeyError:
            raise KeyError(f"no stored embedding for item {item_id!r}") from None

    def __contains__(self, item_id: str) -> bool:
        return item_id in self.vectors


def import_embeddings(path, d_out: int) -> FixedEmbeddingProvider:
    """Read "id<TAB>v1,v2,...,vd" lines into a frozen provider."""
    vectors: dict[str, np.ndarray] = {}
    with open(path, "r", encoding="utf-8") as f:
        for lineno, line in enumerate(f, 1):
            line = line.rstrip("\n")
            if not line:
                continue
            try:
                item_id, values = line.split("\t", 1)
                vec = np.array([float(v) for v in values.split(",")], dtype=np.float64)
            except ValueError:
                raise ValueError(f"{path}:{lineno}: malformed embedding line") from None
            vectors[item_id] = vec
    return FixedEmbeddingProvider(vectors, d_out)


def export_embeddings(path, items: Iterable[tuple[str, np.ndarray]]) -> None:
    with open(path, "w", encoding="utf-8") as f:
        for item_id, vec in items:
            f.write(item_id + "\t" + ",".join(repr(float(v)) for v in vec) + "\n")
