"""Model bundle: vocabulary, shared/private generators, metric, and the
adversarial heads, with single-file checkpointing and frozen scoring
helpers for evaluation and serving."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import diffcore as dc
from .adapt import DomainMlp
from .corpus import SupportInfo
from .encoder import GeneratorParams, Vocab, encode_batch, tokenize
from .metric import KernelBank, MetricParams, score


@dataclass
class LinkingModel:
    vocab: Vocab
    shared: GeneratorParams
    metric: MetricParams
    private: GeneratorParams | None = None
    discriminator: DomainMlp | None = None
    predictor: DomainMlp | None = None

    @classmethod
    def init(cls, vocab: Vocab, d_tok: int, d_out: int,
             rng: np.random.Generator, bank: KernelBank | None = None) -> "LinkingModel":
        bank = bank or KernelBank.default()
        return cls(vocab=vocab,
                   shared=GeneratorParams.init("shared", vocab.size, d_tok, d_out, rng),
                   metric=MetricParams.init("metric", bank, rng))

    # -- parameter access -------------------------------------------------

    def generator_parameters(self) -> list[dc.Tensor]:
        params = self.shared.parameters()
        if self.private is not None:
            params = params + self.private.parameters()
        return params

    def head_parameters(self) -> list[dc.Tensor]:
        params: list[dc.Tensor] = []
        if self.discriminator is not None:
            params += self.discriminator.parameters()
        if self.predictor is not None:
            params += self.predictor.parameters()
        return params

    def all_parameters(self) -> list[dc.Tensor]:
        return (self.generator_parameters() + self.metric.parameters()
                + self.head_parameters())

    def named_arrays(self) -> dict[str, np.ndarray]:
        return {p.name: p.data for p in self.all_parameters()}

    def load_arrays(self, arrays: dict[str, np.ndarray]) -> None:
        for p in self.all_parameters():
            if p.name not in arrays:
                raise KeyError(f"checkpoint is missing parameter {p.name!r}")
            if arrays[p.name].shape != p.data.shape:
                raise ValueError(
                    f"parameter {p.name!r} shape {arrays[p.name].shape} "
                    f"does not match {p.data.shape}")
            p.data = arrays[p.name].copy()

    def clone(self) -> "LinkingModel":
        return LinkingModel(
            vocab=self.vocab,
            shared=self.shared.clone("shared"),
            metric=self.metric.clone("metric"),
            private=self.private.clone("private") if self.private else None,
            discriminator=(self.discriminator.clone("discriminator")
                           if self.discriminator else None),
            predictor=self.predictor.clone("predictor") if self.predictor else None)

    # -- persistence -------------------------------------------------------

    def save(self, path, extra_meta: dict | None = None) -> None:
        meta = {
            "vocab": list(self.vocab.id_to_token),
            "kernel_mus": self.metric.bank.mus.tolist(),
            "kernel_sigmas": self.metric.bank.sigmas.tolist(),
            "has_private": self.private is not None,
        }
        if extra_meta:
            meta.update(extra_meta)
        dc.save_checkpoint(path, self.named_arrays(), meta)

    @classmethod
    def load(cls, path) -> "LinkingModel":
        arrays, meta = dc.load_checkpoint(path)
        tokens = tuple(meta["vocab"])
        vocab = Vocab(token_to_id={t: i for i, t in enumerate(tokens)},
                      id_to_token=tokens)
        bank = KernelBank(mus=np.array(meta["kernel_mus"]),
                          sigmas=np.array(meta["kernel_sigmas"]))
        model = cls(
            vocab=vocab,
            shared=GeneratorParams(
                embedding=dc.param("shared.embedding", arrays["shared.embedding"]),
                projection=dc.param("shared.projection", arrays["shared.projection"])),
            metric=MetricParams(bank=bank,
                                w1=dc.param("metric.w1", arrays["metric.w1"]),
                                w2=dc.param("metric.w2", arrays["metric.w2"])))
        if meta.get("has_private"):
            model.private = GeneratorParams(
                embedding=dc.param("private.embedding", arrays["private.embedding"]),
                projection=dc.param("private.projection", arrays["private.projection"]))
            model.discriminator = DomainMlp(
                w1=dc.param("discriminator.w1", arrays["discriminator.w1"]),
                w2=dc.param("discriminator.w2", arrays["discriminator.w2"]))
            model.predictor = DomainMlp(
                w1=dc.param("predictor.w1", arrays["predictor.w1"]),
                w2=dc.param("predictor.w2", arrays["predictor.w2"]))
        return model

    # -- frozen inference --------------------------------------------------

    def embed_items(self, infos: list[SupportInfo], max_len: int,
                    generator: GeneratorParams | None = None) -> np.ndarray:
        """Unit embeddings of support items without tape recording."""
        gen = generator if generator is not None else self.shared
        with dc.no_grad():
            token_lists = [tokenize(info, self.vocab, max_len) for info in infos]
            return encode_batch(gen, token_lists).data

    def score_arrays(self, query: np.ndarray, candidate: np.ndarray) -> float:
        """Score two frozen embedding matrices (query side first)."""
        with dc.no_grad():
            return float(score(self.metric, dc.constant(query),
                               dc.constant(candidate)).data)


def models_equal(a: LinkingModel, b: LinkingModel) -> bool:
    arrays_a, arrays_b = a.named_arrays(), b.named_arrays()
    if arrays_a.keys() != arrays_b.keys():
        return False
    return all(np.array_equal(arrays_a[k], arrays_b[k]) for k in arrays_a)
