"""Adversarial fine-tuning toward an external source.

A private generator is split off the pre-trained shared one; a domain
discriminator behind gradient reversal pushes the shared space to hide
the item's origin, an orthogonality penalty keeps private features out of
the shared space, and an external task predictor anchors the private
features to the external domain.  The combined objective keeps the
contrastive triplet term in the loop.
"""
from __future__ import annotations

import json
from dataclasses import dataclass
from typing import TYPE_CHECKING, Sequence

import numpy as np

from . import diffcore as dc
from .corpus import ExternalCorpus, ReferenceCorpus, SupportInfo, sample_triplets
from .encoder import GeneratorParams, encode_batch, tokenize, xavier_uniform
from .pretrain import TrainConfig, TrainError, batch_loss, make_optimizer

if TYPE_CHECKING:
    from .model import LinkingModel

REFERENCE, EXTERNAL = 0, 1  # discriminator class columns


@dataclass(frozen=True)
class AdaptConfig:
    alpha: float = 0.1   # adversarial loss weight
    beta: float = 0.1    # difference loss weight
    gamma: float = 0.1   # external task loss weight
    batch_size_ext: int = 256
    epochs: int = 1
    lr_disc: float = 1e-3
    max_len_ext: int = 64
    hidden: int = 100
    probe_items_per_domain: int = 200
    disc_warmup_steps: int = 0  # discriminator-only steps before the epoch;
                                # a lagging discriminator lets the generator
                                # overshoot through the boundary

    def __post_init__(self):
        if min(self.alpha, self.beta, self.gamma) < 0:
            raise ValueError("loss weights must be >= 0")
        if (self.batch_size_ext < 1 or self.epochs < 0 or self.hidden < 1
                or self.disc_warmup_steps < 0):
            raise ValueError("invalid adapt sizes")
        if self.lr_disc <= 0:
            raise ValueError("lr_disc must be positive")
        if self.max_len_ext < 3:
            raise ValueError("max_len_ext must be >= 3")


@dataclass
class DomainMlp:
    """Two-layer classifier over embeddings: logits = W2^T LeakyReLU(W1^T x)."""

    w1: dc.Tensor  # (d, hidden)
    w2: dc.Tensor  # (hidden, 2)
    slope: float = 0.2

    @classmethod
    def init(cls, prefix: str, d_in: int, hidden: int,
             rng: np.random.Generator) -> "DomainMlp":
        return cls(w1=dc.param(f"{prefix}.w1", xavier_uniform((d_in, hidden), rng)),
                   w2=dc.param(f"{prefix}.w2", xavier_uniform((hidden, 2), rng)))

    def logits(self, x: dc.Tensor) -> dc.Tensor:
        return dc.linear(self.w2, dc.leaky_relu(dc.linear(self.w1, x), self.slope))

    def parameters(self) -> list[dc.Tensor]:
        return [self.w1, self.w2]

    def clone(self, prefix: str) -> "DomainMlp":
        return DomainMlp(w1=dc.param(f"{prefix}.w1", self.w1.data.copy()),
                         w2=dc.param(f"{prefix}.w2", self.w2.data.copy()),
                         slope=self.slope)


def difference_loss(shared_embs: dc.Tensor, private_embs: dc.Tensor) -> dc.Tensor:
    """Sum over items of the squared shared/private dot product."""
    if shared_embs.data.shape != private_embs.data.shape:
        raise ValueError(
            f"shared/private shape mismatch: {shared_embs.data.shape} "
            f"vs {private_embs.data.shape}")
    dots = dc.dot_rows(shared_embs, private_embs)
    return dc.tsum(dc.mul(dots, dots))


def adversarial_loss(disc: DomainMlp, shared_embs: dc.Tensor,
                     domains: np.ndarray, lam: float = 1.0) -> dc.Tensor:
    """Domain BCE behind gradient reversal.

    The discriminator is trained to tell domains apart while the reversed
    gradient pushes the shared generator to confuse it.
    """
    domains = np.asarray(domains, dtype=np.intp)
    present = set(domains.tolist())
    if present != {REFERENCE, EXTERNAL}:
        raise ValueError("adversarial batch must contain both domains")
    return dc.nll_2class(disc.logits(dc.grad_reverse(shared_embs, lam)), domains)


def external_task_loss(pred: DomainMlp, private_embs: dc.Tensor) -> dc.Tensor:
    """Mean -log(1 - p_reference) over external items, no reversal."""
    n = private_embs.data.shape[0]
    if n == 0:
        raise ValueError("external batch is empty")
    labels = np.full(n, EXTERNAL, dtype=np.intp)
    return dc.nll_2class(pred.logits(private_embs), labels)


def _support_tokens(items: Sequence[tuple[SupportInfo, int]], model: "LinkingModel",
                    train_cfg: TrainConfig, cfg: AdaptConfig) -> list[list[int]]:
    """Tokenize support items with per-domain max lengths."""
    out = []
    for info, domain in items:
        max_len = train_cfg.max_len_paper if domain == REFERENCE else cfg.max_len_ext
        out.append(tokenize(info, model.vocab, max_len))
    return out


def finetune_step(model: "LinkingModel", triplet_batch, mixed_batch,
                  ext_batch: Sequence[SupportInfo], corpus: ReferenceCorpus,
                  cfg: AdaptConfig, train_cfg: TrainConfig,
                  optimizer: dc.Adam) -> dict[str, float]:
    """One combined update: L = L_pre + a*L_adv + b*L_diff + c*L_ext.

    ``mixed_batch`` is a sequence of (SupportInfo, domain) pairs covering
    both domains; ``ext_batch`` holds external items only.  Components with
    zero weight are reported but kept out of the gradient graph.
    """
    components: dict[str, float] = {}
    terms: list[dc.Tensor] = []

    pre_loss, _, _ = batch_loss(model, triplet_batch, corpus, train_cfg)
    components["pre"] = float(pre_loss.data)
    terms.append(pre_loss)

    mixed_tokens = _support_tokens(mixed_batch, model, train_cfg, cfg)
    domains = np.array([d for _, d in mixed_batch], dtype=np.intp)
    ext_tokens = [tokenize(info, model.vocab, cfg.max_len_ext) for info in ext_batch]

    def add_term(name: str, weight: float, build) -> None:
        if weight > 0:
            value = build()
            components[name] = float(value.data)
            terms.append(dc.affine(value, mul=weight))
        else:
            with dc.no_grad():
                components[name] = float(build().data)

    shared_mixed = encode_batch(model.shared, mixed_tokens)
    add_term("adv", cfg.alpha,
             lambda: adversarial_loss(model.discriminator, shared_mixed, domains))

    shared_ext = encode_batch(model.shared, ext_tokens)
    private_ext = encode_batch(model.private, ext_tokens)
    # adv and ext are batch means; scale the summed difference loss to a
    # mean as well so the trade-off weights stay batch-size independent
    add_term("diff", cfg.beta,
             lambda: dc.affine(difference_loss(shared_ext, private_ext),
                               mul=1.0 / len(ext_batch)))
    add_term("ext", cfg.gamma, lambda: external_task_loss(model.predictor, private_ext))

    total = dc.sum_tensors(terms) if len(terms) > 1 else terms[0]
    components["total"] = float(total.data)
    for name, value in components.items():
        if not np.isfinite(value):
            raise TrainError(f"non-finite fine-tuning loss component {name!r}")
    dc.backward(total)
    optimizer.step()
    return components


def _external_items(external: ExternalCorpus) -> list[SupportInfo]:
    items = []
    for mention in external:
        items.extend(mention.support)
    return items


def _reference_items(corpus: ReferenceCorpus) -> list[SupportInfo]:
    items = []
    for expert in corpus:
        items.extend(expert.support)
    return items


def _warm_up_discriminator(model: "LinkingModel", ref_items, ext_items,
                           cfg: AdaptConfig, train_cfg: TrainConfig,
                           rng: np.random.Generator) -> None:
    """Train discriminator and predictor on frozen generators so the
    adversarial phase starts against a near-optimal opponent."""
    optimizer = dc.Adam([(model.discriminator.parameters()
                          + model.predictor.parameters(), cfg.lr_disc)],
                        decay=train_cfg.decay)
    half = max(cfg.batch_size_ext // 2, 1)
    for _ in range(cfg.disc_warmup_steps):
        ref_pick = rng.choice(len(ref_items), size=half, replace=len(ref_items) < half)
        ext_pick = rng.choice(len(ext_items), size=half, replace=len(ext_items) < half)
        mixed = ([(ref_items[i], REFERENCE) for i in ref_pick]
                 + [(ext_items[i], EXTERNAL) for i in ext_pick])
        tokens = _support_tokens(mixed, model, train_cfg, cfg)
        with dc.no_grad():
            embs = encode_batch(model.shared, tokens)
            private_embs = encode_batch(model.private,
                                        tokens[half:])
        domains = np.array([d for _, d in mixed], dtype=np.intp)
        # plain BCE, no reversal: only the heads are training here
        disc_loss = dc.nll_2class(model.discriminator.logits(dc.constant(embs.data)),
                                  domains)
        pred_loss = external_task_loss(model.predictor, dc.constant(private_embs.data))
        dc.backward(dc.add(disc_loss, pred_loss))
        optimizer.step()


@dataclass
class FinetuneReport:
    probe_before: float
    probe_after: float
    steps: int


def finetune(model: "LinkingModel", reference: ReferenceCorpus,
             external: ExternalCorpus, cfg: AdaptConfig, train_cfg: TrainConfig,
             seed: int = 0, log_path=None,
             run_probe: bool = True) -> tuple["LinkingModel", FinetuneReport]:
    """Adversarially adapt a pre-trained model toward an external corpus.

    Returns a fine-tuned copy; the input model is untouched.  The private
    generator starts as a copy of the shared one.
    """
    from .evaluation import discriminator_probe

    rng = np.random.default_rng(seed)
    adapted = model.clone()
    if adapted.private is None:
        # A fresh private generator: starting it as a copy of the shared one
        # makes the orthogonality term maximal at step 0 and the transient
        # tears up the shared space before the other losses can anchor it.
        emb_shape = adapted.shared.embedding.data.shape
        adapted.private = GeneratorParams.init(
            "private", emb_shape[0], emb_shape[1], adapted.shared.d_out, rng)
        adapted.discriminator = DomainMlp.init(
            "discriminator", adapted.shared.d_out, cfg.hidden, rng)
        adapted.predictor = DomainMlp.init(
            "predictor", adapted.shared.d_out, cfg.hidden, rng)

    ext_items = _external_items(external)
    ref_items = _reference_items(reference)
    if not ext_items:
        raise TrainError("external corpus has no support items")

    def probe(m: "LinkingModel") -> float:
        sample_rng = np.random.default_rng(seed + 1)
        n = cfg.probe_items_per_domain
        ref_pick = sample_rng.choice(len(ref_items), size=min(n, len(ref_items)),
                                     replace=False)
        ext_pick = sample_rng.choice(len(ext_items), size=min(n, len(ext_items)),
                                     replace=False)
        labeled = ([(ref_items[i], REFERENCE) for i in ref_pick]
                   + [(ext_items[i], EXTERNAL) for i in ext_pick])
        return discriminator_probe(m, labeled, max_len=cfg.max_len_ext,
                                   rng=np.random.default_rng(seed + 2))

    probe_before = probe(adapted) if run_probe else float("nan")

    if cfg.disc_warmup_steps and cfg.epochs > 0:
        _warm_up_discriminator(adapted, ref_items, ext_items, cfg, train_cfg, rng)

    optimizer = make_optimizer(adapted, train_cfg, lr_disc=cfg.lr_disc)
    steps = 0
    log_file = open(log_path, "w", encoding="utf-8") if log_path else None
    try:
        for epoch in range(cfg.epochs):
            optimizer.set_epoch(epoch)
            triplets = sample_triplets(reference, train_cfg.L, train_cfg.n_neg,
                                       train_cfg.per_expert, rng)
            triplet_order = rng.permutation(len(triplets))
            ext_order = rng.permutation(len(ext_items))
            cursor = 0
            for start in range(0, len(ext_order), cfg.batch_size_ext):
                ext_batch = [ext_items[i] for i in ext_order[start:start + cfg.batch_size_ext]]
                ref_pick = rng.choice(len(ref_items), size=len(ext_batch),
                                      replace=len(ref_items) < len(ext_batch))
                mixed = ([(ref_items[i], REFERENCE) for i in ref_pick]
                         + [(s, EXTERNAL) for s in ext_batch])
                batch_idx = [triplet_order[(cursor + i) % len(triplet_order)]
                             for i in range(train_cfg.batch_size)]
                cursor += train_cfg.batch_size
                triplet_batch = [triplets[i] for i in batch_idx]
                components = finetune_step(adapted, triplet_batch, mixed, ext_batch,
                                           reference, cfg, train_cfg, optimizer)
                steps += 1
                if log_file:
                    log_file.write(json.dumps(
                        {"step": steps, **{k: components[k] for k in
                                           ("pre", "adv", "diff", "ext", "total")}}) + "\n")
                    log_file.flush()
    finally:
        if log_file:
            log_file.close()

    probe_after = probe(adapted) if run_probe else float("nan")
    return adapted, FinetuneReport(probe_before=probe_before,
                                   probe_after=probe_after, steps=steps)
