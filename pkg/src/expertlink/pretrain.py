"""Contrastive pre-training: expert discrimination with a triplet hinge
over sampled instance pairs."""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import TYPE_CHECKING, Sequence

import numpy as np

from . import diffcore as dc
from .corpus import ReferenceCorpus, TripletBatch, sample_triplets
from .encoder import encode_batch, instance_token_lists
from .metric import score

if TYPE_CHECKING:
    from .model import LinkingModel


class TrainError(RuntimeError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    """Pre-training hyperparameters; defaults follow the reference setup."""

    L: int = 6                  # max items per sampled instance
    n_neg: int = 9
    margin: float = 1.0
    batch_size: int = 32
    epochs: int = 20
    lr_encoder: float = 2e-5
    lr_metric: float = 2e-3
    decay: float = 0.96
    seed: int = 0
    max_len_paper: int = 208
    per_expert: int = 10        # anchors sampled per eligible expert per epoch
    d_tok: int = 64
    d_out: int = 64
    min_freq: int = 1

    def __post_init__(self):
        if min(self.L, self.n_neg, self.batch_size, self.per_expert,
               self.d_tok, self.d_out, self.min_freq) < 1:
            raise ValueError("counts in TrainConfig must be positive")
        if self.epochs < 0:
            raise ValueError("epochs must be >= 0")
        if self.lr_encoder <= 0 or self.lr_metric <= 0:
            raise ValueError("learning rates must be positive")
        if not 0 < self.decay <= 1:
            raise ValueError("decay must lie in (0, 1]")
        if not 0 <= self.margin < 2:
            raise ValueError("margin must lie in [0, 2): the score range is (-1, 1)")
        if self.max_len_paper < 3:
            raise ValueError("max_len_paper must be >= 3")


@dataclass
class TrainHistory:
    losses: list[float] = field(default_factory=list)
    violation_rates: list[float] = field(default_factory=list)

    def append(self, loss: float, violation_rate: float) -> None:
        self.losses.append(loss)
        self.violation_rates.append(violation_rate)


def triplet_loss(score_pos: dc.Tensor, score_negs: Sequence[dc.Tensor],
                 margin: float) -> dc.Tensor:
    """sum over negatives of max(0, margin + f(e, e-) - f(e, e+))."""
    terms = [dc.relu(dc.affine(dc.sub(neg, score_pos), mul=1.0, add=margin))
             for neg in score_negs]
    return dc.sum_tensors(terms) if len(terms) > 1 else terms[0]


TokenGroups = list[list[list[int]]]  # [anchor, positive, neg...] -> item token lists


def resolve_triplet(t: TripletBatch, corpus: ReferenceCorpus, vocab,
                    max_len: int) -> TokenGroups:
    return [instance_token_lists(inst, corpus, vocab, max_len)
            for inst in (t.anchor, t.positive, *t.negatives)]


def batch_scores(model: "LinkingModel", resolved: Sequence[TokenGroups]
                 ) -> list[tuple[dc.Tensor, list[dc.Tensor]]]:
    """Score every (anchor, positive) and (anchor, negative) pair.

    All support items in the batch are encoded in one pass through the
    shared generator, then sliced per instance.
    """
    token_lists: list[list[int]] = []
    spans: list[list[tuple[int, int]]] = []
    for groups in resolved:
        triple_spans = []
        for lists in groups:
            triple_spans.append((len(token_lists), len(token_lists) + len(lists)))
            token_lists.extend(lists)
        spans.append(triple_spans)

    embs = encode_batch(model.shared, token_lists)
    out = []
    for triple_spans in spans:
        rows = [dc.slice_rows(embs, a, b) for a, b in triple_spans]
        anchor = rows[0]
        pos_score = score(model.metric, anchor, rows[1])
        neg_scores = [score(model.metric, anchor, r) for r in rows[2:]]
        out.append((pos_score, neg_scores))
    return out


def resolved_batch_loss(model: "LinkingModel", resolved: Sequence[TokenGroups],
                        margin: float) -> tuple[dc.Tensor, int, int]:
    """Mean per-anchor triplet loss plus margin-violation counts."""
    scored = batch_scores(model, resolved)
    losses = []
    violations = 0
    pairs = 0
    for pos_score, neg_scores in scored:
        losses.append(triplet_loss(pos_score, neg_scores, margin))
        for neg in neg_scores:
            pairs += 1
            if margin + float(neg.data) - float(pos_score.data) > 0.0:
                violations += 1
    total = dc.sum_tensors(losses) if len(losses) > 1 else losses[0]
    return dc.affine(total, mul=1.0 / len(losses)), violations, pairs


def batch_loss(model: "LinkingModel", triplets: Sequence[TripletBatch],
               corpus: ReferenceCorpus, cfg: TrainConfig
               ) -> tuple[dc.Tensor, int, int]:
    resolved = [resolve_triplet(t, corpus, model.vocab, cfg.max_len_paper)
                for t in triplets]
    return resolved_batch_loss(model, resolved, cfg.margin)


def pretrain_epoch(model: "LinkingModel", triplets: Sequence[TripletBatch],
                   corpus: ReferenceCorpus, cfg: TrainConfig,
                   rng: np.random.Generator,
                   optimizer: dc.Adam) -> tuple[float, float]:
    """One shuffled pass; returns (mean per-anchor loss, violation rate)."""
    if not triplets:
        raise TrainError("no triplets to train on")
    order = rng.permutation(len(triplets))
    loss_sum = 0.0
    violations = 0
    pairs = 0
    for start in range(0, len(order), cfg.batch_size):
        batch = [triplets[i] for i in order[start:start + cfg.batch_size]]
        loss, batch_viol, batch_pairs = batch_loss(model, batch, corpus, cfg)
        if not np.isfinite(loss.data):
            raise TrainError(
                f"non-finite loss in batch starting at triplet {start}")
        dc.backward(loss)
        optimizer.step()
        loss_sum += float(loss.data) * len(batch)
        violations += batch_viol
        pairs += batch_pairs
    return loss_sum / len(triplets), violations / max(pairs, 1)


def make_optimizer(model: "LinkingModel", cfg: TrainConfig,
                   lr_disc: float | None = None) -> dc.Adam:
    groups: list[tuple[list[dc.Tensor], float]] = [
        (model.generator_parameters(), cfg.lr_encoder),
        (model.metric.parameters(), cfg.lr_metric),
    ]
    head_params = model.head_parameters()
    if head_params:
        if lr_disc is None:
            raise TrainError("model has discriminator heads but no lr_disc given")
        groups.append((head_params, lr_disc))
    return dc.Adam(groups, decay=cfg.decay)


def pretrain(model: "LinkingModel", corpus: ReferenceCorpus, cfg: TrainConfig,
             log_path=None) -> TrainHistory:
    """Train the shared generator and metric in place.

    Triplets are resampled every epoch; the best-by-loss parameter snapshot
    is restored at the end.
    """
    history = TrainHistory()
    if cfg.epochs == 0:
        return history
    rng = np.random.default_rng(cfg.seed)
    optimizer = make_optimizer(model, cfg)
    best_loss = np.inf
    best_arrays: dict[str, np.ndarray] | None = None
    log_file = open(log_path, "w", encoding="utf-8") if log_path else None
    try:
        for epoch in range(cfg.epochs):
            optimizer.set_epoch(epoch)
            triplets = sample_triplets(corpus, cfg.L, cfg.n_neg, cfg.per_expert, rng)
            loss, violation_rate = pretrain_epoch(
                model, triplets, corpus, cfg, rng, optimizer)
            history.append(loss, violation_rate)
            if log_file:
                log_file.write(json.dumps(
                    {"epoch": epoch, "loss": loss,
                     "violation_rate": violation_rate}) + "\n")
                log_file.flush()
            if loss < best_loss:
                best_loss = loss
                best_arrays = {k: v.copy() for k, v in model.named_arrays().items()}
    finally:
        if log_file:
            log_file.close()
    if best_arrays is not None:
        model.load_arrays(best_arrays)
    return history
