"""Intrinsic evaluation: author identification (ranking), paper clustering
(average-linkage HAC + pairwise metrics), and a linear domain probe that
turns representation drift into a number."""
from __future__ import annotations

from dataclasses import dataclass
from typing import TYPE_CHECKING, Sequence

import numpy as np
from sklearn.linear_model import LogisticRegression

from .corpus import ReferenceCorpus, SupportInfo

if TYPE_CHECKING:
    from .model import LinkingModel


@dataclass
class RankingReport:
    hr_at: dict[int, float]
    mrr: float
    n_queries: int

    def to_obj(self) -> dict:
        return {"hr1": self.hr_at[1], "hr3": self.hr_at[3], "mrr": self.mrr}


@dataclass
class ClusterReport:
    precision: float
    recall: float
    f1: float
    n_names: int

    def to_obj(self) -> dict:
        return {"p": self.precision, "r": self.recall, "f1": self.f1}


Query = tuple[SupportInfo, str, Sequence[str]]  # (paper, truth id, candidate ids)


def candidate_embeddings(model: "LinkingModel", corpus: ReferenceCorpus,
                         expert_ids: Sequence[str], paper_cap: int, max_len: int,
                         rng: np.random.Generator) -> dict[str, np.ndarray]:
    """Embed up to ``paper_cap`` support items per expert, cached by id."""
    out: dict[str, np.ndarray] = {}
    for expert_id in expert_ids:
        if expert_id in out:
            continue
        expert = corpus.get(expert_id)
        items = expert.support
        if len(items) > paper_cap:
            pick = sorted(rng.choice(len(items), size=paper_cap, replace=False))
            items = [items[i] for i in pick]
        out[expert_id] = model.embed_items(items, max_len)
    return out


def rank_candidates(model: "LinkingModel", query_embs: np.ndarray,
                    candidates: Sequence[str],
                    cand_embs: dict[str, np.ndarray]) -> list[tuple[str, float]]:
    """Candidates scored against the query side, descending, ties by id."""
    scored = [(cid, model.score_arrays(query_embs, cand_embs[cid]))
              for cid in candidates]
    return sorted(scored, key=lambda item: (-item[1], item[0]))


def author_identification(model: "LinkingModel", queries: Sequence[Query],
                          corpus: ReferenceCorpus, paper_cap: int = 100,
                          max_len: int = 208,
                          rng: np.random.Generator | None = None) -> RankingReport:
    """Rank candidate experts for each query paper; report HR@1/3 and MRR."""
    if paper_cap < 1:
        raise ValueError("paper_cap must be >= 1")
    rng = rng if rng is not None else np.random.default_rng(0)
    all_ids = [cid for _, _, cands in queries for cid in cands]
    cand_embs = candidate_embeddings(model, corpus, all_ids, paper_cap, max_len, rng)

    hits1 = hits3 = 0
    mrr_sum = 0.0
    for qi, (info, truth_id, candidates) in enumerate(queries):
        if truth_id not in candidates:
            raise ValueError(f"query {qi}: truth {truth_id!r} missing from candidates")
        query_embs = model.embed_items([info], max_len)
        ranked = rank_candidates(model, query_embs, candidates, cand_embs)
        rank = 1 + next(i for i, (cid, _) in enumerate(ranked) if cid == truth_id)
        hits1 += rank <= 1
        hits3 += rank <= 3
        mrr_sum += 1.0 / rank
    n = len(queries)
    if n == 0:
        raise ValueError("no queries given")
    return RankingReport(hr_at={1: hits1 / n, 3: hits3 / n}, mrr=mrr_sum / n,
                         n_queries=n)


# ---------------------------------------------------------------------------
# Clustering

def hac_cluster(embeddings: np.ndarray, k: int) -> np.ndarray:
    """Average-linkage agglomeration on Euclidean distance down to k clusters.

    Merge order is deterministic: the closest cluster pair wins, ties broken
    by the smallest (representative_i, representative_j) index pair, where a
    cluster's representative is its smallest member index.  Returned labels
    number clusters by their representative order.
    """
    points = np.asarray(embeddings, dtype=np.float64)
    n = points.shape[0]
    if k < 1:
        raise ValueError("cluster count must be >= 1")
    if k > n:
        raise ValueError(f"cannot form {k} clusters from {n} items")
    dist = np.sqrt(np.maximum(
        np.sum((points[:, None, :] - points[None, :, :]) ** 2, axis=2), 0.0))

    clusters: list[list[int]] = [[i] for i in range(n)]
    # pair_sums[i][j] = sum of pointwise distances between clusters i and j
    pair_sums = dist.copy()
    active = list(range(n))
    while len(active) > k:
        best = None
        for ai in range(len(active)):
            for bi in range(ai + 1, len(active)):
                i, j = active[ai], active[bi]
                mean = pair_sums[i, j] / (len(clusters[i]) * len(clusters[j]))
                key = (mean, clusters[i][0], clusters[j][0])
                if best is None or key < best[0]:
                    best = (key, ai, bi)
        (_, ai, bi) = best
        i, j = active[ai], active[bi]
        pair_sums[i, :] += pair_sums[j, :]
        pair_sums[:, i] += pair_sums[:, j]
        clusters[i] = sorted(clusters[i] + clusters[j])
        active.pop(bi)

    labels = np.empty(n, dtype=np.intp)
    for label, ci in enumerate(sorted(active, key=lambda ci: clusters[ci][0])):
        labels[clusters[ci]] = label
    return labels


def pairwise_prf(pred: Sequence, truth: Sequence) -> tuple[float, float, float]:
    """Precision/recall/F1 over unordered co-clustered item pairs.

    When one side has no same-cluster pairs, the corresponding 0/0 ratio is
    1 if the other side has none either, else 0.
    """
    if len(pred) != len(truth):
        raise ValueError(f"assignments differ in size: {len(pred)} vs {len(truth)}")
    n = len(pred)
    same_pred = same_truth = both = 0
    for i in range(n):
        for j in range(i + 1, n):
            p = pred[i] == pred[j]
            t = truth[i] == truth[j]
            same_pred += p
            same_truth += t
            both += p and t
    precision = both / same_pred if same_pred else float(same_truth == 0)
    recall = both / same_truth if same_truth else float(same_pred == 0)
    f1 = (2 * precision * recall / (precision + recall)
          if precision + recall > 0 else 0.0)
    return precision, recall, f1


def paper_clustering_eval(model: "LinkingModel",
                          names: Sequence[tuple[Sequence[SupportInfo], Sequence]],
                          max_len: int = 208) -> ClusterReport:
    """HAC with the true cluster count per name; macro-averaged pairwise
    metrics across names."""
    if not names:
        raise ValueError("no names to evaluate")
    ps, rs, fs = [], [], []
    for papers, truth in names:
        if len(papers) < 2:
            raise ValueError("each name needs at least 2 papers")
        if len(papers) != len(truth):
            raise ValueError("truth assignment size does not match paper count")
        embs = model.embed_items(list(papers), max_len)
        labels = hac_cluster(embs, k=len(set(truth)))
        p, r, f = pairwise_prf(labels.tolist(), list(truth))
        ps.append(p)
        rs.append(r)
        fs.append(f)
    return ClusterReport(precision=float(np.mean(ps)), recall=float(np.mean(rs)),
                         f1=float(np.mean(fs)), n_names=len(names))


# ---------------------------------------------------------------------------
# Domain probe

def discriminator_probe(model: "LinkingModel",
                        labeled_support: Sequence[tuple[SupportInfo, int]],
                        max_len: int = 64,
                        rng: np.random.Generator | None = None) -> float:
    """Held-out accuracy of a fresh linear probe predicting an item's domain
    from its frozen shared embedding.

    The probe set is split in half per domain; chance accuracy (~0.5) means
    the shared space hides the domain.
    """
    rng = rng if rng is not None else np.random.default_rng(0)
    domains = sorted({d for _, d in labeled_support})
    if len(domains) != 2:
        raise ValueError("probe needs items from exactly two domains")
    infos = [info for info, _ in labeled_support]
    X = model.embed_items(infos, max_len)
    y = np.array([d == domains[1] for _, d in labeled_support], dtype=np.float64)

    train_idx: list[int] = []
    test_idx: list[int] = []
    for d in domains:
        members = [i for i, (_, dom) in enumerate(labeled_support) if dom == d]
        if len(members) < 2:
            raise ValueError("each domain needs at least 2 probe items")
        members = [members[i] for i in rng.permutation(len(members))]
        half = len(members) // 2
        train_idx += members[:half]
        test_idx += members[half:]

    probe = LogisticRegression(max_iter=2000, C=10.0)
    probe.fit(X[train_idx], y[train_idx])
    return float(probe.score(X[test_idx], y[test_idx]))
