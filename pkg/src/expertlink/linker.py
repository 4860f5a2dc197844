"""Zero-shot linking of external mentions to reference experts, an
append-only feedback store feeding retraining, and an HTTP service over a
hot-swappable model snapshot.

The read path (linking) only touches immutable snapshots; feedback writes
and snapshot swaps are serialized through one lock.
"""
from __future__ import annotations

import hashlib
import json
import re
import threading
import time
from dataclasses import dataclass
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer
from pathlib import Path
from typing import TYPE_CHECKING, Sequence

import numpy as np

from . import diffcore as dc
from .corpus import (CorpusError, ExternalMention, ReferenceCorpus, SupportInfo,
                     sample_instance, sample_triplets)
from .encoder import tokenize
from .evaluation import candidate_embeddings, rank_candidates
from .pretrain import (TokenGroups, TrainConfig, TrainError, resolve_triplet,
                       resolved_batch_loss)

if TYPE_CHECKING:
    from .model import LinkingModel

VERDICTS = ("confirm", "correct", "reject_all")


@dataclass
class LinkResult:
    mention_id: str
    ranked: list[tuple[str, float]]  # descending score, ties by expert id
    accepted: str | None

    def to_obj(self) -> dict:
        return {"mention_id": self.mention_id,
                "ranked": [{"expert_id": e, "score": s} for e, s in self.ranked],
                "accepted": self.accepted}


@dataclass
class Feedback:
    mention_id: str
    verdict: str
    corrected_expert_id: str | None = None
    timestamp: float = 0.0

    def __post_init__(self):
        if self.verdict not in VERDICTS:
            raise ValueError(f"unknown verdict {self.verdict!r}")
        if (self.corrected_expert_id is not None) != (self.verdict == "correct"):
            raise ValueError("corrected_expert_id is required exactly for 'correct'")


def link(model: "LinkingModel", mention: ExternalMention, corpus: ReferenceCorpus,
         threshold: float = 0.0, paper_cap: int = 100, max_len_mention: int = 64,
         max_len_paper: int = 208, fuzzy: bool = False,
         rng: np.random.Generator | None = None) -> LinkResult:
    """Rank candidate experts for a mention; accept the top candidate iff
    its score clears the threshold.  No candidates is a valid empty result."""
    if not -1.0 < threshold < 1.0:
        raise ValueError("threshold must lie in (-1, 1)")
    candidates = corpus.candidate_set(mention.name, fuzzy=fuzzy)
    if not candidates:
        return LinkResult(mention_id=mention.mention_id, ranked=[], accepted=None)
    rng = rng if rng is not None else np.random.default_rng(0)
    cand_embs = candidate_embeddings(model, corpus, candidates, paper_cap,
                                     max_len_paper, rng)
    query_embs = model.embed_items(mention.support, max_len_mention)
    ranked = rank_candidates(model, query_embs, candidates, cand_embs)
    accepted = ranked[0][0] if ranked[0][1] >= threshold else None
    return LinkResult(mention_id=mention.mention_id, ranked=ranked, accepted=accepted)


def mention_from_request(name: str, support_texts: Sequence[str]) -> ExternalMention:
    """Build the mention a /link request describes; the id is a stable hash
    of the payload so offline and served calls agree."""
    digest = hashlib.sha1(json.dumps([name, list(support_texts)],
                                     sort_keys=True).encode("utf-8")).hexdigest()
    support = [SupportInfo("sentence", (("sentence", s),)) for s in support_texts]
    return ExternalMention(mention_id=f"m-{digest[:16]}", name=name, support=support)


# ---------------------------------------------------------------------------
# Feedback

@dataclass
class FeedbackTriplet:
    """A training triplet recovered from one human decision."""

    mention_id: str
    support: list[SupportInfo]
    positive_expert_id: str | None  # None for reject_all (hard negatives only)
    negative_expert_ids: list[str]


class FeedbackStore:
    """Append-only JSONL log of feedback decisions.

    Each record embeds the mention payload and the ranking it judged, so
    replaying the file alone reconstructs the training set.
    """

    def __init__(self, path):
        self.path = Path(path)
        self.path.parent.mkdir(parents=True, exist_ok=True)
        self.path.touch(exist_ok=True)

    def append(self, fb: Feedback, mention: ExternalMention,
               result: LinkResult) -> None:
        record = {
            "mention_id": fb.mention_id,
            "verdict": fb.verdict,
            "corrected_expert_id": fb.corrected_expert_id,
            "timestamp": fb.timestamp,
            "name": mention.name,
            "support": [s.to_obj() for s in mention.support],
            "ranked": [{"expert_id": e, "score": s} for e, s in result.ranked],
            "accepted": result.accepted,
        }
        with open(self.path, "a", encoding="utf-8") as f:
            f.write(json.dumps(record, sort_keys=True) + "\n")
            f.flush()

    def records(self) -> list[dict]:
        out = []
        with open(self.path, "r", encoding="utf-8") as f:
            for line in f:
                line = line.strip()
                if line:
                    out.append(json.loads(line))
        return out

    def __len__(self) -> int:
        return len(self.records())

    def training_triplets(self) -> list[FeedbackTriplet]:
        """Replay the log into triplets; reject_all records yield
        negative-only entries."""
        out = []
        for rec in self.records():
            out.append(_triplet_from_record(rec))
        return out


def _triplet_from_record(rec: dict) -> FeedbackTriplet:
    support = [SupportInfo.from_obj(o) for o in rec["support"]]
    ranked_ids = [r["expert_id"] for r in rec["ranked"]]
    verdict = rec["verdict"]
    if verdict == "confirm":
        positive = rec["accepted"]
        negatives = [e for e in ranked_ids if e != positive]
    elif verdict == "correct":
        positive = rec["corrected_expert_id"]
        negatives = [e for e in ranked_ids if e != positive]
    else:  # reject_all
        positive = None
        negatives = ranked_ids
    return FeedbackTriplet(mention_id=rec["mention_id"], support=support,
                           positive_expert_id=positive,
                           negative_expert_ids=negatives)


def submit_feedback(store: FeedbackStore, fb: Feedback, mention: ExternalMention,
                    result: LinkResult,
                    corpus: ReferenceCorpus) -> FeedbackTriplet:
    """Validate, persist, and return the triplet the decision produced."""
    if fb.verdict == "confirm" and result.accepted is None:
        raise ValueError("cannot confirm a result with no accepted expert")
    if fb.verdict == "correct":
        corpus.get(fb.corrected_expert_id)  # raises on unknown id
    store.append(fb, mention, result)
    return _triplet_from_record({
        "mention_id": fb.mention_id, "verdict": fb.verdict,
        "corrected_expert_id": fb.corrected_expert_id,
        "support": [s.to_obj() for s in mention.support],
        "ranked": [{"expert_id": e, "score": s} for e, s in result.ranked],
        "accepted": result.accepted,
    })


def _feedback_token_groups(model: "LinkingModel", triplet: FeedbackTriplet,
                           corpus: ReferenceCorpus, cfg: TrainConfig,
                           max_len_mention: int,
                           rng: np.random.Generator) -> TokenGroups:
    anchor = [tokenize(info, model.vocab, max_len_mention)
              for info in triplet.support[:cfg.L]]
    groups = [anchor]
    positive = sample_instance(corpus.get(triplet.positive_expert_id), cfg.L, rng)
    groups.append([tokenize(corpus.get(positive.expert_id).support[i],
                            model.vocab, cfg.max_len_paper)
                   for i in positive.items])
    for neg_id in triplet.negative_expert_ids[:cfg.n_neg]:
        inst = sample_instance(corpus.get(neg_id), cfg.L, rng)
        groups.append([tokenize(corpus.get(neg_id).support[i],
                                model.vocab, cfg.max_len_paper)
                       for i in inst.items])
    return groups


def retrain_from_feedback(model: "LinkingModel", store: FeedbackStore,
                          corpus: ReferenceCorpus, cfg: TrainConfig,
                          max_len_mention: int = 64) -> "LinkingModel":
    """Fine-tune a copy of the model on feedback triplets mixed 1:1 with
    fresh reference triplets; the input model is left untouched."""
    from .pretrain import make_optimizer

    feedback = [t for t in store.training_triplets()
                if t.positive_expert_id is not None]
    if not feedback:
        raise TrainError("feedback store holds no trainable triplets")

    rng = np.random.default_rng(cfg.seed)
    retrained = model.clone()
    optimizer = make_optimizer(retrained, cfg,
                               lr_disc=1e-3 if retrained.head_parameters() else None)
    n = len(feedback)
    for epoch in range(cfg.epochs):
        optimizer.set_epoch(epoch)
        # 1:1 anti-forgetting mix: as many fresh reference triplets as
        # feedback triplets each epoch
        reference_pool = sample_triplets(
            corpus, cfg.L, cfg.n_neg,
            per_expert=max(1, -(-n // len(corpus))), rng=rng)
        ref_pick = rng.choice(len(reference_pool), size=min(n, len(reference_pool)),
                              replace=False)
        resolved: list[TokenGroups] = []
        for t in feedback:
            resolved.append(_feedback_token_groups(retrained, t, corpus, cfg,
                                                   max_len_mention, rng))
        for i in ref_pick:
            resolved.append(resolve_triplet(reference_pool[i], corpus,
                                            retrained.vocab, cfg.max_len_paper))
        order = rng.permutation(len(resolved))
        for start in range(0, len(order), cfg.batch_size):
            batch = [resolved[i] for i in order[start:start + cfg.batch_size]]
            loss, _, _ = resolved_batch_loss(retrained, batch, cfg.margin)
            if not np.isfinite(loss.data):
                raise TrainError("non-finite loss during feedback retraining")
            dc.backward(loss)
            optimizer.step()
    return retrained


# ---------------------------------------------------------------------------
# Snapshots

class SnapshotStore:
    """Versioned model snapshots on disk; previous versions are retained."""

    _PATTERN = re.compile(r"model-v(\d{4})\.ckpt$")

    def __init__(self, directory):
        self.directory = Path(directory)
        self.directory.mkdir(parents=True, exist_ok=True)

    def versions(self) -> list[int]:
        out = []
        for p in self.directory.iterdir():
            m = self._PATTERN.search(p.name)
            if m:
                out.append(int(m.group(1)))
        return sorted(out)

    def save(self, model: "LinkingModel") -> int:
        version = (self.versions()[-1] + 1) if self.versions() else 1
        model.save(self.directory / f"model-v{version:04d}.ckpt",
                   extra_meta={"version": version})
        return version

    def load_latest(self) -> tuple["LinkingModel", int]:
        from .model import LinkingModel
        versions = self.versions()
        if not versions:
            raise FileNotFoundError(f"no snapshots under {self.directory}")
        version = versions[-1]
        return LinkingModel.load(self.directory / f"model-v{version:04d}.ckpt"), version


# ---------------------------------------------------------------------------
# Service

def result_payload(result: LinkResult, mention: ExternalMention) -> dict:
    obj = result.to_obj()
    obj["name"] = mention.name
    obj["support"] = [s.text() for s in mention.support]
    return obj


def _json_bytes(obj) -> bytes:
    return (json.dumps(obj, sort_keys=True, separators=(",", ":")) + "\n").encode("utf-8")


@dataclass
class _Snapshot:
    model: "LinkingModel"
    version: int


class LinkService:
    """State behind the HTTP surface: one immutable snapshot for reads, a
    serialized write path for feedback, and atomic snapshot swaps."""

    def __init__(self, model: "LinkingModel", corpus: ReferenceCorpus,
                 feedback_path, threshold: float = 0.0, paper_cap: int = 100,
                 version: int = 1, snapshot_dir=None):
        self._snapshot = _Snapshot(model=model, version=version)
        self.corpus = corpus
        self.threshold = threshold
        self.paper_cap = paper_cap
        self.store = FeedbackStore(feedback_path)
        self.snapshots = SnapshotStore(snapshot_dir) if snapshot_dir else None
        self.pending: dict[str, tuple[ExternalMention, LinkResult]] = {}
        self._write_lock = threading.Lock()

    @property
    def version(self) -> int:
        return self._snapshot.version

    def handle_link(self, payload: dict) -> dict:
        if "name" not in payload or "support" not in payload:
            raise ValueError("link payload needs 'name' and 'support'")
        snapshot = self._snapshot  # pin: in-flight work survives a swap
        mention = mention_from_request(payload["name"], payload["support"])
        result = link(snapshot.model, mention, self.corpus,
                      threshold=self.threshold, paper_cap=self.paper_cap)
        with self._write_lock:
            self.pending[mention.mention_id] = (mention, result)
        return result_payload(result, mention)

    def handle_feedback(self, payload: dict) -> dict:
        fb = Feedback(mention_id=payload["mention_id"],
                      verdict=payload["verdict"],
                      corrected_expert_id=payload.get("corrected_expert_id"),
                      timestamp=time.time())
        with self._write_lock:
            if fb.mention_id not in self.pending:
                raise KeyError(f"unknown or already-decided mention {fb.mention_id!r}")
            mention, result = self.pending[fb.mention_id]
            submit_feedback(self.store, fb, mention, result, self.corpus)
            del self.pending[fb.mention_id]
        return {"stored": True}

    def queue_payload(self) -> dict:
        with self._write_lock:
            items = [result_payload(result, mention)
                     for mention, result in self.pending.values()]
        return {"items": items}

    def health_payload(self) -> dict:
        return {"status": "ok", "model_version": self._snapshot.version}

    def swap(self, model: "LinkingModel", version: int) -> None:
        self._snapshot = _Snapshot(model=model, version=version)

    def retrain_and_swap(self, cfg: TrainConfig) -> int:
        """Retrain from the feedback log and publish the new snapshot."""
        new_model = retrain_from_feedback(self._snapshot.model, self.store,
                                          self.corpus, cfg)
        if self.snapshots:
            version = self.snapshots.save(new_model)
        else:
            version = self._snapshot.version + 1
        self.swap(new_model, version)
        return version


class _Handler(BaseHTTPRequestHandler):
    service: LinkService

    def _send(self, status: int, obj) -> None:
        body = _json_bytes(obj)
        self.send_response(status)
        self.send_header("Content-Type", "application/json")
        self.send_header("Content-Length", str(len(body)))
        self.end_headers()
        self.wfile.write(body)

    def do_GET(self):
        try:
            if self.path == "/health":
                self._send(200, self.service.health_payload())
            elif self.path == "/queue":
                self._send(200, self.service.queue_payload())
            else:
                self._send(404, {"error": f"unknown path {self.path}"})
        except Exception as exc:  # no silent failures on the wire
            self._send(500, {"error": str(exc)})

    def do_POST(self):
        try:
            length = int(self.headers.get("Content-Length", "0"))
            payload = json.loads(self.rfile.read(length) or b"{}")
            if self.path == "/link":
                self._send(200, self.service.handle_link(payload))
            elif self.path == "/feedback":
                self._send(200, self.service.handle_feedback(payload))
            else:
                self._send(404, {"error": f"unknown path {self.path}"})
        except (ValueError, KeyError, CorpusError) as exc:
            self._send(400, {"error": str(exc)})
        except Exception as exc:
            self._send(500, {"error": str(exc)})

    def log_message(self, *args):  # keep test output quiet
        pass


def serve(service: LinkService, host: str = "127.0.0.1",
          port: int = 8080) -> ThreadingHTTPServer:
    """Bind the HTTP surface; caller runs serve_forever (or a thread)."""
    handler = type("BoundHandler", (_Handler,), {"service": service})
    return ThreadingHTTPServer((host, port), handler)
