import json
import threading
import urllib.request

import numpy as np
import pytest

from expertlink.corpus import ExternalMention, SupportInfo
from expertlink.encoder import build_vocab
from expertlink.linker import (Feedback, FeedbackStore, LinkService, SnapshotStore,
                               link, mention_from_request, result_payload,
                               retrain_from_feedback, serve, submit_feedback,
                               _json_bytes)
from expertlink.model import LinkingModel
from expertlink.pretrain import TrainConfig, TrainError
from expertlink.synth import SynthConfig, synth_corpus


@pytest.fixture(scope="module")
def setup():
    data = synth_corpus(SynthConfig(
        n_experts=8, papers_per_expert=14, collision_size=4, queries_per_expert=1,
        mentions_per_expert=2, sentences_per_mention=6, seed=2))
    vocab = build_vocab([data.reference, data.external])
    model = LinkingModel.init(vocab, 32, 32, np.random.default_rng(2))
    return data, model


def first_mention(data):
    return next(iter(data.external))


# ---------------------------------------------------------------------------
# link()

def test_link_low_threshold_always_accepts(setup):
    data, model = setup
    result = link(model, first_mention(data), data.reference, threshold=-0.999)
    assert result.ranked
    assert result.accepted == result.ranked[0][0]


def test_link_high_threshold_never_accepts(setup):
    data, model = setup
    result = link(model, first_mention(data), data.reference, threshold=0.999999)
    assert result.ranked
    assert result.accepted is None


def test_link_threshold_monotonicity(setup):
    data, model = setup
    accepted_count = []
    for threshold in np.linspace(-0.999, 0.999, 21):
        n = 0
        for mention in data.external:
            result = link(model, mention, data.reference, threshold=float(threshold))
            n += result.accepted is not None
        accepted_count.append(n)
    assert all(a >= b for a, b in zip(accepted_count, accepted_count[1:]))


def test_link_unknown_name_returns_empty_result(setup):
    data, model = setup
    mention = ExternalMention(
        mention_id="mx", name="zz unknown",
        support=[SupportInfo("sentence", (("sentence", "w001 w002"),))])
    result = link(model, mention, data.reference)
    assert result.ranked == [] and result.accepted is None


def test_link_ranked_is_sorted_desc_ties_by_id(setup):
    data, model = setup
    result = link(model, first_mention(data), data.reference, threshold=-0.999)
    scores = [s for _, s in result.ranked]
    assert scores == sorted(scores, reverse=True)


def test_link_candidates_come_from_name_variants(setup):
    data, model = setup
    mention = first_mention(data)
    result = link(model, mention, data.reference, threshold=-0.999)
    expected = set(data.reference.candidate_set(mention.name))
    assert {e for e, _ in result.ranked} == expected
    assert mention.truth_expert_id in expected


def test_link_rejects_out_of_range_threshold(setup):
    data, model = setup
    with pytest.raises(ValueError):
        link(model, first_mention(data), data.reference, threshold=1.5)


def test_mention_from_request_is_stable():
    a = mention_from_request("bo li", ["sent one", "sent two"])
    b = mention_from_request("bo li", ["sent one", "sent two"])
    c = mention_from_request("bo li", ["sent one", "sent other"])
    assert a.mention_id == b.mention_id != c.mention_id
    assert [s.text() for s in a.support] == ["sent one", "sent two"]


# ---------------------------------------------------------------------------
# Feedback

def make_result(data, model, mention, threshold=-0.999):
    return link(model, mention, data.reference, threshold=threshold)


def test_confirm_builds_positive_and_negatives(setup, tmp_path):
    data, model = setup
    store = FeedbackStore(tmp_path / "fb.jsonl")
    mention = first_mention(data)
    result = make_result(data, model, mention)
    fb = Feedback(mention_id=mention.mention_id, verdict="confirm", timestamp=1.0)
    triplet = submit_feedback(store, fb, mention, result, data.reference)
    assert triplet.positive_expert_id == result.accepted
    assert triplet.negative_expert_ids == [e for e, _ in result.ranked
                                           if e != result.accepted]
    assert len(triplet.negative_expert_ids) == len(result.ranked) - 1


def test_correct_demotes_previous_top(setup, tmp_path):
    data, model = setup
    store = FeedbackStore(tmp_path / "fb.jsonl")
    mention = first_mention(data)
    result = make_result(data, model, mention)
    runner_up = result.ranked[1][0]
    fb = Feedback(mention_id=mention.mention_id, verdict="correct",
                  corrected_expert_id=runner_up, timestamp=1.0)
    triplet = submit_feedback(store, fb, mention, result, data.reference)
    assert triplet.positive_expert_id == runner_up
    assert result.ranked[0][0] in triplet.negative_expert_ids


def test_reject_all_stores_negatives_only(setup, tmp_path):
    data, model = setup
    store = FeedbackStore(tmp_path / "fb.jsonl")
    mention = first_mention(data)
    result = make_result(data, model, mention)
    fb = Feedback(mention_id=mention.mention_id, verdict="reject_all", timestamp=1.0)
    triplet = submit_feedback(store, fb, mention, result, data.reference)
    assert triplet.positive_expert_id is None
    assert triplet.negative_expert_ids == [e for e, _ in result.ranked]


def test_correct_requires_known_expert(setup, tmp_path):
    data, model = setup
    store = FeedbackStore(tmp_path / "fb.jsonl")
    mention = first_mention(data)
    result = make_result(data, model, mention)
    fb = Feedback(mention_id=mention.mention_id, verdict="correct",
                  corrected_expert_id="nope", timestamp=1.0)
    with pytest.raises(Exception, match="nope"):
        submit_feedback(store, fb, mention, result, data.reference)
    assert len(store) == 0  # nothing persisted on failure


def test_feedback_validation():
    with pytest.raises(ValueError):
        Feedback(mention_id="m", verdict="maybe")
    with pytest.raises(ValueError):
        Feedback(mention_id="m", verdict="confirm", corrected_expert_id="e")
    with pytest.raises(ValueError):
        Feedback(mention_id="m", verdict="correct")


def test_replay_reconstructs_identical_training_set(setup, tmp_path):
    data, model = setup
    path = tmp_path / "fb.jsonl"
    store = FeedbackStore(path)
    mentions = list(data.external)[:3]
    for i, mention in enumerate(mentions):
        result = make_result(data, model, mention)
        verdict = ["confirm", "correct", "reject_all"][i]
        corrected = result.ranked[1][0] if verdict == "correct" else None
        fb = Feedback(mention_id=mention.mention_id, verdict=verdict,
                      corrected_expert_id=corrected, timestamp=float(i))
        submit_feedback(store, fb, mention, result, data.reference)
    first = store.training_triplets()
    reopened = FeedbackStore(path)  # simulates a process restart
    second = reopened.training_triplets()
    assert first == second
    assert len(first) == 3


def test_retrain_requires_trainable_feedback(setup, tmp_path):
    data, model = setup
    store = FeedbackStore(tmp_path / "empty.jsonl")
    cfg = TrainConfig(epochs=1, seed=0)
    with pytest.raises(TrainError):
        retrain_from_feedback(model, store, data.reference, cfg)


def test_retrain_returns_new_model_and_preserves_input(setup, tmp_path):
    data, model = setup
    store = FeedbackStore(tmp_path / "fb.jsonl")
    mention = first_mention(data)
    result = make_result(data, model, mention)
    fb = Feedback(mention_id=mention.mention_id, verdict="confirm", timestamp=0.0)
    submit_feedback(store, fb, mention, result, data.reference)
    before = {k: v.copy() for k, v in model.named_arrays().items()}
    cfg = TrainConfig(epochs=2, batch_size=4, seed=0, L=4, n_neg=3)
    retrained = retrain_from_feedback(model, store, data.reference, cfg)
    for k, v in model.named_arrays().items():
        np.testing.assert_array_equal(v, before[k])
    assert any(not np.array_equal(retrained.named_arrays()[k], before[k])
               for k in before)


# ---------------------------------------------------------------------------
# Snapshots

def test_snapshot_store_versions_and_retention(setup, tmp_path):
    _, model = setup
    store = SnapshotStore(tmp_path / "snaps")
    assert store.save(model) == 1
    assert store.save(model) == 2
    assert store.versions() == [1, 2]
    loaded, version = store.load_latest()
    assert version == 2
    assert set(loaded.named_arrays()) == set(model.named_arrays())


# ---------------------------------------------------------------------------
# Service

@pytest.fixture()
def running_service(setup, tmp_path):
    data, model = setup
    service = LinkService(model, data.reference,
                          feedback_path=tmp_path / "fb.jsonl",
                          threshold=-0.999, paper_cap=50)
    server = serve(service, port=0)
    thread = threading.Thread(target=server.serve_forever, daemon=True)
    thread.start()
    base = f"http://127.0.0.1:{server.server_address[1]}"
    yield data, model, service, base
    server.shutdown()
    server.server_close()


def http_json(base, path, payload=None):
    if payload is None:
        req = urllib.request.Request(base + path)
    else:
        req = urllib.request.Request(
            base + path, data=json.dumps(payload).encode(),
            headers={"Content-Type": "application/json"})
    with urllib.request.urlopen(req) as resp:
        return resp.status, resp.read()


def test_health_endpoint(running_service):
    _, _, service, base = running_service
    status, body = http_json(base, "/health")
    assert status == 200
    obj = json.loads(body)
    assert obj == {"status": "ok", "model_version": service.version}


def test_link_endpoint_matches_offline_byte_for_byte(running_service):
    data, model, service, base = running_service
    mention_src = first_mention(data)
    payload = {"name": mention_src.name,
               "support": [s.text() for s in mention_src.support]}
    status, body = http_json(base, "/link", payload)
    assert status == 200

    offline_mention = mention_from_request(payload["name"], payload["support"])
    offline = link(model, offline_mention, data.reference,
                   threshold=service.threshold, paper_cap=service.paper_cap)
    assert body == _json_bytes(result_payload(offline, offline_mention))


def test_feedback_clears_queue(running_service):
    data, _, service, base = running_service
    mention_src = list(data.external)[1]
    payload = {"name": mention_src.name,
               "support": [s.text() for s in mention_src.support]}
    _, body = http_json(base, "/link", payload)
    mention_id = json.loads(body)["mention_id"]

    _, queue_body = http_json(base, "/queue")
    queued = {item["mention_id"] for item in json.loads(queue_body)["items"]}
    assert mention_id in queued

    status, fb_body = http_json(base, "/feedback",
                                {"mention_id": mention_id, "verdict": "confirm"})
    assert status == 200
    assert json.loads(fb_body) == {"stored": True}

    _, queue_body = http_json(base, "/queue")
    queued = {item["mention_id"] for item in json.loads(queue_body)["items"]}
    assert mention_id not in queued
    assert len(service.store) >= 1


def test_unknown_mention_feedback_is_400(running_service):
    _, _, _, base = running_service
    try:
        status, _ = http_json(base, "/feedback",
                              {"mention_id": "ghost", "verdict": "confirm"})
    except urllib.error.HTTPError as exc:
        status = exc.code
    assert status == 400


def test_snapshot_swap_changes_version(running_service):
    data, model, service, base = running_service
    old = service.version
    service.swap(model.clone(), old + 1)
    _, body = http_json(base, "/health")
    assert json.loads(body)["model_version"] == old + 1


def test_queue_order_is_insertion_order(running_service):
    data, _, service, base = running_service
    for mention_src in list(data.external)[2:5]:
        http_json(base, "/link", {"name": mention_src.name,
                                  "support": [s.text() for s in mention_src.support]})
    _, body = http_json(base, "/queue")
    items = json.loads(body)["items"]
    assert len(items) >= 3
