import numpy as np
import pytest

from expertlink import diffcore as dc
from expertlink.corpus import Expert, ExpertInstance, ReferenceCorpus, SupportInfo, paper_support
from expertlink.encoder import (CLS, PAD, SEP, UNK, FixedEmbeddingProvider,
                                GeneratorParams, Vocab, build_vocab, encode,
                                encode_batch, encode_instance, export_embeddings,
                                import_embeddings, tokenize)


class FakeCorpus:
    def __init__(self, texts):
        self.entries = [Expert(id="e1", name="a b",
                               support=[SupportInfo("sentence", (("sentence", t),))
                                        for t in texts])]

    def __iter__(self):
        return iter(self.entries)


def small_vocab(texts=("deep learning", "deep graphs"), min_freq=1):
    return build_vocab([FakeCorpus(list(texts))], min_freq=min_freq)


def sentence(text):
    return SupportInfo("sentence", (("sentence", text),))


# ---------------------------------------------------------------------------
# Vocab

def test_build_vocab_contains_tokens_and_specials():
    vocab = small_vocab()
    for tok in ("<pad>", "<unk>", "<cls>", "<sep>", "deep", "learning", "graphs"):
        assert tok in vocab.token_to_id
    assert vocab.token_to_id["<pad>"] == PAD
    assert vocab.token_to_id["<unk>"] == UNK


def test_build_vocab_min_freq_drops_rare_tokens():
    vocab = small_vocab(min_freq=2)
    assert "deep" in vocab.token_to_id
    assert "learning" not in vocab.token_to_id
    assert vocab.lookup("learning") == UNK


def test_build_vocab_is_deterministic():
    a = small_vocab()
    b = small_vocab()
    assert a.id_to_token == b.id_to_token


def test_build_vocab_rejects_empty():
    with pytest.raises(ValueError):
        build_vocab([])


def test_vocab_file_round_trip(tmp_path):
    vocab = small_vocab()
    path = tmp_path / "vocab.txt"
    vocab.save(path)
    again = Vocab.load(path)
    assert again.id_to_token == vocab.id_to_token


# ---------------------------------------------------------------------------
# Tokenize

def test_tokenize_truncates_to_max_len_keeping_cls_sep():
    vocab = small_vocab()
    long_paper = paper_support(title="deep " * 300, keywords=["learning"],
                               authors=["a"], org="o", venue="v")
    ids = tokenize(long_paper, vocab, max_len=208)
    assert len(ids) == 208
    assert ids[0] == CLS and ids[-1] == SEP


def test_tokenize_empty_text_gives_cls_sep():
    vocab = small_vocab()
    info = SupportInfo("sentence", (("sentence", "!!!"),))
    assert tokenize(info, vocab, max_len=64) == [CLS, SEP]


def test_tokenize_sentence_cap_64():
    vocab = small_vocab()
    ids = tokenize(sentence("deep " * 100), vocab, max_len=64)
    assert len(ids) <= 64
    assert ids[0] == CLS and ids[-1] == SEP


def test_tokenize_keeps_field_order():
    vocab = build_vocab([FakeCorpus(["alpha beta gamma"])])
    info = SupportInfo("paper", (("title", "beta"), ("keywords", "alpha")))
    ids = tokenize(info, vocab, max_len=16)
    assert ids == [CLS, vocab.lookup("beta"), vocab.lookup("alpha"), SEP]


# ---------------------------------------------------------------------------
# Encoding

def make_generator(vocab, d_tok=8, d_out=6, seed=0):
    return GeneratorParams.init("shared", vocab.size, d_tok, d_out,
                                np.random.default_rng(seed))


def test_encode_output_is_unit_norm():
    vocab = small_vocab()
    gen = make_generator(vocab)
    for text in ("deep learning", "graphs", "deep deep graphs learning"):
        vec = encode(gen, tokenize(sentence(text), vocab, 64))
        assert abs(np.linalg.norm(vec.data) - 1.0) < 1e-9


def test_encode_is_deterministic_bitwise():
    vocab = small_vocab()
    gen = make_generator(vocab)
    toks = tokenize(sentence("deep graphs"), vocab, 64)
    a = encode(gen, toks).data
    b = encode(gen, toks).data
    assert np.array_equal(a, b)


def test_encode_rejects_all_pad():
    vocab = small_vocab()
    gen = make_generator(vocab)
    with pytest.raises(ValueError, match="padding"):
        encode_batch(gen, [[PAD, PAD]])


def test_encode_gradient_matches_finite_differences():
    vocab = small_vocab()
    gen = make_generator(vocab)
    toks = [tokenize(sentence("deep learning"), vocab, 64),
            tokenize(sentence("deep graphs graphs"), vocab, 64)]
    target = np.linspace(-1, 1, 6)

    def fn():
        rows = encode_batch(gen, toks)
        diff = dc.sub(rows, dc.constant(np.vstack([target, target])))
        return dc.tmean(dc.mul(diff, diff))

    err = dc.finite_diff_check(fn, [gen.embedding, gen.projection], epsilon=1e-5)
    assert err < 1e-4


def test_encode_instance_preserves_order_and_multiset():
    papers = [paper_support(title=f"deep paper {i}", keywords=["deep"],
                            authors=["a b"], org="o", venue="v") for i in range(4)]
    corpus = ReferenceCorpus([Expert(id="e1", name="a b", support=papers)])
    vocab = build_vocab([corpus])
    gen = make_generator(vocab)
    inst = ExpertInstance("e1", (0, 2, 3))
    perm = ExpertInstance("e1", (3, 0, 2))
    embs = encode_instance(gen, inst, corpus, vocab, 64).data
    embs_perm = encode_instance(gen, perm, corpus, vocab, 64).data
    assert embs.shape == (3, 6)
    assert sorted(map(tuple, embs)) == sorted(map(tuple, embs_perm))


def test_encode_instance_rejects_dangling_index():
    papers = [paper_support(title="t", keywords=[], authors=["a"], org="", venue="")]
    corpus = ReferenceCorpus([Expert(id="e1", name="a b", support=papers)])
    vocab = build_vocab([corpus])
    gen = make_generator(vocab)
    with pytest.raises(ValueError, match="out of range"):
        encode_instance(gen, ExpertInstance("e1", (5,)), corpus, vocab, 64)


def test_shared_private_same_interface():
    vocab = small_vocab()
    shared = make_generator(vocab, seed=1)
    private = shared.clone("private")
    assert private.d_out == shared.d_out
    assert private.embedding.name == "private.embedding"
    toks = tokenize(sentence("deep"), vocab, 64)
    np.testing.assert_array_equal(encode(shared, toks).data,
                                  encode(private, toks).data)
    private.embedding.data += 1.0  # clones do not share storage
    assert not np.array_equal(shared.embedding.data, private.embedding.data)


# ---------------------------------------------------------------------------
# Precomputed embeddings

def test_import_embeddings_round_trip(tmp_path):
    rng = np.random.default_rng(0)
    rows = [(f"e1:{i}", rng.normal(size=6)) for i in range(10)]
    path = tmp_path / "emb.tsv"
    export_embeddings(path, rows)
    provider = import_embeddings(path, d_out=6)
    for item_id, vec in rows:
        got = provider.get(item_id)
        np.testing.assert_allclose(got, vec / np.linalg.norm(vec), rtol=1e-12)


def test_import_embeddings_missing_id_errors(tmp_path):
    path = tmp_path / "emb.tsv"
    export_embeddings(path, [("a", np.ones(4))])
    provider = import_embeddings(path, d_out=4)
    with pytest.raises(KeyError, match="missing"):
        provider.get("missing")


def test_import_embeddings_dimension_mismatch(tmp_path):
    path = tmp_path / "emb.tsv"
    export_embeddings(path, [("a", np.ones(4))])
    with pytest.raises(ValueError, match="dimension"):
        import_embeddings(path, d_out=6)


def test_provider_normalizes_input():
    provider = FixedEmbeddingProvider({"x": np.array([3.0, 4.0])}, d_out=2)
    np.testing.assert_allclose(provider.get("x"), [0.6, 0.8])
