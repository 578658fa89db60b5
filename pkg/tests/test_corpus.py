from collections import Counter

import numpy as np
import pytest
from hypothesis import given, strategies as st

from cldfa.corpus import (
    CorpusFormatError,
    LabeledSet,
    ParallelCorpus,
    SyntheticBilingualSpec,
    SyntheticSpecError,
    UnlabeledSet,
    Vocabulary,
    build_vocab,
    encode,
    encode_synthetic,
    encode_texts,
    generate_synthetic_bilingual,
    load_embeddings_text,
    load_labeled_tsv,
    load_parallel,
    load_unlabeled_txt,
    merge_unlabeled,
    read_labeled_tsv,
    shifted_spec,
    tokenize,
)


class TestTokenize:
    def test_empty(self):
        assert tokenize("") == []

    def test_punctuation_and_case(self):
        assert tokenize("Good, GREAT book!") == ["good", "great", "book"]

    def test_whitespace_runs(self):
        assert tokenize("a  b") == ["a", "b"]

    def test_non_ascii_letters_kept(self):
        assert tokenize("Schöne Bücher") == ["schöne", "bücher"]

    @given(st.text())
    def test_tokens_are_lowercase_alnum(self, text):
        for tok in tokenize(text):
            assert tok and tok == tok.lower() and all(ch.isalnum() for ch in tok)


class TestBuildVocab:
    def test_min_count(self):
        v = build_vocab([["a", "a", "b"]], min_count=2)
        assert v.id_to_token == ("<pad>", "<unk>", "a")
        assert v.token_to_id["a"] == 2

    def test_empty_corpus(self):
        v = build_vocab([[]], min_count=1)
        assert v.size == 2 and v.pad_id == 0 and v.unk_id == 1

    def test_ties_lexicographic(self):
        v = build_vocab([["y", "x"]], min_count=1)
        assert v.token_to_id["x"] < v.token_to_id["y"]

    def test_frequency_order_and_cap(self):
        v = build_vocab([["c", "b", "b", "a", "a", "a"]], max_size=4)
        assert v.id_to_token == ("<pad>", "<unk>", "a", "b")

    def test_invalid_arguments(self):
        with pytest.raises(ValueError):
            build_vocab([["a"]], min_count=0)
        with pytest.raises(ValueError):
            build_vocab([["a"]], max_size=1)

    @given(st.lists(st.lists(st.sampled_from(list("abcdefg")), max_size=6), max_size=6))
    def test_invariants_and_stability(self, docs):
        v = build_vocab(docs)
        w = build_vocab(list(reversed(docs)))
        assert v.id_to_token == w.id_to_token and v.vocab_id == w.vocab_id
        assert set(range(v.size)) == set(v.token_to_id.values()) | {0, 1} or v.size == 2
        for i, tok in enumerate(v.id_to_token[2:], start=2):
            assert v.token_to_id[tok] == i
        assert v.token_to_id.get("<pad>", 0) == 0


class TestEncode:
    vocab = Vocabulary.from_tokens(["a"])

    def test_pad(self):
        seq = encode(["a"], self.vocab, 3)
        np.testing.assert_array_equal(seq.ids, [2, 0, 0])
        assert seq.true_len == 1

    def test_unknown(self):
        seq = encode(["zzz"], self.vocab, 2)
        np.testing.assert_array_equal(seq.ids, [1, 0])
        assert seq.true_len == 1

    def test_truncate(self):
        seq = encode(["a", "a", "a"], self.vocab, 2)
        np.testing.assert_array_equal(seq.ids, [2, 2])
        assert seq.true_len == 2

    def test_empty_document_becomes_unk(self):
        seq = encode([], self.vocab, 3)
        np.testing.assert_array_equal(seq.ids, [1, 0, 0])
        assert seq.true_len == 1

    def test_bad_max_len(self):
        with pytest.raises(ValueError):
            encode(["a"], self.vocab, 0)

    @given(st.text(max_size=60), st.integers(1, 12))
    def test_deterministic_and_well_formed(self, text, max_len):
        vocab = build_vocab([tokenize("the quick brown fox jumps over the lazy dog")])
        a = encode(tokenize(text), vocab, max_len)
        b = encode(tokenize(text), vocab, max_len)
        np.testing.assert_array_equal(a.ids, b.ids)
        assert len(a.ids) == max_len and 1 <= a.true_len <= max_len
        assert np.all((a.ids >= 0) & (a.ids < vocab.size))
        assert np.all(a.ids[a.true_len :] == vocab.pad_id)


class TestLoaders:
    def test_labeled_row(self, tmp_path):
        p = tmp_path / "l.tsv"
        p.write_text("1\tgood book\n", encoding="utf-8")
        vocab = build_vocab([["good", "book"]])
        ls = load_labeled_tsv(p, vocab, 5)
        assert len(ls) == 1 and ls.labels == [1]
        assert ls.vocab_id == vocab.vocab_id

    def test_non_integer_label(self, tmp_path):
        p = tmp_path / "l.tsv"
        p.write_text("x\tbad\n", encoding="utf-8")
        with pytest.raises(CorpusFormatError, match=":1"):
            read_labeled_tsv(p)

    def test_too_many_columns(self, tmp_path):
        p = tmp_path / "l.tsv"
        p.write_text("0\tok\n1\ta\tb\tc\n", encoding="utf-8")
        with pytest.raises(CorpusFormatError, match=":2"):
            read_labeled_tsv(p)

    def test_parallel_and_unlabeled(self, tmp_path):
        par = tmp_path / "p.tsv"
        par.write_text("hello world\thallo welt\nbye\ttschuess\n", encoding="utf-8")
        txt = tmp_path / "u.txt"
        txt.write_text("hallo\nwelt welt\n", encoding="utf-8")
        sv = build_vocab([["hello", "world", "bye"]])
        tv = build_vocab([["hallo", "welt", "tschuess"]])
        pc = load_parallel(par, sv, tv, 4)
        assert len(pc) == 2
        assert pc.src_docs[0].ids[0] == sv.token_to_id["hello"]
        assert pc.tgt_docs[1].ids[0] == tv.token_to_id["tschuess"]
        assert len(load_unlabeled_txt(txt, tv, 4)) == 2

    def test_parallel_length_mismatch(self):
        v = Vocabulary.from_tokens(["a"])
        with pytest.raises(ValueError):
            ParallelCorpus(encode_texts(["a"], v, 2), [], v.vocab_id, v.vocab_id)

    def test_labeled_length_mismatch(self):
        v = Vocabulary.from_tokens(["a"])
        with pytest.raises(ValueError):
            LabeledSet(encode_texts(["a", "a"], v, 2), [0], "x")

    def test_merge_requires_same_vocab(self):
        v, w = Vocabulary.from_tokens(["a"]), Vocabulary.from_tokens(["b"])
        a = UnlabeledSet(encode_texts(["a"], v, 2), "a", v.vocab_id)
        b = UnlabeledSet(encode_texts(["b"], w, 2), "b", w.vocab_id)
        assert len(merge_unlabeled([a, a], "aa")) == 2
        with pytest.raises(ValueError):
            merge_unlabeled([a, b], "ab")


class TestEmbeddings:
    def test_match_and_keep(self, tmp_path):
        p = tmp_path / "e.txt"
        p.write_text("a 1.0 2.0\nzzz 5 5\n", encoding="utf-8")
        vocab = Vocabulary.from_tokens(["a", "b"])
        m = np.full((vocab.size, 2), 0.25)
        m[0] = 0.0
        assert load_embeddings_text(p, vocab, m) == 1
        np.testing.assert_array_equal(m[vocab.token_to_id["a"]], [1.0, 2.0])
        np.testing.assert_array_equal(m[vocab.token_to_id["b"]], [0.25, 0.25])

    def test_header_line_skipped(self, tmp_path):
        p = tmp_path / "e.txt"
        p.write_text("2 2\na 1 1\nb 2 2\n", encoding="utf-8")
        vocab = Vocabulary.from_tokens(["a", "b"])
        assert load_embeddings_text(p, vocab, np.zeros((vocab.size, 2))) == 2

    def test_inconsistent_dimension(self, tmp_path):
        p = tmp_path / "e.txt"
        p.write_text("a 1 2\nb 1 2 3\n", encoding="utf-8")
        vocab = Vocabulary.from_tokens(["a", "b"])
        with pytest.raises(CorpusFormatError):
            load_embeddings_text(p, vocab, np.zeros((vocab.size, 2)))


def _frequencies(docs, tokens):
    counts = Counter(t for d in docs for t in tokenize(d))
    total = sum(counts.values())
    return sum(counts[t] for t in tokens) / total


class TestSyntheticGenerator:
    def test_no_shift_signal_frequency_matches(self):
        spec = SyntheticBilingualSpec(sizes={"l_src": 10000, "u_parl": 10000})
        c = generate_synthetic_bilingual(spec, 0)
        for cls_tokens in spec.signal_sets():
            src_tokens = {c.source_token(t) for t in cls_tokens}
            f_l = _frequencies(c.source_texts("l_src"), src_tokens)
            mapped = [c.cipher.translate(t) for t in c.target_texts("u_parl")]
            f_p = _frequencies(mapped, src_tokens)
            assert abs(f_l - f_p) < 0.02

    def test_cipher_roundtrip_and_parallel_exact(self):
        c = generate_synthetic_bilingual(SyntheticBilingualSpec(sizes={"u_parl": 200, "t_tgt": 50}), 3)
        for src, tgt in zip(c.source_texts("u_parl"), c.target_texts("u_parl")):
            assert c.cipher(tgt.split()) == src.split()
            assert c.cipher.invert(c.cipher(tgt.split())) == tgt.split()

    def test_token_count_oracle(self):
        spec = SyntheticBilingualSpec(sizes={"t_tgt": 2000})
        c = generate_synthetic_bilingual(spec, 1)
        sets = [{c.target_token(t) for t in s} for s in spec.signal_sets()]
        pred = [int(np.argmax([sum(t in s for t in d.split()) for s in sets])) for d in c.target_texts("t_tgt")]
        assert np.mean(np.array(pred) == c.splits["t_tgt"].labels) >= 0.99

    def test_splits_disjoint_and_reproducible(self):
        spec = shifted_spec(sizes={"l_src": 30, "u_src": 5, "u_parl": 30, "t_tgt": 20, "u_tgt": 5, "l_tgt": 5})
        a = generate_synthetic_bilingual(spec, 9)
        b = generate_synthetic_bilingual(spec, 9)
        ids = [set(s.doc_ids.tolist()) for s in a.splits.values()]
        assert sum(len(s) for s in ids) == len(set().union(*ids))
        for name in a.splits:
            assert a.target_texts(name) == b.target_texts(name)
            assert a.source_texts(name) == b.source_texts(name)

    def test_shift_moves_topic_mass(self):
        spec = shifted_spec(1.0, sizes={"l_src": 500, "u_parl": 500})
        c = generate_synthetic_bilingual(spec, 0)
        assert np.allclose(spec.split_topic_weights("l_src"), [1, 0, 0])
        assert not np.array_equal(c.source_texts("l_src")[:5], c.source_texts("u_parl")[:5])

    def test_label_model_unchanged_by_shift(self):
        spec = shifted_spec(0.9, sizes={"l_src": 4000, "t_tgt": 4000})
        c = generate_synthetic_bilingual(spec, 2)
        for split in ("l_src", "t_tgt"):
            assert abs(np.mean(c.splits[split].labels) - 0.5) < 0.03

    def test_vocab_too_small(self):
        with pytest.raises(SyntheticSpecError, match="vocab_size"):
            generate_synthetic_bilingual(SyntheticBilingualSpec(vocab_size=100), 0)

    def test_overlapping_signal_sets(self):
        spec = SyntheticBilingualSpec(class_signal=((1, 2), (2, 3)))
        with pytest.raises(SyntheticSpecError, match="disjoint"):
            spec.validate()

    def test_bad_topic_weights(self):
        with pytest.raises(SyntheticSpecError):
            SyntheticBilingualSpec(topic_weights={"l_src": (1.0, -1.0, 1.0)}).validate()

    def test_write_tsv(self, tmp_path):
        c = generate_synthetic_bilingual(SyntheticBilingualSpec(sizes={"l_src": 4, "u_parl": 3, "t_tgt": 2}), 0)
        files = c.write_tsv(tmp_path)
        assert set(files) == {"l_src.tsv", "u_src.txt", "u_parl.tsv", "t_tgt.tsv", "u_tgt.txt", "l_tgt.tsv", "lexicon.tsv"}
        labels, texts = read_labeled_tsv(files["l_src.tsv"])
        assert labels == c.labels("l_src") and texts == c.source_texts("l_src")

    def test_encode_synthetic(self):
        c = generate_synthetic_bilingual(SyntheticBilingualSpec(sizes={"l_src": 20, "u_parl": 20, "t_tgt": 10}), 0)
        e = encode_synthetic(c, 30)
        assert e.parallel.src_vocab_id == e.l_src.vocab_id == e.src_vocab.vocab_id
        assert e.t_tgt.vocab_id == e.tgt_vocab.vocab_id
        np.testing.assert_array_equal(e.t_tgt_translated.label_array, e.t_tgt.label_array)
        assert len(e.target_unlabeled()) == 1
