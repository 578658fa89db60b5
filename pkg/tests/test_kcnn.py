import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from cldfa.corpus import CorpusFormatError, IdSequence, Vocabulary, build_vocab, encode_texts, UnlabeledSet
from cldfa.kcnn import (
    Discriminator,
    KcnnConfig,
    dump_features,
    init_model,
    load_checkpoint,
    read_features_csv,
    save_checkpoint,
)
from cldfa.nn_core import OptimizerConfig, OptimizerState, one_hot, optimizer_step

from _support import random_batch, small_model


class TestConfig:
    def test_feature_dim(self):
        assert KcnnConfig(num_classes=2, window_sizes=(3, 4, 5), num_filters=100).feature_dim == 300

    @pytest.mark.parametrize(
        "kwargs", [{"num_classes": 1}, {"num_classes": 2, "num_filters": 0}, {"num_classes": 2, "window_sizes": ()}]
    )
    def test_invalid(self, kwargs):
        with pytest.raises(ValueError):
            KcnnConfig(**kwargs)


class TestInit:
    def test_deterministic(self):
        a, b = small_model(seed=3), small_model(seed=3)
        for k in a.params:
            np.testing.assert_array_equal(a.params[k], b.params[k])

    def test_ranges(self):
        m = small_model(seed=1, k=8)
        assert np.all(m.params["emb"][0] == 0.0)
        assert np.all(np.abs(m.params["emb"]) <= 0.25)
        assert np.all(m.params["conv_b2"] == 0.0) and np.all(m.params["out_b"] == 0.0)
        limit = np.sqrt(6.0 / (2 * 8 + 4))
        assert np.all(np.abs(m.params["conv_W2"]) <= limit)

    def test_pretrained_rows(self, tmp_path):
        tokens = [f"t{i}" for i in range(8)]
        vocab = Vocabulary.from_tokens(tokens)  # 10 entries with pad and unk
        path = tmp_path / "emb.txt"
        path.write_text("t0 1 1\nt3 2 2\nt7 3 3\nnope 4 4\n", encoding="utf-8")
        cfg = KcnnConfig(num_classes=2, emb_dim=2, window_sizes=(2,), num_filters=2)
        rand = init_model(vocab, cfg, 0)
        pre = init_model(vocab, cfg, 0, embeddings=path)
        changed = np.any(rand.params["emb"] != pre.params["emb"], axis=1)
        assert changed.sum() == 3
        np.testing.assert_array_equal(pre.params["emb"][vocab.token_to_id["t3"]], [2.0, 2.0])

    def test_pretrained_dimension_mismatch(self, tmp_path):
        vocab = Vocabulary.from_tokens(["a"])
        path = tmp_path / "emb.txt"
        path.write_text("a " + " ".join(["0.1"] * 50) + "\n", encoding="utf-8")
        with pytest.raises(CorpusFormatError):
            init_model(vocab, KcnnConfig(num_classes=2, emb_dim=100, window_sizes=(2,), num_filters=2), 0, path)


class TestFeatures:
    def test_zero_bank_gives_zero_features(self):
        m = small_model()
        for h in (2, 3):
            m.params[f"conv_W{h}"][:] = 0.0
        ids, lengths, _ = random_batch(np.random.default_rng(0))
        np.testing.assert_array_equal(m.extract_features((ids, lengths)), 0.0)

    def test_short_document(self):
        m = small_model(windows=(3, 4, 5), max_len=1)
        f = m.extract_features(IdSequence(np.array([7]), 1))
        assert f.shape == (1, 12) and np.all(np.isfinite(f))

    def test_batch_order_invariance(self):
        m = small_model(seed=2)
        ids, lengths, _ = random_batch(np.random.default_rng(2))
        f = m.extract_features((ids, lengths))
        perm = np.array([1, 0, 2, 3, 4, 5])
        np.testing.assert_array_equal(m.extract_features((ids[perm], lengths[perm])), f[perm])

    def test_non_negative_and_fixed_dim(self):
        m = small_model(seed=3)
        for max_len in (1, 4, 12):
            ids, lengths, _ = random_batch(np.random.default_rng(max_len), max_len=max_len)
            f = m.extract_features((ids, lengths))
            assert f.shape == (6, m.config.feature_dim) and np.all(f >= 0)

    @settings(max_examples=30, deadline=None)
    @given(st.integers(1, 8), st.lists(st.integers(2, 49), min_size=1, max_size=8), st.integers(0, 10))
    def test_trailing_content_beyond_last_window_ignored(self, extra, tokens, seed):
        m = small_model(seed=seed, windows=(2, 3))
        n = len(tokens)
        reach = n + 3 - 1  # true_len + max(h) - 1
        a = np.zeros((1, reach), dtype=np.int64)
        a[0, :n] = tokens
        padded = np.pad(a, ((0, 0), (0, extra)))
        noisy = padded.copy()
        noisy[0, reach:] = np.random.default_rng(seed).integers(2, 50, size=extra)
        lengths = np.array([n])
        f = m.extract_features((a, lengths))
        # different array widths may take different BLAS paths, hence the tolerance
        np.testing.assert_allclose(m.extract_features((padded, lengths)), f, rtol=0, atol=1e-12)
        np.testing.assert_allclose(m.extract_features((noisy, lengths)), f, rtol=0, atol=1e-12)


class TestClassify:
    def test_zero_head_uniform(self):
        m = small_model()
        m.params["out_W"][:] = 0.0
        ids, lengths, _ = random_batch(np.random.default_rng(0))
        np.testing.assert_allclose(m.classify((ids, lengths)), 1.0 / 3)

    def test_constructed_logits(self):
        m = small_model(classes=2)
        m.params["out_W"][:] = 0.0
        m.params["out_b"][:] = [2.0, 0.0]
        ids, lengths, _ = random_batch(np.random.default_rng(0), classes=2)
        np.testing.assert_allclose(m.classify((ids, lengths))[0], [0.8808, 0.1192], atol=1e-4)

    def test_argmax_temperature_invariant(self):
        m = small_model(seed=8)
        ids, lengths, _ = random_batch(np.random.default_rng(8), batch=20)
        labels = m.predict_label((ids, lengths))
        for T in (0.5, 5.0, 50.0):
            np.testing.assert_array_equal(np.argmax(m.classify((ids, lengths), T), axis=1), labels)

    def test_tie_goes_to_smallest_class(self):
        m = small_model(classes=2)
        m.params["out_W"][:] = 0.0
        ids, lengths, _ = random_batch(np.random.default_rng(0), classes=2)
        assert np.all(m.predict_label((ids, lengths)) == 0)
        m.params["out_b"][:] = [np.log(0.1), np.log(0.9)]
        assert np.all(m.predict_label((ids, lengths)) == 1)


class TestTraining:
    def test_pad_row_stays_zero(self):
        m = small_model(seed=9)
        state = OptimizerState(OptimizerConfig(lr=0.1))
        rng = np.random.default_rng(9)
        for _ in range(20):
            ids, lengths, targets = random_batch(rng)
            _, grads, _ = m.loss_and_grads(ids, lengths, targets)
            optimizer_step(m.params, grads, state)
        assert np.all(m.params["emb"][0] == 0.0)

    def test_vocab_check(self):
        m = init_model(Vocabulary.from_tokens(["a"]), KcnnConfig(num_classes=2, window_sizes=(2,), num_filters=2), 0)
        with pytest.raises(ValueError):
            m.check_vocab("something-else")
        m.check_vocab(None)


class TestDiscriminator:
    def test_shapes_and_gradient(self):
        rng = np.random.default_rng(0)
        d = Discriminator.init(6, 5, rng)
        f = rng.uniform(0, 1, size=(4, 6))
        probs, cache = d.forward(f)
        assert probs.shape == (4, 2)
        y = one_hot([0, 1, 0, 1], 2)
        grads, d_f = d.backward(cache, (probs - y) / 4)
        eps = 1e-6

        def loss(feats):
            p, _ = d.forward(feats)
            return float(-np.mean(np.log(np.sum(p * y, axis=1))))

        num = np.zeros_like(f)
        for idx in np.ndindex(f.shape):
            fp, fm = f.copy(), f.copy()
            fp[idx] += eps
            fm[idx] -= eps
            num[idx] = (loss(fp) - loss(fm)) / (2 * eps)
        np.testing.assert_allclose(d_f, num, atol=1e-7)
        assert set(grads) == {"d_W1", "d_b1", "d_W2", "d_b2"}

    def test_accuracy(self):
        d = Discriminator.init(1, 1, np.random.default_rng(0))
        d.params.update(d_W1=np.array([[1.0]]), d_b1=np.zeros(1), d_W2=np.array([[-1.0, 1.0]]), d_b2=np.zeros(2))
        assert d.accuracy(np.zeros((3, 1)), np.ones((3, 1))) == 1.0


class TestCheckpoint:
    def test_roundtrip_bit_exact(self, tmp_path):
        vocab = build_vocab([["a", "b", "c"]])
        cfg = KcnnConfig(num_classes=3, emb_dim=4, window_sizes=(2, 3), num_filters=3, max_len=6)
        m = init_model(vocab, cfg, 1)
        state = OptimizerState(OptimizerConfig())
        ids, lengths, targets = random_batch(np.random.default_rng(1), vocab=vocab.size, max_len=6)
        _, grads, _ = m.loss_and_grads(ids, lengths, targets)
        optimizer_step(m.params, grads, state)
        path = save_checkpoint(tmp_path / "m.ckpt", m, state, vocab, {"role": "test"})
        ck = load_checkpoint(path)
        np.testing.assert_array_equal(ck.model.classify((ids, lengths)), m.classify((ids, lengths)))
        assert ck.vocab.id_to_token == vocab.id_to_token and ck.model.vocab_id == vocab.vocab_id
        assert ck.optimizer.step_count == 1 and ck.extra == {"role": "test"}
        np.testing.assert_array_equal(ck.optimizer.moments["emb"], state.moments["emb"])

    def test_bytes_deterministic(self, tmp_path):
        m = small_model(seed=2)
        a = save_checkpoint(tmp_path / "a.ckpt", m).read_bytes()
        b = save_checkpoint(tmp_path / "b.ckpt", m).read_bytes()
        assert a == b

    def test_format_tag_checked(self, tmp_path):
        import zipfile

        p = tmp_path / "bad.ckpt"
        with zipfile.ZipFile(p, "w") as zf:
            zf.writestr("meta.json", '{"format": "other/9"}')
        with pytest.raises(ValueError, match="format"):
            load_checkpoint(p)

    def test_feature_dump(self, tmp_path):
        vocab = build_vocab([["a", "b"]])
        m = init_model(vocab, KcnnConfig(num_classes=2, emb_dim=3, window_sizes=(2,), num_filters=2), 0)
        docs = UnlabeledSet(encode_texts(["a b", "b", "a a b"], vocab, 5), "x", vocab.vocab_id)
        path = dump_features(tmp_path / "f.csv", m, [("l_src", docs), ("u_parl", docs)])
        header = path.read_text().splitlines()[0]
        assert header == "doc_id,split,f_1,f_2"
        back = read_features_csv(path)
        np.testing.assert_array_equal(back["u_parl"], m.extract_features(docs))
