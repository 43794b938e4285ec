"""Tokenizer, vocabulary and pair-encoder behavior."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from verifact import encoder as E
from verifact.encoder import (
    CLS,
    PAD,
    SEP,
    UNK,
    EncoderConfig,
    EncoderParams,
    TokenSequence,
    Vocabulary,
    encode_pair,
    encode_single,
    encode_tokens,
    pair_sequence,
    single_sequence,
    word_split,
)
from verifact.tensor import ContractError, DimensionError, Tensor, grad_check


def tiny_setup(width=8, n_heads=2, depth=2, max_len=12, seed=0):
    vocab = Vocabulary.build([
        "rabies is a foodborne illness",
        "the fox jumped over the lazy dog",
        "mira dolen plays the violin",
    ])
    config = EncoderConfig(vocab_size=len(vocab), width=width, n_heads=n_heads,
                           depth=depth, max_len=max_len)
    params = EncoderParams.create(config, vocab, np.random.default_rng(seed))
    return vocab, config, params


class TestTokenizer:
    def test_word_and_punctuation_split(self):
        assert word_split("Rabies is a foodborne illness.") == [
            "rabies", "is", "a", "foodborne", "illness", ".",
        ]

    def test_apostrophes_and_casing(self):
        assert word_split("Don't STOP!") == ["don", "'", "t", "stop", "!"]

    def test_deterministic(self):
        text = "Underscored_title : some sentence, twice."
        assert word_split(text) == word_split(text)

    def test_empty(self):
        assert word_split("   ") == []


class TestVocabulary:
    def test_build_order_frequency_then_alpha(self):
        vocab = Vocabulary.build(["b b b", "a a", "c a"])
        # counts: a=3, b=3, c=1; ties alphabetical
        assert vocab.tokens[4:] == ["a", "b", "c"]

    def test_specials_reserved(self):
        vocab = Vocabulary.build(["x"])
        assert vocab.tokens[:4] == list(E.SPECIAL_TOKENS)
        assert vocab.index["<pad>"] == PAD and vocab.index["<unk>"] == UNK

    def test_unknown_maps_to_unk(self):
        vocab = Vocabulary.build(["known words only"])
        assert vocab.encode("unseen token") == [UNK, UNK]
        assert vocab.encode("known") == [vocab.index["known"]]

    def test_max_size_truncates(self):
        vocab = Vocabulary.build(["a b c d e f"], max_size=6)
        assert len(vocab) == 6

    def test_round_trip(self, tmp_path):
        vocab = Vocabulary.build(["alpha beta gamma, alpha!"])
        path = tmp_path / "vocab.txt"
        vocab.save(path)
        again = Vocabulary.load(path)
        assert again.tokens == vocab.tokens
        assert again.encode("beta gamma") == vocab.encode("beta gamma")

    def test_bad_specials_rejected(self):
        with pytest.raises(ContractError):
            Vocabulary(["<pad>", "<cls>", "<unk>", "<sep>", "x"])


class TestSequences:
    def setup_method(self):
        self.config = EncoderConfig(vocab_size=50, width=8, n_heads=2, depth=1, max_len=10)

    def test_pair_layout_frozen(self):
        seq = pair_sequence([10, 11], [12, 13], self.config)
        np.testing.assert_array_equal(seq.ids, [CLS, 10, 11, SEP, 12, 13, SEP, PAD, PAD, PAD])
        np.testing.assert_array_equal(seq.segments, [0, 0, 0, 0, 1, 1, 1, 0, 0, 0])
        np.testing.assert_array_equal(seq.mask, [1, 1, 1, 1, 1, 1, 1, 0, 0, 0])

    def test_claim_truncated_to_budget(self, caplog):
        with caplog.at_level("WARNING"):
            seq = pair_sequence(list(range(10, 30)), [40], self.config)
        assert "truncated" in caplog.text
        assert list(seq.ids[:1]) == [CLS]
        assert list(seq.ids).count(SEP) == 2
        assert len(seq) == self.config.max_len
        # claim fills the whole budget, sentence dropped
        np.testing.assert_array_equal(seq.ids, [CLS, 10, 11, 12, 13, 14, 15, 16, SEP, SEP])

    @given(st.integers(0, 30), st.integers(0, 30))
    @settings(max_examples=50, deadline=None)
    def test_pair_invariants(self, n_claim, n_sent):
        seq = pair_sequence([5] * n_claim, [6] * n_sent, self.config)
        assert len(seq) == self.config.max_len
        assert seq.ids[0] == CLS
        assert list(seq.ids).count(SEP) == 2
        assert list(seq.ids).count(CLS) == 1
        np.testing.assert_array_equal(seq.mask, seq.ids != PAD)

    def test_single_layout(self):
        seq = single_sequence([7, 8, 9], self.config)
        np.testing.assert_array_equal(seq.ids, [CLS, 7, 8, 9, SEP])
        assert seq.mask.all()

    def test_single_truncates(self):
        seq = single_sequence(list(range(10, 40)), self.config)
        assert len(seq) == self.config.max_len
        assert seq.ids[-1] == SEP


class TestConfigValidation:
    def test_width_heads(self):
        with pytest.raises(DimensionError):
            EncoderConfig(vocab_size=10, width=10, n_heads=3, depth=1, max_len=8)

    def test_max_len_floor(self):
        with pytest.raises(ContractError):
            EncoderConfig(vocab_size=10, width=8, n_heads=2, depth=1, max_len=3)

    def test_vocab_size_floor(self):
        with pytest.raises(ContractError):
            EncoderConfig(vocab_size=4, width=8, n_heads=2, depth=1, max_len=8)


class TestEncoding:
    def test_cls_is_row_zero_exactly(self):
        _, _, params = tiny_setup()
        enc = encode_pair("rabies is a foodborne illness", "the fox jumped", params)
        assert enc.hidden.shape == (params.config.max_len, params.config.width)
        np.testing.assert_array_equal(enc.cls_vec.data, enc.hidden.data[0:1])

    def test_pad_rows_do_not_leak_into_content(self):
        # hidden rows at real positions must match an unpadded encoding
        vocab, config, params = tiny_setup(max_len=12)
        claim, sent = vocab.encode("rabies is"), vocab.encode("the fox")
        padded = pair_sequence(claim, sent, config)
        t = int(padded.mask.sum())
        unpadded = TokenSequence(ids=padded.ids[:t], segments=padded.segments[:t],
                                 mask=padded.mask[:t])
        h_pad = encode_tokens(padded, params)
        h_raw = encode_tokens(unpadded, params)
        np.testing.assert_allclose(h_pad.data[:t], h_raw.data, atol=1e-15)

    def test_different_sentences_different_cls(self):
        _, _, params = tiny_setup()
        a = encode_pair("rabies is a illness", "the fox jumped", params)
        b = encode_pair("rabies is a illness", "mira dolen plays the violin", params)
        assert not np.allclose(a.cls_vec.data, b.cls_vec.data)

    def test_claim_only_vector_differs_from_pair_cls(self):
        _, _, params = tiny_setup()
        pair = encode_pair("rabies is a illness", "the fox jumped", params)
        single = encode_single("rabies is a illness", params)
        assert single.shape == (1, params.config.width)
        assert not np.allclose(single.data, pair.cls_vec.data)

    def test_depth_changes_parameter_count(self):
        _, _, p1 = tiny_setup(depth=1)
        _, _, p3 = tiny_setup(depth=3)
        assert len(list(p3.named())) == len(list(p1.named())) + 2 * 7

    def test_too_long_sequence_rejected(self):
        _, config, params = tiny_setup(max_len=8)
        seq = TokenSequence(ids=np.full(9, 5), segments=np.zeros(9, dtype=np.int64),
                            mask=np.ones(9, dtype=bool))
        with pytest.raises(DimensionError):
            encode_tokens(seq, params)

    def test_gradient_check_through_encoder(self):
        _, _, params = tiny_setup(width=6, n_heads=2, depth=1, max_len=8, seed=3)
        params.tok_emb.requires_grad = True

        def f(_):
            return encode_pair("rabies is", "the fox", params).hidden.sum()

        assert grad_check(f, params.tok_emb) < 1e-4

    def test_dropout_train_vs_eval(self):
        _, _, params = tiny_setup()
        rng = np.random.default_rng(0)
        clean = encode_pair("rabies is", "the fox", params)
        noisy = encode_pair("rabies is", "the fox", params, dropout_p=0.3, rng=rng, train=True)
        assert not np.array_equal(clean.hidden.data, noisy.hidden.data)

    def test_mismatched_vocab_size_rejected(self):
        vocab = Vocabulary.build(["a b c"])
        config = EncoderConfig(vocab_size=99, width=8, n_heads=2, depth=1, max_len=8)
        with pytest.raises(DimensionError):
            EncoderParams.create(config, vocab, np.random.default_rng(0))

    def test_init_std_reaches_attention_blocks(self):
        vocab, config, _ = tiny_setup(width=8, n_heads=2, depth=2)
        wide = EncoderParams.create(config, vocab, np.random.default_rng(0), std=0.5)
        for block in wide.blocks:
            assert float(np.std(block.w_q[0].data)) > 0.3
            assert float(np.std(block.w_o.data)) > 0.3

    def test_position_offsets_stay_small_at_wide_init(self):
        vocab, config, _ = tiny_setup(width=8, n_heads=2, depth=1)
        wide = EncoderParams.create(config, vocab, np.random.default_rng(0), std=0.5)
        assert float(np.std(wide.tok_emb.data)) > 0.3
        assert float(np.std(wide.pos_emb.data)) < 0.05
        assert float(np.std(wide.seg_emb.data)) < 0.05

    def test_attn_identity_reaches_blocks_only(self):
        vocab, config, _ = tiny_setup(width=8, n_heads=2, depth=1)
        plain = EncoderParams.create(config, vocab, np.random.default_rng(4), std=0.1)
        gained = EncoderParams.create(config, vocab, np.random.default_rng(4),
                                      std=0.1, attn_identity=1.5)
        np.testing.assert_array_equal(plain.tok_emb.data, gained.tok_emb.data)
        delta = gained.blocks[0].w_q[0].data - plain.blocks[0].w_q[0].data
        want = np.zeros((8, 4))
        want[0:4, :] = 1.5 * np.eye(4)
        np.testing.assert_allclose(delta, want)


class TestCheckpointNaming:
    def test_named_round_trip(self, tmp_path):
        from verifact.tensor import load_into, save_tensors

        _, _, params = tiny_setup(seed=1)
        named = list(params.named())
        path = tmp_path / "enc.ckpt"
        save_tensors(path, named)

        _, _, fresh = tiny_setup(seed=2)
        load_into(path, list(fresh.named()))
        for (_, a), (_, b) in zip(named, fresh.named()):
            np.testing.assert_array_equal(a.data, b.data)
