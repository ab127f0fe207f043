"""Frozen-encoder tests: vocabulary rules, file round-trips, contextualize."""

import numpy as np
import pytest

import softscore.autodiff as ad
import softscore.lm as lm
from softscore.autodiff import Tensor


def small_vocab(n_content=6):
    return lm.Vocabulary.build([f"w{i}" for i in range(n_content)])


class TestVocabulary:
    def test_build_places_sentinels_first(self):
        v = small_vocab()
        assert v.tokens[:4] == [lm.BOS, lm.EOS, lm.PAD, lm.UNK]
        assert (v.bos_id, v.eos_id, v.pad_id, v.unk_id) == (0, 1, 2, 3)

    def test_duplicate_sentinel_indices_rejected(self):
        with pytest.raises(lm.SentinelError):
            lm.Vocabulary(["a", "b", "c", "d"], 0, 0, 1, 2)

    def test_sentinel_out_of_range(self):
        with pytest.raises(lm.SentinelError):
            lm.Vocabulary(["a", "b", "c", "d"], 0, 1, 2, 9)

    def test_duplicate_tokens_rejected(self):
        with pytest.raises(ValueError):
            lm.Vocabulary(["a", "b", "c", "d", "d"], 0, 1, 2, 3)

    def test_encode_falls_back_to_unk(self):
        v = small_vocab()
        assert v.encode(["w0", "nope"]) == [4, v.unk_id]

    def test_content_ids_strip_sentinels(self):
        v = small_vocab()
        ids = [v.bos_id, 4, v.unk_id, 5, v.eos_id, v.pad_id]
        assert v.content_ids(ids) == [4, v.unk_id, 5]


class TestEmbeddingTable:
    def test_rejects_nonfinite(self):
        with pytest.raises(ValueError):
            lm.EmbeddingTable(np.array([[1.0, np.nan]]))

    def test_rejects_vocab_table_mismatch(self):
        v = small_vocab(6)  # 10 tokens with sentinels
        with pytest.raises(lm.DimensionMismatch):
            lm.LmEncoder(v, lm.EmbeddingTable(np.zeros((9, 4))))


class TestIdentityEncoder:
    def test_contextualize_is_identity(self):
        v = small_vocab()
        enc = lm.identity_encoder(v, np.random.default_rng(0).normal(size=(10, 4)))
        x = Tensor(np.random.default_rng(1).normal(size=(3, 4)))
        assert enc.contextualize(x) is x

    def test_embed_tokens(self):
        v = small_vocab()
        matrix = np.arange(40.0).reshape(10, 4)
        enc = lm.identity_encoder(v, matrix)
        np.testing.assert_array_equal(enc.embed_tokens([7]), matrix[[7]])
        assert enc.embed_tokens([]).shape == (0, 4)
        out = enc.embed_tokens([3, 3])
        np.testing.assert_array_equal(out[0], out[1])
        with pytest.raises(IndexError):
            enc.embed_tokens([10])


class TestPersistence:
    def test_identity_round_trip(self, tmp_path):
        v = small_vocab()
        matrix = np.random.default_rng(2).normal(size=(10, 4))
        enc = lm.identity_encoder(v, matrix)
        lm.save_lm(enc, tmp_path)
        loaded = lm.load_lm(tmp_path)
        assert loaded.mode == lm.IDENTITY
        assert loaded.vocab == v
        np.testing.assert_allclose(loaded.embed_tokens([5]), matrix[[5]], atol=1e-6)

    def test_transformer_round_trip_deterministic(self, tmp_path):
        v = small_vocab()
        enc = lm.random_encoder(v, dim=8, n_layers=1, n_heads=2, seed=3)
        lm.save_lm(enc, tmp_path)
        loaded = lm.load_lm(tmp_path)
        x = np.random.default_rng(4).normal(size=(3, 8))
        out1 = loaded.contextualize(Tensor(x)).data
        out2 = loaded.contextualize(Tensor(x)).data
        np.testing.assert_array_equal(out1, out2)
        # round-tripped weights are f32-quantized, so compare loosely
        np.testing.assert_allclose(out1, enc.contextualize(Tensor(x)).data, atol=1e-5)

    def test_checksum_corruption_detected(self, tmp_path):
        enc = lm.identity_encoder(small_vocab(), np.ones((10, 4)))
        lm.save_lm(enc, tmp_path)
        blob = bytearray((tmp_path / "model.bin").read_bytes())
        blob[7] ^= 0xFF
        (tmp_path / "model.bin").write_bytes(bytes(blob))
        with pytest.raises(lm.ChecksumMismatch):
            lm.load_lm(tmp_path)

    def test_dimension_inconsistency_detected(self, tmp_path):
        import json

        enc = lm.identity_encoder(small_vocab(), np.ones((10, 4)))
        lm.save_lm(enc, tmp_path)
        manifest = json.loads((tmp_path / "model.json").read_text())
        manifest["vocab_size"] = 9
        manifest["vocabulary"] = manifest["vocabulary"][:9]
        (tmp_path / "model.json").write_text(json.dumps(manifest))
        with pytest.raises(lm.DimensionMismatch):
            lm.load_lm(tmp_path)

    def test_sentinel_error_detected(self, tmp_path):
        import json

        enc = lm.identity_encoder(small_vocab(), np.ones((10, 4)))
        lm.save_lm(enc, tmp_path)
        manifest = json.loads((tmp_path / "model.json").read_text())
        manifest["eos_id"] = manifest["bos_id"]
        (tmp_path / "model.json").write_text(json.dumps(manifest))
        with pytest.raises(lm.SentinelError):
            lm.load_lm(tmp_path)


class TestTransformerMode:
    def test_position_sensitivity(self):
        enc = lm.random_encoder(small_vocab(), dim=8, n_layers=1, seed=5)
        rng = np.random.default_rng(6)
        x = rng.normal(size=(2, 8))
        out = enc.contextualize(Tensor(x)).data
        swapped = enc.contextualize(Tensor(x[::-1].copy())).data
        # same tokens, swapped positions: outputs must differ somewhere
        assert not np.allclose(out, swapped[::-1], atol=1e-8)

    def test_over_length_rejected(self):
        enc = lm.random_encoder(small_vocab(), dim=8, n_layers=1, max_len=4, seed=7)
        with pytest.raises(ValueError, match="exceeds"):
            enc.contextualize(Tensor(np.zeros((5, 8))))

    def test_gradient_through_contextualize(self):
        enc = lm.random_encoder(small_vocab(), dim=8, n_layers=1, seed=8)
        rng = np.random.default_rng(9)
        c = Tensor(rng.normal(size=(2, 8)))
        worst = 0.0
        for _ in range(5):
            x0 = rng.normal(size=16)
            worst = max(
                worst,
                ad.grad_check(lambda x: (enc.contextualize(x.reshape(2, 8)) * c).sum(), x0),
            )
        assert worst < 1e-4

    def test_parameters_are_frozen(self):
        enc = lm.random_encoder(small_vocab(), dim=8, n_layers=1, seed=10)
        assert all(not t.requires_grad for t in enc.params.tensors())
        before = enc.state_bytes()
        x = Tensor(np.random.default_rng(11).normal(size=(3, 8)), requires_grad=True)
        out = enc.contextualize(x).sum()
        ad.backward(out)
        assert x.grad is not None
        assert all(t.grad is None for t in enc.params.tensors())
        assert enc.state_bytes() == before
