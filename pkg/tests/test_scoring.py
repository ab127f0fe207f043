"""Scorer tests: alignment oracle, hand-computed cases, duality, gradients."""

import numpy as np
import pytest

import softscore.autodiff as ad
import softscore.lm as lm
import softscore.scoring as scoring
from softscore.autodiff import Tensor


def orthonormal_encoder():
    """Identity encoder whose content tokens a, b have embeddings (1,0), (0,1)."""
    vocab = lm.Vocabulary.build(["a", "b"])
    matrix = np.zeros((6, 2))
    matrix[0:4] = [[0.3, 0.1], [0.1, 0.3], [0.2, 0.2], [0.1, 0.1]]  # sentinels, never scored
    matrix[4] = [1.0, 0.0]
    matrix[5] = [0.0, 1.0]
    return lm.identity_encoder(vocab, matrix)


def random_identity_encoder(n_content=12, dim=8, seed=0):
    vocab = lm.Vocabulary.build([f"w{i}" for i in range(n_content)])
    matrix = np.random.default_rng(seed).normal(size=(len(vocab), dim))
    return lm.identity_encoder(vocab, matrix)


class TestGreedyAlign:
    def test_identity_matrix(self):
        a = scoring.greedy_align(np.eye(3))
        np.testing.assert_array_equal(a.row_argmax, [0, 1, 2])
        np.testing.assert_array_equal(a.row_max, [1.0, 1.0, 1.0])

    def test_constant_matrix_ties_to_zero(self):
        a = scoring.greedy_align(np.full((3, 4), 0.5))
        np.testing.assert_array_equal(a.row_argmax, [0, 0, 0])
        np.testing.assert_array_equal(a.col_argmax, [0, 0, 0, 0])

    def test_matches_double_loop_oracle(self):
        sim = np.random.default_rng(1).normal(size=(4, 5))
        a = scoring.greedy_align(sim)
        for i in range(4):
            best_j, best = 0, sim[i, 0]
            for j in range(1, 5):
                if sim[i, j] > best:
                    best_j, best = j, sim[i, j]
            assert a.row_argmax[i] == best_j
            assert a.row_max[i] == best
        for j in range(5):
            best_i, best = 0, sim[0, j]
            for i in range(1, 4):
                if sim[i, j] > best:
                    best_i, best = i, sim[i, j]
            assert a.col_argmax[j] == best_i
            assert a.col_max[j] == best

    def test_empty_rejected(self):
        with pytest.raises(ValueError):
            scoring.greedy_align(np.zeros((0, 3)))


class TestScoreHard:
    def test_self_score_is_one(self):
        for enc in (random_identity_encoder(), lm.random_encoder(lm.Vocabulary.build([f"w{i}" for i in range(8)]), dim=8, n_layers=1, seed=2)):
            ids = [4, 6, 5, 7]
            triple = scoring.score_hard(ids, ids, enc)
            assert triple.precision == pytest.approx(1.0, abs=1e-6)
            assert triple.recall == pytest.approx(1.0, abs=1e-6)
            assert triple.f == pytest.approx(1.0, abs=1e-6)

    def test_hand_case_reference_ab_candidate_a(self):
        enc = orthonormal_encoder()
        triple = scoring.score_hard([4], [4, 5], enc)
        assert triple.precision == 1.0
        assert triple.recall == 0.5
        assert triple.f == pytest.approx(2.0 / 3.0)

    def test_orthogonal_single_tokens(self):
        enc = orthonormal_encoder()
        triple = scoring.score_hard([4], [5], enc)
        assert triple == scoring.ScoreTriple(0.0, 0.0, 0.0)

    def test_sentinels_are_stripped(self):
        enc = orthonormal_encoder()
        v = enc.vocab
        bare = scoring.score_hard([4], [4, 5], enc)
        wrapped = scoring.score_hard(
            [v.bos_id, 4, v.eos_id], [v.bos_id, 4, 5, v.eos_id, v.pad_id], enc
        )
        assert wrapped == bare

    def test_empty_sequence_flagged(self):
        enc = orthonormal_encoder()
        v = enc.vocab
        triple = scoring.score_hard([v.bos_id, v.eos_id], [4], enc)
        assert triple.empty
        assert (triple.precision, triple.recall, triple.f) == (0.0, 0.0, 0.0)

    def test_role_swap_duality_exact(self):
        enc = random_identity_encoder()
        rng = np.random.default_rng(3)
        for _ in range(50):
            c = list(rng.integers(4, 16, size=rng.integers(1, 7)))
            r = list(rng.integers(4, 16, size=rng.integers(1, 7)))
            ab = scoring.score_hard(c, r, enc)
            ba = scoring.score_hard(r, c, enc)
            assert ab.precision == ba.recall
            assert ab.recall == ba.precision

    def test_bounds(self):
        enc = random_identity_encoder()
        rng = np.random.default_rng(4)
        for _ in range(50):
            c = list(rng.integers(4, 16, size=rng.integers(1, 7)))
            r = list(rng.integers(4, 16, size=rng.integers(1, 7)))
            t = scoring.score_hard(c, r, enc)
            for value in (t.precision, t.recall, t.f):
                assert -1.0 - 1e-12 <= value <= 1.0 + 1e-12

    def test_recall_invariant_to_candidate_permutation(self):
        enc = random_identity_encoder()
        rng = np.random.default_rng(5)
        for _ in range(30):
            c = rng.integers(4, 16, size=6)
            r = list(rng.integers(4, 16, size=4))
            base = scoring.score_hard(list(c), r, enc)
            perm = scoring.score_hard(list(rng.permutation(c)), r, enc)
            assert perm.recall == base.recall


class TestScoreSoft:
    def test_point_mass_reduces_to_hard(self):
        enc = random_identity_encoder()
        ids = [4, 7, 9]
        soft = Tensor(enc.embed_tokens(ids))
        hard = scoring.score_hard(ids, ids, enc)
        s = scoring.score_soft(soft, ids, enc)
        assert s.f.item() == pytest.approx(hard.f, abs=1e-9)
        assert s.f.item() == pytest.approx(1.0, abs=1e-9)

    def test_hard_soft_consistency_identity(self):
        enc = random_identity_encoder(n_content=20, dim=12, seed=6)
        rng = np.random.default_rng(7)
        for _ in range(100):
            cand = list(rng.integers(4, 24, size=rng.integers(1, 8)))
            ref = list(rng.integers(4, 24, size=rng.integers(1, 8)))
            soft = Tensor(enc.embed_tokens(cand))
            s = scoring.score_soft(soft, ref, enc)
            h = scoring.score_hard(cand, ref, enc)
            assert s.precision.item() == pytest.approx(h.precision, abs=1e-9)
            assert s.recall.item() == pytest.approx(h.recall, abs=1e-9)
            assert s.f.item() == pytest.approx(h.f, abs=1e-9)

    def test_hard_soft_consistency_transformer(self):
        vocab = lm.Vocabulary.build([f"w{i}" for i in range(10)])
        enc = lm.random_encoder(vocab, dim=8, n_layers=1, seed=8)
        rng = np.random.default_rng(9)
        for _ in range(30):
            cand = list(rng.integers(4, 14, size=rng.integers(1, 6)))
            ref = list(rng.integers(4, 14, size=rng.integers(1, 6)))
            s = scoring.score_soft(Tensor(enc.embed_tokens(cand)), ref, enc)
            h = scoring.score_hard(cand, ref, enc)
            assert s.f.item() == pytest.approx(h.f, abs=1e-6)

    def test_width_mismatch_rejected(self):
        enc = random_identity_encoder(dim=8)
        with pytest.raises(ValueError, match="width"):
            scoring.score_soft(Tensor(np.zeros((2, 5))), [4, 5], enc)

    def test_gradient_matches_finite_differences(self):
        enc = random_identity_encoder(n_content=8, dim=6, seed=10)
        rng = np.random.default_rng(11)
        ref = [4, 5, 6]
        worst = 0.0
        for _ in range(20):
            x0 = rng.normal(size=(2, 6))
            err = ad.grad_check(
                lambda x: scoring.score_soft(x.reshape(2, 6), ref, enc).f, x0
            )
            worst = max(worst, err)
        assert worst < 1e-4

    def test_moving_toward_aligned_reference_never_decreases_f(self):
        # Soft embeddings start as noisy copies of the reference rows (the
        # regime fine-tuning actually visits); sliding each one linearly
        # toward the reference row it aligns to must not hurt F.
        enc = random_identity_encoder(n_content=30, dim=16, seed=12)
        rng = np.random.default_rng(13)
        for _ in range(100):
            k = int(rng.integers(2, 6))
            ref = list(rng.integers(4, 34, size=k))
            ref_emb = enc.embed_tokens(ref)
            ref_unit = ref_emb / np.linalg.norm(ref_emb, axis=1, keepdims=True)
            start = ref_unit + 0.3 * rng.normal(size=ref_unit.shape)
            sim = (ref_unit @ (start / np.linalg.norm(start, axis=1, keepdims=True)).T)
            target = ref_unit[np.argmax(sim, axis=0)]
            previous = -np.inf
            for t in np.linspace(0.0, 1.0, 11):
                point = (1 - t) * start + t * target
                with ad.no_grad():
                    f = scoring.score_soft(Tensor(point), ref, enc).f.item()
                assert f >= previous - 1e-12
                previous = f
