import numpy as np
import pytest

from mixseg import errors, mixing
from mixseg import tensor as T


def random_simplex_field(rng, c, h, w):
    x = rng.uniform(0.05, 1.0, size=(c, h, w))
    return x / x.sum(axis=0)


class TestSampleLambda:
    def test_bounds_and_mean(self):
        rng = np.random.default_rng(0)
        draws = np.array([mixing.sample_lambda(rng, 0.5) for _ in range(10000)])
        assert (draws > 0).all() and (draws <= 0.5).all()
        assert abs(draws.mean() - 0.25) < 0.01

    def test_deterministic_per_seed(self):
        a = mixing.sample_lambda(np.random.default_rng(42), 0.5)
        b = mixing.sample_lambda(np.random.default_rng(42), 0.5)
        assert a == b

    def test_validation(self):
        rng = np.random.default_rng(0)
        for bad in (0.0, 1.0, 1.5, -0.1):
            with pytest.raises(errors.InvalidLambda):
                mixing.sample_lambda(rng, bad)


class TestMatchPairs:
    def test_similar_greedy_hand_case(self):
        lv = [[0.0], [1.0], [2.0]]
        uv = [[0.9], [1.1], [0.2], [5.0]]
        # u0 takes 1 (d=.1); u1 sees {0,2}, takes 2 (d=.9); u2 takes 0;
        # pool refills for u3, which takes 2 (d=3)
        assert mixing.match_pairs(lv, uv, "similar") == [1, 2, 0, 2]

    def test_similar_tie_goes_to_lower_index(self):
        assert mixing.match_pairs([[0.0], [2.0]], [[1.0]], "similar") == [0]

    def test_similar_is_permutation_when_counts_match(self):
        rng = np.random.default_rng(3)
        lv = rng.normal(size=(6, 4))
        uv = rng.normal(size=(6, 4))
        partners = mixing.match_pairs(lv, uv, "similar")
        assert sorted(partners) == list(range(6))

    def test_random_is_seeded_permutation(self):
        rng = np.random.default_rng(1)
        lv = np.zeros((8, 2))
        uv = np.zeros((8, 2))
        p1 = mixing.match_pairs(lv, uv, "random", np.random.default_rng(5))
        p2 = mixing.match_pairs(lv, uv, "random", np.random.default_rng(5))
        p3 = mixing.match_pairs(lv, uv, "random", np.random.default_rng(6))
        assert p1 == p2
        assert sorted(p1) == list(range(8))
        assert p1 != p3
        del rng

    def test_random_needs_rng(self):
        with pytest.raises(errors.ConfigError):
            mixing.match_pairs([[0.0]], [[0.0]], "random")

    def test_empty_pool(self):
        with pytest.raises(errors.EmptyPool):
            mixing.match_pairs(np.zeros((0, 2)), np.zeros((1, 2)), "similar")
        with pytest.raises(errors.EmptyPool):
            mixing.match_pairs(np.zeros((1, 2)), np.zeros((0, 2)), "similar")

    def test_unknown_mode(self):
        with pytest.raises(errors.ConfigError):
            mixing.match_pairs([[0.0]], [[0.0]], "nearest")


class TestMixInputs:
    def test_formula(self):
        rng = np.random.default_rng(0)
        a, b = rng.random((3, 4, 4)), rng.random((3, 4, 4))
        lam = 0.37
        out = mixing.mix_inputs(T.Tensor(a), T.Tensor(b), lam).data
        assert np.abs(out - (lam * a + (1 - lam) * b)).max() < 1e-15

    def test_lambda_validation(self):
        x = T.zeros((1, 2, 2))
        for bad in (0.0, 1.0, -0.2, 1.2):
            with pytest.raises(errors.InvalidLambda):
                mixing.mix_inputs(x, x, bad)

    def test_grad_check(self):
        rng = np.random.default_rng(2)
        a = T.Tensor(rng.random((2, 3, 3)))
        b = T.Tensor(rng.random((2, 3, 3)))
        wt = rng.normal(size=(2, 3, 3))
        f = lambda x, y: T.tsum(T.mul(mixing.mix_inputs(x, y, 0.3), T.Tensor(wt)))
        assert T.grad_check(f, [a, b]) < 1e-4


class TestDecoupleSoft:
    def test_exact_inverse_of_mixing(self):
        rng = np.random.default_rng(0)
        worst = 0.0
        for case in range(100):
            c = int(rng.choice([2, 4, 8]))
            h, w = int(rng.integers(2, 6)), int(rng.integers(2, 6))
            lam = float(rng.uniform(0.01, 0.99))
            y_u = random_simplex_field(rng, c, h, w)
            mask = rng.integers(0, c, size=(h, w))
            onehot = (mask[None] == np.arange(c)[:, None, None]).astype(float)
            y_m = lam * onehot + (1 - lam) * y_u
            q = mixing.decouple_soft(y_m, mask, lam)
            worst = max(worst, np.abs(q - y_u).max())
        assert worst <= 1e-12, worst

    def test_rows_sum_to_one(self):
        rng = np.random.default_rng(1)
        y_m = random_simplex_field(rng, 4, 5, 5)
        mask = rng.integers(0, 4, size=(5, 5))
        q = mixing.decouple_soft(y_m, mask, 0.45)
        assert np.abs(q.sum(axis=0) - 1.0).max() < 1e-12
        assert (q >= 0).all()

    def test_uniform_fallback_on_starved_pixels(self):
        # mixed output that is exactly the labeled onehot leaves ~1e-13 of
        # mass after subtraction at lam ~ 1, which triggers the fallback
        c = 4
        mask = np.array([[2]])
        y_m = np.zeros((c, 1, 1))
        y_m[2, 0, 0] = 1.0
        q = mixing.decouple_soft(y_m, mask, 1.0 - 1e-13)
        assert np.abs(q - 0.25).max() < 1e-15

    def test_rejects_non_distribution(self):
        y = np.full((2, 2, 2), 0.6)  # sums to 1.2
        with pytest.raises(errors.InvalidDistribution):
            mixing.decouple_soft(y, np.zeros((2, 2), dtype=int), 0.5)

    def test_rejects_bad_lambda_and_mask(self):
        y = random_simplex_field(np.random.default_rng(0), 2, 2, 2)
        with pytest.raises(errors.InvalidLambda):
            mixing.decouple_soft(y, np.zeros((2, 2), dtype=int), 1.0)
        with pytest.raises(errors.DomainError):
            mixing.decouple_soft(y, np.full((2, 2), 7), 0.5)


class TestDecoupleHard:
    def test_argmax_and_ignore(self):
        y_m = np.zeros((3, 2, 2))
        y_m[:, 0, 0] = [0.2, 0.5, 0.3]
        y_m[:, 0, 1] = [0.6, 0.2, 0.2]
        y_m[:, 1, 0] = [0.1, 0.2, 0.7]
        y_m[:, 1, 1] = [0.4, 0.4, 0.2]  # tie -> class 0
        mask = np.array([[0, 1], [0, 0]])  # (0,1) has labeled foreground
        out = mixing.decouple_hard(y_m, mask)
        assert out[0, 0] == 1
        assert out[0, 1] == mixing.IGNORE
        assert out[1, 0] == 2
        assert out[1, 1] == 0

    def test_rejects_non_distribution(self):
        with pytest.raises(errors.InvalidDistribution):
            mixing.decouple_hard(np.full((2, 2, 2), 0.3), np.zeros((2, 2), dtype=int))


class TestUnsupLoss:
    def test_soft_hand_value(self):
        pred = T.Tensor(np.array([[[0.3, 0.6]], [[0.7, 0.4]]]))
        tgt = np.full((2, 1, 2), 0.5)
        loss = mixing.unsup_loss(pred, tgt, "soft", weight=2.0)
        # squared diffs .04+.04+.01+.01 = .1, over 2 pixels = .05, x2
        assert abs(loss.item() - 0.1) < 1e-15

    def test_hard_hand_value(self):
        pred = T.Tensor(np.array([[[0.3, 0.6]], [[0.7, 0.4]]]))
        tgt = np.array([[1, mixing.IGNORE]])
        loss = mixing.unsup_loss(pred, tgt, "hard", weight=3.0)
        assert abs(loss.item() - 3.0 * -np.log(0.7)) < 1e-12

    def test_zero_weight_zero_everything(self):
        pred = T.Tensor(np.full((2, 2, 2), 0.5), requires_grad=True)
        tgt = np.full((2, 2, 2), 0.5)
        tgt[0] = 0.9
        tgt[1] = 0.1
        loss = mixing.unsup_loss(pred, tgt, "soft", weight=0.0)
        assert loss.item() == 0.0
        T.backward(loss)
        assert np.abs(pred.grad).max() == 0.0

    def test_negative_weight_rejected(self):
        with pytest.raises(errors.DomainError):
            mixing.unsup_loss(T.zeros((2, 1, 1)), np.zeros((2, 1, 1)), "soft", -1.0)

    def test_grad_check_both_modes(self):
        rng = np.random.default_rng(4)
        for mode in ("soft", "hard"):
            worst = 0.0
            for s in range(10):
                pred = T.Tensor(rng.uniform(0.1, 0.9, size=(3, 3, 3)))
                if mode == "soft":
                    tgt = random_simplex_field(rng, 3, 3, 3)
                else:
                    tgt = rng.integers(0, 3, size=(3, 3))
                    tgt[0, 0] = mixing.IGNORE
                f = lambda p: mixing.unsup_loss(p, tgt, mode, weight=1.3)
                worst = max(worst, T.grad_check(f, [pred]))
            assert worst < 1e-4, (mode, worst)
