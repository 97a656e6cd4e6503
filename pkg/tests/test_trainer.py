import numpy as np
import pytest

from mixseg import errors, nn, trainer
from mixseg import tensor as T
from mixseg.dataio import Sample


class TestPolyLr:
    def test_endpoints_exact(self):
        assert trainer.poly_lr(1e-3, 0, 1000) == 1e-3
        assert trainer.poly_lr(1e-3, 1000, 1000) == 0.0

    def test_midpoint_frozen(self):
        # mpmath: 1e-3 * 0.5^0.9 = 0.00053588673126814658211
        got = trainer.poly_lr(1e-3, 500, 1000, power=0.9)
        assert abs(got - 0.00053588673126814658211) < 1e-12

    def test_monotone_decreasing(self):
        vals = [trainer.poly_lr(1e-3, i, 100) for i in range(101)]
        assert all(a > b for a, b in zip(vals, vals[1:]))

    def test_validation(self):
        with pytest.raises(errors.InvalidIteration):
            trainer.poly_lr(1e-3, -1, 100)
        with pytest.raises(errors.InvalidIteration):
            trainer.poly_lr(1e-3, 101, 100)
        with pytest.raises(errors.InvalidIteration):
            trainer.poly_lr(1e-3, 0, 0)


class TestRampWeight:
    def test_start_frozen(self):
        # mpmath: e^-5 = 0.0067379469990854670966
        assert abs(trainer.ramp_weight(0, 100, 1.0) - 0.0067379469990854670966) < 1e-15

    def test_mid_frozen(self):
        # mpmath: e^-1.25 = 0.28650479686019010032
        assert abs(trainer.ramp_weight(50, 100, 1.0) - 0.28650479686019010032) < 1e-15

    def test_saturates_exactly(self):
        assert trainer.ramp_weight(100, 100, 2.5) == 2.5
        assert trainer.ramp_weight(400, 100, 2.5) == 2.5

    def test_scales_with_max(self):
        assert trainer.ramp_weight(0, 10, 3.0) == 3.0 * trainer.ramp_weight(0, 10, 1.0)

    def test_validation(self):
        with pytest.raises(errors.InvalidIteration):
            trainer.ramp_weight(0, 0, 1.0)
        with pytest.raises(errors.InvalidIteration):
            trainer.ramp_weight(-1, 10, 1.0)


class TestSgd:
    def params(self, vals):
        return {k: T.Tensor(np.array(v), requires_grad=True) for k, v in vals.items()}

    def test_two_step_frozen_sequence(self):
        # lr .1, momentum .9, wd 0, grads all ones:
        # v1 = 1 -> p = 0.9;  v2 = 1.9 -> p = 0.71
        p = self.params({"w": [1.0]})
        st = trainer.SGDState.zeros(p)
        p["w"].grad = np.ones(1)
        trainer.sgd_step(p, st, 0.1, 0.9, 0.0)
        assert abs(p["w"].data[0] - 0.9) < 1e-15
        p["w"].grad = np.ones(1)
        trainer.sgd_step(p, st, 0.1, 0.9, 0.0)
        assert abs(p["w"].data[0] - 0.71) < 1e-15

    def test_weight_decay_enters_gradient(self):
        # g' = 1 + 0.1*1 = 1.1 -> p = 1 - 0.11
        p = self.params({"w": [1.0]})
        st = trainer.SGDState.zeros(p)
        p["w"].grad = np.ones(1)
        trainer.sgd_step(p, st, 0.1, 0.9, 0.1)
        assert abs(p["w"].data[0] - 0.89) < 1e-15

    def test_none_grad_skipped(self):
        p = self.params({"a": [1.0], "b": [2.0]})
        st = trainer.SGDState.zeros(p)
        p["a"].grad = np.ones(1)
        trainer.sgd_step(p, st, 0.1, 0.9, 0.1)
        assert p["b"].data[0] == 2.0
        assert st.velocities["b"][0] == 0.0

    def test_state_mismatch(self):
        p = self.params({"a": [1.0]})
        st = trainer.SGDState({"other": np.zeros(1)})
        with pytest.raises(errors.StateMismatch):
            trainer.sgd_step(p, st, 0.1, 0.9, 0.0)


class TestAugment:
    def test_flip_is_involution(self):
        rng = np.random.default_rng(0)
        img = rng.random((3, 8, 8))
        mask = rng.integers(0, 4, size=(8, 8))
        f1, m1 = trainer.augment(img, mask, np.random.default_rng(1), flip_prob=1.0)
        f2, m2 = trainer.augment(f1, m1, np.random.default_rng(1), flip_prob=1.0)
        assert (f2 == img).all()
        assert (m2 == mask).all()

    def test_no_flip_at_zero_prob(self):
        img = np.random.default_rng(0).random((3, 8, 8))
        out, _ = trainer.augment(img, None, np.random.default_rng(0), flip_prob=0.0)
        assert (out == img).all()

    def test_crop_shape_and_bounds(self):
        rng = np.random.default_rng(2)
        img = rng.random((3, 16, 16))
        mask = rng.integers(0, 4, size=(16, 16))
        out, m = trainer.augment(img, mask, np.random.default_rng(3), crop=8,
                                 flip_prob=0.0)
        assert out.shape == (3, 8, 8)
        assert m.shape == (8, 8)

    def test_crop_validation(self):
        img = np.zeros((3, 16, 16))
        with pytest.raises(errors.InvalidShape):
            trainer.augment(img, None, np.random.default_rng(0), crop=10)
        with pytest.raises(errors.InvalidShape):
            trainer.augment(img, None, np.random.default_rng(0), crop=20)

    def test_deterministic_per_seed(self):
        img = np.random.default_rng(4).random((3, 16, 16))
        a, _ = trainer.augment(img, None, np.random.default_rng(9), crop=8)
        b, _ = trainer.augment(img, None, np.random.default_rng(9), crop=8)
        assert (a == b).all()


def tiny_setup(seed=0, n_lab=3, n_unl=4, size=16):
    rng = np.random.default_rng(seed)
    model = nn.SegModel(num_classes=4, enc_channels=(4, 6, 8), psp_bins=(1, 2, 3),
                        embed_dim=4, seed=seed)
    lab = []
    for i in range(n_lab):
        mask = np.zeros((size, size), dtype=np.uint8)
        mask[4:10, 4:10] = rng.integers(1, 4)
        lab.append(Sample(i, rng.random((3, size, size)), mask))
    unl = [Sample(100 + i, rng.random((3, size, size)), None) for i in range(n_unl)]
    val = [Sample(200 + i, rng.random((3, size, size)),
                  rng.integers(0, 4, size=(size, size)).astype(np.uint8))
           for i in range(2)]
    return model, lab, unl, val


class TestTrainStep:
    def test_metrics_finite_and_weighted(self):
        model, lab, unl, _ = tiny_setup()
        cfg = trainer.TrainConfig(max_iter=100, seed=0)
        st = trainer.SGDState.zeros(model.params)
        m = trainer.train_step(model, lab, unl, 5, cfg, st)
        assert np.isfinite([m.lr, m.loss_sup, m.loss_unsup, m.loss_cls,
                            m.loss_total]).all()
        assert m.weight_unsup == trainer.ramp_weight(5, 10, 1.0)
        assert m.loss_unsup > 0.0
        assert abs(m.loss_total - (m.loss_sup + m.loss_unsup + m.loss_cls)) < 1e-12

    def test_bit_identical_across_reruns(self):
        outs = []
        for _ in range(2):
            model, lab, unl, _ = tiny_setup(seed=3)
            cfg = trainer.TrainConfig(max_iter=50, seed=3)
            st = trainer.SGDState.zeros(model.params)
            for it in range(3):
                m = trainer.train_step(model, lab, unl, it, cfg, st)
            outs.append((m, {k: v.data.copy() for k, v in model.params.items()}))
        assert outs[0][0] == outs[1][0]
        for k in outs[0][1]:
            assert (outs[0][1][k] == outs[1][1][k]).all(), k

    def test_zero_unsup_weight_skips_branch(self):
        model, lab, unl, _ = tiny_setup()
        before = {k: v.data.copy() for k, v in model.params.items()
                  if k.startswith("attn.")}
        cfg = trainer.TrainConfig(max_iter=100, seed=0, unsup_weight_max=0.0)
        st = trainer.SGDState.zeros(model.params)
        m = trainer.train_step(model, lab, unl, 0, cfg, st)
        assert m.loss_unsup == 0.0
        assert m.weight_unsup == 0.0
        for k, v in model.params.items():
            if k.startswith("attn."):
                assert (v.data == before[k]).all(), k

    def test_mixed_ce_trains_attention(self):
        # attention only ever runs on the mixed forward, so the mixed CE
        # term is its sole gradient source; one step must move every
        # projection
        model, lab, unl, _ = tiny_setup()
        before = {k: v.data.copy() for k, v in model.params.items()
                  if k.startswith("attn.")}
        cfg = trainer.TrainConfig(max_iter=100, seed=0, mixed_ce=True)
        st = trainer.SGDState.zeros(model.params)
        trainer.train_step(model, lab, unl, 0, cfg, st)
        for k, v in model.params.items():
            if k.startswith("attn."):
                assert (v.data != before[k]).any(), k

    def test_without_mixed_terms_attention_is_frozen(self):
        # pseudo targets are constants, so with both mixed-pass losses
        # off no loss term can reach the attention projections
        model, lab, unl, _ = tiny_setup()
        before = {k: v.data.copy() for k, v in model.params.items()
                  if k.startswith("attn.")}
        cfg = trainer.TrainConfig(max_iter=100, seed=0, mixed_ce=False,
                                  interp_weight_max=0.0)
        st = trainer.SGDState.zeros(model.params)
        m = trainer.train_step(model, lab, unl, 0, cfg, st)
        assert m.loss_unsup > 0.0
        for k, v in model.params.items():
            if k.startswith("attn."):
                assert (v.data == before[k]).all(), k

    def test_mixed_ce_adds_to_supervised_loss(self):
        model, lab, unl, _ = tiny_setup()
        st = trainer.SGDState.zeros(model.params)
        on = trainer.train_step(model, lab, unl, 0,
                                trainer.TrainConfig(max_iter=100, seed=0,
                                                    base_lr=0.0, mixed_ce=True), st)
        model2, lab2, unl2, _ = tiny_setup()
        st2 = trainer.SGDState.zeros(model2.params)
        off = trainer.train_step(model2, lab2, unl2, 0,
                                 trainer.TrainConfig(max_iter=100, seed=0,
                                                     base_lr=0.0, mixed_ce=False), st2)
        assert on.loss_sup > off.loss_sup
        assert on.loss_unsup == off.loss_unsup

    def test_nan_input_diverges(self):
        model, lab, unl, _ = tiny_setup()
        lab[0].image[0, 0, 0] = np.nan
        cfg = trainer.TrainConfig(max_iter=100, seed=0)
        st = trainer.SGDState.zeros(model.params)
        with pytest.raises(errors.DivergedError):
            trainer.train_step(model, lab, unl, 0, cfg, st)
        T._tape.clear()

    def test_needs_labeled(self):
        model, _, unl, _ = tiny_setup()
        cfg = trainer.TrainConfig(max_iter=10)
        with pytest.raises(errors.EmptyPool):
            trainer.train_step(model, [], unl, 0, cfg,
                               trainer.SGDState.zeros(model.params))


class TestRunTraining:
    def test_outputs_and_csv_layout(self, tmp_path):
        model, lab, unl, val = tiny_setup(seed=1)
        cfg = trainer.TrainConfig(max_iter=6, eval_every=3, seed=1)
        res = trainer.run_training(model, lab, unl, val, cfg, tmp_path / "run")
        lines = (tmp_path / "run" / "metrics.csv").read_text().splitlines()
        assert lines[0] == trainer.CSV_HEADER
        assert len(lines) == 7
        # val column filled at iters 3, 6 (1-based eval points), empty elsewhere
        for ln, line in enumerate(lines[1:], start=0):
            cell = line.split(",")[6]
            if ln in (2, 5):
                assert cell != ""
            else:
                assert cell == ""
        assert 0.0 <= res.final_miou <= 1.0
        assert (tmp_path / "run" / "final.gmnt").exists()

    def test_checkpoint_roundtrip_with_velocities(self, tmp_path):
        model, lab, unl, val = tiny_setup(seed=2)
        cfg = trainer.TrainConfig(max_iter=3, eval_every=0, seed=2)
        res = trainer.run_training(model, lab, unl, val, cfg, tmp_path / "run")
        m2 = nn.SegModel(num_classes=4, enc_channels=(4, 6, 8), psp_bins=(1, 2, 3),
                         embed_dim=4, seed=9)
        st = trainer.load_model_checkpoint(m2, res.checkpoint_path)
        for k in model.params:
            assert (m2.params[k].data == model.params[k].data).all()
        assert set(st.velocities) == set(model.params)

    def test_rerun_is_byte_identical(self, tmp_path):
        blobs = []
        for d in ("a", "b"):
            model, lab, unl, val = tiny_setup(seed=5)
            cfg = trainer.TrainConfig(max_iter=4, eval_every=2, seed=5)
            trainer.run_training(model, lab, unl, val, cfg, tmp_path / d)
            blobs.append(((tmp_path / d / "metrics.csv").read_bytes(),
                          (tmp_path / d / "final.gmnt").read_bytes()))
        assert blobs[0] == blobs[1]
