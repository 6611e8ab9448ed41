import math
import os

import numpy as np
import pytest

import oracles
from acm_unet import engine as eg
from acm_unet.data import sample_phantom
from acm_unet.engine import Parameter, Tensor, grad_check
from acm_unet.losses import (
    LabelOutOfRange,
    LossConfig,
    ce_loss,
    dice_loss,
    one_hot,
    total_loss,
)
from acm_unet.metrics import (
    MetricsReport,
    boundary_points,
    dsc_metric,
    evaluate_masks,
    hausdorff,
    hd95,
)
from acm_unet.model import ModelConfig, build_model, read_checkpoint
from acm_unet.optim import AdamW, adamw_step, cosine_lr
from acm_unet.training import (
    EmptyDataset,
    TrainParams,
    evaluate,
    predict_labels,
    train_loop,
)

rng = np.random.default_rng(77)


class TestDiceLoss:
    def test_saturated_correct_predictions(self):
        labels = rng.integers(0, 3, (1, 6, 6)).astype(np.float64)
        logits = (one_hot(labels, 3, np.float64).data * 40.0) - 20.0
        loss = dice_loss(Tensor(logits), labels)
        assert loss.item() <= 0.01

    def test_uniform_logits_balanced_binary(self):
        labels = np.zeros((1, 4, 4), np.float64)
        labels[:, 2:] = 1.0  # half the pixels per class
        logits = np.zeros((1, 2, 4, 4), np.float64)
        loss = dice_loss(Tensor(logits), labels)
        ref = oracles.soft_dice_loop(logits, labels)
        assert abs(loss.item() - ref) < 1e-12
        assert abs(loss.item() - 0.5) < 0.04  # smoothing shifts it slightly

    def test_matches_bruteforce_oracle(self):
        logits = rng.uniform(-2, 2, (2, 3, 5, 5))
        labels = rng.integers(0, 3, (2, 5, 5)).astype(np.float64)
        loss = dice_loss(Tensor(logits), labels)
        assert abs(loss.item() - oracles.soft_dice_loop(logits, labels)) < 1e-12

    def test_empty_class_contributes_no_loss(self):
        # class 2 absent from labels and predicted nowhere: its smoothed
        # ratio is ~1, so it adds nothing to the loss.
        labels = np.zeros((1, 4, 4), np.float64)
        logits = np.full((1, 3, 4, 4), -30.0)
        logits[:, 0] = 30.0
        loss = dice_loss(Tensor(np.ascontiguousarray(logits)), labels)
        assert loss.item() < 1e-6

    def test_label_out_of_range(self):
        with pytest.raises(LabelOutOfRange):
            dice_loss(Tensor(np.zeros((1, 2, 2, 2), np.float64)),
                      np.full((1, 2, 2), 5.0))


class TestCELoss:
    def test_uniform_logits_ln_k(self):
        for k in (2, 5, 9):
            loss = ce_loss(Tensor(np.zeros((1, k, 3, 3), np.float64)),
                           np.zeros((1, 3, 3)))
            assert abs(loss.item() - math.log(k)) < 1e-9

    def test_saturated(self):
        labels = rng.integers(0, 4, (1, 4, 4)).astype(np.float64)
        logits = one_hot(labels, 4, np.float64).data * 50.0
        assert ce_loss(Tensor(logits), labels).item() < 1e-9

    def test_matches_direct_oracle(self):
        logits = rng.uniform(-3, 3, (2, 4, 5, 5))
        labels = rng.integers(0, 4, (2, 5, 5)).astype(np.float64)
        loss = ce_loss(Tensor(logits), labels)
        assert abs(loss.item() - oracles.ce_loop(logits, labels)) < 1e-9


class TestTotalLoss:
    def test_alpha_boundaries_exact(self):
        logits = Tensor(rng.uniform(-2, 2, (1, 3, 4, 4)))
        labels = rng.integers(0, 3, (1, 4, 4)).astype(np.float64)
        assert total_loss(logits, labels, LossConfig(0.0)).item() == \
            ce_loss(logits, labels).item()
        assert total_loss(logits, labels, LossConfig(1.0)).item() == \
            dice_loss(logits, labels).item()

    def test_midpoint_is_mean(self):
        logits = Tensor(rng.uniform(-2, 2, (1, 3, 4, 4)))
        labels = rng.integers(0, 3, (1, 4, 4)).astype(np.float64)
        mid = total_loss(logits, labels, LossConfig(0.5)).item()
        lo = total_loss(logits, labels, LossConfig(0.0)).item()
        hi = total_loss(logits, labels, LossConfig(1.0)).item()
        assert abs(mid - 0.5 * (lo + hi)) < 1e-9

    def test_affine_in_alpha(self):
        logits = Tensor(rng.uniform(-2, 2, (1, 2, 4, 4)))
        labels = rng.integers(0, 2, (1, 4, 4)).astype(np.float64)
        vals = [total_loss(logits, labels, LossConfig(a)).item()
                for a in (0.0, 0.5, 1.0)]
        assert abs(vals[1] - 0.5 * (vals[0] + vals[2])) < 1e-9

    def test_gradient_matches_fd(self):
        logits = Tensor(rng.uniform(-2, 2, (1, 2, 4, 4)))
        labels = rng.integers(0, 2, (1, 4, 4)).astype(np.float64)
        rep = grad_check(lambda lg: total_loss(lg, labels, LossConfig(0.5)),
                         [logits], tol=1e-5)
        assert rep.passed


class TestDSC:
    def test_identical_nonempty(self):
        m = rng.random((8, 8)) > 0.5
        m[0, 0] = True
        assert dsc_metric(m, m) == 1.0

    def test_disjoint(self):
        a = np.zeros((4, 4), bool)
        b = np.zeros((4, 4), bool)
        a[0, 0] = True
        b[3, 3] = True
        assert dsc_metric(a, b) == 0.0

    def test_hand_case_point_six(self):
        pred = np.array([[1, 1, 1, 1], [0, 0, 0, 0]], bool)
        gt = np.array([[1, 1, 1, 0], [1, 1, 1, 0]], bool)
        assert dsc_metric(pred, gt) == 0.6

    def test_both_empty_and_one_empty(self):
        e = np.zeros((4, 4), bool)
        m = e.copy()
        m[1, 1] = True
        assert dsc_metric(e, e) == 1.0
        assert dsc_metric(e, m) == 0.0

    def test_symmetry(self):
        for _ in range(20):
            a = rng.random((8, 8)) > 0.6
            b = rng.random((8, 8)) > 0.6
            assert dsc_metric(a, b) == dsc_metric(b, a)


class TestHD95:
    def test_identical(self):
        m = np.zeros((8, 8), bool)
        m[2:5, 3:6] = True
        assert hd95(m, m) == 0.0

    def test_three_four_five(self):
        a = np.zeros((8, 8), bool)
        b = np.zeros((8, 8), bool)
        a[0, 0] = True
        b[3, 4] = True
        assert hd95(a, b) == 5.0

    def test_undefined_when_empty(self):
        m = np.zeros((4, 4), bool)
        f = m.copy()
        f[1, 1] = True
        assert hd95(m, f) is None
        assert hd95(f, m) is None

    def test_spacing(self):
        a = np.zeros((4, 4), bool)
        b = np.zeros((4, 4), bool)
        a[0, 0] = True
        b[0, 1] = True  # one column apart, sx = 2.5
        assert hd95(a, b, spacing=(1.0, 2.5)) == 2.5

    def test_matches_bruteforce(self):
        for seed in range(25):
            r = np.random.default_rng(seed)
            a = r.random((16, 16)) > 0.7
            b = r.random((16, 16)) > 0.7
            got = hd95(a, b)
            ref = oracles.hd_percentile_loop(a, b)
            assert got == ref, seed

    def test_full_percentile_equals_hausdorff(self):
        for seed in range(10):
            r = np.random.default_rng(100 + seed)
            a = r.random((12, 12)) > 0.6
            b = r.random((12, 12)) > 0.6
            got = hausdorff(a, b)
            ref = oracles.hd_percentile_loop(a, b, percentile=1.0)
            assert got == ref

    def test_boundary_extraction_matches_loop(self):
        for seed in range(10):
            r = np.random.default_rng(seed)
            m = r.random((10, 10)) > 0.5
            ours = {tuple(p) for p in boundary_points(m)}
            ref = set(oracles.boundary_loop(m))
            assert ours == ref

    def test_evaluate_masks_identity(self):
        gt = rng.integers(0, 3, (4, 16, 16))
        report = evaluate_masks(gt, gt, 3)
        assert report.mean_dsc == 1.0
        assert report.mean_hd95 == 0.0
        csv = report.to_csv()
        assert csv.startswith("class,dsc,hd95,hd95_defined,hd95_undefined")


class TestAdamW:
    def test_zero_grad_fixed_point(self):
        p = Parameter(np.array([1.0, -2.0], np.float32), "x.weight")
        opt = AdamW([p], lr=0.1, weight_decay=0.0)
        p.grad = Tensor(np.zeros(2, np.float32))
        before = p.data.copy()
        opt.step()
        assert np.array_equal(p.data, before)

    def test_first_step_magnitude(self):
        p = Parameter(np.array([0.0], np.float32), "x.weight")
        opt = AdamW([p], lr=0.1, weight_decay=0.0)
        p.grad = Tensor(np.array([1.0], np.float32))
        opt.step()
        assert abs(p.data[0] + 0.1) < 1e-6  # bias-corrected mhat/sqrt(vhat)=1

    def test_quadratic_descent_monotone(self):
        p = Parameter(np.array([3.0], np.float32), "x.weight")
        opt = AdamW([p], lr=0.1, weight_decay=0.0)
        prev = abs(p.data[0])
        for _ in range(10):
            p.grad = Tensor(p.data.copy())  # gradient of p^2/2
            opt.step()
            assert abs(p.data[0]) < prev
            prev = abs(p.data[0])

    def test_decoupled_decay_geometric(self):
        p = Parameter(np.full(3, 2.0, np.float32), "w.weight")
        opt = AdamW([p], lr=0.1, weight_decay=0.5)
        expected = np.full(3, 2.0, np.float64)
        for _ in range(4):
            p.grad = Tensor(np.zeros(3, np.float32))
            opt.step()
            expected *= 1.0 - 0.1 * 0.5
        assert np.allclose(p.data, expected, rtol=1e-6)

    def test_decay_exempts_non_weights(self):
        g = Parameter(np.ones(2, np.float32), "bn.gamma")
        b = Parameter(np.ones(2, np.float32), "conv.bias")
        opt = AdamW([g, b], lr=0.1, weight_decay=0.5)
        for p in (g, b):
            p.grad = Tensor(np.zeros(2, np.float32))
        opt.step()
        assert np.array_equal(g.data, np.ones(2, np.float32))
        assert np.array_equal(b.data, np.ones(2, np.float32))

    def test_functional_form(self):
        p = Parameter(np.array([1.0], np.float32), "x.weight")
        opt = AdamW([p], lr=0.5)
        adamw_step(opt, {"x.weight": Tensor(np.array([1.0], np.float32))}, 0.5)
        assert p.data[0] < 1.0


class TestCosine:
    def test_boundaries_and_midpoint(self):
        assert cosine_lr(0, 100, 5e-4) == 5e-4
        assert cosine_lr(100, 100, 5e-4) == pytest.approx(0.0, abs=1e-12)
        assert cosine_lr(50, 100, 5e-4) == pytest.approx(2.5e-4)

    def test_min_lr_floor(self):
        assert cosine_lr(10, 10, 1e-3, min_lr=1e-5) == pytest.approx(1e-5)


def tiny_dataset(n=2, size=32, classes=3, seed=0):
    r = np.random.default_rng(seed)
    return [sample_phantom(r, size, classes)[:2] for _ in range(n)]


def tiny_cfg(classes=3):
    return ModelConfig(base_width=4, n_vss=1, num_classes=classes,
                       input_size=32, depths=(1, 1, 1), d_state=4).validate()


class TestTrainLoop:
    def test_smoke_one_epoch_one_sample(self):
        model = build_model(tiny_cfg(), 0)
        data = tiny_dataset(1)
        hist, _, _ = train_loop(model, data, [], TrainParams(
            epochs=1, batch_size=1, augment_flags=()), out_dir=None)
        assert len(hist) == 1
        assert math.isfinite(hist[0]["train_loss"])
        assert hist[0]["val_dsc_mean"] is not None

    def test_empty_dataset_rejected(self):
        model = build_model(tiny_cfg(), 0)
        with pytest.raises(EmptyDataset):
            train_loop(model, [], [], TrainParams(epochs=1), out_dir=None)
        with pytest.raises(EmptyDataset):
            evaluate(model, [])

    def test_csv_log_and_best_checkpoint(self, tmp_path):
        model = build_model(tiny_cfg(), 0)
        data = tiny_dataset(2)
        params = TrainParams(epochs=2, batch_size=2, alpha=0.25,
                             augment_flags=("hflip", "rot90"))
        hist, best, csv_path = train_loop(model, data, data, params,
                                          out_dir=str(tmp_path))
        lines = open(csv_path).read().splitlines()
        assert lines[0] == "# alpha=0.25"
        assert lines[1] == "epoch,lr,train_loss,val_dsc_mean,val_hd95_mean,seconds"
        assert len(lines) == 2 + len(hist)
        assert os.path.exists(best)
        cfg, meta, records = read_checkpoint(best)
        assert cfg.num_classes == 3
        assert any(k.startswith("optim.m.") for k in records)

    def test_deterministic_metrics_across_runs(self, tmp_path):
        rows = []
        for run in range(2):
            model = build_model(tiny_cfg(), 3)
            data = tiny_dataset(2, seed=5)
            hist, _, _ = train_loop(model, data, data, TrainParams(
                epochs=2, batch_size=2, seed=11), out_dir=None)
            rows.append([(h["epoch"], h["lr"], h["train_loss"],
                          h["val_dsc_mean"], h["val_hd95_mean"])
                         for h in hist])
        assert rows[0] == rows[1]

    def test_max_steps_cap(self):
        model = build_model(tiny_cfg(), 0)
        data = tiny_dataset(4)
        hist, _, _ = train_loop(model, data, [], TrainParams(
            epochs=10, batch_size=2, max_steps=3, augment_flags=()),
            out_dir=None)
        assert len(hist) == 2  # 2 steps in epoch 0, capped mid-epoch 1

    def test_predict_labels_shape(self):
        model = build_model(tiny_cfg(), 0)
        data = tiny_dataset(3)
        labels = predict_labels(model, [img for img, _ in data])
        assert labels.shape == (3, 32, 32)
        assert labels.min() >= 0 and labels.max() < 3
