"""Training objectives: masked landmark MSE, heterogeneous pixel losses, KL.

Expected values are frozen from hand derivations; each non-obvious constant
carries its arithmetic in a comment.
"""

import math

import numpy as np
import pytest
import torch

from heteroseg import (
    LabelAvailability,
    Structure,
    availability_mask,
    binary_cross_entropy,
    build_layout,
    het_pixel_loss,
    kl_latent,
    masked_landmark_mse,
    multiclass_loss,
    soft_dice_binary,
)

L, H, C = Structure.LUNGS, Structure.HEART, Structure.CLAVICLES


class TestMaskedLandmarkMse:
    def test_perfect_prediction_is_zero(self):
        pred = torch.rand(5, 2, dtype=torch.float64)
        out = masked_landmark_mse(pred, pred.clone(), np.ones(5, dtype=bool))
        assert out.item() == 0.0

    def test_hand_value(self):
        # one included node off by (1, 0): mean over 2 scalar entries of
        # (1^2 + 0^2) = 0.5; the excluded node carries garbage
        pred = torch.tensor([[1.0, 0.0], [99.0, -99.0]], dtype=torch.float64)
        target = torch.tensor([[0.0, 0.0], [0.0, 0.0]], dtype=torch.float64)
        out = masked_landmark_mse(pred, target, np.array([True, False]))
        assert abs(out.item() - 0.5) < 1e-12

    def test_excluded_rows_never_read(self):
        rng = np.random.default_rng(0)
        mask = np.array([True, True, False, True, False])
        target = torch.tensor(rng.normal(size=(5, 2)))
        base = torch.tensor(rng.normal(size=(5, 2)))
        poisoned = base.clone()
        poisoned[~torch.tensor(mask)] = torch.nan
        a = masked_landmark_mse(base, target, mask).item()
        b = masked_landmark_mse(poisoned, target, mask).item()
        assert a == b and math.isfinite(a)

    def test_full_mask_equals_plain_mse(self):
        rng = np.random.default_rng(1)
        pred = torch.tensor(rng.normal(size=(8, 2)))
        target = torch.tensor(rng.normal(size=(8, 2)))
        out = masked_landmark_mse(pred, target, np.ones(8, dtype=bool))
        expected = torch.mean((pred - target) ** 2).item()
        assert abs(out.item() - expected) < 1e-15

    def test_all_excluded_rejected(self):
        with pytest.raises(ValueError):
            masked_landmark_mse(torch.zeros(3, 2), torch.zeros(3, 2), np.zeros(3, dtype=bool))

    def test_shape_mismatch_rejected(self):
        with pytest.raises(ValueError):
            masked_landmark_mse(torch.zeros(3, 2), torch.zeros(4, 2), np.ones(3, dtype=bool))
        with pytest.raises(ValueError):
            masked_landmark_mse(torch.zeros(3, 2), torch.zeros(3, 2), np.ones(4, dtype=bool))

    def test_excluded_gradients_exactly_zero(self):
        layout = build_layout({L: 3, H: 2, C: 2})
        mask = availability_mask(layout, LabelAvailability.of(L, C))
        rng = np.random.default_rng(2)
        pred = torch.tensor(rng.normal(size=(7, 2)), requires_grad=True)
        target = torch.tensor(rng.normal(size=(7, 2)))
        masked_landmark_mse(pred, target, mask).total.backward()
        grad = pred.grad.numpy()
        assert np.all(grad[~mask] == 0.0)
        assert np.any(grad[mask] != 0.0)

    def test_included_gradients_match_finite_differences(self):
        layout = build_layout({L: 3, H: 2})
        mask = availability_mask(layout, LabelAvailability.of(L))
        rng = np.random.default_rng(3)
        base = rng.normal(size=(5, 2))
        target = torch.tensor(rng.normal(size=(5, 2)), dtype=torch.float64)

        pred = torch.tensor(base, dtype=torch.float64, requires_grad=True)
        masked_landmark_mse(pred, target, mask).total.backward()
        grad = pred.grad.numpy()

        h = 1e-6
        for i, j in [(0, 0), (1, 1), (2, 0)]:
            plus, minus = base.copy(), base.copy()
            plus[i, j] += h
            minus[i, j] -= h
            fd = (
                masked_landmark_mse(torch.tensor(plus), target, mask).item()
                - masked_landmark_mse(torch.tensor(minus), target, mask).item()
            ) / (2 * h)
            assert abs(fd - grad[i, j]) <= 1e-4 * max(1.0, abs(fd))


class TestSoftDice:
    def test_perfect_overlap_is_zero(self):
        target = torch.zeros(4, 4, dtype=torch.float64)
        target[1:3, 1:3] = 1.0
        # 1 - (2*4+1)/(4+4+1) = 0 exactly: smoothing cancels at equality
        assert soft_dice_binary(target, target).item() == 0.0

    def test_uniform_half_probability(self):
        # prob 0.5 everywhere on 2x2, two true pixels:
        # 1 - (2*(0.5*2)+1)/(2+2+1) = 1 - 3/5 = 0.4
        prob = torch.full((2, 2), 0.5, dtype=torch.float64)
        target = torch.tensor([[1.0, 0.0], [1.0, 0.0]], dtype=torch.float64)
        assert abs(soft_dice_binary(prob, target).item() - 0.4) < 1e-12

    def test_both_empty_is_zero(self):
        # smoothing handles the 0/0 case without a special branch
        out = soft_dice_binary(torch.zeros(3, 3), torch.zeros(3, 3))
        assert out.item() == 0.0

    def test_empty_prediction_nonempty_target(self):
        # 1 - 1/(9+1): a missed target saturates near (not at) 1
        target = torch.ones(3, 3, dtype=torch.float64)
        assert abs(soft_dice_binary(torch.zeros(3, 3, dtype=torch.float64), target).item() - 0.9) < 1e-12

    def test_empty_target_penalizes_predicted_mass(self):
        # no target pixels: mass 4 scores 1 - 1/5 = 0.8 and the gradient
        # pushes every pixel down; suppression must be learnable from this
        prob = torch.full((2, 2), 1.0, dtype=torch.float64, requires_grad=True)
        out = soft_dice_binary(prob, torch.zeros(2, 2, dtype=torch.float64))
        assert abs(out.item() - 0.8) < 1e-12
        (grad,) = torch.autograd.grad(out, prob)
        assert torch.all(grad > 0)

    def test_range(self):
        rng = np.random.default_rng(4)
        for _ in range(25):
            prob = torch.tensor(rng.random((5, 5)))
            target = torch.tensor((rng.random((5, 5)) > 0.5).astype(np.float64))
            value = soft_dice_binary(prob, target).item()
            assert -1e-9 <= value <= 1.0 + 1e-9

    def test_out_of_range_probability_rejected(self):
        with pytest.raises(ValueError):
            soft_dice_binary(torch.full((2, 2), 1.5), torch.zeros(2, 2))
        with pytest.raises(ValueError):
            soft_dice_binary(torch.full((2, 2), -0.1), torch.zeros(2, 2))


class TestBinaryCrossEntropy:
    def test_uniform_half_is_log_two(self):
        prob = torch.full((4, 4), 0.5, dtype=torch.float64)
        target = torch.tensor((np.arange(16).reshape(4, 4) % 2).astype(np.float64))
        assert abs(binary_cross_entropy(prob, target).item() - math.log(2.0)) < 1e-12

    def test_clamping_keeps_saturated_probabilities_finite(self):
        # p=0 against target 1 clamps to 1e-7: loss = -ln(1e-7)
        out = binary_cross_entropy(torch.zeros(1, dtype=torch.float64), torch.ones(1, dtype=torch.float64))
        assert abs(out.item() + math.log(1e-7)) < 1e-9


class TestHetPixelLoss:
    def half_true(self):
        prob = torch.full((2, 2), 0.5, dtype=torch.float64)
        target = torch.tensor([[1.0, 0.0], [1.0, 0.0]], dtype=torch.float64)
        return prob, target

    def test_hand_value_single_structure(self):
        # BCE at p=0.5 is ln 2; dice at 0.5/half-true is 0.4 (see TestSoftDice)
        prob, target = self.half_true()
        out = het_pixel_loss({L: prob}, {L: target}, LabelAvailability.of(L))
        assert abs(out.item() - (math.log(2.0) + 0.4)) < 1e-12
        assert abs(out.component_items()["bce"] - math.log(2.0)) < 1e-12
        assert abs(out.component_items()["dice"] - 0.4) < 1e-12

    def test_sums_over_available_structures(self):
        rng = np.random.default_rng(5)
        probs = {s: torch.tensor(rng.random((3, 3))) for s in (L, H)}
        targets = {s: torch.tensor((rng.random((3, 3)) > 0.5).astype(np.float64)) for s in (L, H)}
        both = het_pixel_loss(probs, targets, LabelAvailability.of(L, H)).item()
        lungs = het_pixel_loss(probs, targets, LabelAvailability.of(L)).item()
        heart = het_pixel_loss(probs, targets, LabelAvailability.of(H)).item()
        assert abs(both - (lungs + heart)) < 1e-12

    def test_unavailable_maps_never_touched(self):
        prob, target = self.half_true()
        garbage = torch.full((2, 2), torch.nan, dtype=torch.float64)
        out = het_pixel_loss({L: prob, H: garbage}, {L: target, H: garbage}, LabelAvailability.of(L))
        assert math.isfinite(out.item())
        assert abs(out.item() - (math.log(2.0) + 0.4)) < 1e-12

    def test_unavailable_gradients_absent(self):
        rng = np.random.default_rng(6)
        probs = {
            s: torch.tensor(rng.random((3, 3)), requires_grad=True) for s in (L, H, C)
        }
        targets = {s: torch.tensor((rng.random((3, 3)) > 0.5).astype(np.float64)) for s in (L, H, C)}
        out = het_pixel_loss(probs, targets, LabelAvailability.of(L, C))
        grads = torch.autograd.grad(out.total, list(probs.values()), allow_unused=True)
        assert grads[0] is not None and grads[2] is not None
        assert grads[1] is None or torch.all(grads[1] == 0)

    def test_missing_map_rejected(self):
        prob, target = self.half_true()
        with pytest.raises(ValueError):
            het_pixel_loss({L: prob}, {L: target}, LabelAvailability.of(L, H))
        with pytest.raises(ValueError):
            het_pixel_loss({L: prob, H: prob}, {L: target}, LabelAvailability.of(L, H))

    def test_empty_availability_rejected(self):
        prob, target = self.half_true()
        with pytest.raises(ValueError):
            het_pixel_loss({L: prob}, {L: target}, LabelAvailability(frozenset()))


class TestMulticlassLoss:
    def test_uniform_logits_two_classes(self):
        # zero logits: softmax 0.5 per class, CE = ln 2; the foreground dice
        # term at p=0.5 with half-true target is 0.5
        logits = torch.zeros(2, 2, 2, dtype=torch.float64)
        target = torch.tensor([[1, 0], [1, 0]])
        out = multiclass_loss(logits, target)
        assert abs(out.component_items()["ce"] - math.log(2.0)) < 1e-12
        assert abs(out.component_items()["dice"] - 0.5) < 1e-6

    def test_saturated_correct_logits_near_zero(self):
        target = torch.tensor([[2, 0], [1, 0]])
        logits = torch.full((3, 2, 2), -40.0, dtype=torch.float64)
        for r in range(2):
            for c in range(2):
                logits[target[r, c], r, c] = 40.0
        assert multiclass_loss(logits, target).item() < 1e-3

    def test_empty_class_skipped(self):
        # class 1 has neither softmax mass (saturated background) nor target
        # pixels, so its dice term is dropped rather than forced to 1
        logits = torch.zeros(2, 2, 2, dtype=torch.float64)
        logits[0] = 40.0
        logits[1] = -40.0
        target = torch.zeros(2, 2, dtype=torch.long)
        out = multiclass_loss(logits, target)
        assert out.component_items()["dice"] == 0.0
        assert out.component_items()["ce"] < 1e-9

    def test_batched_shapes(self):
        rng = np.random.default_rng(7)
        logits = torch.tensor(rng.normal(size=(4, 3, 5, 5)))
        target = torch.tensor(rng.integers(0, 3, size=(4, 5, 5)))
        assert math.isfinite(multiclass_loss(logits, target).item())

    def test_label_out_of_range_rejected(self):
        logits = torch.zeros(2, 2, 2)
        with pytest.raises(ValueError):
            multiclass_loss(logits, torch.full((2, 2), 2, dtype=torch.long))
        with pytest.raises(ValueError):
            multiclass_loss(logits, torch.full((2, 2), -1, dtype=torch.long))

    def test_shape_mismatch_rejected(self):
        with pytest.raises(ValueError):
            multiclass_loss(torch.zeros(2, 2, 2), torch.zeros(3, 3, dtype=torch.long))


class TestKlLatent:
    def test_standard_normal_is_zero(self):
        assert kl_latent(torch.zeros(4), torch.zeros(4)).item() == 0.0

    def test_unit_mean_single_dim(self):
        # -0.5 * (1 + 0 - 1 - 1) = 0.5
        out = kl_latent(torch.ones(1, dtype=torch.float64), torch.zeros(1, dtype=torch.float64))
        assert abs(out.item() - 0.5) < 1e-12

    def test_unit_logvar_single_dim(self):
        # -0.5 * (1 + 1 - 0 - e) = (e - 2) / 2
        out = kl_latent(torch.zeros(1, dtype=torch.float64), torch.ones(1, dtype=torch.float64))
        assert abs(out.item() - (math.e - 2.0) / 2.0) < 1e-12

    def test_batch_mean_of_per_sample_sums(self):
        mu = torch.ones(2, 3, dtype=torch.float64)
        out = kl_latent(mu, torch.zeros(2, 3, dtype=torch.float64))
        assert abs(out.item() - 1.5) < 1e-12

    def test_nonnegative(self):
        rng = np.random.default_rng(8)
        for _ in range(20):
            mu = torch.tensor(rng.normal(size=6))
            logvar = torch.tensor(rng.normal(size=6))
            assert kl_latent(mu, logvar).item() >= -1e-9

    def test_nonfinite_rejected(self):
        with pytest.raises(ValueError):
            kl_latent(torch.tensor([float("nan")]), torch.zeros(1))
        with pytest.raises(ValueError):
            kl_latent(torch.zeros(1), torch.tensor([float("inf")]))

    def test_shape_mismatch_rejected(self):
        with pytest.raises(ValueError):
            kl_latent(torch.zeros(3), torch.zeros(4))
