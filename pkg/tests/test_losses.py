import math

import numpy as np
import pytest

from src.data.dataset import LabelIndex
from src.models.components import PseudoLabels, init_bundle
from src.models.optim import SGD
from src.models.tensor import Tape, Tensor, backward, chunk_rows, no_tape, softmax_cross_entropy
from src.steps.losses import (
    LossBreakdown,
    ReconTargets,
    joint_objective,
    loss_adv_discriminator,
    loss_adv_encoder,
    loss_cross,
    loss_expr,
    loss_pose,
    loss_recon,
    sample_recon_targets,
)
from src.steps.preprocessing import Batch
from src.utils.config import ArchitectureConfig, LossWeights, OptimizerSettings
from src.utils.exceptions import ConfigError, UsageError

from tests import oracles
from tests.conftest import TINY_ARCH, make_batches

FACE_ARCH = ArchitectureConfig(
    image_side=24, n_poses=5, n_expressions=6, trunk_hidden=8, d_p=4, d_e=6, head_hidden=5, gen_hidden=6
)


def zero_output_layers(bundle, components):
    for component in components:
        for name in bundle.params.names([component]):
            layer = name.rsplit(".", 1)[1]
            if layer in ("W2", "b2"):
                bundle.params[name].data = np.zeros_like(bundle.params[name].data)


def nonzero(grads, prefix):
    return any(np.any(g != 0.0) for name, g in grads.items() if name.startswith(prefix + "."))


@pytest.fixture
def face_bundle():
    bundle = init_bundle(1, FACE_ARCH)
    zero_output_layers(bundle, ["D_p", "R", "D_de", "D_dp", "G_s", "G_t"])
    return bundle


@pytest.fixture
def face_batches():
    return make_batches(FACE_ARCH, m=4, seed=11)


class TestAnalyticValues:
    def test_supervised_losses_at_zero_logits(self, face_bundle, face_batches):
        source, _ = face_batches
        assert loss_pose(face_bundle, source).item() == pytest.approx(math.log(5), abs=1e-12)
        assert loss_expr(face_bundle, source).item() == pytest.approx(math.log(6), abs=1e-12)

    def test_adversarial_losses_at_zero_logits(self, face_bundle, face_batches):
        source, target = face_batches
        expected = 4.0 * math.log(2.0)
        assert loss_adv_discriminator(face_bundle, source, target).item() == pytest.approx(expected, abs=1e-12)
        assert loss_adv_encoder(face_bundle, source, target).item() == pytest.approx(expected, abs=1e-12)

    @pytest.mark.parametrize("mode", ["uniform", "reverse"])
    def test_cross_loss_at_zero_logits(self, face_bundle, face_batches, mode):
        source, _ = face_batches
        value = loss_cross(face_bundle, source, mode=mode).item()
        assert value == pytest.approx(math.log(6) + math.log(5), abs=1e-12)

    def test_cross_loss_unknown_mode(self, face_bundle, face_batches):
        source, _ = face_batches
        with pytest.raises(ConfigError):
            loss_cross(face_bundle, source, mode="sideways")

    def test_recon_of_half_grey_images(self, face_bundle, face_batches):
        source, target = face_batches
        m, n = len(source), FACE_ARCH.n_pixels
        targets = ReconTargets(x_s_j=np.zeros((m, n)), x_t_k=np.ones((m, n)), mask=np.array([True, False, True, True]))
        # every generated pixel is 0.5, so each term is sqrt(576 * 0.25)
        assert loss_recon(face_bundle, source, target, targets).item() == pytest.approx(24.0, abs=1e-9)
        squared = loss_recon(face_bundle, source, target, targets, norm="squared").item()
        assert squared == pytest.approx(288.0, abs=1e-9)

    def test_recon_all_invalid_is_zero(self, face_bundle, face_batches):
        source, target = face_batches
        m, n = len(source), FACE_ARCH.n_pixels
        targets = ReconTargets(np.zeros((m, n)), np.zeros((m, n)), mask=np.zeros(m, dtype=bool))
        assert targets.all_invalid
        assert loss_recon(face_bundle, source, target, targets).item() == 0.0

    def test_recon_row_mismatch(self, face_bundle, face_batches):
        source, target = face_batches
        n = FACE_ARCH.n_pixels
        targets = ReconTargets(np.zeros((2, n)), np.zeros((2, n)), mask=np.ones(2, dtype=bool))
        with pytest.raises(UsageError):
            loss_recon(face_bundle, source, target, targets)


class TestAgainstLoopOracle:
    def test_supervised_and_adversarial(self, tiny_bundle, tiny_batches):
        source, target = tiny_batches
        assert loss_pose(tiny_bundle, source).item() == pytest.approx(
            oracles.loss_pose(tiny_bundle, source.images, source.poses), abs=1e-10
        )
        assert loss_expr(tiny_bundle, source).item() == pytest.approx(
            oracles.loss_expr(tiny_bundle, source.images, source.expressions), abs=1e-10
        )
        assert loss_adv_discriminator(tiny_bundle, source, target).item() == pytest.approx(
            oracles.loss_adversarial(tiny_bundle, source.images, target.images, 1.0), abs=1e-10
        )
        assert loss_adv_encoder(tiny_bundle, source, target).item() == pytest.approx(
            oracles.loss_adversarial(tiny_bundle, source.images, target.images, 0.0), abs=1e-10
        )

    def test_cross_with_different_feature_widths(self, tiny_bundle, tiny_batches):
        source, _ = tiny_batches
        assert TINY_ARCH.d_p != TINY_ARCH.d_e
        assert loss_cross(tiny_bundle, source).item() == pytest.approx(
            oracles.loss_cross(tiny_bundle, source.images), abs=1e-10
        )

    def test_recon(self, tiny_bundle, tiny_batches):
        source, target = tiny_batches
        rng = np.random.default_rng(8)
        m, n = len(source), TINY_ARCH.n_pixels
        targets = ReconTargets(
            x_s_j=rng.uniform(size=(m, n)), x_t_k=rng.uniform(size=(m, n)), mask=np.array([1, 0, 1, 1, 0], bool)
        )
        expected = oracles.loss_recon(tiny_bundle, source.images, target.images, targets.x_s_j, targets.x_t_k, targets.mask)
        assert loss_recon(tiny_bundle, source, target, targets).item() == pytest.approx(expected, abs=1e-10)

    def test_encoder_total(self, tiny_bundle, tiny_batches):
        source, target = tiny_batches
        weights = LossWeights(alpha=0.7, beta=0.3, gamma=0.2, eta=0.9)
        components = {
            "l_p": loss_pose(tiny_bundle, source),
            "l_e": loss_expr(tiny_bundle, source),
            "l_adv_g": loss_adv_encoder(tiny_bundle, source, target),
            "l_cross": loss_cross(tiny_bundle, source),
        }
        expected = oracles.weighted_total({k: v.item() for k, v in components.items()}, *weights)
        assert joint_objective(components, weights).item() == pytest.approx(expected, abs=1e-10)


def test_missing_labels_and_empty_batches(tiny_bundle, tiny_batches):
    source, target = tiny_batches
    with pytest.raises(UsageError):
        loss_pose(tiny_bundle, target)
    with pytest.raises(UsageError):
        loss_cross(tiny_bundle, target, mode="reverse")
    empty = Batch(images=np.zeros((0, TINY_ARCH.n_pixels)), positions=np.arange(0))
    with pytest.raises(UsageError):
        loss_adv_encoder(tiny_bundle, source, empty)


def position_images(n):
    """Two-pixel rows whose value is the row's own position."""
    return np.repeat(np.arange(n, dtype=np.float64)[:, None], 2, axis=1)


def labeled(poses, expressions):
    m = len(poses)
    return Batch(images=np.zeros((m, 2)), positions=np.arange(m), expressions=np.array(expressions), poses=np.array(poses))


class TestReconTargets:
    source_index = LabelIndex(position_images(4), poses=[0, 0, 1, 1], expressions=[0, 1, 0, 1])

    def test_pairs_match_requested_labels(self):
        target_index = LabelIndex(position_images(2), poses=[0, 1], expressions=[1, 1])
        source = labeled(poses=[0, 1, 0], expressions=[1, 1, 0])
        target = Batch(images=np.zeros((3, 2)), positions=np.arange(3))
        pseudo = PseudoLabels(expressions=np.array([0, 1, 1]), poses=np.array([1, 0, 0]))

        targets = sample_recon_targets(source, target, pseudo, self.source_index, target_index, np.random.default_rng(0))

        np.testing.assert_array_equal(targets.mask, [True, True, False])
        np.testing.assert_array_equal(targets.x_s_j[:, 0], [0.0, 3.0, 0.0])
        np.testing.assert_array_equal(targets.x_t_k[:, 0], [1.0, 0.0, 0.0])
        assert (targets.source_fallbacks, targets.target_fallbacks) == (0, 0)
        assert targets.n_valid == 2
        assert targets.invalid_rate == pytest.approx(1 / 3)

    def test_expression_only_fallback(self):
        target_index = LabelIndex(position_images(1), poses=[1], expressions=[1])
        source = labeled(poses=[0], expressions=[1])
        target = Batch(images=np.zeros((1, 2)), positions=np.arange(1))
        pseudo = PseudoLabels(expressions=np.array([1]), poses=np.array([0]))

        targets = sample_recon_targets(source, target, pseudo, self.source_index, target_index, np.random.default_rng(0))

        assert targets.mask.tolist() == [True]
        assert targets.target_fallbacks == 1
        assert targets.fallback_rate == pytest.approx(0.5)

    def test_all_invalid(self):
        target_index = LabelIndex(position_images(1), poses=[0], expressions=[0])
        source = labeled(poses=[0, 1], expressions=[1, 1])
        target = Batch(images=np.zeros((2, 2)), positions=np.arange(2))
        pseudo = PseudoLabels(expressions=np.array([0, 0]), poses=np.array([0, 0]))

        targets = sample_recon_targets(source, target, pseudo, self.source_index, target_index, np.random.default_rng(0))

        assert targets.all_invalid
        assert targets.invalid_rate == 1.0

    def test_needs_labeled_source(self):
        target = Batch(images=np.zeros((1, 2)), positions=np.arange(1))
        pseudo = PseudoLabels(expressions=np.array([0]), poses=np.array([0]))
        with pytest.raises(UsageError):
            sample_recon_targets(target, target, pseudo, self.source_index, self.source_index, np.random.default_rng(0))


class TestJointObjective:
    ones = {name: 1.0 for name in ("l_p", "l_e", "l_adv_d", "l_adv_g", "l_cross", "l_clc")}

    def test_zero_weights_leave_pose_loss(self):
        assert joint_objective(self.ones, LossWeights(0.0, 0.0, 0.0, 0.0)) == 1.0

    def test_unit_weights(self):
        unit = LossWeights(1.0, 1.0, 1.0, 1.0)
        assert joint_objective(self.ones, unit) == 5.0
        assert joint_objective(self.ones, unit, "discriminator") == 2.0
        assert LossBreakdown(**self.ones).total(unit) == 5.0

    def test_missing_components_count_zero(self):
        assert joint_objective({"l_e": 2.0}, LossWeights(alpha=0.5)) == 1.0

    def test_negative_weight(self):
        with pytest.raises(ConfigError, match="gamma"):
            joint_objective(self.ones, LossWeights(gamma=-0.1))

    def test_unknown_role(self):
        with pytest.raises(UsageError):
            joint_objective(self.ones, LossWeights(), "generator")


class TestGradientRouting:
    def grads(self, bundle, loss_fn):
        with Tape():
            return backward(loss_fn(), bundle.params)

    def test_expression_loss_reaches_only_expression_path(self, tiny_bundle, tiny_batches):
        source, _ = tiny_batches
        grads = self.grads(tiny_bundle, lambda: loss_expr(tiny_bundle, source))
        assert nonzero(grads, "E_s.expr") and nonzero(grads, "R")
        for prefix in ("E_s.pose", "E_t", "D_p", "D_de", "D_dp", "G_s", "G_t"):
            assert not nonzero(grads, prefix), prefix

    def test_encoder_adversarial_loss_reaches_both_encoders(self, tiny_bundle, tiny_batches):
        source, target = tiny_batches
        grads = self.grads(tiny_bundle, lambda: loss_adv_encoder(tiny_bundle, source, target))
        assert nonzero(grads, "E_s") and nonzero(grads, "E_t")
        assert not nonzero(grads, "R") and not nonzero(grads, "D_p")

    def test_reverse_confusion_flips_encoder_gradient(self, tiny_bundle, tiny_batches):
        source, _ = tiny_batches
        bundle = tiny_bundle

        def plain():
            f = bundle.E_s.encode(source.x)
            # f_e spans two D_p-wide chunks, so each pose label is scored twice
            return softmax_cross_entropy(
                bundle.R(chunk_rows(f.f_p, bundle.R.in_width)), source.expressions
            ) + softmax_cross_entropy(bundle.D_p(chunk_rows(f.f_e, bundle.D_p.in_width)), np.repeat(source.poses, 2))

        forward = self.grads(bundle, plain)
        reversed_ = self.grads(bundle, lambda: loss_cross(bundle, source, mode="reverse"))
        for name in bundle.params.names(["R", "D_p"]):
            np.testing.assert_allclose(reversed_[name], forward[name], atol=1e-12)
        for name in bundle.params.names(["E_s"]):
            np.testing.assert_allclose(reversed_[name], -forward[name], atol=1e-12)

    def test_descent_step_lowers_expression_loss(self, tiny_bundle, tiny_batches):
        source, _ = tiny_batches
        before = loss_expr(tiny_bundle, source).item()
        stepped = tiny_bundle.params.subset(["E_s", "R"])
        with Tape():
            grads = backward(loss_expr(tiny_bundle, source), stepped)
        SGD(OptimizerSettings(name="sgd", lr=1e-2)).step(tiny_bundle.params, grads, list(stepped))
        with no_tape():
            after = loss_expr(tiny_bundle, source).item()
        assert after < before

    def test_features_passed_in_are_used(self, tiny_bundle, tiny_batches):
        source, _ = tiny_batches
        features = tiny_bundle.E_s.encode(Tensor(np.zeros_like(source.images)))
        assert loss_expr(tiny_bundle, source, features).item() != pytest.approx(loss_expr(tiny_bundle, source).item())
