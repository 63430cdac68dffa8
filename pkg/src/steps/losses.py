"""Loss terms of the adaptation objective.

Every role minimizes a non-negative quantity. The domain game uses true
domain labels for the discriminators (source = 1, target = 0) and inverted
labels for the encoders. Each loss takes already-encoded features when the
caller has them, otherwise it encodes the batch itself.
"""
import logging
from dataclasses import dataclass
from typing import Dict, Literal, Mapping, Optional, Union

import numpy as np
from pydantic import BaseModel, ConfigDict, Field

from src.data.dataset import LabelIndex
from src.models.components import FeaturePair, ModelBundle, PseudoLabels
from src.models.tensor import (
    Tensor,
    binary_cross_entropy,
    chunk_rows,
    grad_reverse,
    mul,
    row_norm,
    softmax_cross_entropy,
    sub,
    sum_all,
    uniform_cross_entropy,
)
from src.steps.preprocessing import Batch
from src.utils.config import LossWeights
from src.utils.exceptions import ConfigError, UsageError

logger = logging.getLogger(__name__)

LOSS_NAMES = ("l_p", "l_e", "l_adv_d", "l_adv_g", "l_cross", "l_clc")
SOURCE, TARGET = 1.0, 0.0

Value = Union[Tensor, float]


def _features(bundle: ModelBundle, batch: Batch, encoder: str, features: Optional[FeaturePair]) -> FeaturePair:
    return features if features is not None else bundle.component(encoder).encode(batch.x)


def _require_labels(batch: Batch, what: str) -> None:
    if not batch.labeled:
        raise UsageError(f"{what} needs a labeled source batch")


def _require_nonempty(*batches: Batch) -> None:
    if any(len(b) == 0 for b in batches):
        raise UsageError("adversarial losses need non-empty source and target batches")


def loss_pose(bundle: ModelBundle, source: Batch, features: Optional[FeaturePair] = None) -> Tensor:
    _require_labels(source, "loss_pose")
    f = _features(bundle, source, "E_s", features)
    return softmax_cross_entropy(bundle.D_p(f.f_p), source.poses)


def loss_expr(bundle: ModelBundle, source: Batch, features: Optional[FeaturePair] = None) -> Tensor:
    _require_labels(source, "loss_expr")
    f = _features(bundle, source, "E_s", features)
    return softmax_cross_entropy(bundle.R(f.f_e), source.expressions)


def _domain_loss(bundle: ModelBundle, fs: FeaturePair, ft: FeaturePair, source_label: float) -> Tensor:
    target_label = 1.0 - source_label
    return (
        binary_cross_entropy(bundle.D_de(fs.f_e), source_label)
        + binary_cross_entropy(bundle.D_de(ft.f_e), target_label)
        + binary_cross_entropy(bundle.D_dp(fs.f_p), source_label)
        + binary_cross_entropy(bundle.D_dp(ft.f_p), target_label)
    )


def loss_adv_discriminator(
    bundle: ModelBundle,
    source: Batch,
    target: Batch,
    source_features: Optional[FeaturePair] = None,
    target_features: Optional[FeaturePair] = None,
) -> Tensor:
    """Domain discriminators against true domain labels."""
    _require_nonempty(source, target)
    fs = _features(bundle, source, "E_s", source_features)
    ft = _features(bundle, target, "E_t", target_features)
    return _domain_loss(bundle, fs, ft, SOURCE)


def loss_adv_encoder(
    bundle: ModelBundle,
    source: Batch,
    target: Batch,
    source_features: Optional[FeaturePair] = None,
    target_features: Optional[FeaturePair] = None,
) -> Tensor:
    """Encoders against inverted domain labels; only E_s and E_t are stepped on it."""
    _require_nonempty(source, target)
    fs = _features(bundle, source, "E_s", source_features)
    ft = _features(bundle, target, "E_t", target_features)
    return _domain_loss(bundle, fs, ft, TARGET)


def loss_cross(
    bundle: ModelBundle,
    source: Batch,
    features: Optional[FeaturePair] = None,
    mode: Literal["uniform", "reverse"] = "uniform",
) -> Tensor:
    """Cross-adversarial confusion: R on f_p and D_p on f_e.

    Features wider than the head's input are cut into column chunks and each
    chunk is scored separately (``chunk_rows``); narrower ones are zero-padded.
    Every chunk of f_e has to confuse D_p, so pose cannot hide in a column
    combination the head does not read.

    ``uniform`` pushes both heads towards uniform predictions (minimum
    ln E + ln P). ``reverse`` feeds the features through gradient reversal and
    scores the heads against the true labels, so descending it makes E_s
    ascend the heads' classification loss.
    """
    f = _features(bundle, source, "E_s", features)
    p_for_r = chunk_rows(f.f_p, bundle.R.in_width)
    e_for_dp = chunk_rows(f.f_e, bundle.D_p.in_width)
    if mode == "uniform":
        return uniform_cross_entropy(bundle.R(p_for_r)) + uniform_cross_entropy(bundle.D_p(e_for_dp))
    if mode == "reverse":
        _require_labels(source, "loss_cross in reverse mode")
        m = len(source.expressions)
        expressions = np.repeat(source.expressions, p_for_r.shape[0] // max(m, 1))
        poses = np.repeat(source.poses, e_for_dp.shape[0] // max(m, 1))
        return softmax_cross_entropy(bundle.R(grad_reverse(p_for_r)), expressions) + softmax_cross_entropy(
            bundle.D_p(grad_reverse(e_for_dp)), poses
        )
    raise ConfigError(f"confusion_mode: unknown value {mode!r}")


@dataclass
class ReconTargets:
    """Real images paired with each (source, target) row for reconstruction."""

    x_s_j: np.ndarray
    x_t_k: np.ndarray
    mask: np.ndarray
    source_fallbacks: int = 0
    target_fallbacks: int = 0

    @property
    def n_pairs(self) -> int:
        return len(self.mask)

    @property
    def n_valid(self) -> int:
        return int(self.mask.sum())

    @property
    def all_invalid(self) -> bool:
        return self.n_valid == 0

    @property
    def fallback_rate(self) -> float:
        lookups = 2 * self.n_pairs
        return (self.source_fallbacks + self.target_fallbacks) / lookups if lookups else 0.0

    @property
    def invalid_rate(self) -> float:
        return 1.0 - self.n_valid / self.n_pairs if self.n_pairs else 0.0


def _lookup(index: LabelIndex, pose: int, expression: int, rng: np.random.Generator):
    position = index.draw(pose, expression, rng)
    if position is not None:
        return position, False
    return index.draw_expression(expression, rng), True


def sample_recon_targets(
    source: Batch,
    target: Batch,
    pseudo: PseudoLabels,
    source_index: LabelIndex,
    target_index: LabelIndex,
    rng: np.random.Generator,
) -> ReconTargets:
    """Pick x_s^j with labels (p_s, ŷ_t) and x_t^k with labels (p̂_t, y_s) per pair.

    An empty bucket falls back to an expression-only match; when that is empty
    too the pair is masked out.
    """
    _require_labels(source, "sample_recon_targets")
    m = min(len(source), len(target))
    n_pixels = source.images.shape[1]
    x_s_j = np.zeros((m, n_pixels))
    x_t_k = np.zeros((m, n_pixels))
    mask = np.zeros(m, dtype=bool)
    source_fallbacks = target_fallbacks = 0

    for i in range(m):
        j, fell_back_s = _lookup(source_index, source.poses[i], pseudo.expressions[i], rng)
        k, fell_back_t = _lookup(target_index, pseudo.poses[i], source.expressions[i], rng)
        source_fallbacks += int(fell_back_s and j is not None)
        target_fallbacks += int(fell_back_t and k is not None)
        if j is None or k is None:
            continue
        x_s_j[i] = source_index.images[j]
        x_t_k[i] = target_index.images[k]
        mask[i] = True

    return ReconTargets(x_s_j, x_t_k, mask, source_fallbacks, target_fallbacks)


def loss_recon(
    bundle: ModelBundle,
    source: Batch,
    target: Batch,
    targets: ReconTargets,
    norm: Literal["l2", "squared"] = "l2",
    source_features: Optional[FeaturePair] = None,
    target_features: Optional[FeaturePair] = None,
) -> Tensor:
    """Mean over valid pairs of ‖G_s(f_s^p, f_t^e) − x_s^j‖ + ‖G_t(f_t^p, f_s^e) − x_t^k‖.

    Returns a constant 0 and logs a warning when every pair is invalid; check
    ``targets.all_invalid`` for the flag.
    """
    if targets.all_invalid:
        logger.warning("⚠️ Reconstruction skipped: no valid (pose, expression) pairs in batch")
        return Tensor(0.0)
    if norm not in ("l2", "squared"):
        raise ConfigError(f"recon_norm: unknown value {norm!r}")

    m = targets.n_pairs
    fs = _features(bundle, source, "E_s", source_features)
    ft = _features(bundle, target, "E_t", target_features)
    if fs.n_rows != m or ft.n_rows != m:
        raise UsageError(f"reconstruction targets cover {m} pairs, features have {fs.n_rows} and {ft.n_rows} rows")

    squared = norm == "squared"
    weights = targets.mask.astype(np.float64) / targets.n_valid
    fake_source = bundle.G_s(fs.f_p, ft.f_e)
    fake_target = bundle.G_t(ft.f_p, fs.f_e)
    return sum_all(mul(row_norm(sub(fake_source, targets.x_s_j), squared), weights)) + sum_all(
        mul(row_norm(sub(fake_target, targets.x_t_k), squared), weights)
    )


class LossBreakdown(BaseModel):
    """Unweighted loss components; 0.0 for components a mode never computes."""

    model_config = ConfigDict(extra="forbid")

    l_p: float = Field(0.0, ge=0.0)
    l_e: float = Field(0.0, ge=0.0)
    l_adv_d: float = Field(0.0, ge=0.0)
    l_adv_g: float = Field(0.0, ge=0.0)
    l_cross: float = Field(0.0, ge=0.0)
    l_clc: float = Field(0.0, ge=0.0)

    def total(self, weights: LossWeights) -> float:
        return float(joint_objective(self.model_dump(), weights, "encoder"))


def _check_weights(weights: LossWeights) -> None:
    negative = [name for name, value in weights._asdict().items() if value < 0]
    if negative:
        raise ConfigError(f"{negative[0]}: loss weights must be non-negative")


def joint_objective(
    components: Union[LossBreakdown, Mapping[str, Value]],
    weights: LossWeights,
    role: Literal["encoder", "discriminator"] = "encoder",
) -> Value:
    """Weighted objective of one role; works on floats and on tensors.

    ``encoder``: l_p + α·l_e + η·l_clc + β·l_adv_g + γ·l_cross.
    ``discriminator``: l_adv_d + l_p. D_p only reaches l_p and the domain
    discriminators only reach l_adv_d, so the sum steps each on its own term.
    Missing components count as 0.
    """
    _check_weights(weights)
    c: Dict[str, Value] = components.model_dump() if isinstance(components, LossBreakdown) else dict(components)

    def get(name: str) -> Value:
        return c.get(name, 0.0)

    if role == "encoder":
        return (
            get("l_p")
            + weights.alpha * get("l_e")
            + weights.eta * get("l_clc")
            + weights.beta * get("l_adv_g")
            + weights.gamma * get("l_cross")
        )
    if role == "discriminator":
        return get("l_adv_d") + get("l_p")
    raise UsageError(f"unknown objective role {role!r}")
