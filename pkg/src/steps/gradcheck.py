"""Central finite-difference check of every training loss on a tiny random bundle."""
import logging
from dataclasses import dataclass, field
from typing import Callable, Dict

import numpy as np

from src.models.components import ModelBundle, init_bundle
from src.models.tensor import Tape, Tensor, backward, no_tape
from src.steps.losses import (
    ReconTargets,
    loss_adv_discriminator,
    loss_adv_encoder,
    loss_cross,
    loss_expr,
    loss_pose,
    loss_recon,
)
from src.steps.preprocessing import Batch
from src.utils.config import ArchitectureConfig
from src.utils.seeding import make_rng

logger = logging.getLogger(__name__)

TINY_ARCH = ArchitectureConfig(
    image_side=4, n_poses=3, n_expressions=4, trunk_hidden=6, d_p=3, d_e=4, head_hidden=5, gen_hidden=6
)
GRADCHECK_LOSSES = ("l_p", "l_e", "l_adv_d", "l_adv_g", "l_cross", "l_clc")


@dataclass
class GradcheckReport:
    errors: Dict[str, float] = field(default_factory=dict)
    tolerance: float = 1e-4

    @property
    def passed(self) -> bool:
        return all(err < self.tolerance for err in self.errors.values())

    def failures(self) -> Dict[str, float]:
        return {name: err for name, err in self.errors.items() if err >= self.tolerance}


def relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-4) -> np.ndarray:
    """|a - n| / max(|a|, |n|, floor); the floor keeps near-zero entries on an absolute scale."""
    scale = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
    return np.abs(analytic - numeric) / scale


def numeric_gradient(loss_fn: Callable[[], Tensor], param: Tensor, h: float) -> np.ndarray:
    grad = np.zeros_like(param.data)
    with no_tape():
        for idx in np.ndindex(param.shape):
            original = param.data[idx]
            param.data[idx] = original + h
            plus = loss_fn().item()
            param.data[idx] = original - h
            minus = loss_fn().item()
            param.data[idx] = original
            grad[idx] = (plus - minus) / (2.0 * h)
    return grad


def max_gradient_error(bundle: ModelBundle, loss_fn: Callable[[], Tensor], h: float = 1e-6) -> float:
    with Tape():
        analytic = backward(loss_fn(), bundle.params)
    worst = 0.0
    for name, param in bundle.params.items():
        numeric = numeric_gradient(loss_fn, param, h)
        worst = max(worst, float(relative_error(analytic[name], numeric).max()))
    return worst


def _fixture(seed: int, arch: ArchitectureConfig, m: int = 4):
    rng = make_rng(seed, "gradcheck_fixture")
    n = arch.n_pixels

    def labeled() -> Batch:
        return Batch(
            images=rng.uniform(0.0, 1.0, size=(m, n)),
            positions=np.arange(m),
            expressions=rng.integers(0, arch.n_expressions, size=m),
            poses=rng.integers(0, arch.n_poses, size=m),
        )

    source = labeled()
    target = Batch(images=rng.uniform(0.0, 1.0, size=(m, n)), positions=np.arange(m))
    targets = ReconTargets(
        x_s_j=rng.uniform(0.0, 1.0, size=(m, n)),
        x_t_k=rng.uniform(0.0, 1.0, size=(m, n)),
        mask=np.array([True] * (m - 1) + [False]),
    )
    return source, target, targets


def gradient_check(seed: int = 0, h: float = 1e-6, tolerance: float = 1e-4) -> GradcheckReport:
    bundle = init_bundle(seed, TINY_ARCH)
    source, target, targets = _fixture(seed, TINY_ARCH)
    losses: Dict[str, Callable[[], Tensor]] = {
        "l_p": lambda: loss_pose(bundle, source),
        "l_e": lambda: loss_expr(bundle, source),
        "l_adv_d": lambda: loss_adv_discriminator(bundle, source, target),
        "l_adv_g": lambda: loss_adv_encoder(bundle, source, target),
        "l_cross": lambda: loss_cross(bundle, source),
        "l_clc": lambda: loss_recon(bundle, source, target, targets),
    }
    report = GradcheckReport(tolerance=tolerance)
    for name, loss_fn in losses.items():
        report.errors[name] = max_gradient_error(bundle, loss_fn, h)
        status = "✅" if report.errors[name] < tolerance else "❌"
        logger.info(f"{status} {name}: max relative error {report.errors[name]:.3e}")
    return report
