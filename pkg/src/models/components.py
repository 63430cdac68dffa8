"""The eight model components and their forward passes.

All components are small multilayer perceptrons registered in one ParamSet
under disjoint name prefixes (``E_s``, ``E_t``, ``D_p``, ``R``, ``D_de``,
``D_dp``, ``G_s``, ``G_t``).
"""
import logging
from dataclasses import dataclass
from typing import Dict, List, Optional, Union

import numpy as np

from src.models.params import ParamSet
from src.models.tensor import Tensor, as_tensor, concat_features, linear, no_tape, relu, sigmoid
from src.utils.config import ArchitectureConfig
from src.utils.seeding import make_rng

logger = logging.getLogger(__name__)

COMPONENTS = ("E_s", "E_t", "D_p", "R", "D_de", "D_dp", "G_s", "G_t")
ENCODERS = ("E_s", "E_t")
CLASSIFIERS = ("R", "D_p")
DISCRIMINATORS = ("D_de", "D_dp")
GENERATORS = ("G_s", "G_t")

Images = Union[Tensor, np.ndarray]


@dataclass
class FeaturePair:
    f_p: Tensor
    f_e: Tensor
    domain: str

    def __post_init__(self):
        if self.f_p.shape[0] != self.f_e.shape[0]:
            raise ValueError(f"feature row counts differ: {self.f_p.shape} vs {self.f_e.shape}")

    @property
    def n_rows(self) -> int:
        return self.f_p.shape[0]


@dataclass
class PseudoLabels:
    expressions: np.ndarray
    poses: np.ndarray


class MLP:
    """Stack of dense layers ``{prefix}.W{i}`` / ``{prefix}.b{i}``."""

    def __init__(
        self,
        params: ParamSet,
        prefix: str,
        widths: List[int],
        output_activation: Optional[str] = None,
    ):
        self.params = params
        self.prefix = prefix
        self.widths = widths
        self.output_activation = output_activation

    @property
    def n_layers(self) -> int:
        return len(self.widths) - 1

    def init(self, rng: np.random.Generator) -> None:
        # Kaiming-uniform weights, zero biases
        for i in range(self.n_layers):
            fan_in, fan_out = self.widths[i], self.widths[i + 1]
            bound = np.sqrt(6.0 / fan_in)
            self.params.add(f"{self.prefix}.W{i + 1}", rng.uniform(-bound, bound, size=(fan_in, fan_out)))
            self.params.add(f"{self.prefix}.b{i + 1}", np.zeros(fan_out))

    def __call__(self, x: Tensor) -> Tensor:
        for i in range(1, self.n_layers + 1):
            x = linear(x, self.params[f"{self.prefix}.W{i}"], self.params[f"{self.prefix}.b{i}"])
            if i < self.n_layers:
                x = relu(x)
        if self.output_activation == "relu":
            x = relu(x)
        elif self.output_activation == "sigmoid":
            x = sigmoid(x)
        return x


class Encoder:
    """Shared relu trunk followed by linear pose and expression heads."""

    def __init__(self, params: ParamSet, name: str, arch: ArchitectureConfig):
        self.name = name
        self.domain = "source" if name == "E_s" else "target"
        self.trunk = MLP(params, f"{name}.trunk", [arch.n_pixels, arch.trunk_hidden], "relu")
        self.pose_head = MLP(params, f"{name}.pose", [arch.trunk_hidden, arch.d_p])
        self.expr_head = MLP(params, f"{name}.expr", [arch.trunk_hidden, arch.d_e])

    def init(self, rng: np.random.Generator) -> None:
        for block in (self.trunk, self.pose_head, self.expr_head):
            block.init(rng)

    def encode(self, images: Images) -> FeaturePair:
        h = self.trunk(as_tensor(images))
        return FeaturePair(f_p=self.pose_head(h), f_e=self.expr_head(h), domain=self.domain)

    __call__ = encode


class Head:
    """Two-layer classifier or discriminator producing logits."""

    def __init__(self, params: ParamSet, name: str, in_width: int, hidden: int, out_width: int):
        self.name = name
        self.mlp = MLP(params, f"{name}.mlp", [in_width, hidden, out_width])

    def init(self, rng: np.random.Generator) -> None:
        self.mlp.init(rng)

    @property
    def in_width(self) -> int:
        return self.mlp.widths[0]

    @property
    def out_width(self) -> int:
        return self.mlp.widths[-1]

    def __call__(self, features: Tensor) -> Tensor:
        return self.mlp(as_tensor(features))


class Generator:
    """Maps concatenated (f_p, f_e) to an image with sigmoid pixels."""

    def __init__(self, params: ParamSet, name: str, arch: ArchitectureConfig):
        self.name = name
        self.mlp = MLP(params, f"{name}.mlp", [arch.d_p + arch.d_e, arch.gen_hidden, arch.n_pixels], "sigmoid")

    def init(self, rng: np.random.Generator) -> None:
        self.mlp.init(rng)

    def __call__(self, f_p: Tensor, f_e: Tensor) -> Tensor:
        return self.mlp(concat_features(f_p, f_e))


class ModelBundle:
    def __init__(self, arch: ArchitectureConfig):
        self.arch = arch
        self.params = ParamSet()
        self.E_s = Encoder(self.params, "E_s", arch)
        self.E_t = Encoder(self.params, "E_t", arch)
        self.D_p = Head(self.params, "D_p", arch.d_p, arch.head_hidden, arch.n_poses)
        self.R = Head(self.params, "R", arch.d_e, arch.head_hidden, arch.n_expressions)
        self.D_de = Head(self.params, "D_de", arch.d_e, arch.head_hidden, 1)
        self.D_dp = Head(self.params, "D_dp", arch.d_p, arch.head_hidden, 1)
        self.G_s = Generator(self.params, "G_s", arch)
        self.G_t = Generator(self.params, "G_t", arch)

    def component(self, name: str):
        if name not in COMPONENTS:
            raise KeyError(f"unknown component {name!r}; expected one of {COMPONENTS}")
        return getattr(self, name)

    def checksums(self) -> Dict[str, str]:
        return self.params.component_checksums()


def init_bundle(seed: int, arch: ArchitectureConfig) -> ModelBundle:
    bundle = ModelBundle(arch)
    rng = make_rng(seed, "init_bundle")
    for name in COMPONENTS:
        bundle.component(name).init(rng)
    return bundle


def encode(encoder: Encoder, images: Images) -> FeaturePair:
    return encoder.encode(images)


def classify(head: Head, features: Tensor) -> Tensor:
    return head(features)


def discriminate(disc: Head, features: Tensor) -> Tensor:
    return disc(features)


def generate(generator: Generator, f_p: Tensor, f_e: Tensor) -> Tensor:
    return generator(f_p, f_e)


def argmax_lowest(logits: np.ndarray) -> np.ndarray:
    # np.argmax returns the first maximal index, i.e. the lowest class id on ties
    return np.argmax(logits, axis=1).astype(np.int64)


def pseudo_label(bundle: ModelBundle, target_images: Images, encoder: str = "E_t") -> PseudoLabels:
    with no_tape():
        features = bundle.component(encoder).encode(target_images)
        expr_logits = bundle.R(features.f_e).data
        pose_logits = bundle.D_p(features.f_p).data
    return PseudoLabels(expressions=argmax_lowest(expr_logits), poses=argmax_lowest(pose_logits))
