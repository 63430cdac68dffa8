"""Three-phase alternating optimization.

Per epoch: K1 phase-1 steps (encoder side), K2 phase-2 steps (cross-domain
reconstruction), K3 phase-3 steps (pose classifier and domain
discriminators). Each sub-update descends one loss over a fixed set of
component prefixes and leaves every other component untouched. One optimizer
keeps per-parameter moments across sub-updates; each runs at ``lr`` unless
noted:

    phase 1 (a)  l_p + α·l_e        E_s, R
    phase 1 (b)  γ·l_cross           E_s            mode ≥ R+adv+cross
    phase 1 (c)  β·l_adv (encoder)   E_s, E_t       mode ≥ R+adv, at adv_lr
    phase 2      η·l_clc             E_s, E_t, G_s, G_t    mode = full
    phase 3      l_p                 D_p
                 l_adv (discrim.)    D_de, D_dp     mode ≥ R+adv, at disc_lr

Before each (c), E_t closes a ``target_tracking`` fraction of its distance
to E_s so the target encoder stays usable in front of R.
"""
import logging
from contextlib import contextmanager
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Dict, Iterator, List, Optional, Sequence, Tuple, Union

import joblib
import numpy as np

from src.data.dataset import Dataset, LabelIndex
from src.models.components import ModelBundle, PseudoLabels, init_bundle, pseudo_label
from src.models.optim import Optimizer, build_optimizer
from src.models.tensor import Tape, Tensor, backward, no_tape
from src.steps.losses import (
    LOSS_NAMES,
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
from src.steps.preprocessing import Batch, batch_at, sample_batch
from src.utils.config import AblationMode, TrainConfig
from src.utils.exceptions import NumericalError, TrainingAborted, UsageError
from src.utils.seeding import make_rng

logger = logging.getLogger(__name__)

STATE_VERSION = 1

PHASE1_SUPERVISED = ("E_s", "R")
PHASE1_CROSS = ("E_s",)
PHASE1_ADVERSARIAL = ("E_s", "E_t")
PHASE2_RECON = ("E_s", "E_t", "G_s", "G_t")
PHASE3_POSE = ("D_p",)
PHASE3_DOMAIN = ("D_de", "D_dp")

PAIRING_COUNTERS = ("pairs", "invalid", "lookups", "fallbacks", "recon_skipped")


def classifier_encoder(mode: AblationMode) -> str:
    """Encoder used in front of R on target data: E_s for the baseline, E_t otherwise."""
    return "E_s" if AblationMode(mode) == AblationMode.R else "E_t"


@dataclass
class ProbeBatch:
    """Fixed reconstruction batch, paired by true labels, for tracking l_clc."""

    source: Batch
    target: Batch
    targets: ReconTargets


@dataclass
class TrainState:
    config: TrainConfig
    bundle: ModelBundle
    optimizer: Optimizer
    batch_rng: np.random.Generator
    pair_rng: np.random.Generator
    epoch: int = 0
    step: int = 0
    synced: bool = False
    history: List[Dict[str, float]] = field(default_factory=list)
    sums: Dict[str, float] = field(default_factory=dict)
    counts: Dict[str, int] = field(default_factory=dict)
    pairing: Dict[str, int] = field(default_factory=lambda: dict.fromkeys(PAIRING_COUNTERS, 0))
    target_pseudo: Optional[PseudoLabels] = None
    clc_probe_init: Optional[float] = None
    source_index: Optional[LabelIndex] = field(default=None, repr=False)
    target_index: Optional[LabelIndex] = field(default=None, repr=False)
    probe: Optional[ProbeBatch] = field(default=None, repr=False)

    @property
    def steps_per_epoch(self) -> int:
        c = self.config
        return c.k1 + c.k2 + c.k3

    @property
    def global_step(self) -> int:
        return self.epoch * self.steps_per_epoch + self.step

    @property
    def finished(self) -> bool:
        return self.epoch >= self.config.epochs

    @property
    def active_mode(self) -> AblationMode:
        """Mode in force this epoch; warm-up epochs train the supervised path only."""
        if self.epoch < self.config.warmup_epochs:
            return AblationMode.R
        return AblationMode(self.config.mode)

    def record(self, name: str, value: float) -> None:
        self.sums[name] = self.sums.get(name, 0.0) + value
        self.counts[name] = self.counts.get(name, 0) + 1

    def epoch_breakdown(self) -> LossBreakdown:
        return LossBreakdown(**{name: self.sums[name] / self.counts[name] for name in self.counts})

    def save(self, path: Union[str, Path]) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        payload = {
            "version": STATE_VERSION,
            "config": self.config.model_dump(mode="json"),
            "params": self.bundle.params.state_dict(),
            "optimizer": self.optimizer.state_dict(),
            "batch_rng": self.batch_rng.bit_generator.state,
            "pair_rng": self.pair_rng.bit_generator.state,
            "epoch": self.epoch,
            "step": self.step,
            "synced": self.synced,
            "history": self.history,
            "sums": self.sums,
            "counts": self.counts,
            "pairing": self.pairing,
            "target_pseudo": None
            if self.target_pseudo is None
            else (self.target_pseudo.expressions, self.target_pseudo.poses),
            "clc_probe_init": self.clc_probe_init,
        }
        joblib.dump(payload, path)
        logger.debug(f"Train state saved to {path} at epoch {self.epoch}, step {self.step}")
        return path

    @classmethod
    def load(cls, path: Union[str, Path], source: Dataset, target_train: Dataset) -> "TrainState":
        path = Path(path)
        if not path.exists():
            raise FileNotFoundError(f"Train state not found: {path}")
        payload = joblib.load(path)
        if payload.get("version") != STATE_VERSION:
            raise UsageError(f"{path}: unsupported train state version {payload.get('version')}")

        config = TrainConfig.model_validate(payload["config"])
        state = new_state(config, source, target_train)
        state.bundle.params.load_state_dict(payload["params"])
        state.optimizer.load_state_dict(payload["optimizer"])
        state.batch_rng.bit_generator.state = payload["batch_rng"]
        state.pair_rng.bit_generator.state = payload["pair_rng"]
        for name in ("epoch", "step", "synced", "history", "sums", "counts", "pairing", "clc_probe_init"):
            setattr(state, name, payload[name])
        if payload["target_pseudo"] is not None:
            expressions, poses = payload["target_pseudo"]
            state.target_pseudo = PseudoLabels(expressions=expressions, poses=poses)
            state.target_index = LabelIndex(target_train.images_flat, poses, expressions)
        logger.info(f"Resumed train state from {path} at epoch {state.epoch}, step {state.step}")
        return state


@contextmanager
def _recording(loss_name: str) -> Iterator[Tape]:
    """Tape for one sub-update; numerical failures are tagged with the loss."""
    try:
        with Tape() as tape:
            yield tape
    except NumericalError as e:
        e.loss_name = loss_name
        raise


def _descend(state: TrainState, loss: Tensor, prefixes: Sequence[str], lr: Optional[float] = None) -> None:
    params = state.bundle.params
    stepped = params.subset(prefixes)
    grads = backward(loss, stepped)
    state.optimizer.step(params, grads, list(stepped), lr=lr)


def phase1_step(state: TrainState, source: Batch, target: Batch) -> TrainState:
    bundle, config, mode = state.bundle, state.config, state.active_mode
    weights = config.weights

    with _recording("l_p + l_e"):
        features = bundle.E_s.encode(source.x)
        l_p = loss_pose(bundle, source, features)
        l_e = loss_expr(bundle, source, features)
        _descend(state, joint_objective({"l_p": l_p, "l_e": l_e}, weights), PHASE1_SUPERVISED)
    state.record("l_p", l_p.item())
    state.record("l_e", l_e.item())

    if mode.enables(AblationMode.R_ADV_CROSS):
        with _recording("l_cross"):
            l_cross = loss_cross(bundle, source, mode=config.confusion_mode)
            _descend(state, joint_objective({"l_cross": l_cross}, weights), PHASE1_CROSS)
        state.record("l_cross", l_cross.item())

    if mode.enables(AblationMode.R_ADV):
        if config.target_tracking > 0.0:
            bundle.params.blend_component("E_s", "E_t", config.target_tracking)
        with _recording("l_adv_g"):
            l_adv_g = loss_adv_encoder(bundle, source, target)
            _descend(state, joint_objective({"l_adv_g": l_adv_g}, weights), PHASE1_ADVERSARIAL, lr=config.adv_lr)
        state.record("l_adv_g", l_adv_g.item())
    return state


def phase2_step(state: TrainState, source: Batch, target: Batch) -> TrainState:
    if state.active_mode != AblationMode.FULL:
        return state
    if state.source_index is None or state.target_index is None:
        raise UsageError("phase 2 needs the source label index and the epoch's target pseudo-label index")

    bundle = state.bundle
    pseudo = pseudo_label(bundle, target.images, encoder="E_t")
    targets = sample_recon_targets(source, target, pseudo, state.source_index, state.target_index, state.pair_rng)
    counters = state.pairing
    counters["pairs"] += targets.n_pairs
    counters["invalid"] += targets.n_pairs - targets.n_valid
    counters["lookups"] += 2 * targets.n_pairs
    counters["fallbacks"] += targets.source_fallbacks + targets.target_fallbacks

    if targets.all_invalid:
        counters["recon_skipped"] += 1
        logger.warning(f"⚠️ Epoch {state.epoch} step {state.step}: all reconstruction pairs invalid, phase 2 skipped")
        return state

    with _recording("l_clc"):
        l_clc = loss_recon(bundle, source, target, targets, norm=state.config.recon_norm)
        _descend(state, joint_objective({"l_clc": l_clc}, state.config.weights), PHASE2_RECON)
    state.record("l_clc", l_clc.item())
    return state


def phase3_step(state: TrainState, source: Batch, target: Batch) -> TrainState:
    bundle, mode = state.bundle, state.active_mode
    adversarial = mode.enables(AblationMode.R_ADV)

    # encoders are frozen here: features enter as constants
    with no_tape():
        fs = bundle.E_s.encode(source.x)
        ft = bundle.E_t.encode(target.x) if adversarial else None

    with _recording("l_p"):
        l_p = loss_pose(bundle, source, fs)
        _descend(state, l_p, PHASE3_POSE)
    state.record("l_p", l_p.item())

    if adversarial:
        with _recording("l_adv_d"):
            l_adv_d = loss_adv_discriminator(bundle, source, target, fs, ft)
            objective = joint_objective({"l_adv_d": l_adv_d}, state.config.weights, "discriminator")
            _descend(state, objective, PHASE3_DOMAIN, lr=state.config.disc_lr)
        state.record("l_adv_d", l_adv_d.item())
    return state


def build_probe_batch(config: TrainConfig, source: Dataset, target_train: Dataset) -> ProbeBatch:
    """Fixed batch whose reconstruction targets are paired by true target labels."""
    rng = make_rng(config.seed, "clc_probe")
    labeled_target = target_train.reveal()
    source_batch = sample_batch(source, config.batch_size, rng)
    target_batch = batch_at(labeled_target, rng.integers(0, len(labeled_target), size=config.batch_size))
    truth = PseudoLabels(expressions=target_batch.expressions, poses=target_batch.poses)
    targets = sample_recon_targets(source_batch, target_batch, truth, source.index, labeled_target.index, rng)
    # the training view of the target batch stays unlabeled
    target_batch.expressions = target_batch.poses = None
    return ProbeBatch(source=source_batch, target=target_batch, targets=targets)


def measure_clc(bundle: ModelBundle, probe: ProbeBatch, norm: str = "l2") -> float:
    with no_tape():
        return loss_recon(bundle, probe.source, probe.target, probe.targets, norm=norm).item()


def new_state(config: TrainConfig, source: Dataset, target_train: Dataset) -> TrainState:
    if source.labels_hidden:
        raise UsageError("source data must expose its labels")
    if not target_train.labels_hidden:
        raise UsageError("target training data must hide its labels")
    if len(source) == 0 or len(target_train) == 0:
        raise UsageError("source and target training data must be non-empty")

    bundle = init_bundle(config.seed, config.architecture(source.spec))
    state = TrainState(
        config=config,
        bundle=bundle,
        optimizer=build_optimizer(config.optimizer_settings),
        batch_rng=make_rng(config.seed, "batches"),
        pair_rng=make_rng(config.seed, "pairing"),
    )
    state.source_index = source.index
    state.probe = build_probe_batch(config, source, target_train)
    state.clc_probe_init = measure_clc(bundle, state.probe, config.recon_norm)
    return state


class Trainer:
    """Drives a TrainState through its epoch schedule.

    ``run(max_steps)`` stops after that many phase steps, leaving the state
    resumable at any step boundary.
    """

    def __init__(
        self,
        config: TrainConfig,
        source: Dataset,
        target_train: Dataset,
        state: Optional[TrainState] = None,
        on_epoch_end: Optional[Callable[[TrainState], None]] = None,
    ):
        self.source = source
        self.target_train = target_train
        self.state = state if state is not None else new_state(config, source, target_train)
        self.on_epoch_end = on_epoch_end

    def schedule(self) -> List[Tuple[str, Callable[[TrainState, Batch, Batch], TrainState]]]:
        c = self.state.config
        return [("phase1", phase1_step)] * c.k1 + [("phase2", phase2_step)] * c.k2 + [("phase3", phase3_step)] * c.k3

    @contextmanager
    def _guard(self, name: str) -> Iterator[None]:
        try:
            yield
        except NumericalError as e:
            state = self.state
            raise TrainingAborted(getattr(e, "loss_name", name), state.epoch, state.step, str(e)) from e

    def _start_epoch(self) -> None:
        state = self.state
        if state.epoch == state.config.warmup_epochs and state.config.sync_target and not state.synced:
            if AblationMode(state.config.mode) != AblationMode.R:
                state.bundle.params.copy_component("E_s", "E_t")
                logger.info(f"Epoch {state.epoch}: E_t initialized from E_s")
            state.synced = True
        if state.active_mode == AblationMode.FULL:
            with self._guard("pseudo_label"):
                pseudo = pseudo_label(state.bundle, self.target_train.images_flat, encoder="E_t")
            state.target_pseudo = pseudo
            state.target_index = LabelIndex(self.target_train.images_flat, pseudo.poses, pseudo.expressions)

    def _end_epoch(self) -> None:
        state = self.state
        breakdown = state.epoch_breakdown()
        with self._guard("l_clc"):
            clc_probe = measure_clc(state.bundle, state.probe, state.config.recon_norm)
        counters = state.pairing
        row = {
            "epoch": state.epoch,
            **breakdown.model_dump(),
            "total": breakdown.total(state.config.weights),
            "clc_probe": clc_probe,
            "fallback_rate": counters["fallbacks"] / counters["lookups"] if counters["lookups"] else 0.0,
            "invalid_rate": counters["invalid"] / counters["pairs"] if counters["pairs"] else 0.0,
            "recon_skipped": counters["recon_skipped"],
        }
        for name in LOSS_NAMES:
            if not np.isfinite(row[name]):
                raise TrainingAborted(name, state.epoch, state.step, "non-finite epoch mean")
        state.history.append(row)
        logger.info(
            f"Epoch {state.epoch + 1}/{state.config.epochs} [{state.active_mode.value}] "
            + " ".join(f"{name}={row[name]:.4f}" for name in LOSS_NAMES)
            + f" clc_probe={clc_probe:.4f} fallback={row['fallback_rate']:.2%} invalid={row['invalid_rate']:.2%}"
        )

        state.sums, state.counts = {}, {}
        state.pairing = dict.fromkeys(PAIRING_COUNTERS, 0)
        state.epoch += 1
        state.step = 0
        if self.on_epoch_end is not None:
            self.on_epoch_end(state)

    def run(self, max_steps: Optional[int] = None) -> TrainState:
        state = self.state
        schedule = self.schedule()
        executed = 0
        while not state.finished:
            if max_steps is not None and executed >= max_steps:
                break
            if state.step == 0:
                self._start_epoch()
            phase, step_fn = schedule[state.step]
            source_batch = sample_batch(self.source, state.config.batch_size, state.batch_rng)
            target_batch = sample_batch(self.target_train, state.config.batch_size, state.batch_rng)
            with self._guard(phase):
                step_fn(state, source_batch, target_batch)
            state.step += 1
            executed += 1
            if state.step == len(schedule):
                self._end_epoch()
        return state


def train(
    config: TrainConfig,
    source: Dataset,
    target_train: Dataset,
    on_epoch_end: Optional[Callable[[TrainState], None]] = None,
    state: Optional[TrainState] = None,
) -> Tuple[ModelBundle, List[Dict[str, float]]]:
    """Run every epoch; returns the bundle and the per-epoch history rows."""
    logger.info(
        f"Training mode={AblationMode(config.mode).value} epochs={config.epochs} "
        f"k=({config.k1},{config.k2},{config.k3}) m={config.batch_size} seed={config.seed}"
    )
    trainer = Trainer(config, source, target_train, state=state, on_epoch_end=on_epoch_end)
    final = trainer.run()
    return final.bundle, final.history
