import logging
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd
from pydantic import BaseModel, Field
from sklearn.metrics import accuracy_score, confusion_matrix
from sklearn.model_selection import train_test_split
from sklearn.preprocessing import StandardScaler

from src.data.dataset import Dataset
from src.models.components import ModelBundle, argmax_lowest
from src.models.optim import Adam
from src.models.params import ParamSet
from src.models.tensor import Tape, Tensor, backward, linear, no_tape, softmax_cross_entropy
from src.steps.losses import LOSS_NAMES, LossBreakdown
from src.utils.config import OptimizerSettings
from src.utils.exceptions import DegenerateLabelError, UsageError
from src.utils.seeding import derive_seed, make_rng, sklearn_seed

logger = logging.getLogger(__name__)

FLOAT_FORMAT = "%.9g"
DOMAIN_PROBES = ("domain_on_f_e", "domain_on_f_p")
DISENTANGLEMENT_PROBES = ("pose_on_f_e", "expr_on_f_p")
REFERENCE_PROBES = ("expr_on_f_e", "pose_on_f_p")
PROBE_KINDS = DOMAIN_PROBES + DISENTANGLEMENT_PROBES
ALL_PROBES = PROBE_KINDS + REFERENCE_PROBES


class AccuracyReport(BaseModel):
    overall: float = Field(ge=0.0, le=1.0)
    per_pose: List[float]
    per_expression: List[float]
    pose_counts: List[int]
    confusion: List[List[int]]


class ProbeResult(BaseModel):
    kind: str
    train_accuracy: float = Field(ge=0.0, le=1.0)
    test_accuracy: float = Field(ge=0.0, le=1.0)
    chance: float
    n_train: int
    n_test: int


class MetricsRecord(BaseModel):
    """One training run's scores, losses and probe results."""

    run_id: str
    mode: str
    subject: int
    seed: int
    status: str = "ok"
    error: str = ""
    acc_overall: float = float("nan")
    acc_pose: List[float] = Field(default_factory=list)
    acc_expression: List[float] = Field(default_factory=list)
    confusion: List[List[int]] = Field(default_factory=list)
    final_losses: LossBreakdown = Field(default_factory=LossBreakdown)
    probes: Dict[str, ProbeResult] = Field(default_factory=dict)
    fallback_rate: float = 0.0
    invalid_rate: float = 0.0
    clc_probe_init: float = float("nan")
    clc_probe_final: float = float("nan")

    def to_row(self, n_poses: int, n_expressions: int) -> Dict[str, object]:
        """Flat CSV row; column order depends only on (P, E)."""
        row: Dict[str, object] = {
            "run_id": self.run_id,
            "mode": self.mode,
            "subject": self.subject,
            "seed": self.seed,
            "status": self.status,
            "acc_overall": self.acc_overall,
        }
        for p in range(n_poses):
            row[f"acc_pose_{p}"] = self.acc_pose[p] if p < len(self.acc_pose) else float("nan")
        for e in range(n_expressions):
            row[f"acc_expr_{e}"] = self.acc_expression[e] if e < len(self.acc_expression) else float("nan")
        for kind in ALL_PROBES:
            probe = self.probes.get(kind)
            row[f"probe_{kind}_train"] = probe.train_accuracy if probe else float("nan")
            row[f"probe_{kind}_test"] = probe.test_accuracy if probe else float("nan")
        row["fallback_rate"] = self.fallback_rate
        row["invalid_rate"] = self.invalid_rate
        for name in LOSS_NAMES:
            row[f"loss_{name}"] = getattr(self.final_losses, name)
        row["clc_probe_init"] = self.clc_probe_init
        row["clc_probe_final"] = self.clc_probe_final
        for t in range(n_expressions):
            for p in range(n_expressions):
                row[f"confusion_{t}_{p}"] = self.confusion[t][p] if self.confusion else 0
        row["error"] = self.error
        return row


def extract_features(bundle: ModelBundle, images: np.ndarray, encoder: str) -> Tuple[np.ndarray, np.ndarray]:
    """Frozen (f_p, f_e) arrays for flattened images."""
    with no_tape():
        features = bundle.component(encoder).encode(Tensor(images))
    return features.f_p.data, features.f_e.data


def predict_expressions(bundle: ModelBundle, images: np.ndarray, encoder: str = "E_t") -> np.ndarray:
    _, f_e = extract_features(bundle, images, encoder)
    with no_tape():
        logits = bundle.R(Tensor(f_e)).data
    return argmax_lowest(logits)


def evaluate_accuracy(bundle: ModelBundle, target_test: Dataset, encoder: str = "E_t") -> AccuracyReport:
    """Score f = R∘encoder on a labeled set, overall and per true pose / expression."""
    if len(target_test) == 0:
        raise UsageError("cannot score an empty test set")
    labeled = target_test.reveal()
    spec = labeled.spec
    predicted = predict_expressions(bundle, labeled.images_flat, encoder)
    truth, poses = labeled.expressions, labeled.poses

    per_pose, pose_counts = [], []
    for p in range(spec.n_poses):
        selected = poses == p
        pose_counts.append(int(selected.sum()))
        per_pose.append(float(accuracy_score(truth[selected], predicted[selected])) if selected.any() else 0.0)
    per_expression = [
        float(accuracy_score(truth[truth == e], predicted[truth == e])) if (truth == e).any() else 0.0
        for e in range(spec.n_expressions)
    ]
    counts = confusion_matrix(truth, predicted, labels=np.arange(spec.n_expressions))
    return AccuracyReport(
        overall=float(accuracy_score(truth, predicted)),
        per_pose=per_pose,
        per_expression=per_expression,
        pose_counts=pose_counts,
        confusion=counts.astype(int).tolist(),
    )


def train_probe(
    features: np.ndarray,
    labels: np.ndarray,
    n_classes: int,
    seed: int,
    steps: int = 500,
    lr: float = 1e-2,
    kind: str = "probe",
    test_size: float = 0.2,
) -> ProbeResult:
    """Linear softmax probe on standardized frozen features, full-batch Adam."""
    features = np.asarray(features, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    if len(np.unique(labels)) < 2:
        raise DegenerateLabelError(f"{kind}: probe labels contain a single class")

    _, class_counts = np.unique(labels, return_counts=True)
    X_train, X_test, y_train, y_test = train_test_split(
        features,
        labels,
        test_size=test_size,
        random_state=sklearn_seed(seed),
        stratify=labels if class_counts.min() >= 2 else None,
    )
    scaler = StandardScaler().fit(X_train)
    X_train, X_test = scaler.transform(X_train), scaler.transform(X_test)

    params = ParamSet()
    rng = make_rng(seed, "probe_init")
    width = features.shape[1]
    params.add("probe.W", rng.normal(0.0, 0.01, size=(width, n_classes)))
    params.add("probe.b", np.zeros(n_classes))
    optimizer = Adam(OptimizerSettings(lr=lr))
    for _ in range(steps):
        with Tape():
            loss = softmax_cross_entropy(linear(Tensor(X_train), params["probe.W"], params["probe.b"]), y_train)
            optimizer.step(params, backward(loss, params))

    def accuracy(X: np.ndarray, y: np.ndarray) -> float:
        with no_tape():
            logits = linear(Tensor(X), params["probe.W"], params["probe.b"]).data
        return float(accuracy_score(y, argmax_lowest(logits)))

    chance = 0.5 if kind.startswith("domain") else 1.0 / n_classes
    return ProbeResult(
        kind=kind,
        train_accuracy=accuracy(X_train, y_train),
        test_accuracy=accuracy(X_test, y_test),
        chance=chance,
        n_train=len(y_train),
        n_test=len(y_test),
    )


def domain_confusion_report(
    bundle: ModelBundle,
    source: Dataset,
    target: Dataset,
    seed: int,
    target_encoder: str = "E_t",
    steps: int = 500,
    lr: float = 1e-2,
) -> Tuple[ProbeResult, ProbeResult]:
    """Domain probes on frozen f_e and f_p from equal numbers of source and target samples.

    Lower accuracy means the two domains are harder to tell apart.
    """
    n = min(len(source), len(target))
    if n < 2:
        raise UsageError("domain probes need at least two samples per domain")
    rng = make_rng(seed, "domain_balance")
    source_pos = np.sort(rng.choice(len(source), size=n, replace=False))
    target_pos = np.sort(rng.choice(len(target), size=n, replace=False))

    fs_p, fs_e = extract_features(bundle, source.images_flat[source_pos], "E_s")
    ft_p, ft_e = extract_features(bundle, target.images_flat[target_pos], target_encoder)
    domains = np.concatenate([np.ones(n, dtype=np.int64), np.zeros(n, dtype=np.int64)])

    on_e = train_probe(
        np.vstack([fs_e, ft_e]), domains, 2, derive_seed(seed, "domain_on_f_e"), steps, lr, kind="domain_on_f_e"
    )
    on_p = train_probe(
        np.vstack([fs_p, ft_p]), domains, 2, derive_seed(seed, "domain_on_f_p"), steps, lr, kind="domain_on_f_p"
    )
    logger.info(f"Domain probes: f_e={on_e.test_accuracy:.3f}, f_p={on_p.test_accuracy:.3f} (chance 0.5)")
    return on_e, on_p


def disentanglement_report(
    bundle: ModelBundle,
    source: Dataset,
    seed: int,
    reference: bool = True,
    steps: int = 500,
    lr: float = 1e-2,
) -> Dict[str, ProbeResult]:
    """Probes for the wrong factor in each feature space of E_s.

    ``pose_on_f_e`` and ``expr_on_f_p`` should sit near chance; the reference
    probes ``expr_on_f_e`` and ``pose_on_f_p`` show what each space does carry.
    """
    labeled = source.reveal()
    spec = labeled.spec
    f_p, f_e = extract_features(bundle, labeled.images_flat, "E_s")
    plan = {
        "pose_on_f_e": (f_e, labeled.poses, spec.n_poses),
        "expr_on_f_p": (f_p, labeled.expressions, spec.n_expressions),
    }
    if reference:
        plan["expr_on_f_e"] = (f_e, labeled.expressions, spec.n_expressions)
        plan["pose_on_f_p"] = (f_p, labeled.poses, spec.n_poses)

    results = {
        kind: train_probe(features, labels, n_classes, derive_seed(seed, kind), steps, lr, kind=kind)
        for kind, (features, labels, n_classes) in plan.items()
    }
    logger.info("Disentanglement probes: " + ", ".join(f"{k}={r.test_accuracy:.3f}" for k, r in results.items()))
    return results


def _write_csv(frame: pd.DataFrame, path: Path, what: str) -> Path:
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        frame.to_csv(path, index=False, float_format=FLOAT_FORMAT, lineterminator="\n", encoding="utf-8")
    except OSError as e:
        raise OSError(f"❌ Could not write {what} to {path}: {e}") from e
    logger.info(f"✅ {what.capitalize()} saved to {path}")
    return path


def export_embeddings(
    bundle: ModelBundle,
    datasets: Sequence[Dataset],
    path: Union[str, Path],
    encoders: Optional[Dict[str, str]] = None,
    source_ratio: Optional[float] = None,
    seed: int = 0,
) -> Path:
    """One CSV row per sample: ids, labels, then f_e_* and f_p_* columns.

    Source rows are encoded by E_s and target rows by ``encoders["target"]``.
    With ``source_ratio`` r the source rows are subsampled to r times the
    number of target rows.
    """
    encoders = {"source": "E_s", "target": "E_t", **(encoders or {})}
    arch = bundle.arch
    frames = []
    for dataset in datasets:
        labeled = dataset.reveal()
        for domain in ("source", "target"):
            positions = np.flatnonzero(labeled.domains == domain)
            if len(positions) == 0:
                continue
            f_p, f_e = extract_features(bundle, labeled.images_flat[positions], encoders[domain])
            frame = pd.DataFrame(
                {
                    "sample_id": labeled.sample_ids[positions],
                    "domain": domain,
                    "subject": labeled.subjects[positions],
                    "pose": labeled.poses[positions],
                    "expression": labeled.expressions[positions],
                }
            )
            embedded = pd.DataFrame(
                np.hstack([f_e, f_p]),
                columns=[f"f_e_{i}" for i in range(arch.d_e)] + [f"f_p_{i}" for i in range(arch.d_p)],
            )
            frames.append(pd.concat([frame, embedded], axis=1))

    table = pd.concat(frames, ignore_index=True)
    if source_ratio is not None:
        if source_ratio <= 0:
            raise UsageError(f"source_ratio must be positive, got {source_ratio}")
        is_source = (table["domain"] == "source").to_numpy()
        n_keep = min(int(is_source.sum()), int(round(source_ratio * (~is_source).sum())))
        rng = make_rng(seed, "export_subsample")
        kept = rng.choice(np.flatnonzero(is_source), size=n_keep, replace=False)
        table = table[~is_source | np.isin(np.arange(len(table)), kept)].reset_index(drop=True)

    return _write_csv(table, Path(path), "embeddings")


def metrics_frame(records: Sequence[MetricsRecord], n_poses: int, n_expressions: int) -> pd.DataFrame:
    return pd.DataFrame([record.to_row(n_poses, n_expressions) for record in records])


def write_metrics(
    records: Sequence[MetricsRecord], path: Union[str, Path], n_poses: int, n_expressions: int
) -> Path:
    return _write_csv(metrics_frame(records, n_poses, n_expressions), Path(path), "metrics")


def read_metrics(path: Union[str, Path]) -> pd.DataFrame:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"Metrics file not found: {path}")
    frame = pd.read_csv(path)
    if "error" in frame.columns:
        frame["error"] = frame["error"].fillna("")
    return frame


def write_probes(results: Sequence[ProbeResult], path: Union[str, Path]) -> Path:
    return _write_csv(pd.DataFrame([r.model_dump() for r in results]), Path(path), "probe results")


def write_history(history: Sequence[Dict[str, float]], path: Union[str, Path]) -> Path:
    return _write_csv(pd.DataFrame(list(history)), Path(path), "training history")
