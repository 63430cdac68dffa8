import json
import logging
from datetime import datetime
from pathlib import Path
from typing import Any, Dict, List, NamedTuple, Optional, Sequence, Union

from pydantic import BaseModel, Field

from src import __version__
from src.data.dataset import Dataset
from src.models.checkpoint import load_checkpoint, save_checkpoint
from src.models.components import ModelBundle
from src.steps.evaluation import MetricsRecord, write_history, write_metrics
from src.steps.training import TrainState

logger = logging.getLogger(__name__)


class RunPaths(NamedTuple):
    directory: Path
    checkpoint: Path
    metrics: Path
    history: Path
    state: Path
    manifest: Path


class RunManifest(BaseModel):
    """Everything needed to rerun one training run."""

    run_id: str
    mode: str
    subject: int
    seed: int
    train_config: Dict[str, Any]
    factor_spec: Dict[str, Any]
    dataset_hash: str = ""
    code_version: str = __version__
    started_at: str = Field(default_factory=lambda: datetime.now().isoformat())
    finished_at: str = ""
    outputs: Dict[str, str] = Field(default_factory=dict)


class ArtifactManager:
    """Manages run directories and the run registry under one output root"""

    def __init__(self, artifacts_dir: Union[str, Path] = "artifacts"):
        self.artifacts_dir = Path(artifacts_dir)
        self.index_file = self.artifacts_dir / "index.json"
        self.artifacts_dir.mkdir(parents=True, exist_ok=True)

    def paths(self, run_id: str) -> RunPaths:
        run_dir = self.artifacts_dir / run_id
        return RunPaths(
            directory=run_dir,
            checkpoint=run_dir / "checkpoint.bin",
            metrics=run_dir / "metrics.csv",
            history=run_dir / "history.csv",
            state=run_dir / "train_state.joblib",
            manifest=run_dir / "manifest.json",
        )

    def save_state(self, run_id: str, state: TrainState) -> Path:
        return state.save(self.paths(run_id).state)

    def has_state(self, run_id: str) -> bool:
        return self.paths(run_id).state.exists()

    def load_state(self, run_id: str, source: Dataset, target_train: Dataset) -> TrainState:
        return TrainState.load(self.paths(run_id).state, source, target_train)

    def save_run(
        self,
        record: MetricsRecord,
        bundle: ModelBundle,
        history: Sequence[Dict[str, float]],
        manifest: RunManifest,
        checkpoint_metadata: Optional[Dict[str, Any]] = None,
        register: bool = True,
    ) -> RunPaths:
        """Write checkpoint, metrics row, history and manifest for one run.

        Returns the paths written.
        """
        paths = self.paths(record.run_id)
        paths.directory.mkdir(parents=True, exist_ok=True)
        logger.info(f"Saving artifacts for run {record.run_id}")

        arch = bundle.arch
        save_checkpoint(bundle, paths.checkpoint, checkpoint_metadata)
        write_metrics([record], paths.metrics, arch.n_poses, arch.n_expressions)
        write_history(history, paths.history)

        manifest.finished_at = datetime.now().isoformat()
        manifest.outputs = {
            "checkpoint": paths.checkpoint.name,
            "metrics": paths.metrics.name,
            "history": paths.history.name,
            "state": paths.state.name,
        }
        self.write_manifest(manifest)
        if register:
            self.register(record, manifest.finished_at)

        logger.info(f"✅ Run {record.run_id} saved to {paths.directory}")
        return paths

    def write_manifest(self, manifest: RunManifest) -> Path:
        path = self.paths(manifest.run_id).manifest
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w") as f:
            json.dump(manifest.model_dump(), f, indent=4, sort_keys=True)
        return path

    def register(self, record: MetricsRecord, timestamp: Optional[str] = None) -> None:
        """Add or replace a run in the registry"""
        index: Dict[str, Any] = {}

        if self.index_file.exists():
            with open(self.index_file, "r") as f:
                index = json.load(f)

        timestamp = timestamp or datetime.now().isoformat()
        index["latest_run"] = record.run_id
        index["last_updated"] = timestamp

        if "runs" not in index:
            index["runs"] = []

        run_info = {
            "run_id": record.run_id,
            "timestamp": timestamp,
            "mode": record.mode,
            "subject": record.subject,
            "seed": record.seed,
            "status": record.status,
            "acc_overall": None if record.status != "ok" else record.acc_overall,
        }

        # Replace an earlier entry for the same run
        index["runs"] = [r for r in index["runs"] if r["run_id"] != record.run_id]
        index["runs"].append(run_info)
        index["runs"].sort(key=lambda x: x["timestamp"], reverse=True)

        with open(self.index_file, "w") as f:
            json.dump(index, f, indent=4)

    def load_run(self, run_id: str):
        """Load the checkpoint and manifest of a run"""
        paths = self.paths(run_id)
        if not paths.checkpoint.exists():
            raise FileNotFoundError(f"No checkpoint for run {run_id} in {paths.directory}")

        bundle, metadata = load_checkpoint(paths.checkpoint)
        manifest = {}
        if paths.manifest.exists():
            with open(paths.manifest, "r") as f:
                manifest = json.load(f)

        return bundle, metadata, manifest

    def get_run_info(self, run_id: str) -> Dict[str, Any]:
        path = self.paths(run_id).manifest
        if not path.exists():
            raise FileNotFoundError(f"Manifest not found for run {run_id}")

        with open(path, "r") as f:
            return json.load(f)

    def list_runs(self) -> List[Dict[str, Any]]:
        """List all registered runs"""
        if not self.index_file.exists():
            return []

        with open(self.index_file, "r") as f:
            return json.load(f).get("runs", [])
