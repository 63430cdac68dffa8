import json

import numpy as np
import pandas as pd
import pytest

from src.steps.evaluation import MetricsRecord
from src.utils.artifact_manager import ArtifactManager, RunManifest
from src.utils.config import FactorSpec, TrainConfig, to_flat

from tests.conftest import TINY_ARCH


def record(run_id="full-s0-seed0", status="ok", acc=0.5):
    return MetricsRecord(run_id=run_id, mode="full", subject=0, seed=0, status=status, acc_overall=acc)


def manifest(run_id="full-s0-seed0"):
    return RunManifest(
        run_id=run_id,
        mode="full",
        subject=0,
        seed=0,
        train_config=to_flat(TrainConfig()),
        factor_spec=to_flat(FactorSpec()),
        dataset_hash="abc",
    )


def test_save_and_load_run(tmp_path, tiny_bundle):
    manager = ArtifactManager(tmp_path / "runs")
    history = [{"epoch": 0, "l_p": 1.0}, {"epoch": 1, "l_p": 0.5}]
    paths = manager.save_run(record(), tiny_bundle, history, manifest(), {"subject": 0, "classifier_encoder": "E_t"})

    for path in (paths.checkpoint, paths.metrics, paths.history, paths.manifest):
        assert path.exists()
    assert len(pd.read_csv(paths.history)) == 2
    n_columns = len(pd.read_csv(paths.metrics).columns)
    assert "confusion_3_3" in pd.read_csv(paths.metrics).columns and n_columns > 40

    bundle, metadata, stored = manager.load_run("full-s0-seed0")
    assert bundle.params.checksum() == tiny_bundle.params.checksum()
    assert bundle.arch == TINY_ARCH
    assert metadata["classifier_encoder"] == "E_t"
    assert stored["dataset_hash"] == "abc"
    assert stored["outputs"]["checkpoint"] == "checkpoint.bin"
    assert stored["finished_at"]

    assert manager.get_run_info("full-s0-seed0")["mode"] == "full"


def test_registry_replaces_entries(tmp_path):
    manager = ArtifactManager(tmp_path)
    manager.register(record(acc=0.4), "2026-01-01T00:00:00")
    manager.register(record("R-s0-seed0", acc=0.3), "2026-01-02T00:00:00")
    manager.register(record(acc=0.6), "2026-01-03T00:00:00")
    manager.register(record("R-s1-seed0", status="failed", acc=float("nan")), "2026-01-04T00:00:00")

    runs = manager.list_runs()
    assert [r["run_id"] for r in runs] == ["R-s1-seed0", "full-s0-seed0", "R-s0-seed0"]
    assert runs[1]["acc_overall"] == 0.6
    assert runs[0]["acc_overall"] is None
    index = json.loads(manager.index_file.read_text())
    assert index["latest_run"] == "R-s1-seed0"


def test_missing_runs(tmp_path):
    manager = ArtifactManager(tmp_path)
    assert manager.list_runs() == []
    assert not manager.has_state("nothing")
    with pytest.raises(FileNotFoundError):
        manager.load_run("nothing")
    with pytest.raises(FileNotFoundError):
        manager.get_run_info("nothing")


def test_train_state_paths(tmp_path, tiny_config, tiny_split):
    from src.steps.training import Trainer

    source, target_train, _ = tiny_split
    manager = ArtifactManager(tmp_path)
    state = Trainer(tiny_config, source, target_train).run(max_steps=2)
    manager.save_state("run", state)
    assert manager.has_state("run")
    loaded = manager.load_state("run", source, target_train)
    assert loaded.bundle.params.checksum() == state.bundle.params.checksum()
    assert np.array_equal(loaded.target_pseudo.poses, state.target_pseudo.poses)
