from pathlib import Path

import pandas as pd
import pytest

from src.cli import EXIT_FAILED, EXIT_INPUT, EXIT_NUMERICAL, EXIT_OK, main
from src.data.factor_faces import generate_dataset
from src.data.storage import load_dataset, save_dataset
from src.utils.config import write_flat_config
from src.utils.exceptions import TrainingAborted

from tests.conftest import TINY_SPEC

SMOKE = str(Path(__file__).resolve().parent.parent / "configs" / "smoke.cfg")


@pytest.fixture(scope="module")
def workspace(tmp_path_factory, tiny_dataset):
    root = tmp_path_factory.mktemp("cli")
    save_dataset(tiny_dataset, root / "faces")
    code = main(["train", "--config", SMOKE, "--data", str(root / "faces"), "--subject", "0", "--out", str(root / "runs")])
    assert code == EXIT_OK
    return root


def checkpoint_args(root, command, *extra):
    return [
        command,
        "--checkpoint",
        str(root / "runs" / "full-s0-seed0" / "checkpoint.bin"),
        "--data",
        str(root / "faces"),
        "--out",
        str(root / command),
        *extra,
    ]


def test_generate(tmp_path, capsys):
    spec_file = tmp_path / "spec.cfg"
    write_flat_config(TINY_SPEC, spec_file)
    code = main(["generate", "--spec", str(spec_file), "--seed", "4", "--out", str(tmp_path / "faces"), "--skip-health-check"])
    assert code == EXIT_OK
    assert "blob sha256" in capsys.readouterr().out
    assert load_dataset(tmp_path / "faces") == generate_dataset(TINY_SPEC, seed=4)


def test_train_outputs(workspace):
    run_dir = workspace / "runs" / "full-s0-seed0"
    for name in ("checkpoint.bin", "metrics.csv", "history.csv", "manifest.json"):
        assert (run_dir / name).exists()
    assert len(pd.read_csv(run_dir / "history.csv")) == 1


def test_probe(workspace):
    assert main(checkpoint_args(workspace, "probe", "--steps", "10")) == EXIT_OK
    probes = pd.read_csv(workspace / "probe" / "probes.csv")
    assert list(probes["kind"]) == ["domain_on_f_e", "domain_on_f_p", "pose_on_f_e", "expr_on_f_p"]


def test_export(workspace):
    assert main(checkpoint_args(workspace, "export")) == EXIT_OK
    table = pd.read_csv(workspace / "export" / "embeddings.csv")
    assert len(table) == TINY_SPEC.n_samples
    assert [c for c in table.columns if c.startswith("f_e_")] == [f"f_e_{i}" for i in range(6)]


def test_inspect(workspace):
    assert main(checkpoint_args(workspace, "inspect", "--n", "4")) == EXIT_OK
    assert (workspace / "inspect" / "generator_grid.png").exists()


def test_gradcheck():
    assert main(["gradcheck"]) == EXIT_OK


class TestExitCodes:
    def test_missing_dataset(self, tmp_path):
        code = main(["train", "--data", str(tmp_path / "none"), "--subject", "0", "--out", str(tmp_path / "runs")])
        assert code == EXIT_INPUT

    def test_unknown_config_key(self, workspace, tmp_path):
        bad = tmp_path / "bad.cfg"
        bad.write_text("epochz = 3\n", encoding="utf-8")
        code = main(["train", "--config", str(bad), "--data", str(workspace / "faces"), "--subject", "0", "--out", str(tmp_path)])
        assert code == EXIT_INPUT

    def test_unknown_mode(self, workspace, tmp_path):
        code = main(["ablate", "--data", str(workspace / "faces"), "--modes", "R,all", "--subjects", "0", "--out", str(tmp_path)])
        assert code == EXIT_INPUT

    def test_every_cell_failed(self, workspace, tmp_path):
        code = main(
            ["ablate", "--config", SMOKE, "--data", str(workspace / "faces"), "--modes", "R", "--subjects", "9", "--no-probes", "--out", str(tmp_path)]
        )
        assert code == EXIT_FAILED

    def test_numerical_abort(self, workspace, tmp_path, monkeypatch):
        def explode(*args, **kwargs):
            raise TrainingAborted("l_clc", 0, 1, "non-finite loss")

        monkeypatch.setattr("src.pipelines.orchestrator.train", explode)
        code = main(["train", "--config", SMOKE, "--data", str(workspace / "faces"), "--subject", "0", "--out", str(tmp_path)])
        assert code == EXIT_NUMERICAL

    def test_unknown_command(self):
        with pytest.raises(SystemExit) as info:
            main(["fly"])
        assert info.value.code == 2
