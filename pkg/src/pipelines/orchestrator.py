import logging
from dataclasses import dataclass
from pathlib import Path
from typing import List, Optional, Sequence, Union

import numpy as np
import pandas as pd
from joblib import Parallel, delayed

from src import __version__
from src.data.dataset import Dataset
from src.data.factor_faces import pose_angles
from src.steps.evaluation import (
    FLOAT_FORMAT,
    MetricsRecord,
    disentanglement_report,
    domain_confusion_report,
    evaluate_accuracy,
    metrics_frame,
)
from src.steps.losses import LossBreakdown
from src.steps.preprocessing import split_loso
from src.steps.training import TrainState, classifier_encoder, train
from src.utils.artifact_manager import ArtifactManager, RunManifest
from src.utils.config import AblationMode, TrainConfig, to_flat
from src.utils.exceptions import ConfigError
from src.utils.seeding import derive_seed

logger = logging.getLogger(__name__)


def make_run_id(mode: AblationMode, subject: int, seed: int) -> str:
    return f"{AblationMode(mode).value}-s{subject}-seed{seed}"


def held_out_view(dataset: Dataset, subject: int) -> Dataset:
    """Every sample of the held-out subject, tagged as target."""
    labeled = dataset.reveal()
    return labeled.subset(np.flatnonzero(labeled.subjects == subject), domain="target")


def run_single(
    config: TrainConfig,
    dataset: Dataset,
    subject: int,
    out_dir: Union[str, Path],
    split_seed: Optional[int] = None,
    run_id: Optional[str] = None,
    dataset_hash: str = "",
    resume: bool = False,
    probes: bool = True,
    register: bool = True,
    verbose: bool = True,
) -> MetricsRecord:
    """Split, train, score, probe and persist one run."""
    split_seed = config.seed if split_seed is None else split_seed
    mode = AblationMode(config.mode)
    run_id = run_id or make_run_id(mode, subject, split_seed)
    manager = ArtifactManager(out_dir)
    say = print if verbose else logger.debug

    say(f"🚀 Starting run {run_id}\n")

    # Step 1: Split
    say("📊 Step 1: Leave-one-subject-out split...")
    source, target_train, target_test = split_loso(dataset, subject, split_seed)
    say(f"   Source: {len(source)}, target train: {len(target_train)}, target test: {len(target_test)}")

    # Step 2: Train
    say(f"\n🤖 Step 2: Training in mode {mode.value} for {config.epochs} epochs...")
    state = None
    if resume and manager.has_state(run_id):
        state = manager.load_state(run_id, source, target_train)
        saved, given = to_flat(state.config), to_flat(config)
        differing = sorted(key for key in given if saved.get(key) != given[key])
        if differing:
            raise ConfigError(
                f"{run_id}: saved state was trained with different settings for {', '.join(differing)}"
            )
        say(f"   Resuming at epoch {state.epoch}")
    holder = {}

    def checkpoint_state(current: TrainState) -> None:
        holder["state"] = current
        manager.save_state(run_id, current)

    bundle, history = train(config, source, target_train, on_epoch_end=checkpoint_state, state=state)
    final_state = holder.get("state", state)

    # Step 3: Evaluate
    say("\n📈 Step 3: Evaluating on the target test split...")
    encoder = classifier_encoder(mode)
    report = evaluate_accuracy(bundle, target_test, encoder)
    say(f"   Accuracy (R∘{encoder}): {report.overall:.4f}")
    say("   Per pose: " + ", ".join(f"{a:.3f}" for a in report.per_pose))

    record = MetricsRecord(
        run_id=run_id,
        mode=mode.value,
        subject=subject,
        seed=split_seed,
        acc_overall=report.overall,
        acc_pose=report.per_pose,
        acc_expression=report.per_expression,
        confusion=report.confusion,
        final_losses=LossBreakdown(**{k: v for k, v in history[-1].items() if k in LossBreakdown.model_fields}),
        fallback_rate=float(np.mean([row["fallback_rate"] for row in history])),
        invalid_rate=float(np.mean([row["invalid_rate"] for row in history])),
        clc_probe_init=final_state.clc_probe_init if final_state is not None else float("nan"),
        clc_probe_final=history[-1]["clc_probe"],
    )

    # Step 4: Probes
    if probes:
        say("\n🔬 Step 4: Training linear probes on frozen features...")
        probe_seed = derive_seed(split_seed, "probes", subject)
        on_e, on_p = domain_confusion_report(
            bundle,
            source,
            held_out_view(dataset, subject),
            probe_seed,
            target_encoder=encoder,
            steps=config.probe_steps,
            lr=config.probe_lr,
        )
        record.probes = {on_e.kind: on_e, on_p.kind: on_p}
        record.probes.update(
            disentanglement_report(bundle, source, probe_seed, steps=config.probe_steps, lr=config.probe_lr)
        )

    # Step 5: Persist
    manifest = RunManifest(
        run_id=run_id,
        mode=mode.value,
        subject=subject,
        seed=split_seed,
        train_config=to_flat(config),
        factor_spec=to_flat(dataset.spec),
        dataset_hash=dataset_hash,
    )
    metadata = {
        "run_id": run_id,
        "mode": mode.value,
        "subject": subject,
        "seed": split_seed,
        "classifier_encoder": encoder,
        "code_version": __version__,
    }
    paths = manager.save_run(record, bundle, history, manifest, metadata, register=register)
    say(f"\n🎯 Run {run_id} completed")
    say(f"   └─ Artifacts: {paths.directory}")
    return record


def _run_cell(
    base_config: TrainConfig,
    dataset: Dataset,
    mode: AblationMode,
    subject: int,
    seed_index: int,
    seed: int,
    out_dir: Path,
    dataset_hash: str,
    probes: bool,
) -> MetricsRecord:
    run_id = make_run_id(mode, subject, seed)
    config = base_config.model_copy(
        update={"mode": mode, "seed": derive_seed(seed, mode.value, subject, seed_index)}
    )
    try:
        return run_single(
            config,
            dataset,
            subject,
            out_dir,
            split_seed=seed,
            run_id=run_id,
            dataset_hash=dataset_hash,
            probes=probes,
            register=False,
            verbose=False,
        )
    except Exception as e:
        logger.error(f"❌ Cell {run_id} failed: {type(e).__name__}: {e}")
        return MetricsRecord(
            run_id=run_id,
            mode=mode.value,
            subject=subject,
            seed=seed,
            status="failed",
            error=f"{type(e).__name__}: {e}",
        )


@dataclass
class AblationResult:
    records: List[MetricsRecord]
    metrics: pd.DataFrame
    summary: pd.DataFrame
    table: str

    @property
    def n_succeeded(self) -> int:
        return sum(record.status == "ok" for record in self.records)


def aggregate(metrics: pd.DataFrame, by: Sequence[str] = ("mode",)) -> pd.DataFrame:
    """Mean and standard deviation of every numeric column over successful cells."""
    ok = metrics[metrics["status"] == "ok"]
    numeric = [
        c for c in ok.columns if c not in ("subject", "seed") and c not in by and pd.api.types.is_numeric_dtype(ok[c])
    ]
    grouped = ok.groupby(list(by), sort=False)[numeric]
    means = grouped.mean().add_suffix("_mean")
    stds = grouped.std(ddof=0).add_suffix("_std")
    counts = grouped.size().rename("n_cells")
    return pd.concat([counts, means, stds], axis=1).reset_index()


def format_table(summary: pd.DataFrame, n_poses: int) -> str:
    """Accuracy per pose and the average, one row per mode, in percent."""
    by_mode = summary.set_index("mode")
    modes = [mode.value for mode in AblationMode if mode.value in by_mode.index]
    columns = {f"acc_pose_{p}_mean": f"{angle:+.0f}°" for p, angle in enumerate(pose_angles(n_poses))}
    columns["acc_overall_mean"] = "Avg"
    table = (100.0 * by_mode.loc[modes, list(columns)]).rename(columns=columns)
    table = table.rename_axis("Method").reset_index()
    return table.to_string(index=False, float_format=lambda v: f"{v:.1f}") + "\n"


def run_ablation_grid(
    base_config: TrainConfig,
    dataset: Dataset,
    modes: Sequence[AblationMode],
    subjects: Sequence[int],
    seeds: Sequence[int],
    out_dir: Union[str, Path],
    jobs: int = 1,
    dataset_hash: str = "",
    probes: bool = True,
) -> AblationResult:
    """Train and score every (mode, subject, seed) cell; failed cells are recorded and skipped."""
    out_dir = Path(out_dir)
    manager = ArtifactManager(out_dir)
    cells = [
        (AblationMode(mode), int(subject), seed_index, int(seed))
        for mode in modes
        for subject in subjects
        for seed_index, seed in enumerate(seeds)
    ]
    print(f"🚀 Ablation grid: {len(modes)} modes × {len(subjects)} subjects × {len(seeds)} seeds = {len(cells)} runs")

    records = Parallel(n_jobs=jobs)(
        delayed(_run_cell)(base_config, dataset, mode, subject, seed_index, seed, out_dir, dataset_hash, probes)
        for mode, subject, seed_index, seed in cells
    )
    for record in records:
        manager.register(record)
        marker = "✅" if record.status == "ok" else "❌"
        accuracy = f"{record.acc_overall:.4f}" if record.status == "ok" else record.error
        print(f"   {marker} {record.run_id}: {accuracy}")

    spec = dataset.spec
    metrics = metrics_frame(records, spec.n_poses, spec.n_expressions)
    summary = aggregate(metrics, by=("mode",)) if any(r.status == "ok" for r in records) else pd.DataFrame()
    table = format_table(summary, spec.n_poses) if not summary.empty else "no successful cells\n"

    metrics.to_csv(out_dir / "ablation_metrics.csv", index=False, float_format=FLOAT_FORMAT, lineterminator="\n")
    if not summary.empty:
        summary.to_csv(out_dir / "ablation_summary.csv", index=False, float_format=FLOAT_FORMAT, lineterminator="\n")
        aggregate(metrics, by=("mode", "subject")).to_csv(
            out_dir / "ablation_by_subject.csv", index=False, float_format=FLOAT_FORMAT, lineterminator="\n"
        )
    (out_dir / "ablation_table.txt").write_text(table, encoding="utf-8")

    print("\n" + table)
    result = AblationResult(records=list(records), metrics=metrics, summary=summary, table=table)
    print(f"🎯 Grid completed: {result.n_succeeded}/{len(records)} cells succeeded")
    return result
