"""Command-line surface: ``python -m src <command> ...``.

Exit codes: 0 success, 1 experiment-level failure, 2 input or configuration
error, 3 numerical abort.
"""
import argparse
import hashlib
import logging
import sys
from pathlib import Path
from typing import Callable, List, Optional, Sequence, Tuple

from src.data.dataset import Dataset
from src.data.factor_faces import check_factor_recoverability, generate_dataset
from src.data.storage import BLOB_NAME, dataset_hash, load_dataset, save_dataset
from src.models.predictor import ExpressionPredictor
from src.steps.evaluation import (
    PROBE_KINDS,
    REFERENCE_PROBES,
    disentanglement_report,
    domain_confusion_report,
    export_embeddings,
    write_probes,
)
from src.steps.gradcheck import gradient_check
from src.steps.preprocessing import split_loso
from src.utils.config import AblationMode, load_factor_spec, load_train_config
from src.utils.exceptions import (
    ConfigError,
    DimensionError,
    FormatError,
    LabelError,
    NumericalError,
    TrainingAborted,
    UsageError,
)
from src.utils.seeding import derive_seed

logger = logging.getLogger(__name__)

EXIT_OK, EXIT_FAILED, EXIT_INPUT, EXIT_NUMERICAL = 0, 1, 2, 3
INPUT_ERRORS = (ConfigError, FormatError, FileNotFoundError, UsageError, LabelError, DimensionError)


def _int_list(text: str, what: str) -> List[int]:
    try:
        return [int(part) for part in text.split(",") if part.strip()]
    except ValueError as e:
        raise ConfigError(f"{what}: expected a comma-separated list of integers, got {text!r}") from e


def _mode_list(text: str) -> List[AblationMode]:
    modes = []
    for part in (p.strip() for p in text.split(",")):
        if not part:
            continue
        try:
            modes.append(AblationMode(part))
        except ValueError as e:
            raise ConfigError(f"modes: unknown mode {part!r}; expected one of {[m.value for m in AblationMode]}") from e
    return modes


def _checkpoint_split(predictor: ExpressionPredictor, dataset: Dataset, args) -> Tuple[Dataset, Dataset, Dataset, int, int]:
    subject = args.subject if args.subject is not None else predictor.metadata.get("subject")
    seed = args.seed if args.seed is not None else predictor.metadata.get("seed", 0)
    if subject is None:
        raise UsageError("checkpoint metadata names no held-out subject; pass --subject")
    source, target_train, target_test = split_loso(dataset, int(subject), int(seed))
    return source, target_train, target_test, int(subject), int(seed)


def cmd_generate(args) -> int:
    spec = load_factor_spec(args.spec)
    if args.seed is not None:
        spec = spec.model_copy(update={"seed": args.seed})
    dataset = generate_dataset(spec)
    save_dataset(dataset, args.out)
    blob_hash = hashlib.sha256((Path(args.out) / BLOB_NAME).read_bytes()).hexdigest()

    print(f"📂 Generated {len(dataset)} samples into {args.out}")
    print(f"   ├─ {spec.n_subjects} subjects × {spec.n_expressions} expressions × {spec.n_poses} poses × {spec.samples_per_cell}")
    print(f"   └─ blob sha256: {blob_hash}")
    if not args.skip_health_check:
        health = check_factor_recoverability(dataset, seed=spec.seed)
        marker = "✅" if min(health.values()) > 0.8 else "⚠️"
        print(f"{marker} Raw-pixel probes: expression={health['expression']:.3f}, pose={health['pose']:.3f}")
    return EXIT_OK


def cmd_train(args) -> int:
    from src.pipelines.orchestrator import run_single

    config = load_train_config(args.config)
    dataset = load_dataset(args.data)
    record = run_single(
        config,
        dataset,
        args.subject,
        args.out,
        dataset_hash=dataset_hash(args.data),
        resume=args.resume,
        probes=not args.no_probes,
    )
    return EXIT_OK if record.status == "ok" else EXIT_FAILED


def cmd_ablate(args) -> int:
    from src.monitoring.plots import plot_ablation_heatmap
    from src.pipelines.orchestrator import run_ablation_grid

    config = load_train_config(args.config)
    dataset = load_dataset(args.data)
    result = run_ablation_grid(
        config,
        dataset,
        _mode_list(args.modes),
        _int_list(args.subjects, "subjects"),
        _int_list(args.seeds, "seeds"),
        args.out,
        jobs=args.jobs,
        dataset_hash=dataset_hash(args.data),
        probes=not args.no_probes,
    )
    if args.plot and not result.summary.empty:
        plot_ablation_heatmap(result.summary, dataset.spec.n_poses, Path(args.out) / "ablation_heatmap.png")
    return EXIT_OK if result.n_succeeded > 0 else EXIT_FAILED


def cmd_probe(args) -> int:
    predictor = ExpressionPredictor(args.checkpoint)
    dataset = load_dataset(args.data)
    source, _, target_test, subject, seed = _checkpoint_split(predictor, dataset, args)

    from src.pipelines.orchestrator import held_out_view

    report = predictor.evaluate(target_test)
    print(f"📈 Target test accuracy (R∘{predictor.encoder}): {report.overall:.4f}")

    probe_seed = derive_seed(seed, "probes", subject)
    on_e, on_p = domain_confusion_report(
        predictor.bundle,
        source,
        held_out_view(dataset, subject),
        probe_seed,
        target_encoder=predictor.encoder,
        steps=args.steps,
    )
    probes = {on_e.kind: on_e, on_p.kind: on_p}
    probes.update(
        disentanglement_report(predictor.bundle, source, probe_seed, reference=args.reference_probes, steps=args.steps)
    )
    kinds = PROBE_KINDS + (REFERENCE_PROBES if args.reference_probes else ())
    results = [probes[kind] for kind in kinds]
    path = write_probes(results, Path(args.out) / "probes.csv")

    for r in results:
        print(f"   ├─ {r.kind}: test={r.test_accuracy:.3f} train={r.train_accuracy:.3f} (chance {r.chance:.3f})")
    print(f"✅ Probe results saved to {path}")
    return EXIT_OK


def cmd_export(args) -> int:
    from src.monitoring.drift import run_drift_report
    from src.pipelines.orchestrator import held_out_view

    predictor = ExpressionPredictor(args.checkpoint)
    dataset = load_dataset(args.data)
    source, _, _, subject, seed = _checkpoint_split(predictor, dataset, args)

    out = Path(args.out)
    path = export_embeddings(
        predictor.bundle,
        [source, held_out_view(dataset, subject)],
        out / "embeddings.csv",
        encoders={"target": predictor.encoder},
        source_ratio=args.source_ratio,
        seed=seed,
    )
    print(f"✅ Embeddings saved to {path}")
    if args.drift_report:
        import pandas as pd

        report = run_drift_report(pd.read_csv(path), out / "drift_report.html")
        if report is not None:
            print(f"📊 Drift report saved to {report}")
    return EXIT_OK


def cmd_inspect(args) -> int:
    from src.monitoring.plots import inspection_batch, plot_generator_grid

    predictor = ExpressionPredictor(args.checkpoint)
    dataset = load_dataset(args.data)
    source, target_train, _, _, seed = _checkpoint_split(predictor, dataset, args)
    rows = inspection_batch(predictor.bundle, source, target_train, seed, n=args.n)
    path = plot_generator_grid(rows, Path(args.out) / "generator_grid.png")
    print(f"🖼️ Generator grid with {len(rows['x_s'])} valid pairs saved to {path}")
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    report = gradient_check(seed=args.seed)
    print("🔎 Finite-difference gradient check (max relative error):")
    for name, error in report.errors.items():
        marker = "✅" if error < report.tolerance else "❌"
        print(f"   {marker} {name}: {error:.3e}")
    return EXIT_OK if report.passed else EXIT_FAILED


def _add_checkpoint_args(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--checkpoint", required=True, help="checkpoint file written by `train`")
    parser.add_argument("--data", required=True, help="dataset directory written by `generate`")
    parser.add_argument("--out", required=True, help="output directory")
    parser.add_argument("--subject", type=int, default=None, help="held-out subject (default: from checkpoint)")
    parser.add_argument("--seed", type=int, default=None, help="split seed (default: from checkpoint)")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="python -m src", description="Pose-aware adversarial domain adaptation on synthetic faces")
    parser.add_argument("--verbose", action="store_true", help="debug logging")
    commands = parser.add_subparsers(dest="command", required=True)

    p = commands.add_parser("generate", help="render a factor-faces dataset")
    p.add_argument("--spec", default=None, help="flat factor spec file (default: built-in spec)")
    p.add_argument("--seed", type=int, default=None, help="master seed (overrides the factor spec seed)")
    p.add_argument("--out", required=True)
    p.add_argument("--skip-health-check", action="store_true", help="skip the raw-pixel recoverability probes")
    p.set_defaults(handler=cmd_generate)

    p = commands.add_parser("train", help="train and evaluate one leave-one-subject-out run")
    p.add_argument("--config", default=None, help="flat training config file")
    p.add_argument("--data", required=True)
    p.add_argument("--subject", type=int, required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--resume", action="store_true", help="continue from the run's saved train state")
    p.add_argument("--no-probes", action="store_true")
    p.set_defaults(handler=cmd_train)

    p = commands.add_parser("ablate", help="run the mode × subject × seed grid")
    p.add_argument("--config", default=None)
    p.add_argument("--data", required=True)
    p.add_argument("--modes", default=",".join(m.value for m in AblationMode))
    p.add_argument("--subjects", required=True, help="comma-separated subject ids")
    p.add_argument("--seeds", default="0", help="comma-separated seeds")
    p.add_argument("--out", required=True)
    p.add_argument("--jobs", type=int, default=1)
    p.add_argument("--plot", action="store_true", help="also save a mode × pose heatmap")
    p.add_argument("--no-probes", action="store_true")
    p.set_defaults(handler=cmd_ablate)

    p = commands.add_parser("probe", help="domain and disentanglement probes for a checkpoint")
    _add_checkpoint_args(p)
    p.add_argument("--steps", type=int, default=500)
    p.add_argument("--reference-probes", action="store_true", help="add expr_on_f_e and pose_on_f_p rows")
    p.set_defaults(handler=cmd_probe)

    p = commands.add_parser("export", help="export f_e / f_p embeddings as CSV")
    _add_checkpoint_args(p)
    p.add_argument("--source-ratio", type=float, default=None, help="keep r source rows per target row")
    p.add_argument("--drift-report", action="store_true", help="also write an HTML drift report")
    p.set_defaults(handler=cmd_export)

    p = commands.add_parser("inspect", help="save a grid of generator outputs")
    _add_checkpoint_args(p)
    p.add_argument("--n", type=int, default=8, help="pairs to draw")
    p.set_defaults(handler=cmd_inspect)

    p = commands.add_parser("gradcheck", help="finite-difference check of every loss")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(handler=cmd_gradcheck)
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO)
    handler: Callable[[argparse.Namespace], int] = args.handler
    try:
        return handler(args)
    except INPUT_ERRORS as e:
        logger.error(f"❌ {type(e).__name__}: {e}")
        return EXIT_INPUT
    except (TrainingAborted, NumericalError) as e:
        logger.error(f"❌ Numerical abort: {e}")
        return EXIT_NUMERICAL


if __name__ == "__main__":
    sys.exit(main())
