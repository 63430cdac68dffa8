import logging
from pathlib import Path
from typing import Optional, Union

import pandas as pd

logger = logging.getLogger(__name__)

try:
    from evidently.metric_preset import DataDriftPreset
    from evidently.report import Report

    _LEGACY_API = True
except ImportError:
    try:
        from evidently import Report
        from evidently.presets import DataDriftPreset

        _LEGACY_API = False
    except ImportError:
        Report = DataDriftPreset = None
        _LEGACY_API = False


def embedding_columns(embeddings: pd.DataFrame, prefix: str = "f_e_") -> list:
    return [c for c in embeddings.columns if c.startswith(prefix)]


def run_drift_report(
    embeddings: pd.DataFrame, path: Union[str, Path], prefix: str = "f_e_"
) -> Optional[Path]:
    """HTML drift report of target against source embeddings, column by column.

    Returns None when evidently is not importable.
    """
    if Report is None:
        logger.warning("⚠️ evidently is not installed; drift report skipped")
        return None

    columns = embedding_columns(embeddings, prefix)
    reference = embeddings.loc[embeddings["domain"] == "source", columns].reset_index(drop=True)
    current = embeddings.loc[embeddings["domain"] == "target", columns].reset_index(drop=True)
    if reference.empty or current.empty:
        logger.warning("⚠️ Drift report needs both source and target rows; skipped")
        return None

    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    report = Report(metrics=[DataDriftPreset()])
    if _LEGACY_API:
        report.run(reference_data=reference, current_data=current)
        report.save_html(str(path))
    else:
        report.run(current, reference).save_html(str(path))

    logger.info(f"📊 Drift report for {len(columns)} feature columns saved to {path}")
    return path
