import logging
from pathlib import Path
from typing import Dict, Union

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402
import pandas as pd  # noqa: E402
import seaborn as sns  # noqa: E402

from src.data.dataset import Dataset, LabelIndex  # noqa: E402
from src.data.factor_faces import pose_angles  # noqa: E402
from src.models.components import ModelBundle, pseudo_label  # noqa: E402
from src.models.tensor import no_tape  # noqa: E402
from src.steps.losses import sample_recon_targets  # noqa: E402
from src.steps.preprocessing import sample_batch  # noqa: E402
from src.utils.config import AblationMode  # noqa: E402
from src.utils.seeding import make_rng  # noqa: E402

logger = logging.getLogger(__name__)

INSPECTION_ROWS = ("x_s", "x_t", "fake_source", "x_s_j", "fake_target", "x_t_k")
ROW_TITLES = {
    "x_s": "source",
    "x_t": "target",
    "fake_source": "G_s(f_s^p, f_t^e)",
    "x_s_j": "paired source",
    "fake_target": "G_t(f_t^p, f_s^e)",
    "x_t_k": "paired target",
}


def inspection_batch(
    bundle: ModelBundle, source: Dataset, target: Dataset, seed: int, n: int = 8
) -> Dict[str, np.ndarray]:
    """Real inputs, both generator outputs and their paired real targets, as (n, H, W) arrays.

    Only pairs whose label lookups succeeded are kept.
    """
    rng = make_rng(seed, "inspect")
    side = bundle.arch.image_side
    source_batch = sample_batch(source, n, rng)
    target_batch = sample_batch(target, n, rng)

    pool = pseudo_label(bundle, target.images_flat, encoder="E_t")
    target_index = LabelIndex(target.images_flat, pool.poses, pool.expressions)
    pseudo = pseudo_label(bundle, target_batch.images, encoder="E_t")
    targets = sample_recon_targets(source_batch, target_batch, pseudo, source.index, target_index, rng)

    with no_tape():
        fs = bundle.E_s.encode(source_batch.x)
        ft = bundle.E_t.encode(target_batch.x)
        fake_source = bundle.G_s(fs.f_p, ft.f_e).data
        fake_target = bundle.G_t(ft.f_p, fs.f_e).data

    keep = targets.mask
    rows = {
        "x_s": source_batch.images,
        "x_t": target_batch.images,
        "fake_source": fake_source,
        "x_s_j": targets.x_s_j,
        "fake_target": fake_target,
        "x_t_k": targets.x_t_k,
    }
    return {name: images[keep].reshape(-1, side, side) for name, images in rows.items()}


def plot_generator_grid(rows: Dict[str, np.ndarray], path: Union[str, Path]) -> Path:
    path = Path(path)
    n_rows = len(INSPECTION_ROWS)
    n_cols = max(1, max(len(images) for images in rows.values()))
    fig, axes = plt.subplots(n_rows, n_cols, figsize=(1.4 * n_cols + 1.5, 1.4 * n_rows), squeeze=False)
    for r, name in enumerate(INSPECTION_ROWS):
        images = rows.get(name, np.empty((0, 1, 1)))
        for c in range(n_cols):
            ax = axes[r][c]
            ax.set_xticks([])
            ax.set_yticks([])
            if c < len(images):
                ax.imshow(images[c], cmap="gray", vmin=0.0, vmax=1.0)
            else:
                ax.axis("off")
        axes[r][0].set_ylabel(ROW_TITLES[name], fontsize=7)
    plt.tight_layout()
    path.parent.mkdir(parents=True, exist_ok=True)
    plt.savefig(path, dpi=150, bbox_inches="tight")
    plt.close(fig)
    logger.info(f"✅ Generator grid saved to {path}")
    return path


def plot_ablation_heatmap(summary: pd.DataFrame, n_poses: int, path: Union[str, Path]) -> Path:
    """Mode × pose mean accuracy heatmap."""
    path = Path(path)
    order = [m.value for m in AblationMode if m.value in set(summary["mode"])]
    columns = {f"acc_pose_{p}_mean": f"{angle:+.0f}°" for p, angle in enumerate(pose_angles(n_poses))}
    columns["acc_overall_mean"] = "Avg"
    grid = summary.set_index("mode").loc[order, list(columns)].rename(columns=columns)

    sns.set_style("whitegrid")
    fig, ax = plt.subplots(figsize=(1.2 * len(columns) + 2, 0.6 * len(order) + 1.5))
    sns.heatmap(100 * grid, annot=True, fmt=".1f", cmap="RdYlGn", ax=ax, cbar_kws={"label": "accuracy (%)"})
    ax.set_xlabel("pose")
    ax.set_ylabel("mode")
    plt.tight_layout()
    path.parent.mkdir(parents=True, exist_ok=True)
    plt.savefig(path, dpi=150, bbox_inches="tight")
    plt.close(fig)
    logger.info(f"✅ Ablation heatmap saved to {path}")
    return path
