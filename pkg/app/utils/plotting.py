"""
Static plots for run outputs
"""
import logging
from pathlib import Path
from typing import Any, Dict, List, Optional

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import pandas as pd  # noqa: E402

logger = logging.getLogger(__name__)


def render_loss_curve(records: List[Dict[str, Any]], path: Path, title: str = "Pretraining loss") -> Optional[Path]:
    """Loss and per-pair MI estimates against step, from metrics-stream records"""
    records = [r for r in records if isinstance(r.get("loss"), (int, float))]
    if not records:
        logger.warning(f"⚠️ No loss records to plot for {path}")
        return None

    frame = pd.DataFrame(records).sort_values("step")
    mi_columns = sorted(c for c in frame.columns if c.startswith("mi/"))

    fig, axes = plt.subplots(1, 2 if mi_columns else 1, figsize=(12 if mi_columns else 6, 4), squeeze=False)
    axes[0][0].plot(frame["step"], frame["loss"], label="loss")
    axes[0][0].set_xlabel("step")
    axes[0][0].set_ylabel("loss")
    axes[0][0].set_title(title)
    if mi_columns:
        for column in mi_columns:
            axes[0][1].plot(frame["step"], frame[column], label=column)
        axes[0][1].set_xlabel("step")
        axes[0][1].set_ylabel("MI estimate")
        axes[0][1].legend(fontsize="small")
    fig.tight_layout()

    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path


def render_heatmap(table: pd.DataFrame, x: str, y: str, path: Path,
                   value: str = "test_acc", title: Optional[str] = None) -> Optional[Path]:
    """
    Grid of `value` over two axes. Single-axis tables render as one row.
    Cells without a value (failed runs) are left blank.
    """
    if table.empty or value not in table.columns:
        logger.warning(f"⚠️ Nothing to plot: table has no '{value}' column")
        return None

    if y == x or y not in table.columns:
        grid = table.groupby(x, sort=True)[value].mean().to_frame().T
        grid.index = [value]
    else:
        grid = table.pivot_table(index=y, columns=x, values=value, aggfunc="mean", dropna=False)

    fig, ax = plt.subplots(figsize=(1.6 * max(len(grid.columns), 2) + 2, 1.2 * max(len(grid.index), 1) + 1.5))
    image = ax.imshow(grid.to_numpy(dtype=float), cmap="viridis", aspect="auto")
    ax.set_xticks(range(len(grid.columns)), [str(c) for c in grid.columns])
    ax.set_yticks(range(len(grid.index)), [str(i) for i in grid.index])
    ax.set_xlabel(x)
    ax.set_ylabel(y if y != x else "")
    for row in range(len(grid.index)):
        for column in range(len(grid.columns)):
            cell = grid.iat[row, column]
            if pd.notna(cell):
                ax.text(column, row, f"{cell:.3f}", ha="center", va="center", color="white", fontsize="small")
    fig.colorbar(image, ax=ax, label=value)
    ax.set_title(title or f"{value} by {x}" + (f" x {y}" if y != x else ""))
    fig.tight_layout()

    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path
