"""Learning curves from line-delimited metrics logs."""

import logging
from pathlib import Path
from typing import Optional

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import pandas as pd  # noqa: E402

from ssl_cr.errors import ConfigurationError  # noqa: E402
from ssl_cr.utils import MetricsLog  # noqa: E402

logger = logging.getLogger(__name__)


def load_metrics(path: Path) -> pd.DataFrame:
    """Metrics log as a DataFrame with columns run_id, epoch, split, metric, value."""
    records = MetricsLog.read(path)
    if not records:
        raise ConfigurationError(f"Metrics log {path} is empty")
    return pd.DataFrame.from_records(records)


def plot_learning_curves(path: Path, out: Optional[Path] = None) -> Path:
    """One panel per metric, one line per split."""
    frame = load_metrics(path)
    metrics = sorted(frame["metric"].unique())
    fig, axes = plt.subplots(1, len(metrics), figsize=(4 * len(metrics), 3), squeeze=False)
    for ax, metric in zip(axes[0], metrics):
        subset = frame[frame["metric"] == metric]
        for split, group in subset.groupby("split"):
            ax.plot(group["epoch"], group["value"], label=split)
        ax.set_title(metric)
        ax.set_xlabel("epoch")
        ax.legend()
    out = Path(out) if out else Path(path).with_suffix(".png")
    fig.tight_layout()
    fig.savefig(out, dpi=100)
    plt.close(fig)
    logger.info("[plot] wrote %s", out)
    return out
