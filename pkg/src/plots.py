from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

from src.sim import TimeSeries  # noqa: E402


def plot_timeseries(ts: TimeSeries, channels: list[str], path: Path, title: str = ""):
    """Line plot of selected CSV columns against time, saved as SVG."""
    frame = ts.to_frame()
    missing = [c for c in channels if c not in frame.columns]
    if missing:
        raise ValueError(f"Unknown channels {missing}")

    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig, ax = plt.subplots(figsize=(8, 4.5))
    for channel in channels:
        ax.plot(frame["t"], frame[channel], linewidth=1.2, label=channel)
    ax.set_xlabel("Time [s]")
    ax.set_ylabel("Frequency deviation [Hz]" if all(c.startswith("freq_") for c in channels) else "Deviation")
    if title:
        ax.set_title(title)
    ax.grid(alpha=0.3)
    ax.legend(loc="best", fontsize="small")
    fig.savefig(path, format="svg", bbox_inches="tight")
    plt.close(fig)
    return path
