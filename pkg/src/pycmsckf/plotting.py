"""
Keyframe uncertainty figure: 3-sigma bound of every keyframe over time with
GPS and recovery events marked.
"""

import logging

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

from pycmsckf.errors import IoError  # noqa: E402

_LOGGER = logging.getLogger(__name__)

_MARKERS = {
    "GPS": dict(color="0.8", linewidth=0.5),
    "RECOVERY": dict(color="tab:red", linestyle="--", linewidth=0.7),
}


def _event_times(steps, event):
    mask = steps["events"].fillna("").str.split("|").apply(lambda tags: event in tags)
    return steps.loc[mask, "timestamp"]


def plot_keyframe_uncertainty(keyframes, steps, path, axis="x", keyframe_ids=None):
    """
    Save the per-keyframe sigma3_<axis> series to path and return the figure
    """
    column = f"sigma3_{axis}"
    if keyframe_ids is None:
        keyframe_ids = sorted(keyframes["keyframe_id"].unique())

    fig, ax = plt.subplots(figsize=(10, 5))
    for event, style in _MARKERS.items():
        for i, t in enumerate(_event_times(steps, event)):
            ax.axvline(t, label=event if i == 0 else None, **style)
    for kf_id in keyframe_ids:
        series = keyframes[keyframes["keyframe_id"] == kf_id]
        ax.plot(series["timestamp"], series[column], label=f"keyframe {kf_id}")

    ax.set_xlabel("time (s)")
    ax.set_ylabel(f"3$\\sigma$ {axis} (m)" if axis in "xyz" else f"3$\\sigma$ {axis} (rad)")
    ax.set_title("Keyframe uncertainty")
    ax.grid(True)
    ax.legend(loc="upper right", fontsize="small", ncol=2)
    fig.tight_layout()
    try:
        fig.savefig(path)
    except OSError as err:
        raise IoError(f"cannot write figure {path}: {err}") from err
    finally:
        plt.close(fig)
    _LOGGER.info(f"keyframe uncertainty figure written to {path}")
    return fig
