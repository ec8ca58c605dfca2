"""SVG rendering of closed-loop runs against the specification sets."""
import logging
from typing import Optional, Sequence

import matplotlib

matplotlib.use("Agg")
matplotlib.rcParams["svg.hashsalt"] = "reachsynth"
import matplotlib.pyplot as plt  # noqa: E402
from matplotlib.patches import Rectangle  # noqa: E402

import numpy as np  # noqa: E402

from reachsynth.interval_core import EMPTY, Box, box_expand, box_shrink  # noqa: E402
from reachsynth.simulate import Trajectory  # noqa: E402

logger = logging.getLogger(__name__)


def _rect(ax, box, dims, **style):
    if box is EMPTY:
        return
    lo, hi = box.lo[list(dims)], box.hi[list(dims)]
    ax.add_patch(Rectangle((lo[0], lo[1]), hi[0] - lo[0], hi[1] - lo[1], **style))


def plot_run(path,
             X: Box,
             X_a: Sequence[Box],
             X_r: Box,
             margin: np.ndarray,
             concrete: Trajectory,
             abstract: Optional[Trajectory] = None,
             T_s: Optional[float] = None,
             dims=(0, 1),
             heading_dim: Optional[int] = 2,
             labels=("N", "E"),
             title: str = ""):
    """
    Plane view of a run: X and X shrunk by `margin`, avoid sets and their
    expansion, the target and its shrunk version, both trajectories and a
    heading arrow per sampling instant.
    """
    margin = np.asarray(margin, dtype=float)
    fig, ax = plt.subplots(figsize=(7, 5))
    _rect(ax, X, dims, fill=False, edgecolor="black", linewidth=2.0)
    _rect(ax, box_shrink(X, margin), dims, fill=False, edgecolor="black", linewidth=0.8)
    _rect(ax, X_r, dims, facecolor="lightblue", edgecolor="none")
    _rect(ax, box_shrink(X_r, margin), dims, fill=False, edgecolor="green", linewidth=1.2)
    for box in X_a:
        _rect(ax, box, dims, facecolor="grey", edgecolor="none")
        _rect(ax, box_expand(box, margin), dims, fill=False, edgecolor="green", linewidth=1.2)

    i, j = dims
    if abstract is not None and abstract.states.shape[1] > max(i, j):
        ax.plot(abstract.states[:, i], abstract.states[:, j], color="red", linewidth=1.2, label="abstract")
    ax.plot(concrete.states[:, i], concrete.states[:, j], color="blue", linewidth=1.2, label="concrete")

    if T_s and heading_dim is not None and concrete.states.shape[1] > heading_dim:
        k = np.round(concrete.times / T_s)
        at_sample = np.isclose(concrete.times, k * T_s, atol=1e-9)
        pts = concrete.states[at_sample]
        psi = pts[:, heading_dim]
        scale = 0.03 * float(max(X.widths()[list(dims)]))
        ax.quiver(pts[:, i], pts[:, j], np.cos(psi) * scale, np.sin(psi) * scale,
                  angles="xy", scale_units="xy", scale=1.0, color="black", width=0.003)

    ax.set_xlim(X.lo[i], X.hi[i])
    ax.set_ylim(X.lo[j], X.hi[j])
    ax.set_aspect("equal")
    ax.set_xlabel(labels[0])
    ax.set_ylabel(labels[1])
    if title:
        ax.set_title(title)
    ax.legend(loc="upper left", fontsize="small")
    # no date stamp in the SVG
    fig.savefig(path, format="svg", metadata={"Date": None})
    plt.close(fig)
    logger.info(f"Wrote plot to {path}")
    return path
