"""Figures written next to the CSV reports."""

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

STYLE = {
    "figure.figsize": (6.0, 4.0),
    "axes.grid": True,
    "grid.alpha": 0.3,
    "axes.spines.top": False,
    "axes.spines.right": False,
    "savefig.dpi": 120,
    "savefig.bbox": "tight",
}


def _save(fig, path):
    fig.savefig(path)
    plt.close(fig)
    return path


def plot_loss(path, losses):
    """``losses`` rows are ``(iter, total, o2m_cls, o2m_box, o2o_cls, o2o_box, ...)``."""
    rows = np.array([r[:6] for r in losses], dtype=float)
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots()
        ax.plot(rows[:, 0], rows[:, 1], label="total", color="k")
        for col, label in ((2, "o2m cls"), (3, "o2m box"), (4, "o2o cls"), (5, "o2o box")):
            ax.plot(rows[:, 0], rows[:, col], label=label, lw=0.8)
        ax.set_xlabel("iteration")
        ax.set_ylabel("loss")
        ax.set_yscale("log")
        ax.legend(frameon=False, fontsize=8)
        return _save(fig, path)


def plot_pr(path, curves):
    """``curves`` maps a label to a :class:`~fndetect.metrics.PRCurve`."""
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots()
        for label, c in curves.items():
            if len(c.recall) == 0:
                continue
            r = np.concatenate([[0.0], c.recall])
            p = np.concatenate([[c.precision[0]], c.precision])
            ax.step(r, p, where="post", label=f"{label} (AP {c.ap:.3f})")
        ax.set_xlim(0, 1.01)
        ax.set_ylim(0, 1.01)
        ax.set_xlabel("recall")
        ax.set_ylabel("precision")
        if ax.get_legend_handles_labels()[0]:
            ax.legend(frameon=False, fontsize=8, loc="lower left")
        return _save(fig, path)


def plot_f1(path, curve):
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots()
        p, r = curve.precision, curve.recall
        with np.errstate(invalid="ignore", divide="ignore"):
            f1 = np.where(p + r > 0, 2 * p * r / (p + r), 0.0)
        ax.plot(curve.thresholds, f1, color="C3")
        ax.set_xlabel("confidence threshold")
        ax.set_ylabel("F1")
        ax.set_xlim(0, 1)
        ax.set_ylim(0, 1.01)
        return _save(fig, path)


def plot_costs(path, report):
    """FLOPs and parameters summed by operator type."""
    ops = sorted({r.op for r in report.layers})
    flops = [sum(r.flops for r in report.layers if r.op == o) for o in ops]
    params = [sum(r.params for r in report.layers if r.op == o) for o in ops]
    with plt.rc_context(STYLE):
        fig, (a1, a2) = plt.subplots(1, 2, figsize=(9, 3.5))
        a1.bar(ops, flops, color="C0")
        a1.set_ylabel("FLOPs (MACs)")
        a2.bar(ops, params, color="C1")
        a2.set_ylabel("parameters")
        for ax in (a1, a2):
            ax.tick_params(axis="x", rotation=30)
        return _save(fig, path)


def plot_ablation(path, rows):
    """``rows`` are dicts with ``model``, ``params`` and ``ap50``."""
    names = [r["model"] for r in rows]
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(8, 3.5))
        ax.bar(names, [r["params"] / 1e3 for r in rows], color="C0")
        ax.set_ylabel("parameters (k)")
        ax.tick_params(axis="x", rotation=30)
        ax2 = ax.twinx()
        ax2.plot(names, [r["ap50"] for r in rows], "o-", color="C3")
        ax2.set_ylabel("AP@50")
        ax2.set_ylim(0, 1.05)
        return _save(fig, path)
