"""Report figures written next to the tab-separated outputs."""

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

STYLE = {
    "figure.figsize": (6.4, 4.0),
    "figure.dpi": 100,
    "axes.grid": True,
    "grid.alpha": 0.3,
    "axes.spines.top": False,
    "axes.spines.right": False,
    "font.size": 10,
}


def _save(fig, path):
    fig.tight_layout()
    fig.savefig(path)
    plt.close(fig)
    return path


def plot_loss_curve(curve, path, title="training loss"):
    """curve rows are (epoch, step, loss, lr)."""
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots()
        if curve:
            steps = [row[1] for row in curve]
            ax.semilogy(steps, [max(row[2], 1e-12) for row in curve], lw=1.0, label="loss")
            ax2 = ax.twinx()
            ax2.plot(steps, [row[3] for row in curve], color="tab:orange", lw=0.8, alpha=0.7)
            ax2.set_ylabel("learning rate")
            ax2.grid(False)
        ax.set_xlabel("step")
        ax.set_ylabel("loss")
        ax.set_title(title)
        return _save(fig, path)


def plot_latency(report, path):
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots()
        n = np.array([r[0] for r in report.rows], dtype=float)
        t = np.array([r[1] for r in report.rows])
        ax.loglog(n, t, "o-", label="measured")
        if report.exponent is not None:
            ref = t[0] * (n / n[0])
            ax.loglog(n, ref, "--", color="gray", label="linear")
            ax.set_title(f"generator latency (slope {report.exponent:.2f})")
        ax.set_xlabel("frames")
        ax.set_ylabel("seconds")
        ax.legend()
        return _save(fig, path)


def plot_duration_histogram(durations, is_blank, path):
    d = np.asarray(durations)
    blank = np.asarray(is_blank, dtype=bool)
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots()
        top = int(d.max()) + 2 if d.size else 2
        bins = np.arange(top) - 0.5
        ax.hist([d[~blank], d[blank]], bins=bins, label=["characters", "blanks"], stacked=True)
        ax.set_xlabel("frames")
        ax.set_ylabel("tokens")
        ax.legend()
        return _save(fig, path)


def plot_mel(frames, path, title="log-mel"):
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots()
        im = ax.imshow(np.asarray(frames).T, origin="lower", aspect="auto", interpolation="nearest")
        fig.colorbar(im, ax=ax)
        ax.set_xlabel("frame")
        ax.set_ylabel("mel band")
        ax.set_title(title)
        ax.grid(False)
        return _save(fig, path)
