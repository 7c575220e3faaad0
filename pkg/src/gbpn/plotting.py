"""PNG renderings of the CSV tables written by the CLI."""

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402


def _save(fig, path):
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path


def plot_history(rows, path):
    """Loss and split accuracies per epoch."""
    epochs = [r["epoch"] for r in rows]
    fig, (ax_loss, ax_acc) = plt.subplots(1, 2, figsize=(9, 3.5))
    ax_loss.plot(epochs, [r["loss"] for r in rows], color="black")
    ax_loss.set_xlabel("epoch")
    ax_loss.set_ylabel("training loss")
    for split in ("train", "val", "test"):
        ax_acc.plot(epochs, [r[f"{split}_acc"] for r in rows], label=split)
    ax_acc.set_xlabel("epoch")
    ax_acc.set_ylabel("accuracy")
    ax_acc.legend()
    return _save(fig, path)


def plot_convergence(rows, path):
    """Residual to the final step (log scale) next to test accuracy."""
    steps = [r["step"] for r in rows]
    fig, (ax_r, ax_a) = plt.subplots(1, 2, figsize=(9, 3.5))
    # the last residual is 0 by definition and cannot sit on a log axis
    ax_r.semilogy(steps[:-1], [max(r["residual"], 1e-300) for r in rows[:-1]], marker="o")
    ax_r.set_xlabel("BP step")
    ax_r.set_ylabel("mean residual")
    ax_a.plot(steps, [r["train_acc"] for r in rows], label="train")
    ax_a.plot(steps, [r["test_acc"] for r in rows], label="test")
    ax_a.set_xlabel("BP step")
    ax_a.set_ylabel("accuracy")
    ax_a.legend()
    return _save(fig, path)


def plot_variance(rows, path):
    epochs = [r["epoch"] for r in rows]
    fig, ax = plt.subplots(figsize=(5, 3.5))
    ax.plot(epochs, [r["importance_over_optimal"] for r in rows], label="importance / optimal")
    ax.plot(epochs, [r["uniform_over_optimal"] for r in rows], label="uniform / optimal")
    ax.plot(epochs, [r["rho"] for r in rows], label="importance / uniform")
    ax.axhline(1.0, color="grey", lw=0.8, ls="--")
    ax.set_xlabel("epoch")
    ax.set_ylabel("variance ratio")
    ax.legend()
    return _save(fig, path)
