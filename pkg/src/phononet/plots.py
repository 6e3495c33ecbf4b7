"""Plot data bundles (CSV) and rendered figures (PNG) for training reports.

The CSV files are the primary, byte-stable output. PNG figures are rendered
from the same data with matplotlib's Agg backend for quick inspection.
"""

from __future__ import annotations

import csv
import io
import warnings
from pathlib import Path

import numpy as np

from .io import atomic_write_bytes, atomic_write_text
from .simulator import transfer_function

HIST_BINS = 40


def _fmt(v):
    return repr(float(v))


def loss_curve_csv(history: dict) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["iteration", "loss", "train_error"])
    loss = history.get("loss", [])
    err = history.get("train_error", [None] * len(loss))
    for i, (l, e) in enumerate(zip(loss, err)):
        w.writerow([i, _fmt(l), "" if e is None else _fmt(e)])
    return buf.getvalue()


def histogram_edges(energies, bins=HIST_BINS):
    """``bins + 1`` log-spaced edges spanning the positive energies (fixed for a fixed range)."""
    E = np.asarray(energies, float)
    E = E[E > 0]
    if E.size == 0:
        return np.logspace(-1, 1, bins + 1)
    lo, hi = E.min(), E.max()
    if hi <= lo:
        lo, hi = lo / 2, hi * 2
    return np.logspace(np.log10(lo), np.log10(hi), bins + 1)


def histogram_csv(energies, labels, edges=None) -> str:
    """Per-class counts over log-spaced bins; an empty split yields the header only."""
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["bin_lo", "bin_hi", "count_pos", "count_neg"])
    E = np.asarray(energies, float)
    if E.size == 0:
        warnings.warn("empty split: histogram has no rows", RuntimeWarning, stacklevel=2)
        return buf.getvalue()
    y = np.asarray(labels)
    edges = histogram_edges(E) if edges is None else np.asarray(edges)
    pos = np.histogram(E[(y == 1) & (E > 0)], edges)[0]
    neg = np.histogram(E[(y == -1) & (E > 0)], edges)[0]
    for lo, hi, p, n in zip(edges[:-1], edges[1:], pos, neg):
        w.writerow([_fmt(lo), _fmt(hi), int(p), int(n)])
    return buf.getvalue()


def transfer_csv(model, freqs_hz) -> str:
    H = transfer_function(model, 2 * np.pi * np.asarray(freqs_hz, float))
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["f_hz", "re", "im", "abs"])
    for f, h in zip(freqs_hz, H):
        w.writerow([_fmt(f), _fmt(h.real), _fmt(h.imag), _fmt(abs(h))])
    return buf.getvalue()


def _split_arrays(report: dict, name):
    part = report.get(name)
    if not part:
        return np.zeros(0), np.zeros(0, int)
    labels = part.get("labels")
    if labels is None:
        labels = report.get(f"{name}_labels", [])
    return np.asarray(part["energies"], float), np.asarray(labels, int)


def emit_plots(report: dict, outdir, model=None, freqs_hz=None, figures=True) -> list[Path]:
    """Write loss-curve, histogram and (optionally) transfer-function CSVs, plus PNG figures.

    ``report`` is a TrainReport dictionary whose splits carry ``labels``.
    Returns the written paths.
    """
    out = Path(outdir)
    out.mkdir(parents=True, exist_ok=True)
    paths = [atomic_write_text(out / "loss_curve.csv", loss_curve_csv(report.get("history", {})))]
    Etr, ytr = _split_arrays(report, "train")
    Ete, yte = _split_arrays(report, "test")
    both = np.concatenate([Etr, Ete])
    edges = histogram_edges(both)
    paths.append(atomic_write_text(out / "hist_train.csv", histogram_csv(Etr, ytr, edges)))
    paths.append(atomic_write_text(out / "hist_test.csv", histogram_csv(Ete, yte, edges)))
    if model is not None:
        freqs_hz = np.linspace(55e3, 80e3, 501) if freqs_hz is None else freqs_hz
        paths.append(atomic_write_text(out / "transfer.csv", transfer_csv(model, freqs_hz)))
    if figures:
        paths += render_figures(out)
    return paths


def _read_csv(path):
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    return rows[0], rows[1:]


def _save(fig, path):
    buf = io.BytesIO()
    fig.savefig(buf, format="png", dpi=100, metadata={"Software": None})
    return atomic_write_bytes(path, buf.getvalue())


def render_figures(outdir) -> list[Path]:
    """Render PNGs next to whichever CSV bundles exist in ``outdir``."""
    import matplotlib

    matplotlib.use("Agg", force=True)
    import matplotlib.pyplot as plt

    out = Path(outdir)
    written = []
    f = out / "loss_curve.csv"
    if f.exists():
        _, rows = _read_csv(f)
        if rows:
            it = [int(r[0]) for r in rows]
            fig, ax = plt.subplots(1, 2, figsize=(8, 3))
            ax[0].semilogy(it, [float(r[1]) for r in rows])
            ax[0].set_xlabel("iteration")
            ax[0].set_ylabel("loss")
            if rows[0][2]:
                ax[1].plot(it, [float(r[2]) for r in rows])
            ax[1].set_xlabel("iteration")
            ax[1].set_ylabel("training error rate")
            fig.tight_layout()
            written.append(_save(fig, out / "loss_curve.png"))
            plt.close(fig)
    for name in ("hist_train", "hist_test"):
        f = out / f"{name}.csv"
        if not f.exists():
            continue
        _, rows = _read_csv(f)
        if not rows:
            continue
        lo = np.array([float(r[0]) for r in rows])
        hi = np.array([float(r[1]) for r in rows])
        fig, ax = plt.subplots(figsize=(5, 3))
        for col, lab in ((2, "+1"), (3, "-1")):
            ax.bar(lo, [int(r[col]) for r in rows], width=hi - lo, align="edge", alpha=0.6, label=lab)
        ax.set_xscale("log")
        ax.set_xlabel("transmitted energy")
        ax.set_ylabel("count")
        ax.legend()
        fig.tight_layout()
        written.append(_save(fig, out / f"{name}.png"))
        plt.close(fig)
    f = out / "transfer.csv"
    if f.exists():
        _, rows = _read_csv(f)
        fig, ax = plt.subplots(figsize=(5, 3))
        ax.semilogy([float(r[0]) / 1e3 for r in rows], [float(r[3]) for r in rows])
        ax.set_xlabel("frequency (kHz)")
        ax.set_ylabel("|H|")
        fig.tight_layout()
        written.append(_save(fig, out / "transfer.png"))
        plt.close(fig)
    return written
