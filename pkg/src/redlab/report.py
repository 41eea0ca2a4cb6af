"""Static plots and a text summary from one or more training runs.

Each run directory must hold ``metrics.csv``.  Output file names are fixed:

    test_error.png     1 - target accuracy per epoch (and 1 - source batch accuracy)
    lambda_trace.png   λ, soft trace and hard trace per iteration
    a_distance.png     final A-distance of each run as a bar
    summary.txt        final values per run and the plot self-check result
"""

from __future__ import annotations

import csv
from pathlib import Path

import numpy as np

PLOT_FILES = ("test_error.png", "lambda_trace.png", "a_distance.png")
SUMMARY_FILE = "summary.txt"
REQUIRED = ("epoch", "iter", "lambda", "trace_soft", "trace_hard", "src_acc", "tgt_acc", "a_dist")


class ReportError(ValueError):
    pass


def read_metrics(path) -> dict[str, np.ndarray]:
    """Column arrays from a metrics CSV; empty cells become NaN.

    Raises ReportError naming the missing columns, or the line number of a
    row whose field count does not match the header.
    """
    path = Path(path)
    if not path.exists():
        raise ReportError(f"{path}: metrics file not found")
    with open(path, newline="", encoding="utf-8") as fh:
        rows = list(csv.reader(fh))
    if not rows:
        raise ReportError(f"{path}: empty file")
    header = rows[0]
    missing = [c for c in REQUIRED if c not in header]
    if missing:
        raise ReportError(f"{path}: missing column(s) {', '.join(missing)}")
    data = []
    for lineno, row in enumerate(rows[1:], start=2):
        if len(row) != len(header):
            raise ReportError(f"{path}:{lineno}: truncated row ({len(row)} of {len(header)} fields)")
        try:
            data.append([float(v) if v != "" else np.nan for v in row])
        except ValueError:
            raise ReportError(f"{path}:{lineno}: non-numeric field") from None
    arr = np.array(data, dtype=np.float64).reshape(-1, len(header))
    return {name: arr[:, i] for i, name in enumerate(header)}


def _nanmax(a: np.ndarray) -> float:
    a = a[np.isfinite(a)]
    return float(a.max()) if a.size else float("nan")


def _same(a: float, b: float) -> bool:
    return (np.isnan(a) and np.isnan(b)) or a == b


def _check_lines(ax, expected: dict[str, float], problems: list[str], where: str) -> None:
    # compare what was actually handed to matplotlib against the CSV column max
    for line in ax.get_lines():
        label = line.get_label()
        if label in expected:
            got = _nanmax(np.asarray(line.get_ydata(), dtype=np.float64))
            if not _same(got, expected[label]):
                problems.append(f"{where}/{label}: plotted max {got} != csv max {expected[label]}")


def emit_report(run_dirs, out_dir) -> dict:
    """Write the plot files and summary; returns {"files", "problems", "runs"}."""
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    run_dirs = [Path(d) for d in run_dirs]
    if not run_dirs:
        raise ReportError("no run directories given")
    runs = {d.name or str(d): read_metrics(d / "metrics.csv") for d in run_dirs}
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    problems: list[str] = []

    fig, ax = plt.subplots(figsize=(6, 4))
    for name, m in runs.items():
        ep = np.isfinite(m["tgt_acc"])
        ax.plot(m["epoch"][ep], 1.0 - m["tgt_acc"][ep], marker="o", label=f"{name}:target")
        _check_lines(ax, {f"{name}:target": _nanmax(1.0 - m["tgt_acc"])}, problems, "test_error")
    ax.set_xlabel("epoch")
    ax.set_ylabel("target error (causal path)")
    ax.legend(fontsize=7)
    fig.tight_layout()
    fig.savefig(out / PLOT_FILES[0], dpi=100)
    plt.close(fig)

    fig, ax = plt.subplots(figsize=(6, 4))
    for name, m in runs.items():
        step = np.arange(m["lambda"].size)
        for col in ("lambda", "trace_soft", "trace_hard"):
            ax.plot(step, m[col], label=f"{name}:{col}", lw=1)
        _check_lines(ax, {f"{name}:{c}": _nanmax(m[c]) for c in ("lambda", "trace_soft", "trace_hard")},
                     problems, "lambda_trace")
    ax.set_xlabel("iteration")
    ax.set_ylim(0, 1.02)
    ax.legend(fontsize=7)
    fig.tight_layout()
    fig.savefig(out / PLOT_FILES[1], dpi=100)
    plt.close(fig)

    names = list(runs)
    finals = []
    for m in runs.values():
        vals = m["a_dist"][np.isfinite(m["a_dist"])]
        finals.append(float(vals[-1]) if vals.size else float("nan"))
    fig, ax = plt.subplots(figsize=(6, 4))
    bars = ax.bar(names, np.nan_to_num(finals))
    for bar, v in zip(bars, finals):
        if not (np.isnan(v) or bar.get_height() == v):
            problems.append(f"a_distance: bar {bar.get_height()} != csv {v}")
    ax.set_ylabel("final A-distance (fused features)")
    ax.set_ylim(0, 2)
    fig.tight_layout()
    fig.savefig(out / PLOT_FILES[2], dpi=100)
    plt.close(fig)

    lines = []
    for (name, m), ad_final in zip(runs.items(), finals):
        acc = m["tgt_acc"][np.isfinite(m["tgt_acc"])]
        lines.append(
            f"{name}: rows={m['epoch'].size} lambda {m['lambda'][0]:.4f}->{m['lambda'][-1]:.4f} "
            f"trace_soft {m['trace_soft'][0]:.4f}->{m['trace_soft'][-1]:.4f} "
            f"final_tgt_acc={acc[-1] if acc.size else float('nan'):.4f} final_a_dist={ad_final:.4f}"
            if m["epoch"].size else f"{name}: rows=0")
    lines.append("self_check=" + ("ok" if not problems else "FAILED; " + "; ".join(problems)))
    (out / SUMMARY_FILE).write_text("\n".join(lines) + "\n", encoding="utf-8")
    return {"files": [out / f for f in PLOT_FILES + (SUMMARY_FILE,)], "problems": problems,
            "runs": names}
