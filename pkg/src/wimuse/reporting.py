"""Deterministic report emission: CSV tables plus a fixed-width text rendering.

Every file starts with comment lines tying the numbers to model digests and
dataset digests. Identical inputs produce byte-identical files (no
timestamps).
"""

from __future__ import annotations

from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from .evaluation import ComplexityReport, EvalReport
from .experiments import ExperimentResult


def accuracy_row(method: str, report: EvalReport, dataset: str = "") -> dict:
    return {
        "dataset": dataset,
        "method": method,
        "accuracy": dict(report.accuracy),
        "model_digest": report.model_digest,
        "dataset_digest": report.dataset_digest,
    }


def _fmt_pct(x: float) -> str:
    return f"{100.0 * x:.2f}"


def _write(path: Path, text: str) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(text, encoding="utf-8")
    return path


def _text_table(headers: Sequence[str], rows: Sequence[Sequence[str]]) -> str:
    widths = [max(len(str(h)), *(len(str(r[i])) for r in rows)) if rows else len(str(h))
              for i, h in enumerate(headers)]
    def line(cells):
        return "  ".join(str(c).ljust(w) for c, w in zip(cells, widths)).rstrip()
    sep = "  ".join("-" * w for w in widths)
    return "\n".join([line(headers), sep] + [line(r) for r in rows]) + "\n"


def render_accuracy_tables(rows: Sequence[dict], out_dir: Path, fmt: str) -> list[Path]:
    """One methods-by-tasks grid per dataset, with a per-method Average column."""
    written = []
    datasets = sorted({r["dataset"] for r in rows})
    for ds in datasets:
        ds_rows = [r for r in rows if r["dataset"] == ds]
        tasks = sorted({t for r in ds_rows for t in r["accuracy"]})
        header_comments = [f"# dataset={ds} dataset_digest={ds_rows[0]['dataset_digest']}"]
        for r in ds_rows:
            header_comments.append(f"# method={r['method']} model_digest={r['model_digest']}")
        headers = ["method"] + tasks + ["Average"]
        table_rows = []
        for r in ds_rows:
            accs = [r["accuracy"].get(t) for t in tasks]
            present = [a for a in accs if a is not None]
            avg = float(np.mean(present)) if present else float("nan")
            table_rows.append([r["method"]] + [_fmt_pct(a) if a is not None else "--" for a in accs]
                              + [_fmt_pct(avg)])
        stem = f"accuracy_{ds}" if ds else "accuracy"
        if fmt in ("csv", "both"):
            csv_lines = header_comments + [",".join(headers)]
            csv_lines += [",".join(str(c) for c in row) for row in table_rows]
            written.append(_write(out_dir / f"{stem}.csv", "\n".join(csv_lines) + "\n"))
        if fmt in ("txt", "both"):
            text = "\n".join(header_comments) + "\n" + _text_table(headers, table_rows)
            written.append(_write(out_dir / f"{stem}.txt", text))

    if len(datasets) > 1:
        written += _render_cross_dataset_averages(rows, datasets, out_dir)
    return written


def _render_cross_dataset_averages(rows, datasets, out_dir: Path) -> list[Path]:
    """Per-task unweighted means across datasets, all aggregations spelled out.

    Aggregation conventions differ (per-task across datasets, per-dataset
    across tasks, grand mean); each is printed rather than asserting one.
    """
    methods = sorted({r["method"] for r in rows})
    tasks = sorted({t for r in rows for t in r["accuracy"]})
    lines = ["# cross-dataset aggregations; candidate conventions are listed, none is canonical"]
    for method in methods:
        m_rows = [r for r in rows if r["method"] == method]
        lines.append(f"method={method}")
        for task in tasks:
            vals = [r["accuracy"][task] for r in m_rows if task in r["accuracy"]]
            if vals:
                lines.append(
                    f"  per-task mean over datasets: {task} = {_fmt_pct(float(np.mean(vals)))}"
                    f" (n={len(vals)})"
                )
        per_ds = []
        for ds in datasets:
            vals = [np.mean(list(r["accuracy"].values())) for r in m_rows if r["dataset"] == ds]
            if vals:
                per_ds.append(float(np.mean(vals)))
                lines.append(f"  per-dataset mean over tasks: {ds} = {_fmt_pct(per_ds[-1])}")
        if per_ds:
            lines.append(f"  grand mean = {_fmt_pct(float(np.mean(per_ds)))}")
    return [_write(out_dir / "averages.txt", "\n".join(lines) + "\n")]


def render_complexity_table(entries: Mapping[str, ComplexityReport], out_dir: Path,
                            fmt: str) -> list[Path]:
    headers = ["method", "parameters", "multiadds_millions", "memory_mb", "latency_ms"]
    rows = []
    comments = []
    for method in entries:
        rep = entries[method]
        rows.append([
            method,
            str(rep.parameters),
            f"{rep.multiadds / 1e6:.2f}",
            f"{rep.peak_memory_bytes / 2**20:.2f}",
            f"{rep.latency_ms_median:.3f}",
        ])
        comments.append(
            f"# method={method} input={'x'.join(map(str, rep.input_shape))} batch={rep.batch}"
        )
    env = next(iter(entries.values())).environment if entries else {}
    comments.append("# environment=" + ";".join(f"{k}={v}" for k, v in sorted(env.items())))
    written = []
    if fmt in ("csv", "both"):
        csv_lines = comments + [",".join(headers)] + [",".join(r) for r in rows]
        written.append(_write(out_dir / "complexity.csv", "\n".join(csv_lines) + "\n"))
    if fmt in ("txt", "both"):
        written.append(_write(out_dir / "complexity.txt",
                              "\n".join(comments) + "\n" + _text_table(headers, rows)))
    return written


def render_experiment_table(result: ExperimentResult, out_dir: Path, fmt: str,
                            stem: str = "experiment") -> list[Path]:
    """Per-run rows plus mean/std aggregation; sweep results add rank stats."""
    tasks = list(result.task_names)
    has_ratio = any("ratio" in r for r in result.rows)
    headers = ["variant", "seed"] + (["ratio"] if has_ratio else []) + tasks
    rows = []
    for r in result.rows:
        row = [r["variant"], str(r["seed"])]
        if has_ratio:
            row.append(f"{r['ratio']:g}")
        row += [_fmt_pct(r["accuracy"][t]) for t in tasks]
        rows.append(row)

    comments = [f"# dataset_digest={result.dataset_digest}"]
    for r in result.rows:
        comments.append(
            f"# variant={r['variant']} seed={r['seed']} model_digest={r['model_digest']}"
        )

    agg_lines = ["# mean +- std over seeds"]
    for agg in result.aggregate():
        label = agg["variant"] + (f" ratio={agg['ratio']:g}" if "ratio" in agg else "")
        stats = " ".join(
            f"{t}={_fmt_pct(agg[f'{t}_mean'])}+-{_fmt_pct(agg[f'{t}_std'])}" for t in tasks
        )
        agg_lines.append(f"# {label} n={agg['n']} {stats}")
    if has_ratio:
        for variant, by_task in result.spearman().items():
            stats = " ".join(f"{t}_rho={rho:.3f}" for t, rho in by_task.items())
            agg_lines.append(f"# spearman {variant} {stats}")

    written = []
    if fmt in ("csv", "both"):
        csv_lines = comments + agg_lines + [",".join(headers)] + [",".join(r) for r in rows]
        written.append(_write(out_dir / f"{stem}.csv", "\n".join(csv_lines) + "\n"))
    if fmt in ("txt", "both"):
        text = "\n".join(comments + agg_lines) + "\n" + _text_table(headers, rows)
        written.append(_write(out_dir / f"{stem}.txt", text))
    return written


def emit_report(out_dir, accuracy: Sequence[dict] | None = None,
                complexity: Mapping[str, ComplexityReport] | None = None,
                experiment: ExperimentResult | None = None,
                sweep: ExperimentResult | None = None,
                fmt: str = "both") -> list[Path]:
    """Write the requested tables under ``out_dir``; returns the written paths."""
    if fmt not in ("csv", "txt", "both"):
        raise ValueError(f"fmt must be csv, txt, or both, got {fmt!r}")
    if not any([accuracy, complexity, experiment, sweep]):
        raise ValueError("nothing to report")
    out = Path(out_dir)
    written: list[Path] = []
    if accuracy:
        written += render_accuracy_tables(list(accuracy), out, fmt)
    if complexity:
        written += render_complexity_table(complexity, out, fmt)
    if experiment:
        written += render_experiment_table(experiment, out, fmt, stem="ablation")
    if sweep:
        written += render_experiment_table(sweep, out, fmt, stem="sweep")
    return written
