"""Text tables, two-column plot data and PNG figures from a run directory."""

from __future__ import annotations

import csv
import json
from pathlib import Path

import numpy as np

from ..errors import ReportError
from ..tabular_sweet import CSV_COLUMNS, CSV_SCHEMA

TABLE_COLUMNS = ["seed", "n_eps", "run", "viol", "max_cost", "final_U", "max_gap", "plan_ok", "bound_viol"]


def read_episodes(path: Path) -> dict[str, np.ndarray]:
    """Parses an episodes CSV; every problem is reported with file and line."""
    if not path.exists():
        raise ReportError(f"{path}: missing episodes file")
    with open(path, newline="") as fh:
        lines = fh.read().splitlines()
    if not lines or lines[0] != f"#schema={CSV_SCHEMA}":
        raise ReportError(f"{path}:1: expected header '#schema={CSV_SCHEMA}'")
    if len(lines) < 2:
        raise ReportError(f"{path}:2: missing column header")
    rows = list(csv.reader(lines[1:]))
    header = rows[0]
    if header[: len(CSV_COLUMNS)] != CSV_COLUMNS:
        raise ReportError(f"{path}:2: unexpected columns {header}")
    n_col, u_col, c_col = header.index("episode"), header.index("u_value"), header.index("true_cost")
    n, u, cost = [], [], []
    for k, row in enumerate(rows[1:], start=3):
        if len(row) != len(header):
            raise ReportError(f"{path}:{k}: expected {len(header)} fields, got {len(row)}")
        try:
            n.append(int(row[n_col]))
            u.append(float(row[u_col]))
            cost.append(float(row[c_col]))
        except ValueError as exc:
            raise ReportError(f"{path}:{k}: {exc}") from exc
    if not n:
        raise ReportError(f"{path}:3: no episode rows")
    return {"n": np.array(n), "u": np.array(u), "true_cost": np.array(cost)}


def _read_json(path: Path) -> dict:
    if not path.exists():
        raise ReportError(f"{path}: missing file")
    try:
        return json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise ReportError(f"{path}:{exc.lineno}: {exc.msg}") from exc


def _write_dat(path: Path, x: np.ndarray, y: np.ndarray, header: str) -> None:
    with open(path, "w") as fh:
        fh.write(f"# {header}\n")
        for a, b in zip(x, y):
            fh.write(f"{a} {float(b)!r}\n")


def format_table(rows: list[list[str]], header: list[str]) -> str:
    widths = [max(len(h), *(len(r[i]) for r in rows)) if rows else len(h) for i, h in enumerate(header)]
    fmt = lambda cells: "  ".join(c.rjust(w) for c, w in zip(cells, widths))
    return "\n".join([fmt(header), fmt(["-" * w for w in widths])] + [fmt(r) for r in rows])


def _g(x: float) -> str:
    return f"{x:.4g}"


def report(directory: str | Path, figures: bool = True) -> str:
    """Writes report.txt, per-seed .dat files and (optionally) PNGs; returns the table text."""
    d = Path(directory)
    if not d.is_dir():
        raise ReportError(f"{d}: not a directory")
    seeds = sorted(p for p in d.glob("seed_*") if p.is_dir())
    if not seeds:
        raise ReportError(f"{d}: no seed_* directories, nothing to report")
    plots = d / "plots"
    plots.mkdir(exist_ok=True)
    rows, curves = [], []
    for sd in seeds:
        info = _read_json(sd / "seed.json")
        ep = read_episodes(sd / "episodes.csv")
        margin = np.minimum.accumulate(info["tau"] - ep["true_cost"])
        _write_dat(plots / f"{sd.name}_u.dat", ep["n"], ep["u"], "n U(n)")
        _write_dat(plots / f"{sd.name}_margin.dat", ep["n"], margin, "n running-min(tau - V_c(pi_n))")
        curves.append((info["seed"], ep["n"], ep["u"], margin))
        tasks = info["tasks"]
        rows.append([str(info["seed"]), str(info["n_eps"]), info["run_status"], str(info["violations"]),
                     _g(info["max_true_cost"]), _g(info["final_u"]),
                     _g(max((t["gap"] for t in tasks), default=0.0)),
                     f"{sum(t['pass'] for t in tasks)}/{len(tasks)}", str(info["error_bound"]["violations"])])
    text = format_table(rows, TABLE_COLUMNS)
    summary = d / "summary.json"
    if summary.exists():
        agg = _read_json(summary)["aggregates"]
        text += "\n\n" + format_table([[k, str(agg[k])] for k in sorted(agg)], ["aggregate", "value"])
    (d / "report.txt").write_text(text + "\n")
    if figures:
        _figures(curves, plots)
    return text


def _figures(curves, plots: Path) -> None:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    for key, col, ylabel, fname, logy in [("u", 2, "U(pi_n) under the estimate", "u_vs_n.png", True),
                                          ("margin", 3, "running min of tau - V_c(pi_n)", "safety_margin.png",
                                           False)]:
        fig, ax = plt.subplots(figsize=(6, 4))
        for c in curves:
            ax.plot(c[1], c[col], lw=0.8, label=f"seed {c[0]}")
        ax.set_xlabel("episode n")
        ax.set_ylabel(ylabel)
        if logy:
            ax.set_yscale("log")
        if key == "margin":
            ax.axhline(0.0, color="k", lw=0.6, ls="--")
        if len(curves) <= 10:
            ax.legend(fontsize=7)
        fig.tight_layout()
        fig.savefig(plots / fname, dpi=100, metadata={"Software": None})
        plt.close(fig)
