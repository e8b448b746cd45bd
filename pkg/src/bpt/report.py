"""Deterministic rendering of metrics, learning curves, and ablation tables.

Figures are written as SVG next to the delimited tables they are drawn from.
Byte-determinism: fixed hash salt, no embedded creation date.
"""

from __future__ import annotations

import csv
import json
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
matplotlib.rcParams["svg.hashsalt"] = "bpt"

import matplotlib.pyplot as plt  # noqa: E402


class ReportError(Exception):
    pass


_SAVE_KW = {"metadata": {"Date": None}, "format": "svg"}


def _read_rows(path: str | Path) -> list[dict]:
    with Path(path).open("r", encoding="utf-8", newline="") as fh:
        rows = list(csv.DictReader(fh))
    if not rows:
        raise ReportError(f"{path}: empty table")
    return rows


def render_curve_svg(csv_path: str | Path, out_svg: str | Path) -> None:
    """Line chart with one marker per row: accuracy and violation rate vs
    training-set fraction."""
    rows = _read_rows(csv_path)
    try:
        x = [float(r["fraction"]) for r in rows]
        acc = [float(r["prop_accuracy"]) for r in rows]
        rho = [float(r["rho"]) if r.get("rho") not in (None, "", "None") else None
               for r in rows]
    except (KeyError, ValueError) as err:
        raise ReportError(f"{csv_path}: malformed learning-curve table ({err})") from err
    fig, ax = plt.subplots(figsize=(5.5, 3.5))
    ax.plot(x, acc, marker="o", label="proposition accuracy")
    if all(v is not None for v in rho):
        ax.plot(x, rho, marker="s", label="violation rate (lower is better)")
    ax.set_xlabel("training set fraction")
    ax.set_ylabel("fraction")
    ax.set_ylim(-0.02, 1.02)
    ax.legend(loc="best")
    ax.grid(True, alpha=0.3)
    fig.tight_layout()
    fig.savefig(out_svg, **_SAVE_KW)
    plt.close(fig)


def render_ablation_svg(csv_path: str | Path, out_svg: str | Path) -> None:
    """Grouped bars: accuracy per variant, with the base row first."""
    rows = _read_rows(csv_path)
    try:
        names = [r["variant"] for r in rows]
        acc = [float(r["prop_accuracy"]) for r in rows]
    except (KeyError, ValueError) as err:
        raise ReportError(f"{csv_path}: malformed ablation table ({err})") from err
    fig, ax = plt.subplots(figsize=(5.5, 3.5))
    ax.bar(range(len(names)), acc, color=["#4878a8"] + ["#b0652f"] * (len(names) - 1))
    ax.set_xticks(range(len(names)))
    ax.set_xticklabels(names, rotation=20, ha="right")
    ax.set_ylabel("dev proposition accuracy")
    ax.set_ylim(0, 1.02)
    ax.grid(True, axis="y", alpha=0.3)
    fig.tight_layout()
    fig.savefig(out_svg, **_SAVE_KW)
    plt.close(fig)


def _flatten_metrics(doc: dict, prefix: str = "") -> list[tuple[str, float]]:
    out: list[tuple[str, float]] = []
    for key in sorted(doc):
        value = doc[key]
        name = f"{prefix}{key}"
        if isinstance(value, dict):
            out.extend(_flatten_metrics(value, prefix=f"{name}."))
        elif isinstance(value, (int, float)) and value is not None:
            out.append((name, float(value)))
    return out


def render_metrics(metrics_json: str | Path, out_dir: str | Path) -> list[Path]:
    """Flat CSV of every numeric metric plus a bar chart of the [0, 1] ones."""
    doc = json.loads(Path(metrics_json).read_text(encoding="utf-8"))
    if not isinstance(doc, dict):
        raise ReportError(f"{metrics_json}: expected a JSON object")
    flat = _flatten_metrics(doc)
    if not flat:
        raise ReportError(f"{metrics_json}: no numeric metrics found")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    csv_path = out_dir / "metrics.csv"
    with csv_path.open("w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["metric", "value"])
        writer.writerows(flat)
    unit = [(k, v) for k, v in flat if 0.0 <= v <= 1.0 and "wall_clock" not in k]
    svg_path = out_dir / "metrics.svg"
    fig, ax = plt.subplots(figsize=(6.0, 0.6 + 0.45 * max(1, len(unit))))
    if unit:
        names = [k for k, _ in unit]
        values = [v for _, v in unit]
        ax.barh(range(len(unit)), values, color="#4878a8")
        ax.set_yticks(range(len(unit)))
        ax.set_yticklabels(names, fontsize=8)
        ax.invert_yaxis()
        ax.set_xlim(0, 1.02)
        ax.set_xlabel("value")
    fig.tight_layout()
    fig.savefig(svg_path, **_SAVE_KW)
    plt.close(fig)
    return [csv_path, svg_path]
