"""Figure rendering from experiment result rows.

Figure kinds:
  trajectory  similarity vs adaptation step for one concept under one
              (attack, metric): the no-immunization arm is dashed, each
              immunization method's arm solid
  msgr_bars   per-method mean similarity gap ratio at the final step,
              averaged over groups and target concepts
  mrsgr_bars  per-method relative gap ratio from the cross-arm similarities

The input csv is read-only; its header must match the experiment runner's
schema exactly (shared golden file guards the lockstep).
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt
import numpy as np

EXPECTED_HEADER = "run_id,method,attack,concept,step,metric,arm,value"

KINDS = ("trajectory", "msgr_bars", "mrsgr_bars")

ARM_NONE = "none"
ARM_IMMUNIZED = "immunized"
ARM_CROSS = "cross"


class SchemaMismatch(Exception):
    """results.csv does not carry the expected schema."""


class EmptySelection(Exception):
    """The requested filters match no rows."""


@dataclass(frozen=True)
class Row:
    run_id: str
    method: str
    attack: str
    concept: str
    step: int
    metric: str
    arm: str
    value: float


@dataclass(frozen=True)
class PlotSpec:
    csv: str
    kind: str
    out: str
    method: str | None = None
    attack: str | None = None
    metric: str | None = None
    concept: str | None = None

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown figure kind {self.kind!r}")


def load_rows(path) -> list:
    text = Path(path).read_text(encoding="utf-8")
    lines = text.splitlines()
    if not lines or lines[0] != EXPECTED_HEADER:
        raise SchemaMismatch(
            f"expected header {EXPECTED_HEADER!r}, found {lines[0] if lines else '<empty>'!r}"
        )
    rows = []
    for line in lines[1:]:
        parts = line.split(",")
        if len(parts) != 8:
            raise SchemaMismatch(f"malformed row: {line!r}")
        rows.append(Row(parts[0], parts[1], parts[2], parts[3],
                        int(parts[4]), parts[5], parts[6], float(parts[7])))
    return rows


def _select(rows, **criteria):
    out = [
        r for r in rows
        if all(getattr(r, k) == v for k, v in criteria.items() if v is not None)
    ]
    return out


def _mean_series(rows):
    """Mean value per step across groups/concepts of the given rows."""
    steps = sorted({r.step for r in rows})
    return steps, [float(np.mean([r.value for r in rows if r.step == s])) for s in steps]


def _render_trajectory(spec: PlotSpec, rows):
    selected = _select(rows, attack=spec.attack, metric=spec.metric, concept=spec.concept)
    if spec.method:
        selected = [r for r in selected if r.method in (spec.method, "none")]
    none_rows = [r for r in selected if r.arm == ARM_NONE]
    methods = sorted({r.method for r in selected if r.arm == ARM_IMMUNIZED})
    if not none_rows and not methods:
        raise EmptySelection(f"no rows match {spec}")

    fig, ax = plt.subplots(figsize=(5.0, 3.4))
    series = {}
    if none_rows:
        steps, values = _mean_series(none_rows)
        ax.plot(steps, values, "--", color="tab:orange", label="no immunization")
        series["none"] = (steps, values)
    for method in methods:
        m_rows = [r for r in selected if r.arm == ARM_IMMUNIZED and r.method == method]
        steps, values = _mean_series(m_rows)
        ax.plot(steps, values, "-", marker="o", markersize=3, label=method)
        series[method] = (steps, values)
    ax.set_xlabel("adaptation step")
    ax.set_ylabel(f"similarity ({spec.metric})" if spec.metric else "similarity")
    title = " / ".join(v for v in (spec.attack, spec.concept) if v)
    if title:
        ax.set_title(title)
    ax.legend(fontsize=8)
    fig.tight_layout()
    return fig, series


def gap_ratios(rows, kind, attack=None, metric=None):
    """Per-method gap ratios at the final step (fractions, not percent).

    msgr compares reference similarities of the none arm vs each method's
    immunized arm over target concepts (concept names starting with "c");
    mrsgr compares cross-arm similarities of target vs other concepts.
    """
    selected = _select(rows, attack=attack, metric=metric)
    if not selected:
        raise EmptySelection("no rows match the filters")
    final = max(r.step for r in selected)
    methods = sorted({r.method for r in selected if r.method != "none"})
    groups = sorted({r.run_id for r in selected})
    values = {}
    for method in methods:
        per_group = []
        for g in groups:
            if kind == "msgr":
                ratios = []
                for r_none in _select(selected, run_id=g, method="none", arm=ARM_NONE, step=final):
                    if not r_none.concept.startswith("c"):
                        continue
                    match = _select(selected, run_id=g, method=method, arm=ARM_IMMUNIZED,
                                    step=final, concept=r_none.concept)
                    if match and abs(r_none.value) > 1e-9:
                        ratios.append((r_none.value - match[0].value) / r_none.value)
                if ratios:
                    per_group.append(float(np.mean(ratios)))
            else:
                cross = _select(selected, run_id=g, method=method, arm=ARM_CROSS, step=final)
                t = [r.value for r in cross if r.concept.startswith("c")]
                o = [r.value for r in cross if r.concept.startswith("other")]
                if t and o and abs(np.mean(o)) > 1e-9:
                    per_group.append(float((np.mean(o) - np.mean(t)) / np.mean(o)))
        if per_group:
            values[method] = float(np.mean(per_group))
    if not values:
        raise EmptySelection(f"no {kind} ratios derivable from the selection")
    return values


def _render_bars(spec: PlotSpec, rows):
    kind = "msgr" if spec.kind == "msgr_bars" else "mrsgr"
    values = gap_ratios(rows, kind, attack=spec.attack, metric=spec.metric)
    if spec.method:
        values = {m: v for m, v in values.items() if m == spec.method}
        if not values:
            raise EmptySelection(f"method {spec.method!r} not present")
    fig, ax = plt.subplots(figsize=(4.2, 3.2))
    names = list(values)
    heights = [100.0 * values[m] for m in names]
    bars = ax.bar(names, heights, color="tab:blue")
    for bar, m in zip(bars, names):
        ax.annotate(f"{100 * values[m]:.1f}%", (bar.get_x() + bar.get_width() / 2, bar.get_height()),
                    ha="center", va="bottom", fontsize=8)
    ax.axhline(0.0, color="black", linewidth=0.8)
    ax.set_ylabel(f"{kind} (%)")
    title = " / ".join(v for v in (spec.attack, spec.metric) if v)
    if title:
        ax.set_title(title)
    fig.tight_layout()
    return fig, values


def render(spec: PlotSpec):
    """Render one figure; returns the computed series/values for inspection."""
    rows = load_rows(spec.csv)
    if spec.kind == "trajectory":
        fig, payload = _render_trajectory(spec, rows)
    else:
        fig, payload = _render_bars(spec, rows)
    out = Path(spec.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(out)
    plt.close(fig)
    return payload


def render_grid(csv_path, manifest: dict, out_dir) -> list:
    """Render every figure the manifest implies: per (attack x metric), one
    trajectory per concept plus msgr and mrsgr bar charts. Returns paths."""
    rows = load_rows(csv_path)
    out_dir = Path(out_dir)
    concepts = sorted({r.concept for r in rows})
    written = []
    for attack in manifest["attacks"]:
        for metric in manifest["metrics"]:
            for concept in concepts:
                spec = PlotSpec(csv=str(csv_path), kind="trajectory",
                                out=str(out_dir / f"traj_{attack}_{metric}_{concept}.png"),
                                attack=attack, metric=metric, concept=concept)
                render(spec)
                written.append(spec.out)
            for kind in ("msgr_bars", "mrsgr_bars"):
                spec = PlotSpec(csv=str(csv_path), kind=kind,
                                out=str(out_dir / f"{kind}_{attack}_{metric}.png"),
                                attack=attack, metric=metric)
                render(spec)
                written.append(spec.out)
    return written
