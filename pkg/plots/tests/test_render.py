import json
import subprocess
import sys
from pathlib import Path

import pytest

from immuplot import (
    EXPECTED_HEADER,
    EmptySelection,
    PlotSpec,
    SchemaMismatch,
    load_rows,
    render,
    render_grid,
)
from immuplot.render import gap_ratios

GOLDEN_HEADER = Path(__file__).resolve().parents[2] / "golden" / "results_header.txt"


def write_csv(path, rows):
    lines = [EXPECTED_HEADER] + [
        f"{r[0]},{r[1]},{r[2]},{r[3]},{r[4]},{r[5]},{r[6]},{r[7]:.9f}" for r in rows
    ]
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")
    return path


def test_golden_header_lockstep():
    assert GOLDEN_HEADER.read_text(encoding="utf-8").strip() == EXPECTED_HEADER


def test_single_row_trajectory_renders(tmp_path):
    csv = write_csv(tmp_path / "r.csv",
                    [("g1", "merged", "full", "c0", 0, "neg_mse", "immunized", 0.5)])
    out = tmp_path / "fig.png"
    series = render(PlotSpec(csv=str(csv), kind="trajectory", out=str(out),
                             attack="full", metric="neg_mse", concept="c0"))
    assert out.exists() and out.stat().st_size > 0
    assert series["merged"] == ([0], [0.5])


def test_msgr_bars_arithmetic(tmp_path):
    csv = write_csv(tmp_path / "r.csv", [
        ("g1", "none", "full", "c0", 40, "frozen_encoder_cosine", "none", 0.8),
        ("g1", "merged", "full", "c0", 40, "frozen_encoder_cosine", "immunized", 0.6),
    ])
    out = tmp_path / "bars.png"
    values = render(PlotSpec(csv=str(csv), kind="msgr_bars", out=str(out),
                             attack="full", metric="frozen_encoder_cosine"))
    assert out.exists()
    assert values["merged"] == pytest.approx(0.25, abs=1e-12)


def test_mrsgr_bars_arithmetic(tmp_path):
    csv = write_csv(tmp_path / "r.csv", [
        ("g1", "merged", "full", "c0", 40, "neg_mse", "cross", 0.45),
        ("g1", "merged", "full", "other0", 40, "neg_mse", "cross", 0.9),
    ])
    values = render(PlotSpec(csv=str(csv), kind="mrsgr_bars", out=str(tmp_path / "b.png"),
                             attack="full", metric="neg_mse"))
    assert values["merged"] == pytest.approx(0.5, abs=1e-12)


def test_input_csv_is_never_modified(tmp_path):
    csv = write_csv(tmp_path / "r.csv",
                    [("g1", "merged", "full", "c0", 0, "neg_mse", "immunized", 0.5)])
    before = csv.read_bytes()
    render(PlotSpec(csv=str(csv), kind="trajectory", out=str(tmp_path / "f.png"),
                    concept="c0"))
    assert csv.read_bytes() == before


def test_schema_mismatch(tmp_path):
    bad = tmp_path / "bad.csv"
    bad.write_text("a,b,c\n1,2,3\n", encoding="utf-8")
    with pytest.raises(SchemaMismatch):
        load_rows(bad)


def test_empty_selection(tmp_path):
    csv = write_csv(tmp_path / "r.csv",
                    [("g1", "merged", "full", "c0", 0, "neg_mse", "immunized", 0.5)])
    with pytest.raises(EmptySelection):
        render(PlotSpec(csv=str(csv), kind="trajectory", out=str(tmp_path / "f.png"),
                        concept="c9"))


def test_gap_ratio_scale_invariance(tmp_path):
    base = [
        ("g1", "none", "full", "c0", 40, "neg_mse", "none", 0.75),
        ("g1", "merged", "full", "c0", 40, "neg_mse", "immunized", 0.25),
    ]
    scaled = [r[:7] + (2.0 * r[7],) for r in base]
    a = gap_ratios(load_rows(write_csv(tmp_path / "a.csv", base)), "msgr")
    b = gap_ratios(load_rows(write_csv(tmp_path / "b.csv", scaled)), "msgr")
    assert a == b


def test_cli_render(tmp_path):
    csv = write_csv(tmp_path / "r.csv",
                    [("g1", "merged", "full", "c0", 0, "neg_mse", "immunized", 0.5)])
    out = subprocess.run(
        [sys.executable, "-m", "immuplot.cli", "render", "--csv", str(csv),
         "--kind", "trajectory", "--concept", "c0", "--out", str(tmp_path / "f.png")],
        capture_output=True, text=True,
    )
    assert out.returncode == 0, out.stderr
    assert (tmp_path / "f.png").exists()
    bad = subprocess.run(
        [sys.executable, "-m", "immuplot.cli", "render", "--csv", str(csv),
         "--kind", "trajectory", "--concept", "zz", "--out", str(tmp_path / "g.png")],
        capture_output=True, text=True,
    )
    assert bad.returncode == 1


def test_default_grid_renders_every_cell(tmp_path):
    """Secondary acceptance: run the primary's default 2-concept grid through
    its CLI, then render one trajectory per (attack x metric x concept) plus
    both bar charts per (attack x metric), counted against the manifest."""
    cfg_path = tmp_path / "cfg.json"
    gen = subprocess.run(
        [sys.executable, "-m", "immulab.cli", "gen-config", "--preset", "2concept",
         "--out", str(cfg_path)], capture_output=True, text=True)
    assert gen.returncode == 0, gen.stderr
    raw = json.loads(cfg_path.read_text())
    raw["output_dir"] = str(tmp_path / "out")
    raw["groups"] = raw["groups"][:2]  # two groups keep the fixture affordable
    cfg_path.write_text(json.dumps(raw))
    run = subprocess.run([sys.executable, "-m", "immulab.cli", "run", str(cfg_path)],
                         capture_output=True, text=True)
    assert run.returncode == 0, run.stderr

    manifest = json.loads((tmp_path / "out" / "manifest.json").read_text())
    csv_path = tmp_path / "out" / "results.csv"
    figures = render_grid(csv_path, manifest, tmp_path / "figs")
    concepts = sorted({r.concept for r in load_rows(csv_path)})
    cells = len(manifest["attacks"]) * len(manifest["metrics"])
    expected = cells * (len(concepts) + 2)
    assert len(figures) == expected
    assert all(Path(f).exists() for f in figures)
