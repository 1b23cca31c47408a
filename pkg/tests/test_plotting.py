import xml.etree.ElementTree as ET

import pytest

from ctp.plotting import PlotError, heatmap_svg, line_svg, plot_heatmap, read_rows

GRID = [{"lam": str(l), "p": str(p), "mean": str(0.4 + l + p / 10)} for l in (0.1, 0.3, 0.5) for p in (0.1, 0.3)]


def test_heatmap_is_valid_svg_with_one_cell_per_row():
    svg = heatmap_svg(GRID, "lam", "p", title="grid & sweep")
    root = ET.fromstring(svg)
    rects = [e for e in root.iter() if e.tag.endswith("rect")]
    assert len(rects) == 1 + len(GRID)
    assert "grid &amp; sweep" in svg


def test_heatmap_extremes_get_extreme_colours():
    svg = heatmap_svg(GRID, "lam", "p")
    assert 'fill="#ffffff"' in svg and 'fill="#a50000"' in svg


def test_heatmap_missing_column():
    with pytest.raises(PlotError, match="column"):
        heatmap_svg(GRID, "lam", "q")


def test_line_chart_has_one_polyline_per_series():
    a = [{"k": "1", "mean": "0.5"}, {"k": "3", "mean": "0.6"}]
    b = [{"k": "1", "mean": "0.4"}, {"k": "3", "mean": "0.45"}]
    root = ET.fromstring(line_svg({"model": a, "ablation": b}, "k"))
    assert len([e for e in root.iter() if e.tag.endswith("polyline")]) == 2
    with pytest.raises(PlotError):
        line_svg({}, "k")
    with pytest.raises(PlotError, match="non-numeric"):
        line_svg({"x": [{"k": "a", "mean": "1"}]}, "k")


def test_read_rows_and_file_output(tmp_path):
    csv = tmp_path / "s.csv"
    csv.write_text("lam,p,mean\n0.1,0.1,0.5\n")
    assert read_rows(csv) == [{"lam": "0.1", "p": "0.1", "mean": "0.5"}]
    plot_heatmap(csv, tmp_path / "o.svg")
    ET.parse(tmp_path / "o.svg")
    (tmp_path / "e.csv").write_text("lam,p,mean\n")
    with pytest.raises(PlotError, match="no data rows"):
        read_rows(tmp_path / "e.csv")
