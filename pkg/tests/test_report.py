"""Error fields, heat-map export, metric tables."""

from pathlib import Path

import numpy as np
import pytest

from deformapprox.meshcore import TriMesh
from deformapprox.report import (
    COLOR_RAMP,
    METRICS_HEADER,
    HeatmapSpec,
    MetricsRow,
    ReportError,
    error_field,
    export_heatmap,
    export_metrics,
    ramp_colors,
    read_metrics,
)

GOLDEN = Path(__file__).parent / "data" / "golden_heatmap.ply"


def quad_mesh():
    positions = np.array([[0.0, 0.0, 0.0], [1.0, 0.0, 0.0],
                          [0.0, 1.0, 0.0], [1.0, 1.0, 0.5]])
    return TriMesh(positions, np.array([[0, 1, 2], [1, 3, 2]], dtype=np.int64))


# --- error field -----------------------------------------------------------


def test_error_field_is_euclidean_distance():
    pred = np.array([[3.0, 4.0, 0.0], [1.0, 1.0, 1.0], [0.0, 0.0, 0.0]])
    truth = np.zeros((3, 3))
    np.testing.assert_allclose(error_field(pred, truth),
                               [5.0, np.sqrt(3.0), 0.0], atol=1e-15)


def test_error_field_shape_validation():
    with pytest.raises(ReportError, match="N, 3"):
        error_field(np.zeros((3, 3)), np.zeros((4, 3)))
    with pytest.raises(ReportError, match="N, 3"):
        error_field(np.zeros((3, 2)), np.zeros((3, 2)))


# --- color ramp ------------------------------------------------------------


def test_ramp_hits_all_stops():
    colors = ramp_colors(np.array([0.0, 0.25, 0.5, 0.75, 1.0]), 0.0, 1.0)
    np.testing.assert_array_equal(colors, COLOR_RAMP.astype(np.uint8))


def test_ramp_midpoint_blend():
    colors = ramp_colors(np.array([0.125]), 0.0, 1.0)
    np.testing.assert_array_equal(colors[0], [0, 128, 255])  # blue/cyan average


def test_ramp_clamps_out_of_range():
    colors = ramp_colors(np.array([-2.0, 5.0]), 0.0, 1.0)
    np.testing.assert_array_equal(colors[0], [0, 0, 255])
    np.testing.assert_array_equal(colors[1], [255, 0, 0])


def test_ramp_degenerate_range_paints_low():
    colors = ramp_colors(np.array([3.0, 7.0]), 5.0, 5.0)
    np.testing.assert_array_equal(colors, [[0, 0, 255], [0, 0, 255]])


def test_ramp_monotone_channels():
    colors = ramp_colors(np.linspace(0.0, 1.0, 200), 0.0, 1.0).astype(np.int64)
    assert np.all(np.diff(colors[:, 0]) >= 0)  # red rises
    assert np.all(np.diff(colors[:, 2]) <= 0)  # blue falls


def test_ramp_is_pointwise():
    rng = np.random.default_rng(0)
    field = rng.random(50)
    perm = rng.permutation(50)
    np.testing.assert_array_equal(ramp_colors(field[perm], 0.0, 1.0),
                                  ramp_colors(field, 0.0, 1.0)[perm])


# --- range policy ----------------------------------------------------------


def test_spec_validation():
    with pytest.raises(ReportError, match="lo < hi"):
        HeatmapSpec(fixed_range=(1.0, 1.0))
    with pytest.raises(ReportError, match="percentile"):
        HeatmapSpec(percentile=0.0)
    with pytest.raises(ReportError, match="percentile"):
        HeatmapSpec(percentile=101.0)


def test_percentile_clamp_ignores_outlier():
    field = np.concatenate([np.linspace(0.0, 1.0, 99), [1000.0]])
    lo, hi = HeatmapSpec().resolve_range(field)
    assert lo == 0.0
    assert hi < 20.0  # the spike does not set the scale


def test_fixed_range_passthrough():
    assert HeatmapSpec(fixed_range=(0.5, 2.0)).resolve_range(np.arange(9.0)) == (0.5, 2.0)


def test_constant_field_resolves_degenerate():
    lo, hi = HeatmapSpec().resolve_range(np.full(5, 3.0))
    assert lo == hi == 3.0


# --- heat-map files --------------------------------------------------------


def test_heatmap_structure(tmp_path):
    mesh = quad_mesh()
    path = tmp_path / "map.ply"
    export_heatmap(mesh, np.array([0.0, 0.25, 0.5, 1.0]),
                   HeatmapSpec(fixed_range=(0.0, 1.0)), path)
    lines = path.read_text().splitlines()
    assert lines[0] == "ply"
    assert lines[1] == "format ascii 1.0"
    assert lines[2] == "comment deformapprox heatmap"
    assert "element vertex 4" in lines
    assert "element face 2" in lines
    body = lines[lines.index("end_header") + 1:]
    assert len(body) == 4 + 2
    first = body[0].split()
    assert [float(v) for v in first[:3]] == [0.0, 0.0, 0.0]
    assert [int(v) for v in first[3:]] == [0, 0, 255]
    assert body[4] == "3 0 1 2" and body[5] == "3 1 3 2"


def test_heatmap_validation(tmp_path):
    mesh = quad_mesh()
    with pytest.raises(ReportError, match="does not match"):
        export_heatmap(mesh, np.zeros(3), HeatmapSpec(), tmp_path / "x.ply")
    with pytest.raises(ReportError, match="non-finite"):
        export_heatmap(mesh, np.array([0.0, 1.0, np.nan, 2.0]),
                       HeatmapSpec(), tmp_path / "x.ply")


def test_heatmap_bytes_deterministic(tmp_path):
    mesh = quad_mesh()
    field = np.array([0.0, 0.1, 0.6, 0.9])
    export_heatmap(mesh, field, HeatmapSpec(), tmp_path / "a.ply")
    export_heatmap(mesh, field, HeatmapSpec(), tmp_path / "b.ply")
    assert (tmp_path / "a.ply").read_bytes() == (tmp_path / "b.ply").read_bytes()


def test_heatmap_matches_golden_file(tmp_path):
    path = tmp_path / "map.ply"
    export_heatmap(quad_mesh(), np.array([0.0, 0.25, 0.5, 1.0]),
                   HeatmapSpec(fixed_range=(0.0, 1.0)), path)
    assert path.read_bytes() == GOLDEN.read_bytes()


# --- metrics ---------------------------------------------------------------


def test_metrics_row_invariants():
    MetricsRow(frame=0, rmse=1.0, mean=2.0, max=3.0, p95=1.5)  # mean > p95 legal
    with pytest.raises(ReportError, match="nonnegative"):
        MetricsRow(frame=0, rmse=-1.0, mean=0.0, max=0.0, p95=0.0)
    with pytest.raises(ReportError, match="below p95"):
        MetricsRow(frame=0, rmse=1.0, mean=1.0, max=0.5, p95=1.0)


def test_metrics_round_trip(tmp_path):
    rows = [
        MetricsRow(frame=0, rmse=0.1, mean=0.25 + 1e-17, max=1.0 / 3.0, p95=0.3),
        MetricsRow(frame=-1, rmse=1e-12, mean=0.0, max=2.0, p95=1.9999999999),
    ]
    path = tmp_path / "metrics.csv"
    export_metrics(rows, path)
    back = read_metrics(path)
    assert len(back) == 2
    for a, b in zip(rows, back):
        assert a.frame == b.frame
        assert a.rmse == b.rmse and a.mean == b.mean
        assert a.max == b.max and a.p95 == b.p95


def test_metrics_header_layout(tmp_path):
    path = tmp_path / "metrics.csv"
    export_metrics([], path)
    assert path.read_text() == METRICS_HEADER + "\n"
    assert read_metrics(path) == []


def test_metrics_rejects_missing_header(tmp_path):
    path = tmp_path / "metrics.csv"
    path.write_text("0,1,2,3,4\n")
    with pytest.raises(ReportError, match="header"):
        read_metrics(path)
