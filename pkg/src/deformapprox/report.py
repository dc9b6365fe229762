"""Error fields, colored heat-map meshes, and metric tables.

Heat maps are ASCII PLY with per-vertex uchar RGB so they open in any mesh
viewer.  The color ramp is a fixed 5-stop table (blue, cyan, green, yellow,
red); the range policy is either an explicit [lo, hi] or a percentile clamp
(default p99) so a single bad vertex cannot wash out the map.  All text
output uses shortest round-trip float formatting and is byte-stable for
identical inputs.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .meshcore import TriMesh

logger = logging.getLogger(__name__)

# low to high: blue, cyan, green, yellow, red
COLOR_RAMP = np.array([
    [0, 0, 255],
    [0, 255, 255],
    [0, 255, 0],
    [255, 255, 0],
    [255, 0, 0],
], dtype=np.float64)

METRICS_HEADER = "frame,rmse,mean,max,p95"


class ReportError(ValueError):
    pass


@dataclass
class MetricsRow:
    """Vertex-error statistics for one frame; frame -1 marks an aggregate.

    mean can legitimately exceed p95 when a handful of vertices carry all
    the error, so only max >= p95 and nonnegativity are enforced.
    """

    frame: int
    rmse: float
    mean: float
    max: float
    p95: float

    def __post_init__(self):
        for name in ("rmse", "mean", "max", "p95"):
            if getattr(self, name) < 0:
                raise ReportError(f"{name} must be nonnegative")
        if self.max < self.p95 - 1e-12:
            raise ReportError(f"max {self.max} below p95 {self.p95}")


@dataclass
class HeatmapSpec:
    fixed_range: tuple = None   # (lo, hi); None = percentile clamp
    percentile: float = 99.0

    def __post_init__(self):
        if self.fixed_range is not None:
            lo, hi = self.fixed_range
            if not lo < hi:
                raise ReportError(f"fixed range must have lo < hi, got ({lo}, {hi})")
        if not 0.0 < self.percentile <= 100.0:
            raise ReportError(f"percentile must be in (0, 100], got {self.percentile}")

    def resolve_range(self, field: np.ndarray):
        """May return lo == hi for constant fields; the ramp then paints
        everything the low color."""
        if self.fixed_range is not None:
            return float(self.fixed_range[0]), float(self.fixed_range[1])
        return float(field.min()), float(np.percentile(field, self.percentile))


def error_field(pred_positions, truth_positions) -> np.ndarray:
    pred = np.asarray(pred_positions, dtype=np.float64)
    truth = np.asarray(truth_positions, dtype=np.float64)
    if pred.shape != truth.shape or pred.ndim != 2 or pred.shape[1] != 3:
        raise ReportError(
            f"position arrays must both be (N, 3), got {pred.shape} and {truth.shape}")
    return np.linalg.norm(pred - truth, axis=1)


def ramp_colors(field: np.ndarray, lo: float, hi: float) -> np.ndarray:
    """Map scalars through the 5-stop ramp; values outside [lo, hi] clamp."""
    field = np.asarray(field, dtype=np.float64)
    if hi > lo:
        t = np.clip((field - lo) / (hi - lo), 0.0, 1.0)
    else:
        t = np.zeros_like(field)
    pos = t * (len(COLOR_RAMP) - 1)
    idx = np.minimum(pos.astype(np.int64), len(COLOR_RAMP) - 2)
    frac = (pos - idx)[:, None]
    rgb = COLOR_RAMP[idx] * (1.0 - frac) + COLOR_RAMP[idx + 1] * frac
    return np.round(rgb).astype(np.uint8)


def export_heatmap(mesh: TriMesh, field, spec: HeatmapSpec, path) -> None:
    """ASCII PLY with positions and per-vertex colors, deterministic bytes."""
    field = np.asarray(field, dtype=np.float64)
    if field.shape != (mesh.vertex_count,):
        raise ReportError(
            f"field length {field.shape} does not match {mesh.vertex_count} vertices")
    if not np.isfinite(field).all():
        raise ReportError("field contains non-finite values")
    lo, hi = spec.resolve_range(field)
    colors = ramp_colors(field, lo, hi)
    path = Path(path)
    with path.open("w", encoding="ascii", newline="\n") as fh:
        fh.write("ply\n")
        fh.write("format ascii 1.0\n")
        fh.write("comment deformapprox heatmap\n")
        fh.write(f"element vertex {mesh.vertex_count}\n")
        fh.write("property float x\n")
        fh.write("property float y\n")
        fh.write("property float z\n")
        fh.write("property uchar red\n")
        fh.write("property uchar green\n")
        fh.write("property uchar blue\n")
        fh.write(f"element face {len(mesh.triangles)}\n")
        fh.write("property list uchar int vertex_indices\n")
        fh.write("end_header\n")
        for p, c in zip(mesh.positions, colors):
            fh.write(f"{float(p[0])!r} {float(p[1])!r} {float(p[2])!r} "
                     f"{int(c[0])} {int(c[1])} {int(c[2])}\n")
        for t in mesh.triangles:
            fh.write(f"3 {int(t[0])} {int(t[1])} {int(t[2])}\n")
    logger.info("wrote heatmap %s (range %.4g..%.4g)", path, lo, hi)


def export_metrics(rows, path) -> None:
    path = Path(path)
    with path.open("w", encoding="ascii", newline="\n") as fh:
        fh.write(METRICS_HEADER + "\n")
        for r in rows:
            fh.write(f"{int(r.frame)},{float(r.rmse)!r},{float(r.mean)!r},"
                     f"{float(r.max)!r},{float(r.p95)!r}\n")


def read_metrics(path) -> list:
    lines = Path(path).read_text(encoding="ascii").splitlines()
    if not lines or lines[0] != METRICS_HEADER:
        raise ReportError(f"{path}: missing metrics header")
    rows = []
    for line in lines[1:]:
        if not line.strip():
            continue
        f, rmse, mean, mx, p95 = line.split(",")
        rows.append(MetricsRow(int(f), float(rmse), float(mean), float(mx), float(p95)))
    return rows
