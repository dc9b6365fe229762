"""Frame dataset extraction, the on-disk text format, splits, normalization.

A dataset is a table with one row per frame: the network inputs (scalar
controller values and 6D-encoded bone transforms), then the linear baseline
vertex positions, then the final ground-truth positions, both xyz
interleaved.  The text format is deliberately simple so any row can be
inspected or diffed:

    #deformapprox-dataset v1
    elbow_flex:scalar,wrist_twist:scalar,bone0:matrix,bone1:matrix
    vertices=240
    0.0,0.0,...          <- one CSV row per frame

Floats are written with repr(), which round-trips bit-exactly.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .rotation import encode_transform
from .synthrig import Rig, bone_transforms, evaluate_ground_truth, evaluate_linear

logger = logging.getLogger(__name__)

MAGIC_LINE = "#deformapprox-dataset v1"

_FIELD_WIDTH = {"scalar": 1, "matrix": 9}


class DatasetError(ValueError):
    pass


@dataclass
class InputField:
    """One named input column group.  scalar fields occupy one column,
    matrix fields nine (6D rotation plus translation)."""

    name: str
    kind: str

    def __post_init__(self):
        if self.kind not in _FIELD_WIDTH:
            raise DatasetError(f"input field {self.name!r} has unknown kind {self.kind!r}")

    @property
    def width(self) -> int:
        return _FIELD_WIDTH[self.kind]


@dataclass
class Dataset:
    fields: list
    inputs: np.ndarray   # (frames, D)
    linear: np.ndarray   # (frames, N, 3)
    final: np.ndarray    # (frames, N, 3)

    def __post_init__(self):
        self.inputs = np.asarray(self.inputs, dtype=np.float64)
        self.linear = np.asarray(self.linear, dtype=np.float64)
        self.final = np.asarray(self.final, dtype=np.float64)
        if self.inputs.ndim != 2:
            raise DatasetError(f"inputs must be 2d, got shape {self.inputs.shape}")
        width = sum(f.width for f in self.fields)
        if self.inputs.shape[1] != width:
            raise DatasetError(
                f"inputs have {self.inputs.shape[1]} columns but fields declare {width}"
            )
        frames = self.inputs.shape[0]
        for label, arr in (("inputs", self.inputs), ("linear", self.linear),
                           ("final", self.final)):
            if not np.isfinite(arr).all():
                raise DatasetError(f"{label} contain non-finite values")
        for label, arr in (("linear", self.linear), ("final", self.final)):
            if arr.shape != (frames, self.vertex_count, 3):
                raise DatasetError(
                    f"{label} positions shape {arr.shape} does not match "
                    f"({frames}, {self.vertex_count}, 3)"
                )

    @property
    def frame_count(self) -> int:
        return self.inputs.shape[0]

    @property
    def vertex_count(self) -> int:
        return self.linear.shape[1]

    @property
    def input_width(self) -> int:
        return self.inputs.shape[1]

    def residual(self) -> np.ndarray:
        """Learning target: what the linear baseline misses."""
        return self.final - self.linear

    def select(self, indices) -> "Dataset":
        idx = np.asarray(indices, dtype=np.int64)
        return Dataset(list(self.fields), self.inputs[idx], self.linear[idx], self.final[idx])


def default_input_fields(rig: Rig) -> list:
    """Controller scalars first, then one matrix field per bone."""
    fields = [InputField(spec.name, "scalar") for spec in rig.controllers]
    fields.extend(InputField(f"bone{b}", "matrix") for b in range(len(rig.bones)))
    return fields


def frame_inputs(rig: Rig, controls, fields) -> np.ndarray:
    """Resolve one frame's input vector.  matrix fields named boneK pull the
    forward-kinematics transform of bone K."""
    transforms = None
    parts = []
    for f in fields:
        if f.kind == "scalar":
            try:
                parts.append(np.array([float(controls[f.name])]))
            except KeyError:
                raise DatasetError(f"frame is missing controller {f.name!r}") from None
        else:
            if transforms is None:
                transforms = bone_transforms(rig, controls)
            if not f.name.startswith("bone"):
                raise DatasetError(f"matrix field {f.name!r} must be named boneK")
            idx = int(f.name[4:])
            if not 0 <= idx < len(transforms):
                raise DatasetError(f"matrix field {f.name!r} has no matching bone")
            parts.append(encode_transform(transforms[idx]))
    return np.concatenate(parts)


def extract_dataset(rig: Rig, sequence, fields=None) -> Dataset:
    """Run the rig over a control sequence and collect inputs, linear
    baseline, and ground truth for every frame."""
    sequence.validate(rig)
    if fields is None:
        fields = default_input_fields(rig)
    inputs = np.stack([frame_inputs(rig, c, fields) for c in sequence.frames])
    linear = np.stack([evaluate_linear(rig, c) for c in sequence.frames])
    final = np.stack([evaluate_ground_truth(rig, c) for c in sequence.frames])
    logger.info("extracted %d frames, %d inputs, %d vertices",
                inputs.shape[0], inputs.shape[1], linear.shape[1])
    return Dataset(list(fields), inputs, linear, final)


# --- text i/o --------------------------------------------------------------


def _format_row(values) -> str:
    return ",".join(repr(float(v)) for v in values)


def write_dataset(ds: Dataset, path) -> None:
    path = Path(path)
    with path.open("w", encoding="utf-8", newline="\n") as fh:
        fh.write(MAGIC_LINE + "\n")
        fh.write(",".join(f"{f.name}:{f.kind}" for f in ds.fields) + "\n")
        fh.write(f"vertices={ds.vertex_count}\n")
        for i in range(ds.frame_count):
            row = np.concatenate([ds.inputs[i], ds.linear[i].ravel(), ds.final[i].ravel()])
            fh.write(_format_row(row) + "\n")


def _parse_header(lines, path):
    if len(lines) < 3:
        raise DatasetError(f"{path}: truncated header")
    if lines[0].strip() != MAGIC_LINE:
        raise DatasetError(f"{path}: line 1 is not {MAGIC_LINE!r}")
    fields = []
    for token in lines[1].strip().split(","):
        name, sep, kind = token.partition(":")
        if not sep or not name:
            raise DatasetError(f"{path}: line 2: bad field token {token!r}")
        fields.append(InputField(name, kind))
    if not lines[2].strip().startswith("vertices="):
        raise DatasetError(f"{path}: line 3 must be vertices=N")
    try:
        vertices = int(lines[2].strip().removeprefix("vertices="))
    except ValueError:
        raise DatasetError(f"{path}: line 3: bad vertex count") from None
    if vertices < 1:
        raise DatasetError(f"{path}: vertex count must be positive")
    return fields, vertices


def read_dataset(path) -> Dataset:
    path = Path(path)
    lines = path.read_text(encoding="utf-8").splitlines()
    fields, vertices = _parse_header(lines, path)
    width = sum(f.width for f in fields)
    row_len = width + 6 * vertices
    rows = []
    for ln, line in enumerate(lines[3:], start=4):
        if not line.strip():
            continue
        values = line.split(",")
        if len(values) != row_len:
            raise DatasetError(
                f"{path}: line {ln}: expected {row_len} values, got {len(values)}"
            )
        try:
            rows.append(np.array([float(v) for v in values]))
        except ValueError:
            raise DatasetError(f"{path}: line {ln}: non-numeric value") from None
    if not rows:
        raise DatasetError(f"{path}: no frames")
    table = np.stack(rows)
    frames = table.shape[0]
    inputs = table[:, :width]
    linear = table[:, width:width + 3 * vertices].reshape(frames, vertices, 3)
    final = table[:, width + 3 * vertices:].reshape(frames, vertices, 3)
    return Dataset(fields, inputs, linear, final)


def append_frames(path, ds: Dataset) -> None:
    """Append rows to an existing file after checking the header matches."""
    path = Path(path)
    with path.open("r", encoding="utf-8") as fh:
        head = [fh.readline(), fh.readline(), fh.readline()]
    fields, vertices = _parse_header(head, path)
    if [(f.name, f.kind) for f in fields] != [(f.name, f.kind) for f in ds.fields]:
        raise DatasetError(f"{path}: input fields do not match, refusing to append")
    if vertices != ds.vertex_count:
        raise DatasetError(
            f"{path}: file has {vertices} vertices, new frames have {ds.vertex_count}"
        )
    with path.open("a", encoding="utf-8", newline="\n") as fh:
        for i in range(ds.frame_count):
            row = np.concatenate([ds.inputs[i], ds.linear[i].ravel(), ds.final[i].ravel()])
            fh.write(_format_row(row) + "\n")


# --- splits and normalization ---------------------------------------------


def split_indices(frame_count: int, stride: int, offset: int = 0):
    """Every nth frame goes to validation; the rest train."""
    if stride < 2:
        raise DatasetError(f"validation stride must be >= 2, got {stride}")
    if offset < 0:
        raise DatasetError(f"offset must be nonnegative, got {offset}")
    idx = np.arange(frame_count)
    val = idx[(idx - offset) % stride == 0]
    train = idx[(idx - offset) % stride != 0]
    if len(val) <= 1:
        logger.warning("validation split holds %d of %d frames; "
                       "metrics on it will be unstable", len(val), frame_count)
    return train, val


def split_dataset(ds: Dataset, stride: int, offset: int = 0):
    train_idx, val_idx = split_indices(ds.frame_count, stride, offset)
    if len(train_idx) == 0:
        raise DatasetError("split leaves no training frames")
    return ds.select(train_idx), ds.select(val_idx)


@dataclass
class Normalization:
    """Per-feature standardization; ``constant`` flags features whose std
    hit the clamp floor (not persisted in model files)."""

    mean: np.ndarray
    std: np.ndarray
    constant: np.ndarray = None

    def apply(self, x: np.ndarray) -> np.ndarray:
        return (x - self.mean) / self.std

    def invert(self, x: np.ndarray) -> np.ndarray:
        return x * self.std + self.mean


STD_FLOOR = 1e-8


def fit_normalization(x: np.ndarray) -> Normalization:
    """Per-column mean and population (biased) std over training rows only.
    Constant columns are clamped to the 1e-8 floor and flagged; exactly
    constant data still normalizes to zero."""
    x = np.asarray(x, dtype=np.float64)
    if x.shape[0] < 2:
        raise DatasetError("normalization needs at least 2 frames")
    mean = x.mean(axis=0)
    std = x.std(axis=0)
    constant = std < STD_FLOOR
    if constant.any():
        logger.info("clamped %d constant input features", int(constant.sum()))
    return Normalization(mean, np.maximum(std, STD_FLOOR), constant)
