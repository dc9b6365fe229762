"""Procedural ground-truth rigs with a known linear-blend-skinning baseline.

Two rig families:

* arm: a cylinder along +x with two bones split at the elbow (x = 1).
  Controllers are ``elbow_flex`` (rotation about z at the elbow) and
  ``wrist_twist`` (rotation of the forearm about its own axis).  The linear
  baseline is plain LBS and shows the classic candy-wrapper collapse under
  twist; the ground truth distributes the twist per vertex with a smoothstep
  falloff and adds an elbow bulge, so the residual is smooth and nonlinear.

* face: a planar grid driven by scalar controllers in [0, 1].  Height is a
  sum of seeded Gaussian bumps plus pairwise controller products, so no
  single linear blendshape basis can represent it.  The linear baseline is
  the first-order term only; the residual is exactly the cross terms.

All corrective constants live in ``Rig.corrective_params`` and are pinned at
rig generation time, making every downstream number reproducible from the
rig file alone.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .meshcore import TriMesh
from .rotation import BoneTransform, rotation_about_axis

logger = logging.getLogger(__name__)

ARM_RADIUS = 0.25
ARM_LENGTH = 2.0
ELBOW_X = 1.0

# derivation of the golden-angle frequency ladder for clip sweeps
_GOLDEN = (1.0 + np.sqrt(5.0)) / 2.0
_CLIP_BASE_FRAMES = 120.0


class RigError(ValueError):
    pass


class MissingControllerError(RigError):
    def __init__(self, name: str):
        super().__init__(f"missing value for controller {name!r}")


@dataclass
class ControllerSpec:
    name: str
    kind: str  # "scalar" | "matrix"
    range: tuple[float, float]

    def __post_init__(self):
        lo, hi = self.range
        if not (np.isfinite(lo) and np.isfinite(hi) and lo < hi):
            raise RigError(f"controller {self.name!r} needs a finite range with min < max")
        if self.kind not in ("scalar", "matrix"):
            raise RigError(f"controller {self.name!r} has unknown kind {self.kind!r}")

    @property
    def neutral(self) -> float:
        """Zero clamped into range: the value at which correctives vanish."""
        lo, hi = self.range
        return float(min(max(0.0, lo), hi))


@dataclass
class Rig:
    kind: str
    rest_mesh: TriMesh
    bones: list
    skin_weights: np.ndarray
    controllers: list
    corrective_params: dict = field(default_factory=dict)

    def __post_init__(self):
        w = np.asarray(self.skin_weights, dtype=np.float64)
        if w.shape != (self.rest_mesh.vertex_count, len(self.bones)):
            raise RigError(
                f"skin weights shape {w.shape} does not match "
                f"{self.rest_mesh.vertex_count} vertices x {len(self.bones)} bones"
            )
        if (w < 0).any():
            raise RigError("skin weights must be nonnegative")
        row_err = np.abs(w.sum(axis=1) - 1.0).max()
        if row_err > 1e-9:
            raise RigError(f"skin weight rows must sum to 1 (max deviation {row_err:.3g})")
        self.skin_weights = w

    def controller(self, name: str) -> ControllerSpec:
        for spec in self.controllers:
            if spec.name == name:
                return spec
        raise RigError(f"rig has no controller named {name!r}")

    def controller_names(self) -> list:
        return [spec.name for spec in self.controllers]


@dataclass
class ControlSequence:
    """Per-frame controller values.  Values outside the declared ranges are
    only legal when ``allow_out_of_range`` is set (uncertainty probes)."""

    frames: list
    frame_rate: float = 24.0
    allow_out_of_range: bool = False

    def __len__(self) -> int:
        return len(self.frames)

    def validate(self, rig: Rig) -> None:
        if self.allow_out_of_range:
            return
        for i, controls in enumerate(self.frames):
            for spec in rig.controllers:
                v = controls.get(spec.name)
                if v is None:
                    raise MissingControllerError(spec.name)
                lo, hi = spec.range
                if not (lo - 1e-12 <= v <= hi + 1e-12):
                    raise RigError(
                        f"frame {i}: controller {spec.name!r} value {v} outside [{lo}, {hi}]"
                    )


def smoothstep(t: np.ndarray) -> np.ndarray:
    t = np.clip(t, 0.0, 1.0)
    return t * t * (3.0 - 2.0 * t)


def _control_value(controls, name: str) -> float:
    try:
        return float(controls[name])
    except KeyError:
        raise MissingControllerError(name) from None


# --- arm rig ---------------------------------------------------------------


def generate_arm_rig(segments: int = 20, radial: int = 12) -> Rig:
    """Cylinder along +x, length 2, two bones split at the elbow.

    segments x radial grid, no cap vertices.  Skin weight of the forearm
    bone ramps with a smoothstep over x in [0.8, 1.2]; the same band drives
    the ground-truth twist falloff.
    """
    if segments < 8:
        raise RigError(f"segments must be >= 8, got {segments}")
    if radial < 8:
        raise RigError(f"radial must be >= 8, got {radial}")
    xs = np.linspace(0.0, ARM_LENGTH, segments)
    angles = 2.0 * np.pi * np.arange(radial) / radial
    positions = np.empty((segments * radial, 3))
    for i, x in enumerate(xs):
        rows = slice(i * radial, (i + 1) * radial)
        positions[rows, 0] = x
        positions[rows, 1] = ARM_RADIUS * np.cos(angles)
        positions[rows, 2] = ARM_RADIUS * np.sin(angles)
    triangles = []
    for i in range(segments - 1):
        for k in range(radial):
            a = i * radial + k
            b = i * radial + (k + 1) % radial
            c = (i + 1) * radial + k
            d = (i + 1) * radial + (k + 1) % radial
            triangles.append((a, c, d))
            triangles.append((a, d, b))
    mesh = TriMesh(positions, np.array(triangles, dtype=np.int64))

    band_lo, band_hi = 0.8, 1.2
    w1 = smoothstep((positions[:, 0] - band_lo) / (band_hi - band_lo))
    weights = np.column_stack([1.0 - w1, w1])
    bones = [
        BoneTransform(np.eye(3), np.zeros(3)),
        BoneTransform(np.eye(3), np.array([ELBOW_X, 0.0, 0.0])),
    ]
    controllers = [
        ControllerSpec("elbow_flex", "scalar", (0.0, 2.4)),
        ControllerSpec("wrist_twist", "scalar", (-np.pi, np.pi)),
    ]
    params = {
        "twist_band_lo": band_lo,
        "twist_band_hi": band_hi,
        "bulge_amp": 0.3,
        "bulge_var": 0.08,
        "elbow_x": ELBOW_X,
    }
    return Rig("arm", mesh, bones, weights, controllers, params)


def bone_transforms(rig: Rig, controls) -> list:
    """Forward-kinematics world transforms of every bone, baseline flavor
    (the wrist twist is part of the forearm bone transform here)."""
    if rig.kind == "arm":
        theta = _control_value(controls, "elbow_flex")
        phi = _control_value(controls, "wrist_twist")
        elbow = np.array([rig.corrective_params["elbow_x"], 0.0, 0.0])
        rot = rotation_about_axis((0, 0, 1), theta) @ rotation_about_axis((1, 0, 0), phi)
        return [
            BoneTransform(np.eye(3), np.zeros(3)),
            BoneTransform(rot, elbow - rot @ elbow),
        ]
    if rig.kind == "face":
        return [BoneTransform(np.eye(3), np.zeros(3))]
    raise RigError(f"unknown rig kind {rig.kind!r}")


def _truth_bone_transforms(rig: Rig, controls) -> list:
    # ground-truth FK: the twist is already baked into the vertices by the
    # per-vertex corrective, so the forearm bone carries only the flex
    theta = _control_value(controls, "elbow_flex")
    _control_value(controls, "wrist_twist")
    elbow = np.array([rig.corrective_params["elbow_x"], 0.0, 0.0])
    rot = rotation_about_axis((0, 0, 1), theta)
    return [
        BoneTransform(np.eye(3), np.zeros(3)),
        BoneTransform(rot, elbow - rot @ elbow),
    ]


def _lbs(rig: Rig, transforms, positions: np.ndarray) -> np.ndarray:
    out = np.zeros_like(positions)
    for b, t in enumerate(transforms):
        out += rig.skin_weights[:, b:b + 1] * t.apply(positions)
    return out


def _face_fields(rig: Rig):
    """Seeded Gaussian bump fields, rebuilt deterministically from the pinned
    scalar params.  Returns (singles (K, N), pairs ((k, j) -> (N,)))."""
    p = rig.corrective_params
    uv = rig.rest_mesh.positions[:, :2]
    n_bumps = int(p["bumps"])
    rng = np.random.default_rng(int(p["bump_seed"]))
    two_var = 2.0 * p["bump_sigma"] ** 2

    def bump():
        center = rng.uniform(p["center_lo"], p["center_hi"], size=2)
        amp = rng.uniform(p["amp_lo"], p["amp_hi"])
        d2 = ((uv - center) ** 2).sum(axis=1)
        return amp * np.exp(-d2 / two_var)

    singles = np.stack([bump() for _ in range(n_bumps)])
    pairs = {}
    for k in range(n_bumps):
        for j in range(k + 1, n_bumps):
            pairs[(k, j)] = bump()
    return singles, pairs


def generate_face_rig(grid: int = 24, bumps: int = 6) -> Rig:
    """Planar grid mesh with scalar controllers driving Gaussian height bumps.

    The second-order controller products in the ground truth are the point:
    they keep the deformation out of reach of any linear blendshape basis.
    """
    if grid < 16:
        raise RigError(f"grid must be >= 16, got {grid}")
    if not 2 <= bumps <= 16:
        raise RigError(f"bumps must be in [2, 16], got {bumps}")
    u = np.linspace(0.0, 1.0, grid)
    uu, vv = np.meshgrid(u, u, indexing="ij")
    positions = np.column_stack([uu.ravel(), vv.ravel(), np.zeros(grid * grid)])
    triangles = []
    for i in range(grid - 1):
        for j in range(grid - 1):
            a = i * grid + j
            b = i * grid + j + 1
            c = (i + 1) * grid + j
            d = (i + 1) * grid + j + 1
            triangles.append((a, c, d))
            triangles.append((a, d, b))
    mesh = TriMesh(positions, np.array(triangles, dtype=np.int64))
    bones = [BoneTransform(np.eye(3), np.zeros(3))]
    weights = np.ones((mesh.vertex_count, 1))
    controllers = [ControllerSpec(f"c{k}", "scalar", (0.0, 1.0)) for k in range(bumps)]
    params = {
        "bumps": float(bumps),
        "bump_seed": 1723.0,
        "bump_sigma": 0.15,
        "center_lo": 0.15,
        "center_hi": 0.85,
        "amp_lo": 0.08,
        "amp_hi": 0.2,
        "pair_scale": 0.5,
    }
    return Rig("face", mesh, bones, weights, controllers, params)


def evaluate_linear(rig: Rig, controls) -> np.ndarray:
    """The automatically built linear baseline.

    arm: standard LBS over the FK transforms.  face: rest plus the
    first-order controller term (the best any blendshape stack can do).
    """
    if rig.kind == "arm":
        return _lbs(rig, bone_transforms(rig, controls), rig.rest_mesh.positions)
    if rig.kind == "face":
        singles, _ = _face_fields(rig)
        c = np.array([_control_value(controls, s.name) for s in rig.controllers])
        out = rig.rest_mesh.positions.copy()
        out[:, 2] += c @ singles
        return out
    raise RigError(f"unknown rig kind {rig.kind!r}")


def evaluate_ground_truth(rig: Rig, controls) -> np.ndarray:
    """Deterministic nonlinear target the networks must learn."""
    if rig.kind == "arm":
        p = rig.corrective_params
        pos = rig.rest_mesh.positions
        x = pos[:, 0]
        s = smoothstep((x - p["twist_band_lo"]) / (p["twist_band_hi"] - p["twist_band_lo"]))
        phi = _control_value(controls, "wrist_twist")
        theta = _control_value(controls, "elbow_flex")
        # per-vertex twist about the forearm axis, before FK
        alpha = phi * s
        cos_a, sin_a = np.cos(alpha), np.sin(alpha)
        twisted = pos.copy()
        twisted[:, 1] = cos_a * pos[:, 1] - sin_a * pos[:, 2]
        twisted[:, 2] = sin_a * pos[:, 1] + cos_a * pos[:, 2]
        # elbow bulge: radial scale in the rest pose
        scale = 1.0 + p["bulge_amp"] * np.sin(theta / 2.0) * np.exp(
            -((x - p["elbow_x"]) ** 2) / p["bulge_var"]
        )
        twisted[:, 1] *= scale
        twisted[:, 2] *= scale
        return _lbs(rig, _truth_bone_transforms(rig, controls), twisted)
    if rig.kind == "face":
        singles, pairs = _face_fields(rig)
        c = np.array([_control_value(controls, s.name) for s in rig.controllers])
        out = rig.rest_mesh.positions.copy()
        z = c @ singles
        pair_scale = rig.corrective_params["pair_scale"]
        for (k, j), h in pairs.items():
            z = z + pair_scale * c[k] * c[j] * h
        out[:, 2] += z
        return out
    raise RigError(f"unknown rig kind {rig.kind!r}")


# --- pose samplers ---------------------------------------------------------


def sample_animation(rig: Rig, frames: int, mode: str = "clip", seed: int = 0,
                     frame_rate: float = 24.0) -> ControlSequence:
    """Deterministic controller sequences.

    clip: sinusoidal sweeps at golden-ratio frequency multiples (controller j
    completes ~1.618*(j+1) cycles per 120 frames), phase 0 at frame 0 so the
    first frame of every clip is the neutral pose.  random: i.i.d. uniform
    over each controller range.
    """
    if frames < 1:
        raise RigError(f"frames must be >= 1, got {frames}")
    if mode == "clip":
        rows = []
        for i in range(frames):
            controls = {}
            for j, spec in enumerate(rig.controllers):
                lo, hi = spec.range
                n = spec.neutral
                u = np.sin(2.0 * np.pi * _GOLDEN * (j + 1) * i / _CLIP_BASE_FRAMES)
                v = n + max(u, 0.0) * (hi - n) + min(u, 0.0) * (n - lo)
                controls[spec.name] = float(v)
            rows.append(controls)
        return ControlSequence(rows, frame_rate)
    if mode == "random":
        rng = np.random.default_rng(seed)
        rows = []
        for _ in range(frames):
            controls = {
                spec.name: float(rng.uniform(spec.range[0], spec.range[1]))
                for spec in rig.controllers
            }
            rows.append(controls)
        return ControlSequence(rows, frame_rate)
    raise RigError(f"unknown sampling mode {mode!r}")


def extreme_pose_sequence(rig: Rig, scale: float = 1.25) -> ControlSequence:
    """Out-of-range probe poses: every controller at scale * max together,
    then each controller pushed there alone.  Flagged out-of-range."""
    all_high = {spec.name: scale * spec.range[1] for spec in rig.controllers}
    rows = [all_high]
    for spec in rig.controllers:
        pose = {s.name: s.neutral for s in rig.controllers}
        pose[spec.name] = scale * spec.range[1]
        rows.append(pose)
    return ControlSequence(rows, allow_out_of_range=True)


# --- serialization ---------------------------------------------------------


def save_rig(rig: Rig, path, mesh_path) -> None:
    """Rig JSON next to an OBJ holding the rest mesh; mesh path stored
    relative to the rig file."""
    from .meshcore import write_obj

    path = Path(path)
    mesh_path = Path(mesh_path)
    write_obj(rig.rest_mesh, mesh_path)
    try:
        mesh_ref = mesh_path.relative_to(path.parent)
    except ValueError:
        mesh_ref = mesh_path
    doc = {
        "kind": rig.kind,
        "mesh": str(mesh_ref),
        "bones": [
            {
                "rotation": [float(v) for v in b.rotation.ravel()],
                "translation": [float(v) for v in b.translation],
            }
            for b in rig.bones
        ],
        "skin_weights": [[float(v) for v in row] for row in rig.skin_weights],
        "controllers": [
            {"name": s.name, "kind": s.kind, "range": [float(s.range[0]), float(s.range[1])]}
            for s in rig.controllers
        ],
        "corrective_params": {k: float(v) for k, v in sorted(rig.corrective_params.items())},
    }
    path.write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def load_rig(path) -> Rig:
    from .meshcore import read_obj

    path = Path(path)
    doc = json.loads(path.read_text(encoding="utf-8"))
    mesh = read_obj(path.parent / doc["mesh"])
    bones = [
        BoneTransform(np.array(b["rotation"]).reshape(3, 3), np.array(b["translation"]))
        for b in doc["bones"]
    ]
    controllers = [
        ControllerSpec(c["name"], c["kind"], (c["range"][0], c["range"][1]))
        for c in doc["controllers"]
    ]
    return Rig(
        doc["kind"],
        mesh,
        bones,
        np.array(doc["skin_weights"]),
        controllers,
        dict(doc["corrective_params"]),
    )
