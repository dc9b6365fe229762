"""Continuous 6D rotation encoding plus bone transform packing.

The 6D code of a rotation matrix is its first two columns, flattened
column-major (x column then y column).  Decoding runs Gram-Schmidt on the
two vectors and completes the frame with a cross product, so any pair of
non-degenerate vectors maps to a proper rotation.  This ordering is fixed
globally; checkpoints and model bundles record it as ``ROT6D_ORDER`` so
datasets and models can never disagree.

Euler and quaternion encoders live here too, but only as labeled bad
baselines for the discontinuity regression tests.  They are not part of the
pipeline.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

ROT6D_ORDER = "cols-xy"

_ORTHO_TOL = 1e-6
_DEGENERATE_NORM = 1e-8


class RotationError(ValueError):
    pass


@dataclass
class BoneTransform:
    """3x3 rotation plus translation, scene units."""

    rotation: np.ndarray
    translation: np.ndarray

    def __post_init__(self):
        self.rotation = np.asarray(self.rotation, dtype=np.float64)
        self.translation = np.asarray(self.translation, dtype=np.float64)
        if self.rotation.shape != (3, 3):
            raise RotationError(f"rotation must be 3x3, got {self.rotation.shape}")
        if self.translation.shape != (3,):
            raise RotationError(f"translation must be a 3-vector, got {self.translation.shape}")
        _require_orthonormal(self.rotation)

    def apply(self, points: np.ndarray) -> np.ndarray:
        return points @ self.rotation.T + self.translation

    @classmethod
    def identity(cls) -> "BoneTransform":
        return cls(np.eye(3), np.zeros(3))


def _require_orthonormal(matrix: np.ndarray) -> None:
    err = np.abs(matrix.T @ matrix - np.eye(3)).max()
    if err > _ORTHO_TOL:
        raise RotationError(f"matrix is not orthonormal (max deviation {err:.3g})")
    if np.linalg.det(matrix) < 0:
        raise RotationError("matrix has negative determinant (reflection, not rotation)")


def encode_6d(matrix) -> np.ndarray:
    """First two columns of a rotation matrix, x column then y column."""
    m = np.asarray(matrix, dtype=np.float64)
    if m.shape != (3, 3):
        raise RotationError(f"expected a 3x3 matrix, got shape {m.shape}")
    _require_orthonormal(m)
    return np.concatenate([m[:, 0], m[:, 1]])


def decode_6d(code) -> np.ndarray:
    """Gram-Schmidt the two stored vectors back into a proper rotation."""
    r = np.asarray(code, dtype=np.float64).reshape(6)
    v1, v2 = r[:3], r[3:]
    n1 = np.linalg.norm(v1)
    if n1 <= _DEGENERATE_NORM:
        raise RotationError("6D code has a near-zero first vector")
    b1 = v1 / n1
    u2 = v2 - (b1 @ v2) * b1
    n2 = np.linalg.norm(u2)
    if n2 <= _DEGENERATE_NORM:
        raise RotationError("6D code vectors are (near) parallel")
    b2 = u2 / n2
    b3 = np.cross(b1, b2)
    return np.column_stack([b1, b2, b3])


def encode_transform(transform: BoneTransform) -> np.ndarray:
    """Canonical 9-scalar expansion of a matrix attribute: 6D code then translation."""
    return np.concatenate([encode_6d(transform.rotation), transform.translation])


def rotation_about_axis(axis, angle: float) -> np.ndarray:
    """Rodrigues rotation about a (normalized internally) axis."""
    a = np.asarray(axis, dtype=np.float64)
    a = a / np.linalg.norm(a)
    k = np.array(
        [[0.0, -a[2], a[1]], [a[2], 0.0, -a[0]], [-a[1], a[0], 0.0]]
    )
    return np.eye(3) + np.sin(angle) * k + (1.0 - np.cos(angle)) * (k @ k)


def random_rotation(rng: np.random.Generator) -> np.ndarray:
    """Uniform random rotation via QR of a Gaussian matrix, sign-fixed."""
    q, r = np.linalg.qr(rng.standard_normal((3, 3)))
    q = q * np.sign(np.diag(r))
    if np.linalg.det(q) < 0:
        q[:, 2] = -q[:, 2]
    return q


# --- bad baselines (test-only, deliberately discontinuous) ----------------


def encode_euler_baseline(matrix) -> np.ndarray:
    """ZYX Euler angles.  Discontinuous at the +-pi wraparound; kept only so
    tests can demonstrate why the pipeline does not use it."""
    m = np.asarray(matrix, dtype=np.float64)
    sy = -m[2, 0]
    sy = np.clip(sy, -1.0, 1.0)
    pitch = np.arcsin(sy)
    yaw = np.arctan2(m[1, 0], m[0, 0])
    roll = np.arctan2(m[2, 1], m[2, 2])
    return np.array([yaw, pitch, roll])


def encode_quaternion_baseline(matrix) -> np.ndarray:
    """Unit quaternion (w, x, y, z).  Double cover makes it ambiguous; same
    test-only status as the Euler baseline."""
    m = np.asarray(matrix, dtype=np.float64)
    tr = np.trace(m)
    if tr > 0:
        s = np.sqrt(tr + 1.0) * 2
        q = np.array(
            [0.25 * s, (m[2, 1] - m[1, 2]) / s, (m[0, 2] - m[2, 0]) / s, (m[1, 0] - m[0, 1]) / s]
        )
    else:
        i = int(np.argmax(np.diag(m)))
        j, k = (i + 1) % 3, (i + 2) % 3
        s = np.sqrt(m[i, i] - m[j, j] - m[k, k] + 1.0) * 2
        q = np.empty(4)
        q[0] = (m[k, j] - m[j, k]) / s
        q[1 + i] = 0.25 * s
        q[1 + j] = (m[j, i] + m[i, j]) / s
        q[1 + k] = (m[k, i] + m[i, k]) / s
    return q
