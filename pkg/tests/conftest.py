"""Shared fixtures: the two synthetic rigs, a small extracted clip, and a
factory for random connected triangle meshes."""

import numpy as np
import pytest
from scipy.spatial import Delaunay

from deformapprox.dataset import extract_dataset
from deformapprox.meshcore import TriMesh
from deformapprox.synthrig import generate_arm_rig, generate_face_rig, sample_animation


def _random_connected_mesh(rng, n_points):
    """Delaunay triangulation of random planar points with random heights.
    Every point becomes a triangulation vertex, so the edge graph is
    connected by construction."""
    pts = rng.random((n_points, 2))
    tri = Delaunay(pts)
    positions = np.column_stack([pts, 0.3 * rng.standard_normal(n_points)])
    return TriMesh(positions, tri.simplices.astype(np.int64))


@pytest.fixture(scope="session")
def mesh_factory():
    return _random_connected_mesh


@pytest.fixture(scope="session")
def arm_rig():
    return generate_arm_rig()


@pytest.fixture(scope="session")
def face_rig():
    return generate_face_rig()


@pytest.fixture(scope="session")
def arm_clip(arm_rig):
    """60-frame clip dataset with the default input fields."""
    return extract_dataset(arm_rig, sample_animation(arm_rig, 60, "clip"))
