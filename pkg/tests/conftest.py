import numpy as np
import pytest
import torch

from proxytex.geometry import CameraIntrinsics, Pose, ProxyMesh


@pytest.fixture(autouse=True)
def _fixed_torch_threads():
    torch.set_num_threads(2)


@pytest.fixture
def intrinsics_128():
    return CameraIntrinsics(
        focal_x=100.0, focal_y=100.0, principal_x=64.0, principal_y=64.0,
        width=128, height=128, near=1.0, far=4.0,
    )


@pytest.fixture
def full_frame_quad():
    """Fronto-parallel quad at z = 2.5 covering the whole 128x128 frame."""
    return ProxyMesh(
        vertices=[[-2, -2, 2.5], [2, -2, 2.5], [2, 2, 2.5], [-2, 2, 2.5]],
        triangles=[[0, 1, 2], [0, 2, 3]],
        uvs=[[0, 0], [1, 0], [1, 1], [0, 1]],
    )


def quad_at(z: float, half: float = 1.0) -> ProxyMesh:
    return ProxyMesh(
        vertices=[[-half, -half, z], [half, -half, z],
                  [half, half, z], [-half, half, z]],
        triangles=[[0, 1, 2], [0, 2, 3]],
        uvs=[[0, 0], [1, 0], [1, 1], [0, 1]],
    )


def random_pose(rng: np.random.Generator) -> Pose:
    """Random orthonormal camera-from-world pose via QR."""
    m = rng.standard_normal((3, 3))
    q, r = np.linalg.qr(m)
    q *= np.sign(np.diag(r))
    if np.linalg.det(q) < 0:
        q[:, 0] = -q[:, 0]
    return Pose(rotation=q, translation=rng.uniform(-0.5, 0.5, 3))
