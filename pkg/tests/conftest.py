import numpy as np
import pytest

from vecmap.map_model import (
    OPEN,
    LocalMap,
    PerceptionRange,
    Polyline,
    RigidTransform,
)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def random_polyline(rng, n_points, kind=OPEN, span=10.0, center=(0.0, 0.0)):
    """Random polyline with distinct consecutive points."""
    pts = rng.uniform(-span, span, size=(n_points, 2)) + np.asarray(center)
    while np.any(np.all(np.diff(pts, axis=0) == 0.0, axis=1)):
        pts = rng.uniform(-span, span, size=(n_points, 2)) + np.asarray(center)
    return Polyline(pts, kind)


def random_rigid(rng, max_shift=5.0, max_yaw=np.pi):
    dx, dy = rng.uniform(-max_shift, max_shift, size=2)
    yaw = rng.uniform(-max_yaw, max_yaw)
    return RigidTransform.from_xytheta(dx, dy, yaw)


def make_map(frame_id, instances, x_half=50.0, y_half=25.0, timestamp=0.0,
             pose=None):
    return LocalMap(
        frame_id=frame_id,
        timestamp=timestamp,
        ego_pose=pose or RigidTransform.identity(),
        instances=tuple(instances),
        range=PerceptionRange(x_half, y_half),
    )
