"""SE(3) pose algebra, the 10D waypoint codec, interpolation, and stitching.

Conventions: rotations are 3x3 matrices; the 6D rotation code is the first
two *columns* of the matrix, concatenated column-major, and is decoded with
Gram-Schmidt plus a cross-product third column. All functions are pure.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ContractError, GeometryError

ORTHO_TOL = 1e-6
DEFAULT_HORIZON = 16


def _orthonormality_error(r: np.ndarray) -> float:
    return float(np.abs(r.T @ r - np.eye(3)).max())


def polar_project(r: np.ndarray) -> np.ndarray:
    """Closest rotation matrix in Frobenius norm (polar decomposition)."""
    u, _, vt = np.linalg.svd(r)
    out = u @ vt
    if np.linalg.det(out) < 0:
        u[:, -1] *= -1
        out = u @ vt
    return out


@dataclass(frozen=True)
class Pose:
    """Rigid transform: 3x3 rotation plus position in meters.

    Inputs within ORTHO_TOL of orthonormal are re-projected onto SO(3);
    anything worse is rejected.
    """

    rotation: np.ndarray
    position: np.ndarray

    def __post_init__(self):
        r = np.asarray(self.rotation, dtype=np.float64)
        p = np.asarray(self.position, dtype=np.float64).reshape(3)
        if r.shape != (3, 3):
            raise GeometryError(f"rotation must be 3x3, got {r.shape}")
        if not (np.all(np.isfinite(r)) and np.all(np.isfinite(p))):
            raise GeometryError("non-finite pose components")
        err = _orthonormality_error(r)
        if err > ORTHO_TOL or abs(np.linalg.det(r) - 1.0) > ORTHO_TOL:
            raise GeometryError("rotation is not orthonormal within tolerance")
        if err > 1e-12:
            # re-project only when needed so exact rotations stay bit-stable
            r = polar_project(r)
        object.__setattr__(self, "rotation", r)
        object.__setattr__(self, "position", p)

    @staticmethod
    def identity() -> "Pose":
        return Pose(np.eye(3), np.zeros(3))

    def matrix(self) -> np.ndarray:
        m = np.eye(4)
        m[:3, :3] = self.rotation
        m[:3, 3] = self.position
        return m

    @staticmethod
    def from_matrix(m: np.ndarray) -> "Pose":
        m = np.asarray(m, dtype=np.float64)
        if m.shape != (4, 4):
            raise GeometryError(f"expected 4x4 matrix, got {m.shape}")
        return Pose(m[:3, :3], m[:3, 3])

    def compose(self, other: "Pose") -> "Pose":
        return Pose(self.rotation @ other.rotation,
                    self.rotation @ other.position + self.position)

    def inverse(self) -> "Pose":
        rt = self.rotation.T
        return Pose(rt, -rt @ self.position)


def relative_pose(t_cur: Pose, t_fut: Pose) -> Pose:
    """Rigid motion from ``t_cur`` to ``t_fut`` in the current frame."""
    return t_cur.inverse().compose(t_fut)


def rot6d_encode(r: np.ndarray) -> np.ndarray:
    """First two columns of the rotation, concatenated column-major."""
    r = np.asarray(r, dtype=np.float64)
    if _orthonormality_error(r) > ORTHO_TOL:
        raise GeometryError("rot6d_encode: input is not a rotation")
    return np.concatenate([r[:, 0], r[:, 1]])


def rot6d_decode(r6: np.ndarray) -> np.ndarray:
    """Gram-Schmidt reconstruction: b1 = norm(a1), b2 ⟂ b1, b3 = b1 x b2."""
    r6 = np.asarray(r6, dtype=np.float64).reshape(6)
    a1, a2 = r6[:3], r6[3:]
    n1 = np.linalg.norm(a1)
    if n1 <= 1e-8:
        raise GeometryError("rot6d_decode: first vector is degenerate")
    b1 = a1 / n1
    a2p = a2 - (a2 @ b1) * b1
    n2 = np.linalg.norm(a2p)
    if n2 <= 1e-8:
        raise GeometryError("rot6d_decode: vectors are parallel")
    b2 = a2p / n2
    b3 = np.cross(b1, b2)
    return np.stack([b1, b2, b3], axis=1)


def waypoint_encode(d_pose: Pose, grip: float) -> np.ndarray:
    """10D action vector [relative translation(3), rot6d(6), gripper width(1)]."""
    if grip < 0:
        raise ContractError(f"gripper width must be >= 0, got {grip}")
    return np.concatenate([d_pose.position, rot6d_encode(d_pose.rotation), [grip]])


def waypoint_decode(w: np.ndarray) -> tuple[Pose, float]:
    w = np.asarray(w, dtype=np.float64).reshape(10)
    return Pose(rot6d_decode(w[3:9]), w[:3]), float(w[9])


def rotation_to_quat(r: np.ndarray) -> np.ndarray:
    """Unit quaternion (w, x, y, z) from a rotation matrix."""
    tr = np.trace(r)
    if tr > 0:
        s = np.sqrt(tr + 1.0) * 2
        q = np.array([0.25 * s, (r[2, 1] - r[1, 2]) / s,
                      (r[0, 2] - r[2, 0]) / s, (r[1, 0] - r[0, 1]) / s])
    else:
        i = int(np.argmax(np.diag(r)))
        j, k = (i + 1) % 3, (i + 2) % 3
        s = np.sqrt(max(r[i, i] - r[j, j] - r[k, k] + 1.0, 0.0)) * 2
        q = np.empty(4)
        q[0] = (r[k, j] - r[j, k]) / s
        q[1 + i] = 0.25 * s
        q[1 + j] = (r[j, i] + r[i, j]) / s
        q[1 + k] = (r[k, i] + r[i, k]) / s
    return q / np.linalg.norm(q)


def quat_to_rotation(q: np.ndarray) -> np.ndarray:
    w, x, y, z = q / np.linalg.norm(q)
    return np.array([
        [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
        [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
        [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
    ])


def slerp(r0: np.ndarray, r1: np.ndarray, u: float) -> np.ndarray:
    """Shorter-geodesic rotation interpolation at parameter u in [0, 1]."""
    if not 0.0 <= u <= 1.0:
        raise ContractError(f"slerp: u must be in [0,1], got {u}")
    q0 = rotation_to_quat(np.asarray(r0, dtype=np.float64))
    q1 = rotation_to_quat(np.asarray(r1, dtype=np.float64))
    dot = float(q0 @ q1)
    if dot < 0.0:
        q1 = -q1
        dot = -dot
    dot = min(dot, 1.0)
    if dot > 1.0 - 1e-12:
        q = (1 - u) * q0 + u * q1
    else:
        theta = np.arccos(dot)
        s = np.sin(theta)
        q = (np.sin((1 - u) * theta) / s) * q0 + (np.sin(u * theta) / s) * q1
    return quat_to_rotation(q)


def lerp(p0: np.ndarray, p1: np.ndarray, u: float) -> np.ndarray:
    if not 0.0 <= u <= 1.0:
        raise ContractError(f"lerp: u must be in [0,1], got {u}")
    p0 = np.asarray(p0, dtype=np.float64)
    p1 = np.asarray(p1, dtype=np.float64)
    return (1 - u) * p0 + u * p1


def stitch(chunks: list[np.ndarray], anchors: list[Pose]) -> list[Pose]:
    """Compose relative chunks onto their anchor poses.

    Each chunk is an (H, 10) waypoint array whose entries are relative to
    the anchor (the pose at the chunk's current timestep). Returns the
    time-ordered world poses, H per chunk.
    """
    if len(chunks) != len(anchors):
        raise ContractError(
            f"stitch: {len(chunks)} chunks but {len(anchors)} anchors")
    world: list[Pose] = []
    for chunk, anchor in zip(chunks, anchors):
        arr = np.asarray(chunk, dtype=np.float64)
        if arr.ndim != 2 or arr.shape[1] != 10:
            raise ContractError(f"stitch: chunk must be (H, 10), got {arr.shape}")
        for row in arr:
            d_pose, _ = waypoint_decode(row)
            world.append(anchor.compose(d_pose))
    return world
