"""
Rotation and pose kernel shared by every Jacobian in the filter.

Conventions, used everywhere in the package:

* quaternions are Hamilton, stored scalar-first ``[w, x, y, z]`` with the
  scalar part kept non-negative;
* the rotation matrix ``C(q)`` of an attitude maps global-frame vectors into
  the body frame (global-to-body, the direction of the IMU attitude state);
* attitude errors are 3-vectors applied on the left of that matrix,
  ``C_true = Exp(dtheta) @ C_est``;
* a pose error is ``[dtheta, dp]`` with ``p_true = p_est + dp``.
"""

from dataclasses import dataclass
from functools import cached_property

import numpy as np
from scipy.spatial.transform import Rotation

_SMALL_ANGLE = 1e-4


def skew(v):
    """
    Return the matrix S with S @ w == cross(v, w)
    """
    x, y, z = v
    return np.array(
        [
            [0.0, -z, y],
            [z, 0.0, -x],
            [-y, x, 0.0],
        ]
    )


def so3_exp(phi):
    return Rotation.from_rotvec(phi).as_matrix()


def left_jacobian(phi):
    """
    Left Jacobian of SO(3): Exp(phi + d) ~= Exp(left_jacobian(phi) @ d) @ Exp(phi)
    """
    phi = np.asarray(phi, dtype=float)
    theta = np.linalg.norm(phi)
    K = skew(phi)
    if theta < _SMALL_ANGLE:
        t2 = theta * theta
        a = 0.5 - t2 / 24.0
        b = 1.0 / 6.0 - t2 / 120.0
    else:
        a = (1.0 - np.cos(theta)) / theta**2
        b = (theta - np.sin(theta)) / theta**3
    return np.eye(3) + a * K + b * (K @ K)


@dataclass(frozen=True, eq=False)
class UnitQuaternion:
    """
    Unit quaternion [w, x, y, z], normalized with w >= 0 on construction
    """

    wxyz: np.ndarray

    def __post_init__(self):
        q = np.array(self.wxyz, dtype=float).reshape(4)
        q = q / np.linalg.norm(q)
        if q[0] < 0.0:
            q = -q
        q.flags.writeable = False
        object.__setattr__(self, "wxyz", q)

    @classmethod
    def identity(cls):
        return cls(np.array([1.0, 0.0, 0.0, 0.0]))

    @classmethod
    def from_rotvec(cls, phi):
        x, y, z, w = Rotation.from_rotvec(phi).as_quat()
        return cls(np.array([w, x, y, z]))

    @classmethod
    def from_matrix(cls, C):
        x, y, z, w = Rotation.from_matrix(C).as_quat()
        return cls(np.array([w, x, y, z]))

    @cached_property
    def matrix(self):
        w, x, y, z = self.wxyz
        return Rotation.from_quat([x, y, z, w]).as_matrix()

    def rotvec(self):
        w, x, y, z = self.wxyz
        return Rotation.from_quat([x, y, z, w]).as_rotvec()

    def inverse(self):
        w, x, y, z = self.wxyz
        return UnitQuaternion(np.array([w, -x, -y, -z]))

    def __mul__(self, other):
        return quat_compose(self, other)

    def __repr__(self):
        return f"UnitQuaternion({self.wxyz.tolist()})"


def quat_compose(a, b):
    """
    Hamilton product a * b; C(a * b) == C(a) @ C(b)
    """
    aw, ax, ay, az = a.wxyz
    bw, bx, by, bz = b.wxyz
    return UnitQuaternion(
        np.array(
            [
                aw * bw - ax * bx - ay * by - az * bz,
                aw * bx + ax * bw + ay * bz - az * by,
                aw * by - ax * bz + ay * bw + az * bx,
                aw * bz + ax * by - ay * bx + az * bw,
            ]
        )
    )


def attitude_boxplus(q, dtheta):
    if not np.any(dtheta):
        return q
    return quat_compose(UnitQuaternion.from_rotvec(dtheta), q)


def attitude_boxminus(a, b):
    return quat_compose(a, b.inverse()).rotvec()


@dataclass(frozen=True, eq=False)
class Pose:
    orientation: UnitQuaternion
    position: np.ndarray

    def __post_init__(self):
        p = np.array(self.position, dtype=float).reshape(3)
        p.flags.writeable = False
        object.__setattr__(self, "position", p)

    @classmethod
    def identity(cls):
        return cls(UnitQuaternion.identity(), np.zeros(3))

    @property
    def matrix(self):
        return self.orientation.matrix

    def __repr__(self):
        return f"Pose({self.orientation.wxyz.tolist()}, {self.position.tolist()})"


def boxplus(pose, delta):
    """
    Apply a 6-vector error [dtheta, dp] to a pose; boxplus(x, 0) is x
    """
    delta = np.asarray(delta, dtype=float)
    if not np.any(delta):
        return pose
    return Pose(
        attitude_boxplus(pose.orientation, delta[:3]),
        pose.position + delta[3:6],
    )


def boxminus(a, b):
    """
    Return the 6-vector error d with boxplus(b, d) == a
    """
    return np.concatenate(
        [attitude_boxminus(a.orientation, b.orientation), a.position - b.position]
    )
